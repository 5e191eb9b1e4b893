#include "nowcast/vq.hpp"

#include <string>

#include "csv_util.hpp"
#include "nowcast/error.hpp"
#include "nowcast/ops.hpp"

namespace nowcast::vq {

using detail::Autograd;

template <class T>
Codebook<T>::Codebook(std::int64_t size, std::int64_t dim, Rng& rng) {
  if (size < 1 || dim < 1) {
    throw ConfigError("codebook needs K >= 1 and D >= 1, got K=" + std::to_string(size) +
                      " D=" + std::to_string(dim));
  }
  embeddings_ = Tensor<T>(Shape{size, dim, 1, 1}, true);
  const double bound = 1.0 / static_cast<double>(size);
  for (T& v : embeddings_.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  usage_ = Tensor<T>(Shape{size, 1, 1, 1});
}

template <class T>
Codebook<T>::Codebook(Tensor<T> embeddings) : embeddings_(std::move(embeddings)) {
  const Shape& s = embeddings_.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("codebook tensor must be (K, D, 1, 1)");
  usage_ = Tensor<T>(Shape{s.n, 1, 1, 1});
}

template <class T>
std::span<const T> Codebook<T>::row(std::int64_t k) const {
  return embeddings_.data().subspan(static_cast<std::size_t>(k * dim()),
                                    static_cast<std::size_t>(dim()));
}

template <class T>
std::vector<std::int64_t> Codebook<T>::usage_counts() const {
  std::vector<std::int64_t> out;
  for (T v : usage_.data()) out.push_back(static_cast<std::int64_t>(v));
  return out;
}

template <class T>
void Codebook<T>::reset_usage() {
  for (T& v : usage_.mutable_data()) v = T(0);
}

template <class T>
void Codebook<T>::record_usage(std::span<const std::int32_t> indices) {
  auto u = usage_.mutable_data();
  for (std::int32_t k : indices) u[static_cast<std::size_t>(k)] += T(1);
}

template <class T>
std::int32_t nearest_codeword(std::span<const T> v, std::span<const T> codewords,
                              std::int64_t dim) {
  if (dim <= 0 || codewords.empty()) throw ConfigError("nearest_codeword: empty codebook");
  if (static_cast<std::int64_t>(v.size()) != dim) {
    throw ShapeError("nearest_codeword: vector has " + std::to_string(v.size()) +
                     " entries, codewords have " + std::to_string(dim));
  }
  const std::int64_t k_total = static_cast<std::int64_t>(codewords.size()) / dim;
  std::int32_t best = 0;
  double best_dist = 0.0;
  for (std::int64_t k = 0; k < k_total; ++k) {
    const T* e = codewords.data() + k * dim;
    double dist = 0.0;
    for (std::int64_t d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(v[d]) - static_cast<double>(e[d]);
      dist += diff * diff;
    }
    if (k == 0 || dist < best_dist) {
      best = static_cast<std::int32_t>(k);
      best_dist = dist;
    }
  }
  return best;
}

template <class T>
std::int32_t nearest_codeword(std::span<const T> v, const Codebook<T>& codebook) {
  if (!codebook.embeddings().defined()) throw ConfigError("nearest_codeword: empty codebook");
  return nearest_codeword(v, codebook.embeddings().data(), codebook.dim());
}

namespace {

template <class T>
void check_latent(const Tensor<T>& z_e, const Tensor<T>& embeddings) {
  if (!embeddings.defined()) throw ConfigError("quantize: empty codebook");
  if (z_e.shape().c != embeddings.shape().c) {
    throw ShapeError("quantize: latent has " + std::to_string(z_e.shape().c) +
                     " channels but codewords have D=" + std::to_string(embeddings.shape().c));
  }
}

// Assigns every (b, h, w) vector and writes the chosen rows into `quantized`.
template <class T>
std::vector<std::int32_t> assign(const Tensor<T>& z_e, const Tensor<T>& embeddings,
                                 Tensor<T>& quantized) {
  const Shape& s = z_e.shape();
  const std::int64_t dim = s.c;
  const std::int64_t plane = s.plane();
  std::vector<std::int32_t> indices(static_cast<std::size_t>(s.n * plane));
  std::vector<T> v(static_cast<std::size_t>(dim));
  const T* z = z_e.data().data();
  const auto cw = embeddings.data();
  T* q = quantized.mutable_data().data();
  for (std::int64_t b = 0; b < s.n; ++b) {
    for (std::int64_t p = 0; p < plane; ++p) {
      for (std::int64_t d = 0; d < dim; ++d) v[d] = z[(b * dim + d) * plane + p];
      const std::int32_t k = nearest_codeword<T>(v, cw, dim);
      indices[static_cast<std::size_t>(b * plane + p)] = k;
      const T* e = cw.data() + k * dim;
      for (std::int64_t d = 0; d < dim; ++d) q[(b * dim + d) * plane + p] = e[d];
    }
  }
  return indices;
}

// Sum over n of ||v_n - e_{k_n}||^2, accumulated in double.
template <class T>
double squared_gap(const Tensor<T>& z_e, const Tensor<T>& quantized) {
  const auto z = z_e.data();
  const auto q = quantized.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = static_cast<double>(z[i]) - static_cast<double>(q[i]);
    acc += d * d;
  }
  return acc;
}

}  // namespace

template <class T>
Result<T> quantize(const Tensor<T>& z_e, Codebook<T>& codebook, const Options& options) {
  const Tensor<T>& embeddings = codebook.embeddings();
  check_latent(z_e, embeddings);
  if (!(options.beta >= 0.0)) throw ConfigError("quantize: beta must be >= 0");
  const Shape& s = z_e.shape();

  Result<T> r;
  r.batch = s.n;
  r.height = s.h;
  r.width = s.w;
  r.quantized = Tensor<T>(s);
  r.indices = assign(z_e, embeddings, r.quantized);
  if (options.track_usage) codebook.record_usage(r.indices);

  const double n_vectors = static_cast<double>(s.n * s.plane());
  const double denom = options.norm == LossNorm::PerElement ? n_vectors * static_cast<double>(s.c)
                                                            : n_vectors;
  const T raw = static_cast<T>(squared_gap(z_e, r.quantized) / denom);
  const T beta = static_cast<T>(options.beta);
  r.codebook_term = Tensor<T>::scalar(raw);
  r.commitment_term = Tensor<T>::scalar(beta * raw);

  Tensor<T> quantized_rows = r.quantized.detach();
  const std::vector<std::int32_t>& idx = r.indices;

  // Straight-through: d/dz_e receives d/dz_q unchanged; nothing reaches E.
  if (Autograd<T>::should_record({&z_e})) {
    Tensor<T> st = r.quantized;
    Autograd<T>::record(st, [z_e, st]() mutable {
      std::span<T> gz = Autograd<T>::sink(z_e);
      const auto g = st.grad();
      for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g[i];
    });
  }

  // Codebook term: sg[v] fixed, gradient 2 (e_k - v_n) / denom onto E only.
  if (Autograd<T>::should_record({&embeddings})) {
    Tensor<T> term = r.codebook_term;
    Tensor<T> z_fixed = z_e.detach();
    Autograd<T>::record(term, [term, embeddings, z_fixed, quantized_rows, idx, denom]() mutable {
      std::span<T> ge = Autograd<T>::sink(embeddings);
      if (ge.empty()) return;
      const Shape& s = z_fixed.shape();
      const std::int64_t plane = s.plane();
      const T k = static_cast<T>(2.0 * term.grad()[0] / denom);
      const T* z = z_fixed.data().data();
      const T* q = quantized_rows.data().data();
      for (std::int64_t b = 0; b < s.n; ++b) {
        for (std::int64_t p = 0; p < plane; ++p) {
          T* row = ge.data() + idx[static_cast<std::size_t>(b * plane + p)] * s.c;
          for (std::int64_t d = 0; d < s.c; ++d) {
            const std::int64_t i = (b * s.c + d) * plane + p;
            row[d] += k * (q[i] - z[i]);
          }
        }
      }
    });
  }

  // Commitment term: sg[e] fixed, gradient 2 beta (v_n - e_k) / denom onto z_e only.
  if (Autograd<T>::should_record({&z_e})) {
    Tensor<T> term = r.commitment_term;
    Autograd<T>::record(term, [term, z_e, quantized_rows, beta, denom]() mutable {
      std::span<T> gz = Autograd<T>::sink(z_e);
      if (gz.empty()) return;
      const T k = static_cast<T>(2.0 * static_cast<double>(beta) * term.grad()[0] / denom);
      const auto z = z_e.data();
      const auto q = quantized_rows.data();
      for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += k * (z[i] - q[i]);
    });
  }

  r.loss = ops::add(r.codebook_term, r.commitment_term);
  return r;
}

template <class T>
InferenceResult<T> inference_quantize(const Tensor<T>& z_e, const Codebook<T>& codebook) {
  check_latent(z_e, codebook.embeddings());
  InferenceResult<T> r;
  r.quantized = Tensor<T>(z_e.shape());
  r.indices = assign(z_e, codebook.embeddings(), r.quantized);
  return r;
}

// ---------------------------------------------------------------------------
// CSV exchange

template <class T>
void write_codebook_csv(const std::filesystem::path& path, const Codebook<T>& codebook) {
  std::ofstream out = detail::open_for_write(path);
  const std::int64_t dim = codebook.dim();
  out << "k";
  for (std::int64_t d = 0; d < dim; ++d) out << ",d" << d;
  out << ",usage\n";
  const auto usage = codebook.usage_counts();
  for (std::int64_t k = 0; k < codebook.size(); ++k) {
    out << k;
    for (T v : codebook.row(k)) out << ',' << detail::format_number(v);
    out << ',' << usage[static_cast<std::size_t>(k)] << '\n';
  }
  detail::finish_write(out, path);
}

template <class T>
void write_assignments_csv(const std::filesystem::path& path, const Tensor<T>& z_e,
                           std::span<const std::int32_t> indices) {
  const Shape& s = z_e.shape();
  if (static_cast<std::int64_t>(indices.size()) != s.n * s.plane()) {
    throw ShapeError("write_assignments_csv: index count does not match latent " + s.str());
  }
  std::ofstream out = detail::open_for_write(path);
  out << "b,h,w,k";
  for (std::int64_t d = 0; d < s.c; ++d) out << ",v" << d;
  out << '\n';
  for (std::int64_t b = 0; b < s.n; ++b) {
    for (std::int64_t h = 0; h < s.h; ++h) {
      for (std::int64_t w = 0; w < s.w; ++w) {
        out << b << ',' << h << ',' << w << ','
            << indices[static_cast<std::size_t>((b * s.h + h) * s.w + w)];
        for (std::int64_t d = 0; d < s.c; ++d) {
          out << ',' << detail::format_number(z_e.at(b, d, h, w));
        }
        out << '\n';
      }
    }
  }
  detail::finish_write(out, path);
}

template <class T>
CodebookFile<T> read_codebook_csv(const std::filesystem::path& path) {
  std::ifstream in = detail::open_for_read(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("codebook csv: missing header");
  const auto header = detail::split_csv(line);
  if (header.size() < 3 || header.front() != "k" || header.back() != "usage") {
    throw FormatError("codebook csv: unexpected header");
  }
  const std::int64_t dim = static_cast<std::int64_t>(header.size()) - 2;
  std::vector<T> values;
  CodebookFile<T> file;
  std::int64_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (static_cast<std::int64_t>(cells.size()) != dim + 2) {
      throw FormatError("codebook csv: row " + std::to_string(rows) + " has wrong width");
    }
    if (detail::parse_number<std::int64_t>(cells[0]) != rows) {
      throw FormatError("codebook csv: rows out of order");
    }
    for (std::int64_t d = 0; d < dim; ++d) values.push_back(detail::parse_number<T>(cells[d + 1]));
    file.usage.push_back(detail::parse_number<std::int64_t>(cells.back()));
    ++rows;
  }
  if (rows == 0) throw FormatError("codebook csv: no codewords");
  file.embeddings = Tensor<T>(Shape{rows, dim, 1, 1}, std::move(values));
  return file;
}

template <class T>
std::vector<AssignmentRow<T>> read_assignments_csv(const std::filesystem::path& path) {
  std::ifstream in = detail::open_for_read(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("assignments csv: missing header");
  const auto header = detail::split_csv(line);
  if (header.size() < 5 || header[0] != "b" || header[3] != "k") {
    throw FormatError("assignments csv: unexpected header");
  }
  const std::size_t dim = header.size() - 4;
  std::vector<AssignmentRow<T>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != dim + 4) throw FormatError("assignments csv: row has wrong width");
    AssignmentRow<T> row;
    row.b = detail::parse_number<std::int64_t>(cells[0]);
    row.h = detail::parse_number<std::int64_t>(cells[1]);
    row.w = detail::parse_number<std::int64_t>(cells[2]);
    row.k = detail::parse_number<std::int32_t>(cells[3]);
    for (std::size_t d = 0; d < dim; ++d) row.vector.push_back(detail::parse_number<T>(cells[d + 4]));
    rows.push_back(std::move(row));
  }
  return rows;
}

#define NOWCAST_INSTANTIATE_VQ(T)                                                             \
  template class Codebook<T>;                                                                 \
  template std::int32_t nearest_codeword(std::span<const T>, std::span<const T>,              \
                                         std::int64_t);                                       \
  template std::int32_t nearest_codeword(std::span<const T>, const Codebook<T>&);             \
  template Result<T> quantize(const Tensor<T>&, Codebook<T>&, const Options&);                \
  template InferenceResult<T> inference_quantize(const Tensor<T>&, const Codebook<T>&);       \
  template void write_codebook_csv(const std::filesystem::path&, const Codebook<T>&);         \
  template void write_assignments_csv(const std::filesystem::path&, const Tensor<T>&,         \
                                      std::span<const std::int32_t>);                         \
  template CodebookFile<T> read_codebook_csv(const std::filesystem::path&);                   \
  template std::vector<AssignmentRow<T>> read_assignments_csv(const std::filesystem::path&);

NOWCAST_INSTANTIATE_VQ(float)
NOWCAST_INSTANTIATE_VQ(double)

}  // namespace nowcast::vq
