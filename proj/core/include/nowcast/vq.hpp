#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nowcast/random.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast::vq {

/// How the two loss terms are averaged. PerVector divides the summed squared
/// l2 distances by N = B*H*W; PerElement divides by N*D (plain MSE over all
/// latent elements).
enum class LossNorm { PerVector, PerElement };

/// K learnable codewords of dimension D, stored as a (K, D, 1, 1) tensor, plus
/// per-codeword assignment counters kept as a (K, 1, 1, 1) buffer.
template <class T>
class Codebook {
 public:
  Codebook() = default;
  /// Uniform initialization in [-1/K, 1/K].
  Codebook(std::int64_t size, std::int64_t dim, Rng& rng);
  explicit Codebook(Tensor<T> embeddings);

  std::int64_t size() const { return embeddings_.shape().n; }
  std::int64_t dim() const { return embeddings_.shape().c; }
  const Tensor<T>& embeddings() const { return embeddings_; }
  std::span<const T> row(std::int64_t k) const;

  const Tensor<T>& usage() const { return usage_; }
  std::vector<std::int64_t> usage_counts() const;
  void reset_usage();
  void record_usage(std::span<const std::int32_t> indices);

 private:
  Tensor<T> embeddings_;
  Tensor<T> usage_;
};

struct Options {
  double beta = 0.75;
  LossNorm norm = LossNorm::PerVector;
  bool track_usage = true;
};

template <class T>
struct Result {
  /// Codebook rows laid out like z_e; carries the straight-through gradient.
  Tensor<T> quantized;
  /// k_n for every (b, h, w), row-major over (B, H, W).
  std::vector<std::int32_t> indices;
  std::int64_t batch = 0, height = 0, width = 0;
  Tensor<T> codebook_term;    // moves only the codebook
  Tensor<T> commitment_term;  // beta-scaled, moves only z_e
  Tensor<T> loss;             // codebook_term + commitment_term

  std::int32_t index(std::int64_t b, std::int64_t h, std::int64_t w) const {
    return indices[static_cast<std::size_t>((b * height + h) * width + w)];
  }
};

/// argmin_k ||v - e_k||^2 over a row-major (K x dim) codeword matrix; ties go
/// to the lowest index.
template <class T>
std::int32_t nearest_codeword(std::span<const T> v, std::span<const T> codewords,
                              std::int64_t dim);
template <class T>
std::int32_t nearest_codeword(std::span<const T> v, const Codebook<T>& codebook);

/// Nearest-codeword assignment, quantized reshape, two-term loss and
/// straight-through gradient. Records onto the active tape when z_e or the
/// codebook requires grad.
template <class T>
Result<T> quantize(const Tensor<T>& z_e, Codebook<T>& codebook, const Options& options);

template <class T>
struct InferenceResult {
  Tensor<T> quantized;
  std::vector<std::int32_t> indices;
};

/// Pure assignment: no loss, no tape, no usage update.
template <class T>
InferenceResult<T> inference_quantize(const Tensor<T>& z_e, const Codebook<T>& codebook);

/// Header `k,d0..d{D-1},usage`; one row per codeword, shortest round-trip
/// decimal formatting.
template <class T>
void write_codebook_csv(const std::filesystem::path& path, const Codebook<T>& codebook);

/// Header `b,h,w,k,v0..v{D-1}`; one row per encoder vector.
template <class T>
void write_assignments_csv(const std::filesystem::path& path, const Tensor<T>& z_e,
                           std::span<const std::int32_t> indices);

template <class T>
struct CodebookFile {
  Tensor<T> embeddings;
  std::vector<std::int64_t> usage;
};
template <class T>
CodebookFile<T> read_codebook_csv(const std::filesystem::path& path);

template <class T>
struct AssignmentRow {
  std::int64_t b, h, w;
  std::int32_t k;
  std::vector<T> vector;
};
template <class T>
std::vector<AssignmentRow<T>> read_assignments_csv(const std::filesystem::path& path);

}  // namespace nowcast::vq
