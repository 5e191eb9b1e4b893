#include "nowcast/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "nowcast/error.hpp"
#include "nowcast/random.hpp"

namespace nowcast::data {

void GeneratorConfig::validate() const {
  if (height < 1 || width < 1 || length < 1) throw ConfigError("generator grid must be non-empty");
  if (n_cells < 0) throw ConfigError("n_cells must be >= 0");
  if (!(sigma_min > 0.0) || sigma_max < sigma_min) throw ConfigError("bad sigma range");
  if (amplitude_max < amplitude_min) throw ConfigError("bad amplitude range");
  if (!(cadence_minutes > 0.0f)) throw ConfigError("cadence must be positive");
}

namespace {

// Signed distance on a ring of the given period, in (-period/2, period/2].
double wrap(double d, double period) {
  d = std::fmod(d, period);
  if (d > period / 2) d -= period;
  if (d <= -period / 2) d += period;
  return d;
}

}  // namespace

RadarSequence generate(const GeneratorConfig& config) {
  config.validate();
  std::vector<Cell> cells = config.cells;
  if (cells.empty()) {
    Rng rng(derive_seed(config.seed, SeedStream::DataGeneration));
    for (int i = 0; i < config.n_cells; ++i) {
      Cell c;
      c.x = rng.uniform(0.0, static_cast<double>(config.width));
      c.y = rng.uniform(0.0, static_cast<double>(config.height));
      c.vx = rng.uniform(-config.speed_max, config.speed_max);
      c.vy = rng.uniform(-config.speed_max, config.speed_max);
      c.amplitude = rng.uniform(config.amplitude_min, config.amplitude_max);
      c.sigma = rng.uniform(config.sigma_min, config.sigma_max);
      cells.push_back(c);
    }
  }

  RadarSequence seq;
  seq.length = config.length;
  seq.height = config.height;
  seq.width = config.width;
  seq.cadence_minutes = config.cadence_minutes;
  const std::int64_t plane = seq.frame_size();
  std::vector<double> raw(static_cast<std::size_t>(seq.length * plane), 0.0);
  const double W = static_cast<double>(config.width);
  const double H = static_cast<double>(config.height);
  for (std::int64_t t = 0; t < seq.length; ++t) {
    double* frame = raw.data() + t * plane;
    for (const Cell& c : cells) {
      const double cx = c.x + c.vx * static_cast<double>(t);
      const double cy = c.y + c.vy * static_cast<double>(t);
      const double inv = 1.0 / (2.0 * c.sigma * c.sigma);
      for (std::int64_t r = 0; r < seq.height; ++r) {
        const double dy = wrap(static_cast<double>(r) - cy, H);
        for (std::int64_t col = 0; col < seq.width; ++col) {
          const double dx = wrap(static_cast<double>(col) - cx, W);
          frame[r * seq.width + col] += c.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
        }
      }
    }
  }
  const double peak = raw.empty() ? 0.0 : *std::max_element(raw.begin(), raw.end());
  const double divisor = peak > 0.0 ? peak : 1.0;
  seq.normalization_max = static_cast<float>(divisor);
  seq.frames.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    seq.frames[i] = static_cast<float>(std::clamp(raw[i] / divisor, 0.0, 1.0));
  }
  return seq;
}

std::vector<NowcastSample> window(const RadarSequence& seq, std::int64_t in_frames,
                                  std::int64_t lead_steps) {
  return window(seq, in_frames, lead_steps, 0, seq.length);
}

std::vector<NowcastSample> window(const RadarSequence& seq, std::int64_t in_frames,
                                  std::int64_t lead_steps, std::int64_t begin, std::int64_t end) {
  if (in_frames < 1) throw ConfigError("in_frames must be >= 1");
  if (lead_steps < 1) throw ConfigError("lead_steps must be >= 1 (a nowcast must look ahead)");
  begin = std::max<std::int64_t>(begin, 0);
  end = std::min(end, seq.length);
  std::vector<NowcastSample> out;
  const std::int64_t plane = seq.frame_size();
  // The target of a window starting at s is frame s + in_frames - 1 + lead_steps.
  for (std::int64_t s = begin; s + in_frames - 1 + lead_steps < end; ++s) {
    NowcastSample sample;
    sample.in_frames = in_frames;
    sample.height = seq.height;
    sample.width = seq.width;
    sample.input.assign(seq.frame(s), seq.frame(s) + in_frames * plane);
    const float* tgt = seq.frame(s + in_frames - 1 + lead_steps);
    sample.target.assign(tgt, tgt + plane);
    out.push_back(std::move(sample));
  }
  return out;
}

double rain_fraction(const NowcastSample& sample, double rain_threshold) {
  if (sample.target.empty()) return 0.0;
  std::size_t rainy = 0;
  for (float v : sample.target) {
    if (static_cast<double>(v) >= rain_threshold) ++rainy;
  }
  return static_cast<double>(rainy) / static_cast<double>(sample.target.size());
}

bool nl50_filter(const NowcastSample& sample, double rain_threshold) {
  if (!(rain_threshold > 0.0 && rain_threshold < 1.0)) {
    throw ConfigError("rain threshold must lie in (0, 1)");
  }
  if (sample.target.empty()) return false;
  std::size_t rainy = 0;
  for (float v : sample.target) {
    if (static_cast<double>(v) >= rain_threshold) ++rainy;
  }
  // Integer comparison: exactly half counts as rainy enough.
  return 2 * rainy >= sample.target.size();
}

// ---------------------------------------------------------------------------
// .rseq files

namespace {

constexpr char kRseqMagic[4] = {'R', 'S', 'E', 'Q'};
constexpr std::uint32_t kRseqVersion = 1;
static_assert(std::endian::native == std::endian::little);

template <class U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

}  // namespace

void write_rseq(const std::filesystem::path& path, const RadarSequence& seq) {
  if (static_cast<std::int64_t>(seq.frames.size()) != seq.length * seq.frame_size()) {
    throw ShapeError("write_rseq: frame buffer does not match T x H x W");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kRseqMagic, 4);
  put<std::uint32_t>(out, kRseqVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.length));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.width));
  put<float>(out, seq.cadence_minutes);
  put<float>(out, seq.normalization_max);
  out.write(reinterpret_cast<const char*>(seq.frames.data()),
            static_cast<std::streamsize>(seq.frames.size() * sizeof(float)));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

RadarSequence read_rseq(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + 4 * 4 + 2 * 4;
  if (bytes.size() < header) throw FormatError("rseq header truncated");
  if (std::memcmp(bytes.data(), kRseqMagic, 4) != 0) throw FormatError("not an rseq file");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  if (u32(4) != kRseqVersion) throw FormatError("unsupported rseq version " + std::to_string(u32(4)));
  RadarSequence seq;
  seq.length = u32(8);
  seq.height = u32(12);
  seq.width = u32(16);
  std::memcpy(&seq.cadence_minutes, bytes.data() + 20, 4);
  std::memcpy(&seq.normalization_max, bytes.data() + 24, 4);
  const std::size_t count = static_cast<std::size_t>(seq.length * seq.frame_size());
  if (bytes.size() - header != count * sizeof(float)) {
    throw FormatError("rseq payload holds " + std::to_string((bytes.size() - header) / 4) +
                      " values, header declares " + std::to_string(count));
  }
  seq.frames.resize(count);
  std::memcpy(seq.frames.data(), bytes.data() + header, count * sizeof(float));
  return seq;
}

// ---------------------------------------------------------------------------

Splits make_splits(const std::vector<RadarSequence>& sequences, const SplitConfig& config) {
  if (config.train_fraction <= 0 || config.val_fraction < 0 ||
      config.train_fraction + config.val_fraction > 1.0) {
    throw ConfigError("split fractions must be positive and sum to at most 1");
  }
  Splits splits;
  auto keep = [&](std::vector<NowcastSample> in, std::vector<NowcastSample>& out) {
    for (auto& s : in) {
      if (!config.apply_nl50 || nl50_filter(s, config.rain_threshold)) out.push_back(std::move(s));
    }
  };
  for (const auto& seq : sequences) {
    const auto T = static_cast<double>(seq.length);
    const auto a = static_cast<std::int64_t>(std::floor(T * config.train_fraction));
    const auto b =
        static_cast<std::int64_t>(std::floor(T * (config.train_fraction + config.val_fraction)));
    keep(window(seq, config.in_frames, config.lead_steps, 0, a), splits.train);
    keep(window(seq, config.in_frames, config.lead_steps, a, b), splits.val);
    keep(window(seq, config.in_frames, config.lead_steps, b, seq.length), splits.test);
  }
  return splits;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<NowcastSample>& samples,
                                           const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("make_batch: empty batch");
  const NowcastSample& first = samples.at(indices.front());
  const std::int64_t B = static_cast<std::int64_t>(indices.size());
  const std::int64_t plane = first.height * first.width;
  Tensor<T> x(Shape{B, first.in_frames, first.height, first.width});
  Tensor<T> y(Shape{B, 1, first.height, first.width});
  auto xd = x.mutable_data();
  auto yd = y.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    const NowcastSample& s = samples.at(indices[static_cast<std::size_t>(b)]);
    if (s.in_frames != first.in_frames || s.height != first.height || s.width != first.width) {
      throw ShapeError("make_batch: samples have mixed geometry");
    }
    std::copy(s.input.begin(), s.input.end(), xd.begin() + b * first.in_frames * plane);
    std::copy(s.target.begin(), s.target.end(), yd.begin() + b * plane);
  }
  return {x, y};
}

template std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<NowcastSample>&,
                                                            const std::vector<std::size_t>&);
template std::pair<Tensor<double>, Tensor<double>> make_batch(const std::vector<NowcastSample>&,
                                                              const std::vector<std::size_t>&);

}  // namespace nowcast::data
