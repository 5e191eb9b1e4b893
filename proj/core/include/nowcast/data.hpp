#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "nowcast/tensor.hpp"

namespace nowcast::data {

/// Frames stored row-major as (T, H, W), values in [0, 1].
struct RadarSequence {
  std::int64_t length = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  float cadence_minutes = 5.0f;
  float normalization_max = 1.0f;
  std::vector<float> frames;

  std::int64_t frame_size() const { return height * width; }
  const float* frame(std::int64_t t) const { return frames.data() + t * frame_size(); }
};

/// Isotropic Gaussian rain cell. Position in pixels (x = column, y = row),
/// velocity in pixels per frame.
struct Cell {
  double x = 0, y = 0;
  double vx = 0, vy = 0;
  double amplitude = 1;
  double sigma = 4;
};

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t length = 200;
  float cadence_minutes = 5.0f;
  int n_cells = 12;
  double amplitude_min = 0.6, amplitude_max = 1.0;
  double sigma_min = 10.0, sigma_max = 18.0;
  double speed_max = 1.5;
  /// When non-empty, used verbatim instead of drawing n_cells at random.
  std::vector<Cell> cells;

  void validate() const;
};

/// Periodic advection of Gaussian cells, normalized by the sequence maximum
/// and clipped to [0, 1]. Deterministic in the config.
RadarSequence generate(const GeneratorConfig& config);

struct NowcastSample {
  std::int64_t in_frames = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> input;   // (in_frames, H, W)
  std::vector<float> target;  // (H, W)

  const float* input_frame(std::int64_t i) const { return input.data() + i * height * width; }
};

/// One sample per start index, sliding by one. Empty when the sequence is too
/// short; ConfigError when in_frames < 1 or lead_steps < 1.
std::vector<NowcastSample> window(const RadarSequence& seq, std::int64_t in_frames,
                                  std::int64_t lead_steps);
/// Same, restricted to frames [begin, end).
std::vector<NowcastSample> window(const RadarSequence& seq, std::int64_t in_frames,
                                  std::int64_t lead_steps, std::int64_t begin, std::int64_t end);

double rain_fraction(const NowcastSample& sample, double rain_threshold);
/// True iff at least half of the target pixels are >= rain_threshold.
bool nl50_filter(const NowcastSample& sample, double rain_threshold);

void write_rseq(const std::filesystem::path& path, const RadarSequence& seq);
RadarSequence read_rseq(const std::filesystem::path& path);

struct SplitConfig {
  std::int64_t in_frames = 12;
  std::int64_t lead_steps = 6;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  double rain_threshold = 0.5;
  bool apply_nl50 = true;
};

struct Splits {
  std::vector<NowcastSample> train, val, test;
};

/// Cuts every sequence into contiguous train/val/test time blocks and windows
/// each block independently, so no window straddles two splits.
Splits make_splits(const std::vector<RadarSequence>& sequences, const SplitConfig& config);

/// Packs samples[indices] into (B, in_frames, H, W) inputs and (B, 1, H, W)
/// targets.
template <class T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<NowcastSample>& samples,
                                           const std::vector<std::size_t>& indices);

}  // namespace nowcast::data
