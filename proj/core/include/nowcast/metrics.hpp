#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/data.hpp"

namespace nowcast::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Pixel is positive iff value >= threshold.
ConfusionCounts confusion(std::span<const float> prediction, std::span<const float> target,
                          double threshold);
ConfusionCounts confusion_masks(std::span<const std::uint8_t> predicted,
                                std::span<const std::uint8_t> actual);

struct MetricsReport {
  double mse = 0;
  double precision = 0, recall = 0, accuracy = 0, f1 = 0;
  ConfusionCounts counts;
};

/// Scores from counts; any zero denominator yields 0 for that score.
MetricsReport report_from(const ConfusionCounts& counts, double mse);

/// Pools squared error and confusion counts over every pixel it is fed.
class Accumulator {
 public:
  explicit Accumulator(double rain_threshold);
  void add(std::span<const float> prediction, std::span<const float> target);
  void merge(const Accumulator& other);
  bool empty() const { return pixels_ == 0; }
  MetricsReport report() const;

 private:
  double threshold_;
  double squared_error_ = 0;
  std::int64_t pixels_ = 0;
  ConfusionCounts counts_;
};

/// Repeats the last input frame.
std::vector<float> persistence_forecast(const data::NowcastSample& sample);

/// Header `model,mse,precision,recall,accuracy,f1`.
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, MetricsReport>>& rows);

}  // namespace nowcast::metrics
