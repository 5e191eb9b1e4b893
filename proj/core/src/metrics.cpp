#include "nowcast/metrics.hpp"

#include "csv_util.hpp"
#include "nowcast/error.hpp"

namespace nowcast::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

namespace {

void tally(ConfusionCounts& c, bool predicted, bool actual) {
  if (predicted && actual) {
    ++c.tp;
  } else if (predicted) {
    ++c.fp;
  } else if (actual) {
    ++c.fn;
  } else {
    ++c.tn;
  }
}

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(std::span<const float> prediction, std::span<const float> target,
                          double threshold) {
  if (prediction.size() != target.size()) throw ShapeError("confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    tally(c, prediction[i] >= threshold, target[i] >= threshold);
  }
  return c;
}

ConfusionCounts confusion_masks(std::span<const std::uint8_t> predicted,
                                std::span<const std::uint8_t> actual) {
  if (predicted.size() != actual.size()) throw ShapeError("confusion_masks: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) tally(c, predicted[i] != 0, actual[i] != 0);
  return c;
}

MetricsReport report_from(const ConfusionCounts& counts, double mse) {
  MetricsReport r;
  r.mse = mse;
  r.counts = counts;
  r.precision = ratio(counts.tp, counts.tp + counts.fp);
  r.recall = ratio(counts.tp, counts.tp + counts.fn);
  r.accuracy = ratio(counts.tp + counts.tn, counts.total());
  const double pr = r.precision + r.recall;
  r.f1 = pr > 0 ? 2.0 * r.precision * r.recall / pr : 0.0;
  return r;
}

Accumulator::Accumulator(double rain_threshold) : threshold_(rain_threshold) {
  if (!(rain_threshold > 0.0 && rain_threshold < 1.0)) {
    throw ConfigError("rain threshold must lie in (0, 1)");
  }
}

void Accumulator::add(std::span<const float> prediction, std::span<const float> target) {
  counts_ += confusion(prediction, target, threshold_);
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction[i]) - static_cast<double>(target[i]);
    squared_error_ += d * d;
  }
  pixels_ += static_cast<std::int64_t>(prediction.size());
}

void Accumulator::merge(const Accumulator& other) {
  counts_ += other.counts_;
  squared_error_ += other.squared_error_;
  pixels_ += other.pixels_;
}

MetricsReport Accumulator::report() const {
  if (pixels_ == 0) throw UsageError("no samples were evaluated");
  return report_from(counts_, squared_error_ / static_cast<double>(pixels_));
}

std::vector<float> persistence_forecast(const data::NowcastSample& sample) {
  if (sample.in_frames < 1) throw UsageError("persistence needs at least one input frame");
  const float* last = sample.input_frame(sample.in_frames - 1);
  return std::vector<float>(last, last + sample.height * sample.width);
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ofstream out = detail::open_for_write(path);
  out << "model,mse,precision,recall,accuracy,f1\n";
  for (const auto& [name, r] : rows) {
    out << name << ',' << detail::format_number(r.mse) << ',' << detail::format_number(r.precision)
        << ',' << detail::format_number(r.recall) << ',' << detail::format_number(r.accuracy)
        << ',' << detail::format_number(r.f1) << '\n';
  }
  detail::finish_write(out, path);
}

}  // namespace nowcast::metrics
