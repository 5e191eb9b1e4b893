#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "nowcast/data.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/model.hpp"

namespace nowcast::train {

struct TrainConfig {
  double lr = 1e-3;
  std::int64_t batch_size = 8;
  std::int64_t max_epochs = 100;
  std::int64_t lr_patience = 4;
  double lr_factor = 0.1;
  std::int64_t early_stop_patience = 15;
  std::uint64_t seed = 0;
  /// Off keeps the last epoch's weights, e.g. for overfit checks where the
  /// validation loss (MSE + VQ terms) is not the quantity being judged.
  bool restore_best = true;

  void validate() const;
};

/// Reduce-on-plateau plus early stopping, both driven by the validation loss.
/// An epoch improves when its loss is strictly below the best seen so far.
/// The learning rate is cut after lr_patience consecutive non-improving
/// epochs (the counter then restarts); training stops once
/// early_stop_patience epochs have passed since the last improvement.
class PlateauSchedule {
 public:
  PlateauSchedule(std::int64_t lr_patience, std::int64_t early_stop_patience);

  struct Decision {
    bool improved = false;
    bool reduce_lr = false;
    bool stop = false;
  };
  Decision observe(double val_loss);
  double best() const { return best_; }

 private:
  std::int64_t lr_patience_, stop_patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::int64_t since_reduction_ = 0;
  std::int64_t since_improvement_ = 0;
};

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;  // rate used during this epoch
  double vq_codebook_term = 0;
  double vq_commitment_term = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::int64_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Optional extra stopping rule checked after each epoch's schedule update.
  std::function<bool(const EpochRecord&)> stop_when;
};

/// Minibatch Adam on MSE (+ weighted VQ loss). The model ends up holding the
/// weights and buffers of the epoch with the lowest validation loss, unless
/// restore_best is off.
/// DivergenceError as soon as a batch loss is not finite.
template <class T>
TrainResult train(UNet<T>& model, const std::vector<data::NowcastSample>& train_set,
                  const std::vector<data::NowcastSample>& val_set, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Mean total loss (MSE + weighted VQ loss) in eval mode, without recording.
template <class T>
double validation_loss(UNet<T>& model, const std::vector<data::NowcastSample>& samples,
                       std::int64_t batch_size);

template <class T>
metrics::MetricsReport evaluate_model(UNet<T>& model,
                                      const std::vector<data::NowcastSample>& samples,
                                      double rain_threshold, std::int64_t batch_size = 8);
metrics::MetricsReport evaluate_persistence(const std::vector<data::NowcastSample>& samples,
                                            double rain_threshold);

/// Header `epoch,train_loss,val_loss,lr,vq_codebook_term,vq_commitment_term`.
void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

struct GridResult {
  std::array<std::int64_t, 4> codebook_sizes = {8, 16, 32, 64};
  std::array<double, 4> betas = {0.25, 0.50, 0.75, 1.00};
  /// Validation MSE, rows = codebook size, columns = beta. NaN marks a
  /// diverged cell.
  std::array<std::array<double, 4>, 4> val_mse{};
  std::array<std::array<bool, 4>, 4> diverged{};
  int best_row = -1, best_col = -1;
};

struct GridHooks {
  std::function<void(std::int64_t k, double beta, double val_mse)> on_cell;
};

/// Trains every (K, beta) pair from the same seed and split. epochs and
/// early_stop_patience override the values in train_config.
GridResult tune_vq(const ModelConfig& base, const TrainConfig& train_config,
                   const std::vector<data::NowcastSample>& train_set,
                   const std::vector<data::NowcastSample>& val_set, std::int64_t epochs = 25,
                   std::int64_t early_stop_patience = 8, const GridHooks& hooks = {});

/// First row: blank corner then beta values; first column: K values.
void write_grid_csv(const std::filesystem::path& path, const GridResult& grid);

}  // namespace nowcast::train
