#include "nowcast/train.hpp"

#include <cmath>
#include <numeric>

#include "csv_util.hpp"
#include "nowcast/error.hpp"
#include "nowcast/ops.hpp"
#include "nowcast/optim.hpp"
#include "nowcast/random.hpp"

namespace nowcast::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (lr_patience < 1) throw ConfigError("lr_patience must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must lie in (0, 1)");
}

PlateauSchedule::PlateauSchedule(std::int64_t lr_patience, std::int64_t early_stop_patience)
    : lr_patience_(lr_patience), stop_patience_(early_stop_patience) {}

PlateauSchedule::Decision PlateauSchedule::observe(double val_loss) {
  Decision d;
  if (val_loss < best_) {
    best_ = val_loss;
    since_reduction_ = 0;
    since_improvement_ = 0;
    d.improved = true;
    return d;
  }
  ++since_reduction_;
  ++since_improvement_;
  if (since_reduction_ >= lr_patience_) {
    d.reduce_lr = true;
    since_reduction_ = 0;
  }
  d.stop = since_improvement_ >= stop_patience_;
  return d;
}

namespace {

template <class T>
Tensor<T> total_loss(const ForwardOutput<T>& out, const Tensor<T>& target, double vq_weight) {
  Tensor<T> loss = ops::mse(out.prediction, target);
  if (out.vq_loss.defined()) {
    loss = ops::add(loss, ops::scale(out.vq_loss, static_cast<T>(vq_weight)));
  }
  return loss;
}

std::vector<std::vector<std::size_t>> batches_of(std::vector<std::size_t> order,
                                                 std::int64_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

template <class T>
std::vector<std::vector<T>> snapshot(const Registry<T>& reg) {
  std::vector<std::vector<T>> out;
  for (const auto& e : reg) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

template <class T>
void restore(const Registry<T>& reg, const std::vector<std::vector<T>>& values) {
  for (std::size_t i = 0; i < reg.size(); ++i) {
    Tensor<T> t = reg[i].tensor;
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

}  // namespace

template <class T>
double validation_loss(UNet<T>& model, const std::vector<data::NowcastSample>& samples,
                       std::int64_t batch_size) {
  if (samples.empty()) throw UsageError("validation set is empty");
  NoGradScope<T> no_grad;
  double weighted = 0.0;
  for (const auto& batch : batches_of(identity_order(samples.size()), batch_size)) {
    auto [x, y] = data::make_batch<T>(samples, batch);
    const auto out = model.forward(x, Mode::Eval);
    const double loss =
        static_cast<double>(total_loss(out, y, model.config().vq.loss_weight).item());
    weighted += loss * static_cast<double>(batch.size());
  }
  return weighted / static_cast<double>(samples.size());
}

template <class T>
TrainResult train(UNet<T>& model, const std::vector<data::NowcastSample>& train_set,
                  const std::vector<data::NowcastSample>& val_set, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) throw UsageError("training set is empty");
  if (val_set.empty()) throw UsageError("validation set is empty");

  const Registry<T> registry = model.registry();
  optim::Adam<T> adam(model.parameters(), {.lr = config.lr});
  PlateauSchedule schedule(config.lr_patience, config.early_stop_patience);
  Rng shuffle_rng(derive_seed(config.seed, SeedStream::Shuffle));
  const double vq_weight = model.config().vq.loss_weight;

  TrainResult result;
  std::vector<std::vector<T>> best = snapshot(registry);
  for (std::int64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    if (model.has_vq()) model.codebook().reset_usage();
    std::vector<std::size_t> order = identity_order(train_set.size());
    shuffle_rng.shuffle(order);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr();
    double loss_sum = 0, cb_sum = 0, commit_sum = 0;
    for (const auto& batch : batches_of(std::move(order), config.batch_size)) {
      auto [x, y] = data::make_batch<T>(train_set, batch);
      Tape<T> tape;
      TapeScope<T> scope(tape);
      const auto out = model.forward(x, Mode::Train);
      const Tensor<T> loss = total_loss(out, y, vq_weight);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw DivergenceError("loss is not finite at epoch " + std::to_string(epoch));
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      const double n = static_cast<double>(batch.size());
      loss_sum += value * n;
      if (out.vq_loss.defined()) {
        cb_sum += static_cast<double>(out.vq_codebook_term.item()) * n;
        commit_sum += static_cast<double>(out.vq_commitment_term.item()) * n;
      }
    }
    const double count = static_cast<double>(train_set.size());
    rec.train_loss = loss_sum / count;
    rec.vq_codebook_term = cb_sum / count;
    rec.vq_commitment_term = commit_sum / count;
    rec.val_loss = validation_loss(model, val_set, config.batch_size);
    if (!std::isfinite(rec.val_loss)) {
      throw DivergenceError("validation loss is not finite at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const auto decision = schedule.observe(rec.val_loss);
    if (decision.improved) {
      result.best_epoch = epoch;
      result.best_val_loss = rec.val_loss;
      best = snapshot(registry);
    }
    if (decision.reduce_lr) adam.set_lr(adam.lr() * config.lr_factor);
    if (decision.stop || (hooks.stop_when && hooks.stop_when(rec))) {
      result.stopped_early = true;
      break;
    }
  }
  if (config.restore_best) restore(registry, best);
  return result;
}

template <class T>
metrics::MetricsReport evaluate_model(UNet<T>& model,
                                      const std::vector<data::NowcastSample>& samples,
                                      double rain_threshold, std::int64_t batch_size) {
  if (samples.empty()) throw UsageError("test set is empty");
  metrics::Accumulator acc(rain_threshold);
  NoGradScope<T> no_grad;
  for (const auto& batch : batches_of(identity_order(samples.size()), batch_size)) {
    auto [x, y] = data::make_batch<T>(samples, batch);
    const auto out = model.forward(x, Mode::Eval);
    const auto p = out.prediction.data();
    const auto t = y.data();
    const std::vector<float> pf(p.begin(), p.end());
    const std::vector<float> tf(t.begin(), t.end());
    acc.add(pf, tf);
  }
  return acc.report();
}

metrics::MetricsReport evaluate_persistence(const std::vector<data::NowcastSample>& samples,
                                            double rain_threshold) {
  if (samples.empty()) throw UsageError("test set is empty");
  metrics::Accumulator acc(rain_threshold);
  for (const auto& s : samples) acc.add(metrics::persistence_forecast(s), s.target);
  return acc.report();
}

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochRecord>& history) {
  using detail::format_number;
  std::ofstream out = detail::open_for_write(path);
  out << "epoch,train_loss,val_loss,lr,vq_codebook_term,vq_commitment_term\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss)
        << ',' << format_number(r.lr) << ',' << format_number(r.vq_codebook_term) << ','
        << format_number(r.vq_commitment_term) << '\n';
  }
  detail::finish_write(out, path);
}

GridResult tune_vq(const ModelConfig& base, const TrainConfig& train_config,
                   const std::vector<data::NowcastSample>& train_set,
                   const std::vector<data::NowcastSample>& val_set, std::int64_t epochs,
                   std::int64_t early_stop_patience, const GridHooks& hooks) {
  if (!variant_has_vq(base.variant)) throw ConfigError("tune-vq needs the q or qmix variant");
  TrainConfig cfg = train_config;
  cfg.max_epochs = epochs;
  cfg.early_stop_patience = early_stop_patience;

  GridResult grid;
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      ModelConfig mc = base;
      mc.vq.codebook_size = grid.codebook_sizes[r];
      mc.vq.beta = grid.betas[c];
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        UNet<float> model(mc);
        train<float>(model, train_set, val_set, cfg);
        value = evaluate_model(model, val_set, 0.5, cfg.batch_size).mse;
      } catch (const DivergenceError&) {
        value = std::numeric_limits<double>::quiet_NaN();
      }
      grid.diverged[r][c] = !std::isfinite(value);
      grid.val_mse[r][c] = value;
      if (std::isfinite(value) && value < best) {
        best = value;
        grid.best_row = r;
        grid.best_col = c;
      }
      if (hooks.on_cell) hooks.on_cell(mc.vq.codebook_size, mc.vq.beta, value);
    }
  }
  return grid;
}

void write_grid_csv(const std::filesystem::path& path, const GridResult& grid) {
  using detail::format_number;
  std::ofstream out = detail::open_for_write(path);
  out << "K\\beta";
  for (double b : grid.betas) out << ',' << format_number(b);
  out << '\n';
  for (int r = 0; r < 4; ++r) {
    out << grid.codebook_sizes[r];
    for (int c = 0; c < 4; ++c) {
      out << ',' << (grid.diverged[r][c] ? std::string("nan") : format_number(grid.val_mse[r][c]));
    }
    out << '\n';
  }
  detail::finish_write(out, path);
}

template TrainResult train(UNet<float>&, const std::vector<data::NowcastSample>&,
                           const std::vector<data::NowcastSample>&, const TrainConfig&,
                           const TrainHooks&);
template TrainResult train(UNet<double>&, const std::vector<data::NowcastSample>&,
                           const std::vector<data::NowcastSample>&, const TrainConfig&,
                           const TrainHooks&);
template double validation_loss(UNet<float>&, const std::vector<data::NowcastSample>&,
                                std::int64_t);
template double validation_loss(UNet<double>&, const std::vector<data::NowcastSample>&,
                                std::int64_t);
template metrics::MetricsReport evaluate_model(UNet<float>&,
                                               const std::vector<data::NowcastSample>&, double,
                                               std::int64_t);
template metrics::MetricsReport evaluate_model(UNet<double>&,
                                               const std::vector<data::NowcastSample>&, double,
                                               std::int64_t);

}  // namespace nowcast::train
