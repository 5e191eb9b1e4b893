#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "nowcast/error.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/optim.hpp"
#include "nowcast/train.hpp"
#include "test_support.hpp"

using namespace nowcast;
using nowcast::testing::TempDir;

namespace {

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.in_frames = 2;
  c.input_size = 32;
  c.base_width = 16;
  c.vq.codebook_size = 8;
  c.seed = 5;
  return c;
}

std::vector<data::NowcastSample> tiny_samples(std::uint64_t seed, std::int64_t length,
                                              double speed = 1.0) {
  data::GeneratorConfig g;
  g.seed = seed;
  g.height = g.width = 32;
  g.length = length;
  g.n_cells = 3;
  g.sigma_min = 3;
  g.sigma_max = 6;
  g.speed_max = speed;
  return data::window(data::generate(g), 2, 1);
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

train::TrainConfig quick(std::int64_t epochs) {
  train::TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 4;
  c.seed = 9;
  return c;
}

}  // namespace

// ---- Adam ----

TEST(Adam, ZeroGradientLeavesParametersButCountsStep) {
  Tensor<double> p(Shape{3}, {1.0, -2.0, 0.5}, true);
  p.mutable_grad();
  optim::Adam<double> adam({p}, {.lr = 0.1});
  adam.step();
  EXPECT_EQ(adam.step_count(), 1);
  EXPECT_EQ(nowcast::testing::to_vector(p), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p(Shape{4}, {0, 0, 0, 0}, true);
  const std::vector<double> g = {0.3, -7.0, 1e-3, 42.0};
  std::copy(g.begin(), g.end(), p.mutable_grad().begin());
  optim::Adam<double> adam({p}, {.lr = 0.01});
  adam.step();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double expected = -0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p.data()[i], expected, 1e-15);
  }
  // A constant gradient keeps the step at lr.
  for (int k = 0; k < 5; ++k) {
    const auto before = nowcast::testing::to_vector(p);
    adam.step();
    for (std::size_t i = 0; i < g.size(); ++i) {
      EXPECT_NEAR(p.data()[i] - before[i], -0.01 * (g[i] > 0 ? 1 : -1), 1e-7);
    }
  }
}

TEST(Adam, MissingGradientIsUsageError) {
  Tensor<double> p(Shape{2}, {1, 2}, true);
  optim::Adam<double> adam({p});
  EXPECT_THROW(adam.step(), UsageError);
  EXPECT_EQ(adam.step_count(), 0);
}

// ---- plateau schedule ----

TEST(PlateauSchedule, ReducesAfterPatienceAndRestartsCounter) {
  train::PlateauSchedule s(2, 100);
  EXPECT_TRUE(s.observe(1.0).improved);
  EXPECT_FALSE(s.observe(1.0).reduce_lr);  // equal is not better
  EXPECT_TRUE(s.observe(1.5).reduce_lr);
  EXPECT_FALSE(s.observe(1.2).reduce_lr);
  EXPECT_TRUE(s.observe(1.1).reduce_lr);
  const auto d = s.observe(0.5);
  EXPECT_TRUE(d.improved);
  EXPECT_FALSE(d.reduce_lr);
  EXPECT_FALSE(s.observe(0.6).reduce_lr);
  EXPECT_EQ(s.best(), 0.5);
}

TEST(PlateauSchedule, StopsExactlyAfterPatience) {
  for (std::int64_t patience : {1, 3, 15}) {
    train::PlateauSchedule s(4, patience);
    s.observe(1.0);
    for (std::int64_t k = 1; k <= patience; ++k) {
      EXPECT_EQ(s.observe(2.0).stop, k == patience) << patience << ' ' << k;
    }
  }
}

// ---- metrics ----

TEST(Metrics, TwoByTwoExample) {
  const std::vector<float> pred = {0.6f, 0.6f, 0.1f, 0.1f};
  const std::vector<float> target = {0.6f, 0.1f, 0.6f, 0.1f};
  const auto c = metrics::confusion(pred, target, 0.5);
  EXPECT_EQ(c, (metrics::ConfusionCounts{1, 1, 1, 1}));
  const auto r = metrics::report_from(c, 0.125);
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
  metrics::Accumulator acc(0.5);
  acc.add(pred, target);
  EXPECT_NEAR(acc.report().mse, 0.125, 1e-7);
}

TEST(Metrics, MatchesBruteForceOnRandomMasks) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    std::vector<std::uint8_t> p(n), a(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform() < 0.4;
      a[i] = rng.uniform() < 0.6;
    }
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] && a[i]) tp += 1;
      if (p[i] && !a[i]) fp += 1;
      if (!p[i] && !a[i]) tn += 1;
      if (!p[i] && a[i]) fn += 1;
    }
    const auto r = metrics::report_from(metrics::confusion_masks(p, a), 0.0);
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    EXPECT_DOUBLE_EQ(r.precision, prec);
    EXPECT_DOUBLE_EQ(r.recall, rec);
    EXPECT_DOUBLE_EQ(r.accuracy, (tp + tn) / static_cast<double>(n));
    EXPECT_NEAR(r.f1, prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0, 1e-12);
  }
}

TEST(Metrics, PerfectAndDegenerateForecasts) {
  const std::vector<float> t = {0.9f, 0.2f, 0.7f, 0.0f};
  metrics::Accumulator acc(0.5);
  acc.add(t, t);
  const auto r = acc.report();
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.f1, 1.0);

  const std::vector<float> dry = {0.1f, 0.2f, 0.0f};
  const auto z = metrics::report_from(metrics::confusion(dry, dry, 0.5), 0.0);
  EXPECT_EQ(z.precision, 0.0);
  EXPECT_EQ(z.recall, 0.0);
  EXPECT_EQ(z.f1, 0.0);
  EXPECT_EQ(z.accuracy, 1.0);
}

TEST(Metrics, AccumulatorPoolsPixels) {
  Rng rng(2);
  std::vector<float> a(50), b(50);
  for (auto& v : a) v = static_cast<float>(rng.uniform());
  for (auto& v : b) v = static_cast<float>(rng.uniform());
  metrics::Accumulator whole(0.5), first(0.5), second(0.5);
  whole.add(a, b);
  first.add(std::span(a).first(20), std::span(b).first(20));
  second.add(std::span(a).subspan(20), std::span(b).subspan(20));
  first.merge(second);
  EXPECT_EQ(first.report().counts, whole.report().counts);
  EXPECT_NEAR(first.report().mse, whole.report().mse, 1e-12);
  EXPECT_THROW(metrics::Accumulator(0.5).report(), UsageError);
  EXPECT_THROW(metrics::Accumulator(1.5), ConfigError);
  EXPECT_THROW(metrics::confusion(a, std::span(b).first(3), 0.5), ShapeError);
}

// ---- persistence ----

TEST(Persistence, RepeatsLastInputFrame) {
  const auto samples = tiny_samples(4, 10);
  for (const auto& s : samples) {
    const auto p = metrics::persistence_forecast(s);
    ASSERT_EQ(p.size(), s.target.size());
    EXPECT_TRUE(std::equal(p.begin(), p.end(), s.input_frame(1)));
  }
}

TEST(Persistence, StaticSceneIsPerfect) {
  const auto still = tiny_samples(4, 12, 0.0);
  EXPECT_EQ(train::evaluate_persistence(still, 0.5).mse, 0.0);
  EXPECT_GT(train::evaluate_persistence(tiny_samples(4, 12, 1.5), 0.5).mse, 0.0);
  EXPECT_THROW(train::evaluate_persistence({}, 0.5), UsageError);
}

// ---- training ----

TEST(Train, EmptySetsAreRejected) {
  UNet<float> m(tiny(Variant::Baseline));
  const auto s = tiny_samples(1, 8);
  EXPECT_THROW(train::train<float>(m, {}, s, quick(1)), UsageError);
  EXPECT_THROW(train::train<float>(m, s, {}, quick(1)), UsageError);
  EXPECT_THROW(train::evaluate_model<float>(m, {}, 0.5), UsageError);
  auto bad = quick(1);
  bad.lr_factor = 1.0;
  EXPECT_THROW(train::train<float>(m, s, s, bad), ConfigError);
}

TEST(Train, DeterministicForFixedSeed) {
  const auto tr = tiny_samples(1, 14);
  const auto va = tiny_samples(2, 8);
  auto run = [&] {
    UNet<float> m(tiny(Variant::QMix));
    auto result = train::train<float>(m, tr, va, quick(3));
    return std::make_pair(result, m.registry());
  };
  const auto [ra, rega] = run();
  const auto [rb, regb] = run();
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].val_loss, rb.history[i].val_loss);
  }
  for (std::size_t i = 0; i < rega.size(); ++i) {
    EXPECT_TRUE(std::equal(rega[i].tensor.data().begin(), rega[i].tensor.data().end(),
                           regb[i].tensor.data().begin()))
        << rega[i].name;
  }
}

TEST(Train, LearnsAndRestoresBestEpoch) {
  const auto tr = tiny_samples(1, 26);
  const auto va = tiny_samples(2, 10);
  UNet<float> m(tiny(Variant::Mix));
  std::vector<double> seen;
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochRecord& r) { seen.push_back(r.val_loss); };
  const auto result = train::train<float>(m, tr, va, quick(6), hooks);
  ASSERT_EQ(seen.size(), result.history.size());
  EXPECT_LT(result.best_val_loss, result.history.front().val_loss);
  EXPECT_EQ(result.best_val_loss, *std::min_element(seen.begin(), seen.end()));
  EXPECT_EQ(train::validation_loss<float>(m, va, 4), result.best_val_loss);
}

TEST(Train, KeepsLastEpochWhenRestoreIsOff) {
  const auto tr = tiny_samples(1, 10);
  const auto va = tiny_samples(2, 6);
  auto cfg = quick(6);
  cfg.lr = 0.05;
  cfg.restore_best = false;
  UNet<float> m(tiny(Variant::Q));
  const auto result = train::train<float>(m, tr, va, cfg);
  EXPECT_EQ(train::validation_loss<float>(m, va, 4), result.history.back().val_loss);

  // Same run with restore on lands on the best epoch instead.
  cfg.restore_best = true;
  UNet<float> r(tiny(Variant::Q));
  const auto again = train::train<float>(r, tr, va, cfg);
  EXPECT_EQ(train::validation_loss<float>(r, va, 4), again.best_val_loss);
}

TEST(Train, LearningRateOnlyDropsByFactor) {
  const auto tr = tiny_samples(1, 10);
  const auto va = tiny_samples(2, 6);
  UNet<float> m(tiny(Variant::Baseline));
  auto cfg = quick(8);
  cfg.lr = 0.05;  // noisy on purpose so plateaus occur
  cfg.lr_patience = 1;
  cfg.lr_factor = 0.5;
  cfg.early_stop_patience = 3;
  const auto result = train::train<float>(m, tr, va, cfg);
  EXPECT_EQ(result.history.front().lr, 0.05);
  for (std::size_t i = 1; i < result.history.size(); ++i) {
    const double prev = result.history[i - 1].lr, cur = result.history[i].lr;
    EXPECT_TRUE(cur == prev || cur == prev * 0.5) << i;
  }
  if (result.stopped_early) {
    EXPECT_EQ(static_cast<std::int64_t>(result.history.size()) - result.best_epoch, 3);
  } else {
    EXPECT_EQ(result.history.size(), 8u);
  }
}

TEST(Train, StopHookEndsTraining) {
  const auto tr = tiny_samples(1, 8);
  UNet<float> m(tiny(Variant::Baseline));
  train::TrainHooks hooks;
  hooks.stop_when = [](const train::EpochRecord& r) { return r.epoch == 2; };
  const auto result = train::train<float>(m, tr, tr, quick(10), hooks);
  EXPECT_EQ(result.history.size(), 2u);
  EXPECT_TRUE(result.stopped_early);
}

TEST(Train, NonFiniteLossIsDivergence) {
  auto tr = tiny_samples(1, 8);
  tr[0].input[0] = std::nanf("");
  UNet<float> m(tiny(Variant::Baseline));
  auto cfg = quick(1);
  cfg.batch_size = 64;
  EXPECT_THROW(train::train<float>(m, tr, tr, cfg), DivergenceError);
}

TEST(Train, HistoryAndMetricsCsv) {
  TempDir dir("traincsv");
  std::vector<train::EpochRecord> h(3);
  for (int i = 0; i < 3; ++i) h[i] = {i + 1, 0.5 / (i + 1), 0.25, 1e-3, 0.01, 0.02};
  train::write_history_csv(dir / "h.csv", h);
  const auto lines = read_lines(dir / "h.csv");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "epoch,train_loss,val_loss,lr,vq_codebook_term,vq_commitment_term");
  EXPECT_EQ(lines[1], "1,0.5,0.25,0.001,0.01,0.02");

  metrics::MetricsReport r;
  r.mse = 0.125;
  r.precision = r.recall = r.accuracy = r.f1 = 0.5;
  metrics::write_metrics_csv(dir / "m.csv", {{"qmix", r}, {"persistence", r}});
  const auto m = read_lines(dir / "m.csv");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0], "model,mse,precision,recall,accuracy,f1");
  EXPECT_EQ(m[2], "persistence,0.125,0.5,0.5,0.5,0.5");
}

// ---- codebook grid ----

TEST(TuneVq, FillsFourByFourGrid) {
  const auto tr = tiny_samples(1, 6);
  const auto va = tiny_samples(2, 4);
  int cells = 0;
  train::GridHooks hooks;
  hooks.on_cell = [&](std::int64_t, double, double) { ++cells; };
  const auto grid = train::tune_vq(tiny(Variant::Q), quick(1), tr, va, 1, 1, hooks);
  EXPECT_EQ(cells, 16);
  double best = 1e300;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      EXPECT_TRUE(std::isfinite(grid.val_mse[r][c]));
      EXPECT_FALSE(grid.diverged[r][c]);
      best = std::min(best, grid.val_mse[r][c]);
    }
  }
  ASSERT_GE(grid.best_row, 0);
  EXPECT_EQ(grid.val_mse[grid.best_row][grid.best_col], best);

  TempDir dir("grid");
  train::write_grid_csv(dir / "g.csv", grid);
  const auto lines = read_lines(dir / "g.csv");
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "K\\beta,0.25,0.5,0.75,1");
  EXPECT_EQ(lines[4].substr(0, 3), "64,");
  EXPECT_THROW(train::tune_vq(tiny(Variant::Mix), quick(1), tr, va, 1, 1), ConfigError);
}
