#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "nowcast/checkpoint.hpp"
#include "nowcast/data.hpp"
#include "nowcast/error.hpp"
#include "nowcast/explain.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/model.hpp"
#include "nowcast/train.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace nowcast;

namespace {

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  invalid configuration or usage (unknown key, bad value, bad flag)\n"
    "  3  missing or unreadable/unwritable file\n"
    "  4  malformed file (checkpoint, .rseq, CSV)\n"
    "  5  checkpoint holds a different model variant\n"
    "  6  training diverged (non-finite loss)\n"
    "Errors print one line: error: code=<name> message=\"...\"";

// Config keys exposed as --kebab-case flags on every subcommand.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;
  CLI::Option* config_option = nullptr;

  void attach(CLI::App* app) {
    config_option = app->add_option("--config", config_path, "key = value configuration file");
    for (const auto& k : cli::config_keys()) {
      std::string flag = k.name;
      for (char& c : flag) {
        if (c == '_') c = '-';
      }
      options[k.name] = app->add_option("--" + flag, values[k.name],
                                        k.help + " (default " + k.default_value + ")")
                            ->group("Config overrides");
    }
  }

  // defaults < base file < --config file < flags
  cli::RunConfig resolve(const fs::path& base_file = {}) const {
    cli::RunConfig c;
    if (!base_file.empty()) c.merge_file(base_file);
    if (!config_path.empty()) c.merge_file(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) c.set(key, values.at(key));
    }
    c.validate();
    return c;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory '" + dir.string() + "'");
  }
}

fs::path resolved_config_beside(const fs::path& checkpoint) {
  return checkpoint.parent_path() / cli::kResolvedConfigName;
}

// Model settings travel with the checkpoint: its sibling run.resolved.cfg is
// the base layer unless the caller supplies --config explicitly.
cli::RunConfig config_for_checkpoint(const ConfigFlags& flags, const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw IoError("checkpoint '" + checkpoint.string() + "' not found");
  const fs::path beside = resolved_config_beside(checkpoint);
  if (flags.config_path.empty() && fs::exists(beside)) return flags.resolve(beside);
  return flags.resolve();
}

std::unique_ptr<UNet<float>> load_model(const cli::RunConfig& config, const fs::path& checkpoint) {
  auto model = std::make_unique<UNet<float>>(config.model());
  load_checkpoint(checkpoint, *model);
  return model;
}

std::string percent(double x) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * x;
  return s.str();
}

void print_report(const std::string& name, const metrics::MetricsReport& r) {
  std::printf("%-24s mse=%.6g precision=%.4f recall=%.4f accuracy=%.4f f1=%.4f\n", name.c_str(),
              r.mse, r.precision, r.recall, r.accuracy, r.f1);
}

const std::vector<data::NowcastSample>& pick_split(const data::Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw UsageError("--split must be train, val or test");
}

// ---- subcommands ----

void run_generate(const ConfigFlags& flags, const fs::path& out) {
  const cli::RunConfig config = flags.resolve();
  ensure_dir(out);
  const std::int64_t n = config.get_int("n_sequences");
  for (std::int64_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%03lld.rseq", static_cast<long long>(i));
    data::write_rseq(out / name, data::generate(config.generator(i)));
  }
  config.write(out / cli::kResolvedConfigName);
  std::printf("wrote %lld sequences to %s\n", static_cast<long long>(n), out.string().c_str());
}

void run_train(const ConfigFlags& flags, const fs::path& data_path, const fs::path& out) {
  const cli::RunConfig config = flags.resolve();
  const data::Splits splits = cli::prepare_splits(config, data_path);
  if (splits.train.empty() || splits.val.empty()) {
    throw ConfigError("train and val splits must both be non-empty (got " +
                      std::to_string(splits.train.size()) + " / " +
                      std::to_string(splits.val.size()) + ")");
  }
  ensure_dir(out);
  config.write(out / cli::kResolvedConfigName);

  UNet<float> model(config.model());
  train::TrainHooks hooks;
  hooks.on_epoch = [](const train::EpochRecord& r) {
    std::printf("epoch %lld train_loss=%.6g val_loss=%.6g lr=%.3g\n",
                static_cast<long long>(r.epoch), r.train_loss, r.val_loss, r.lr);
    std::fflush(stdout);
  };
  const auto result = train::train(model, splits.train, splits.val, config.training(), hooks);
  train::write_history_csv(out / "history.csv", result.history);
  save_checkpoint(out / "model.ckpt", model);
  std::printf("best epoch %lld val_loss=%.6g%s\n", static_cast<long long>(result.best_epoch),
              result.best_val_loss, result.stopped_early ? " (early stop)" : "");
}

void run_evaluate(const ConfigFlags& flags, const std::vector<std::string>& checkpoints,
                  const std::vector<std::string>& baselines, const fs::path& data_path,
                  const std::string& split, const fs::path& out) {
  if (checkpoints.empty() && baselines.empty()) {
    throw UsageError("evaluate needs at least one --checkpoint or --baseline");
  }
  for (const auto& b : baselines) {
    if (b != "persistence") throw UsageError("unknown baseline '" + b + "'");
  }
  // The first checkpoint's config, when present, fixes the data settings.
  const cli::RunConfig data_config =
      checkpoints.empty() ? flags.resolve() : config_for_checkpoint(flags, checkpoints.front());
  const data::Splits splits = cli::prepare_splits(data_config, data_path);
  const auto& samples = pick_split(splits, split);
  if (samples.empty()) throw ConfigError("the " + split + " split is empty");

  std::vector<std::pair<std::string, metrics::MetricsReport>> rows;
  for (const auto& ckpt : checkpoints) {
    const cli::RunConfig config = config_for_checkpoint(flags, ckpt);
    auto model = load_model(config, ckpt);
    rows.emplace_back(std::string(variant_name(config.model().variant)),
                      train::evaluate_model(*model, samples, data_config.rain_threshold(),
                                            config.get_int("batch_size")));
  }
  if (!baselines.empty()) {
    rows.emplace_back("persistence",
                      train::evaluate_persistence(samples, data_config.rain_threshold()));
  }
  ensure_dir(out);
  data_config.write(out / cli::kResolvedConfigName);
  metrics::write_metrics_csv(out / "metrics.csv", rows);
  std::printf("%s split: %zu samples\n", split.c_str(), samples.size());
  for (const auto& [name, report] : rows) print_report(name, report);
}

void run_audit(const ConfigFlags& flags, bool all_variants, const std::string& out) {
  const cli::RunConfig config = flags.resolve();
  std::ostringstream table;
  if (all_variants) {
    ModelConfig base = config.model();
    base.variant = Variant::Baseline;
    const double baseline = static_cast<double>(count_parameters(base).total);
    table << "variant,parameters,reduction_vs_baseline_percent\n";
    for (Variant v : kAllVariants) {
      ModelConfig m = base;
      m.variant = v;
      const auto n = count_parameters(m).total;
      table << variant_name(v) << ',' << n << ',' << percent(1.0 - n / baseline) << '\n';
    }
  } else {
    const auto counts = count_parameters(config.model());
    table << "module,parameters\n";
    for (const auto& [name, n] : counts.per_module) table << name << ',' << n << '\n';
    table << "total," << counts.total << '\n';
  }
  std::fputs(table.str().c_str(), stdout);
  if (!out.empty()) {
    ensure_dir(out);
    config.write(fs::path(out) / cli::kResolvedConfigName);
    std::ofstream f(fs::path(out) / "params.csv", std::ios::trunc);
    if (!(f << table.str())) throw IoError("cannot write params.csv under '" + out + "'");
  }
}

void run_tune(const ConfigFlags& flags, const fs::path& data_path, const fs::path& out) {
  const cli::RunConfig config = flags.resolve();
  ModelConfig base = config.model();
  if (!variant_has_vq(base.variant)) {
    throw ConfigError("tune-vq needs a VQ variant (q or qmix), got '" +
                      std::string(variant_name(base.variant)) + "'");
  }
  const data::Splits splits = cli::prepare_splits(config, data_path);
  if (splits.train.empty() || splits.val.empty()) {
    throw ConfigError("train and val splits must both be non-empty");
  }
  ensure_dir(out);
  config.write(out / cli::kResolvedConfigName);
  train::GridHooks hooks;
  hooks.on_cell = [](std::int64_t k, double beta, double mse) {
    std::printf("K=%lld beta=%.2f val_mse=%.6g\n", static_cast<long long>(k), beta, mse);
    std::fflush(stdout);
  };
  const auto grid = train::tune_vq(base, config.training(), splits.train, splits.val,
                                   config.get_int("tune_epochs"),
                                   config.get_int("tune_early_stop_patience"), hooks);
  train::write_grid_csv(out / "grid.csv", grid);
  if (grid.best_row < 0) {
    std::printf("every cell diverged\n");
  } else {
    std::printf("argmin K=%lld beta=%.2f val_mse=%.6g\n",
                static_cast<long long>(grid.codebook_sizes[grid.best_row]),
                grid.betas[grid.best_col], grid.val_mse[grid.best_row][grid.best_col]);
  }
}

Tensor<float> sample_input(const data::RadarSequence& seq, std::int64_t in_frames,
                           std::int64_t lead, std::int64_t index, std::int64_t count) {
  const auto samples = data::window(seq, in_frames, lead);
  if (index < 0 || index + count > static_cast<std::int64_t>(samples.size())) {
    throw UsageError("sample index range [" + std::to_string(index) + ", " +
                     std::to_string(index + count) + ") outside the " +
                     std::to_string(samples.size()) + " windows of the sequence");
  }
  std::vector<std::size_t> idx;
  for (std::int64_t i = 0; i < count; ++i) idx.push_back(static_cast<std::size_t>(index + i));
  return data::make_batch<float>(samples, idx).first;
}

void run_gradcam(const ConfigFlags& flags, const fs::path& checkpoint, const fs::path& sample,
                 std::int64_t index, const std::string& target_kind, const fs::path& out) {
  const cli::RunConfig config = config_for_checkpoint(flags, checkpoint);
  auto model = load_model(config, checkpoint);
  const auto seq = data::read_rseq(sample);
  const Tensor<float> input =
      sample_input(seq, config.get_int("in_frames"), config.get_int("lead_steps"), index, 1);
  explain::Target target;
  if (target_kind == "mask") {
    // Region of interest: pixels that are rainy in the last input frame.
    target.kind = explain::Target::Kind::MaskMean;
    const auto last = input.data().subspan(
        static_cast<std::size_t>((config.get_int("in_frames") - 1) * seq.frame_size()),
        static_cast<std::size_t>(seq.frame_size()));
    for (float v : last) target.mask.push_back(v >= config.rain_threshold() ? 1 : 0);
  } else if (target_kind != "mean") {
    throw UsageError("--target must be mean or mask");
  }
  const auto maps = explain::gradcam_sweep(*model, input, target);
  ensure_dir(out);
  config.write(out / cli::kResolvedConfigName);
  const auto files = explain::write_gradcam(out, variant_name(config.model().variant), maps);
  std::printf("wrote %zu maps (%zu files) to %s\n", maps.size(), files.size(),
              out.string().c_str());
}

void run_export(const ConfigFlags& flags, const fs::path& checkpoint, const std::string& sample,
                std::int64_t index, std::int64_t count, const fs::path& out) {
  const cli::RunConfig config = config_for_checkpoint(flags, checkpoint);
  auto model = load_model(config, checkpoint);
  if (!model->has_vq()) {
    throw ConfigError("variant '" + std::string(variant_name(config.model().variant)) +
                      "' has no codebook");
  }
  Tensor<float> batch;
  if (sample.empty()) {
    // Without a sample file, a freshly generated sequence feeds the encoder.
    const auto seq = data::generate(config.generator(0));
    batch = sample_input(seq, config.get_int("in_frames"), config.get_int("lead_steps"), index,
                         count);
  } else {
    batch = sample_input(data::read_rseq(sample), config.get_int("in_frames"),
                         config.get_int("lead_steps"), index, count);
  }
  ensure_dir(out);
  config.write(out / cli::kResolvedConfigName);
  const auto e = explain::export_embedding_inputs(*model, batch, out);
  std::printf("wrote %lld vectors to %s and %lld codewords to %s\n",
              static_cast<long long>(e.vector_rows), e.assignments_csv.string().c_str(),
              static_cast<long long>(e.codeword_rows), e.codebook_csv.string().c_str());
}

struct Failure {
  int code;
  const char* name;
};

void report(Failure f, const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped += '\\';
    escaped += (c == '\n') ? ' ' : c;
  }
  std::fprintf(stderr, "error: code=%s message=\"%s\"\n", f.name, escaped.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Precipitation nowcasting with a vector-quantized MixConv attention UNet."};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  std::string out, data_path, checkpoint, sample, split = "test", target = "mean";
  std::vector<std::string> checkpoints, baselines;
  std::int64_t index = 0, count = 1;
  bool all_variants = false;

  auto* gen = app.add_subcommand("generate-data", "write synthetic radar sequences (.rseq)");
  ConfigFlags gen_flags;
  gen_flags.attach(gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train one model; writes model.ckpt and history.csv");
  ConfigFlags tr_flags;
  tr_flags.attach(tr);
  tr->add_option("--data", data_path, ".rseq file or directory")->required();
  tr->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "metrics for checkpoints and baselines; metrics.csv");
  ConfigFlags ev_flags;
  ev_flags.attach(ev);
  ev->add_option("--checkpoint", checkpoints, "model checkpoint (repeatable)");
  ev->add_option("--baseline", baselines, "baseline forecast: persistence");
  ev->add_option("--data", data_path, ".rseq file or directory")->required();
  ev->add_option("--split", split, "train | val | test")->capture_default_str();
  ev->add_option("--out", out, "output directory")->required();

  auto* au = app.add_subcommand("audit-params", "trainable parameter counts");
  ConfigFlags au_flags;
  au_flags.attach(au);
  au->add_flag("--all-variants", all_variants, "table of all four variants with reduction %");
  au->add_option("--out", out, "optional directory for params.csv");

  auto* tu = app.add_subcommand("tune-vq", "codebook size x beta grid search; grid.csv");
  ConfigFlags tu_flags;
  tu_flags.attach(tu);
  tu->add_option("--data", data_path, ".rseq file or directory")->required();
  tu->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcam", "14 Grad-CAM maps plus a contact sheet");
  ConfigFlags gc_flags;
  gc_flags.attach(gc);
  gc->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  gc->add_option("--sample", sample, ".rseq sequence to draw the input window from")->required();
  gc->add_option("--index", index, "window index within the sequence")->capture_default_str();
  gc->add_option("--target", target, "mean | mask (rainy pixels of the last input frame)")
      ->capture_default_str();
  gc->add_option("--out", out, "output directory")->required();

  auto* ex = app.add_subcommand("export-codebook", "codebook.csv and assignments.csv");
  ConfigFlags ex_flags;
  ex_flags.attach(ex);
  ex->add_option("--checkpoint", checkpoint, "VQ model checkpoint")->required();
  ex->add_option("--sample", sample, ".rseq sequence (default: generated from the config)");
  ex->add_option("--index", index, "first window index")->capture_default_str();
  ex->add_option("--count", count, "number of windows")->capture_default_str();
  ex->add_option("--out", out, "output directory")->required();

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      throw UsageError(e.what());
    }

    if (*gen) run_generate(gen_flags, out);
    if (*tr) run_train(tr_flags, data_path, out);
    if (*ev) run_evaluate(ev_flags, checkpoints, baselines, data_path, split, out);
    if (*au) run_audit(au_flags, all_variants, out);
    if (*tu) run_tune(tu_flags, data_path, out);
    if (*gc) run_gradcam(gc_flags, checkpoint, sample, index, target, out);
    if (*ex) {
      if (count < 1) throw UsageError("--count must be >= 1");
      run_export(ex_flags, checkpoint, sample, index, count, out);
    }
    return 0;
  } catch (const VariantMismatchError& e) {
    report({5, "variant_mismatch"}, e.what());
    return 5;
  } catch (const FormatError& e) {
    report({4, "format"}, e.what());
    return 4;
  } catch (const IoError& e) {
    report({3, "io"}, e.what());
    return 3;
  } catch (const DivergenceError& e) {
    report({6, "divergence"}, e.what());
    return 6;
  } catch (const ConfigError& e) {
    report({2, "config"}, e.what());
    return 2;
  } catch (const UsageError& e) {
    report({2, "usage"}, e.what());
    return 2;
  } catch (const ShapeError& e) {
    report({2, "shape"}, e.what());
    return 2;
  } catch (const std::exception& e) {
    report({1, "internal"}, e.what());
    return 1;
  }
}
