#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nowcast/data.hpp"
#include "nowcast/model.hpp"
#include "nowcast/train.hpp"

namespace nowcast::cli {

struct KeySpec {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every recognised key with its default, in file order.
const std::vector<KeySpec>& config_keys();

/// Plain-text `key = value` configuration. Precedence: defaults < file <
/// explicit set() calls (command-line flags). Unknown keys are rejected.
class RunConfig {
 public:
  RunConfig();

  /// IoError when unreadable, ConfigError on syntax errors or unknown keys.
  void merge_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  static RunConfig load(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  ModelConfig model() const;
  train::TrainConfig training() const;
  data::GeneratorConfig generator(std::int64_t sequence_index) const;
  data::SplitConfig split() const;
  double rain_threshold() const { return get_real("rain_threshold"); }

  /// Parses every key once, so bad values surface before any work starts.
  void validate() const;

  /// Writes every key, resolved, in canonical order.
  void write(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

inline constexpr const char* kResolvedConfigName = "run.resolved.cfg";

/// A directory (every *.rseq inside, sorted by name) or a single .rseq file.
std::vector<data::RadarSequence> load_sequences(const std::filesystem::path& path);

/// Keeps at most `limit` samples, evenly spaced; 0 keeps everything.
std::vector<data::NowcastSample> subsample(std::vector<data::NowcastSample> samples,
                                           std::int64_t limit);

/// Train/val/test windows for a data path under this configuration,
/// including NL-50 filtering and the max_*_samples caps.
data::Splits prepare_splits(const RunConfig& config, const std::filesystem::path& data_path);

}  // namespace nowcast::cli
