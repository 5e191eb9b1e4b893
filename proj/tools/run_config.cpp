#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "nowcast/error.hpp"
#include "nowcast/random.hpp"

namespace nowcast::cli {

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"seed", "0", "single source of randomness, fanned out per consumer"},
      // model
      {"variant", "qmix", "baseline | q | mix | qmix"},
      {"in_frames", "12", "input frames (model channels)"},
      {"input_size", "64", "square input side, multiple of 16"},
      {"base_width", "64", "level-1 width; levels use (w, 2w, 4w, 8w, 8w)"},
      {"depthwise_multiplier", "2", "depthwise channel multiplier in DSC blocks"},
      {"cbam_ratio", "16", "CBAM channel reduction ratio"},
      {"codebook_size", "32", "VQ codebook size K"},
      {"beta", "0.75", "VQ commitment cost"},
      {"vq_loss_norm", "per_vector", "per_vector (divide by N) | per_element (divide by N*D)"},
      {"vq_loss_weight", "1", "weight of the VQ loss in the training objective"},
      // training
      {"lr", "0.001", "initial Adam learning rate"},
      {"batch_size", "8", "minibatch size"},
      {"max_epochs", "100", "epoch budget"},
      {"lr_patience", "4", "non-improving epochs before the learning rate is cut"},
      {"lr_factor", "0.1", "learning-rate multiplier on plateau"},
      {"early_stop_patience", "15", "epochs without improvement before stopping"},
      {"tune_epochs", "25", "epoch budget per tune-vq cell"},
      {"tune_early_stop_patience", "8", "early-stop patience per tune-vq cell"},
      // data
      {"n_sequences", "10", "sequences written by generate-data"},
      {"sequence_length", "200", "frames per sequence"},
      {"grid_size", "64", "frame height and width in pixels"},
      {"n_cells", "12", "rain cells per sequence"},
      {"amplitude_min", "0.6", "lower bound of cell amplitude"},
      {"amplitude_max", "1.0", "upper bound of cell amplitude"},
      {"sigma_min", "10", "lower bound of cell radius (pixels)"},
      {"sigma_max", "18", "upper bound of cell radius (pixels)"},
      {"speed_max", "1.5", "largest velocity component (pixels per frame)"},
      {"cadence_minutes", "5", "minutes between frames"},
      {"lead_steps", "6", "frames between the last input and the target"},
      {"train_fraction", "0.7", "leading fraction of every sequence used for training"},
      {"val_fraction", "0.15", "next fraction used for validation; the rest is test"},
      {"rain_threshold", "0.5", "rainy-pixel threshold for NL-50 and the metric masks"},
      {"apply_nl50", "true", "keep only samples whose target is at least half rainy"},
      {"max_train_samples", "0", "cap on training samples, evenly spaced (0 = all)"},
      {"max_val_samples", "0", "cap on validation samples (0 = all)"},
      {"max_test_samples", "0", "cap on test samples (0 = all)"},
  };
  return keys;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <class N>
N parse(const std::string& key, const std::string& text) {
  N value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = trim(value);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig c;
  c.merge_file(path);
  return c;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  return parse<std::int64_t>(key, get(key));
}
std::uint64_t RunConfig::get_u64(const std::string& key) const {
  return parse<std::uint64_t>(key, get(key));
}
double RunConfig::get_real(const std::string& key) const { return parse<double>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.variant = parse_variant(get("variant"));
  m.in_frames = get_int("in_frames");
  m.input_size = get_int("input_size");
  m.base_width = get_int("base_width");
  m.depthwise_multiplier = static_cast<int>(get_int("depthwise_multiplier"));
  m.cbam_ratio = static_cast<int>(get_int("cbam_ratio"));
  m.vq.codebook_size = get_int("codebook_size");
  m.vq.beta = get_real("beta");
  const std::string& norm = get("vq_loss_norm");
  if (norm == "per_vector") {
    m.vq.norm = vq::LossNorm::PerVector;
  } else if (norm == "per_element") {
    m.vq.norm = vq::LossNorm::PerElement;
  } else {
    throw ConfigError("vq_loss_norm must be per_vector or per_element, got '" + norm + "'");
  }
  m.vq.loss_weight = get_real("vq_loss_weight");
  m.seed = get_u64("seed");
  m.validate();
  return m;
}

train::TrainConfig RunConfig::training() const {
  train::TrainConfig t;
  t.lr = get_real("lr");
  t.batch_size = get_int("batch_size");
  t.max_epochs = get_int("max_epochs");
  t.lr_patience = get_int("lr_patience");
  t.lr_factor = get_real("lr_factor");
  t.early_stop_patience = get_int("early_stop_patience");
  t.seed = get_u64("seed");
  t.validate();
  return t;
}

data::GeneratorConfig RunConfig::generator(std::int64_t sequence_index) const {
  data::GeneratorConfig g;
  g.seed = splitmix64(get_u64("seed") + 0x632BE59BD9B4E019ULL *
                                            static_cast<std::uint64_t>(sequence_index + 1));
  g.height = g.width = get_int("grid_size");
  g.length = get_int("sequence_length");
  g.cadence_minutes = static_cast<float>(get_real("cadence_minutes"));
  g.n_cells = static_cast<int>(get_int("n_cells"));
  g.amplitude_min = get_real("amplitude_min");
  g.amplitude_max = get_real("amplitude_max");
  g.sigma_min = get_real("sigma_min");
  g.sigma_max = get_real("sigma_max");
  g.speed_max = get_real("speed_max");
  g.validate();
  return g;
}

data::SplitConfig RunConfig::split() const {
  data::SplitConfig s;
  s.in_frames = get_int("in_frames");
  s.lead_steps = get_int("lead_steps");
  s.train_fraction = get_real("train_fraction");
  s.val_fraction = get_real("val_fraction");
  s.rain_threshold = get_real("rain_threshold");
  s.apply_nl50 = get_bool("apply_nl50");
  if (s.lead_steps < 1) throw ConfigError("lead_steps must be >= 1");
  if (!(s.rain_threshold > 0.0 && s.rain_threshold < 1.0)) {
    throw ConfigError("rain_threshold must lie in (0, 1)");
  }
  return s;
}

void RunConfig::validate() const {
  model();
  training();
  generator(0);
  split();
  if (get_int("n_sequences") < 1) throw ConfigError("n_sequences must be >= 1");
  for (const char* k : {"tune_epochs", "tune_early_stop_patience"}) {
    if (get_int(k) < 1) throw ConfigError(std::string(k) + " must be >= 1");
  }
  for (const char* k : {"max_train_samples", "max_val_samples", "max_test_samples"}) {
    if (get_int(k) < 0) throw ConfigError(std::string(k) + " must be >= 0");
  }
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "# fully resolved run configuration\n";
  for (const auto& k : config_keys()) out << k.name << " = " << values_.at(k.name) << '\n';
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<data::RadarSequence> load_sequences(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw IoError("data path '" + path.string() + "' does not exist");
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".rseq") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw IoError("no .rseq files under '" + path.string() + "'");
  std::vector<data::RadarSequence> out;
  for (const auto& f : files) out.push_back(data::read_rseq(f));
  return out;
}

std::vector<data::NowcastSample> subsample(std::vector<data::NowcastSample> samples,
                                           std::int64_t limit) {
  const auto n = static_cast<std::int64_t>(samples.size());
  if (limit <= 0 || n <= limit) return samples;
  std::vector<data::NowcastSample> out;
  out.reserve(static_cast<std::size_t>(limit));
  for (std::int64_t i = 0; i < limit; ++i) {
    out.push_back(std::move(samples[static_cast<std::size_t>(i * n / limit)]));
  }
  return out;
}

data::Splits prepare_splits(const RunConfig& config, const std::filesystem::path& data_path) {
  data::Splits s = data::make_splits(load_sequences(data_path), config.split());
  s.train = subsample(std::move(s.train), config.get_int("max_train_samples"));
  s.val = subsample(std::move(s.val), config.get_int("max_val_samples"));
  s.test = subsample(std::move(s.test), config.get_int("max_test_samples"));
  return s;
}

}  // namespace nowcast::cli
