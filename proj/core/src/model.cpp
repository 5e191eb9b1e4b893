#include "nowcast/model.hpp"

#include "nowcast/error.hpp"
#include "nowcast/ops.hpp"
#include "nowcast/random.hpp"

namespace nowcast {

Variant parse_variant(std::string_view text) {
  if (text == "baseline") return Variant::Baseline;
  if (text == "q") return Variant::Q;
  if (text == "mix") return Variant::Mix;
  if (text == "qmix") return Variant::QMix;
  throw ConfigError("unknown variant '" + std::string(text) +
                    "' (expected baseline, q, mix or qmix)");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "baseline";
    case Variant::Q:
      return "q";
    case Variant::Mix:
      return "mix";
    case Variant::QMix:
      return "qmix";
  }
  return "unknown";
}

bool variant_has_vq(Variant v) { return v == Variant::Q || v == Variant::QMix; }
bool variant_has_mixconv(Variant v) { return v == Variant::Mix || v == Variant::QMix; }

void ModelConfig::validate() const {
  if (in_frames < 1) throw ConfigError("in_frames must be >= 1");
  if (input_size < 16 || input_size % 16 != 0) {
    throw ConfigError("input_size must be a positive multiple of 16, got " +
                      std::to_string(input_size));
  }
  if (base_width < 1) throw ConfigError("base_width must be >= 1");
  if (depthwise_multiplier < 1) throw ConfigError("depthwise_multiplier must be >= 1");
  if (cbam_ratio < 1) throw ConfigError("cbam_ratio must be >= 1");
  if (variant_has_vq(variant)) {
    if (vq.codebook_size < 1) throw ConfigError("codebook_size must be >= 1");
    if (!(vq.beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(vq.loss_weight >= 0.0)) throw ConfigError("vq loss weight must be >= 0");
  }
}

std::array<std::int64_t, 5> ModelConfig::widths() const {
  const std::int64_t w = base_width;
  return {w, 2 * w, 4 * w, 8 * w, 8 * w};
}

namespace {

template <class T>
std::unique_ptr<nn::ConvBlock<T>> make_block(bool mixconv, std::int64_t in, std::int64_t out,
                                             std::int64_t mid, int multiplier, Rng& rng) {
  if (mixconv) return std::make_unique<nn::DoubleMixConv<T>>(in, out, mid, rng);
  return std::make_unique<nn::DoubleDSC<T>>(in, out, mid, multiplier, rng);
}

}  // namespace

template <class T>
UNet<T>::UNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, SeedStream::ModelInit));
  const auto w = config_.widths();
  const bool mix = variant_has_mixconv(config_.variant);
  const int m = config_.depthwise_multiplier;

  std::int64_t in = config_.in_frames;
  for (int level = 0; level < 5; ++level) {
    const bool deep = mix && level >= 3;
    encoder_[level] = make_block<T>(deep, in, w[level], w[level], m, rng);
    attention_[level] = nn::CBAM<T>(w[level], config_.cbam_ratio, rng);
    in = w[level];
  }
  // Stage j consumes skip level (3 - j) concatenated with the upsampled path.
  const std::int64_t b = config_.base_width;
  const std::array<std::array<std::int64_t, 3>, 4> dec = {{
      {16 * b, 8 * b, 4 * b},
      {8 * b, 4 * b, 2 * b},
      {4 * b, 2 * b, b},
      {2 * b, b, b},
  }};
  for (int stage = 0; stage < 4; ++stage) {
    decoder_[stage] =
        make_block<T>(mix && stage == 0, dec[stage][0], dec[stage][2], dec[stage][1], m, rng);
  }
  head_ = nn::Conv2d<T>(b, 1, 1, {}, true, rng);

  if (variant_has_vq(config_.variant)) {
    Rng codebook_rng(derive_seed(config_.seed, SeedStream::Codebook));
    codebook_.emplace(config_.vq.codebook_size, w[4], codebook_rng);
  }
}

template <class T>
vq::Codebook<T>& UNet<T>::codebook() {
  if (!codebook_) throw UsageError("variant has no VQ codebook");
  return *codebook_;
}

template <class T>
const vq::Codebook<T>& UNet<T>::codebook() const {
  if (!codebook_) throw UsageError("variant has no VQ codebook");
  return *codebook_;
}

template <class T>
ForwardOutput<T> UNet<T>::forward(const Tensor<T>& x, Mode mode, Trace<T>* trace) {
  const Shape& s = x.shape();
  if (s.c != config_.in_frames || s.h != config_.input_size || s.w != config_.input_size) {
    throw ShapeError("model expects (B, " + std::to_string(config_.in_frames) + ", " +
                     std::to_string(config_.input_size) + ", " +
                     std::to_string(config_.input_size) + "), got " + s.str());
  }
  std::array<Tensor<T>, 5> skips;
  Tensor<T> h = x;
  for (int level = 0; level < 5; ++level) {
    Tensor<T> a = encoder_[level]->forward(h, mode);
    skips[level] = attention_[level].forward(a);
    if (trace) {
      trace->encoder_block[level] = a;
      trace->encoder_cbam[level] = skips[level];
    }
    if (level < 4) h = ops::maxpool2(skips[level]);
  }
  if (trace) trace->bottleneck = skips[4];

  ForwardOutput<T> out;
  Tensor<T> u = skips[4];
  if (codebook_) {
    vq::Options opts;
    opts.beta = config_.vq.beta;
    opts.norm = config_.vq.norm;
    opts.track_usage = mode == Mode::Train;
    vq::Result<T> r = vq::quantize(skips[4], *codebook_, opts);
    u = r.quantized;
    out.vq_loss = r.loss;
    out.vq_codebook_term = r.codebook_term;
    out.vq_commitment_term = r.commitment_term;
    out.vq_indices = std::move(r.indices);
  }
  for (int stage = 0; stage < 4; ++stage) {
    Tensor<T> joined = ops::concat_channels(skips[3 - stage], ops::upsample_bilinear2(u));
    u = decoder_[stage]->forward(joined, mode);
    if (trace) trace->decoder_block[stage] = u;
  }
  out.prediction = head_.forward(u);
  return out;
}

template <class T>
Registry<T> UNet<T>::registry() const {
  Registry<T> reg;
  for (int level = 0; level < 5; ++level) {
    const std::string prefix = "enc" + std::to_string(level + 1);
    encoder_[level]->collect(reg, prefix + ".block");
    attention_[level].collect(reg, prefix + ".cbam");
  }
  if (codebook_) {
    reg.push_back({"vq.codebook", codebook_->embeddings(), true});
    reg.push_back({"vq.usage", codebook_->usage(), false});
  }
  for (int stage = 0; stage < 4; ++stage) {
    decoder_[stage]->collect(reg, "dec" + std::to_string(stage + 1) + ".block");
  }
  head_.collect(reg, "head");
  return reg;
}

template <class T>
std::vector<Tensor<T>> UNet<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : registry()) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

template <class T>
ParameterCount count_parameters(const UNet<T>& model) {
  ParameterCount pc;
  for (const auto& e : model.registry()) {
    if (!e.trainable) continue;
    std::string module;
    const auto first = e.name.find('.');
    const std::string top = e.name.substr(0, first);
    if (top.rfind("enc", 0) == 0 || top.rfind("dec", 0) == 0) {
      module = e.name.substr(0, e.name.find('.', first + 1));
    } else {
      module = top;
    }
    pc.per_module[module] += e.tensor.numel();
    pc.total += e.tensor.numel();
  }
  return pc;
}

ParameterCount count_parameters(const ModelConfig& config) {
  return count_parameters(UNet<float>(config));
}

template class UNet<float>;
template class UNet<double>;
template ParameterCount count_parameters(const UNet<float>&);
template ParameterCount count_parameters(const UNet<double>&);

}  // namespace nowcast
