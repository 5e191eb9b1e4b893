#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/blocks.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/vq.hpp"

namespace nowcast {

enum class Variant { Baseline, Q, Mix, QMix };

/// "baseline", "q", "mix", "qmix"; ConfigError otherwise.
Variant parse_variant(std::string_view text);
std::string_view variant_name(Variant v);
bool variant_has_vq(Variant v);
bool variant_has_mixconv(Variant v);
inline constexpr std::array<Variant, 4> kAllVariants = {Variant::Baseline, Variant::Q,
                                                        Variant::Mix, Variant::QMix};

struct VqConfig {
  std::int64_t codebook_size = 32;
  double beta = 0.75;
  vq::LossNorm norm = vq::LossNorm::PerVector;
  double loss_weight = 1.0;
};

struct ModelConfig {
  Variant variant = Variant::QMix;
  std::int64_t in_frames = 12;
  std::int64_t input_size = 288;
  std::int64_t base_width = 64;
  int depthwise_multiplier = 2;
  int cbam_ratio = 16;
  VqConfig vq;
  std::uint64_t seed = 0;

  /// ConfigError on any inconsistent field.
  void validate() const;
  /// Encoder widths per level: (w, 2w, 4w, 8w, 8w).
  std::array<std::int64_t, 5> widths() const;
  std::int64_t bottleneck_size() const { return input_size / 16; }
};

/// Intermediate tensors captured during a forward pass, for saliency work.
template <class T>
struct Trace {
  std::array<Tensor<T>, 5> encoder_block;
  std::array<Tensor<T>, 5> encoder_cbam;
  std::array<Tensor<T>, 4> decoder_block;
  Tensor<T> bottleneck;  // level-5 CBAM output, before quantization
};

template <class T>
struct ForwardOutput {
  Tensor<T> prediction;          // (B, 1, S, S)
  Tensor<T> vq_loss;             // undefined for variants without VQ
  Tensor<T> vq_codebook_term;
  Tensor<T> vq_commitment_term;
  std::vector<std::int32_t> vq_indices;
};

struct ParameterCount {
  std::int64_t total = 0;
  /// Keyed by "enc1.block", "enc1.cbam", ..., "vq", "dec1.block", ..., "head".
  std::map<std::string, std::int64_t> per_module;
};

/// Five-level encoder (conv block + CBAM, max-pool between levels), optional
/// VQ bridge on the level-5 CBAM output, four-stage bilinear decoder fed by
/// (skip, upsampled) concatenations, 1x1 output head.
template <class T>
class UNet {
 public:
  explicit UNet(const ModelConfig& config);
  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  /// Train mode uses batch statistics and updates BN running stats and VQ
  /// usage counters. Eval mode is a pure function of weights and input; the
  /// VQ loss terms are still reported.
  ForwardOutput<T> forward(const Tensor<T>& x, Mode mode, Trace<T>* trace = nullptr);

  /// Deterministically ordered registry of parameters and buffers.
  Registry<T> registry() const;
  /// Trainable parameters only.
  std::vector<Tensor<T>> parameters() const;

  bool has_vq() const { return codebook_.has_value(); }
  vq::Codebook<T>& codebook();
  const vq::Codebook<T>& codebook() const;

  const nn::ConvBlock<T>& encoder_block(int level) const { return *encoder_[level]; }
  const nn::ConvBlock<T>& decoder_block(int stage) const { return *decoder_[stage]; }

 private:
  ModelConfig config_;
  std::array<std::unique_ptr<nn::ConvBlock<T>>, 5> encoder_;
  std::array<nn::CBAM<T>, 5> attention_;
  std::optional<vq::Codebook<T>> codebook_;
  std::array<std::unique_ptr<nn::ConvBlock<T>>, 4> decoder_;
  nn::Conv2d<T> head_;
};

/// Sum of trainable element counts (codebook included, buffers excluded).
template <class T>
ParameterCount count_parameters(const UNet<T>& model);

/// Counts for a configuration without keeping the model around.
ParameterCount count_parameters(const ModelConfig& config);

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace nowcast
