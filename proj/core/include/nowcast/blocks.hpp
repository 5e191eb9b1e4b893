#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/ops.hpp"
#include "nowcast/random.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

/// One entry of a model's parameter registry. Buffers (BatchNorm running
/// statistics, VQ usage counters) are registered with trainable = false.
template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <class T>
using Registry = std::vector<NamedTensor<T>>;

template <class T>
std::int64_t count_trainable(const Registry<T>& registry) {
  std::int64_t total = 0;
  for (const auto& e : registry) {
    if (e.trainable) total += e.tensor.numel();
  }
  return total;
}

namespace nn {

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  /// Kaiming-uniform weights (fan-in), zero bias.
  Conv2d(std::int64_t in_channels, std::int64_t out_channels, int kernel,
         ops::Conv2dOptions options, bool with_bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(Registry<T>& out, const std::string& prefix) const;

  Tensor<T> weight;
  Tensor<T> bias;
  ops::Conv2dOptions options;
};

template <class T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels) : state(ops::BatchNormState<T>::make(channels)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return ops::batchnorm2d(x, state, mode); }
  void collect(Registry<T>& out, const std::string& prefix) const;

  ops::BatchNormState<T> state;
};

/// Depthwise k x k (channel multiplier m) followed by a 1x1 projection.
template <class T>
class DepthwiseSeparableConv {
 public:
  DepthwiseSeparableConv() = default;
  DepthwiseSeparableConv(std::int64_t in_channels, std::int64_t out_channels, int multiplier,
                         Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const { return pointwise.forward(depthwise.forward(x)); }
  void collect(Registry<T>& out, const std::string& prefix) const;

  Conv2d<T> depthwise;
  Conv2d<T> pointwise;
};

/// Channel split into contiguous halves: the lower half goes through a 3x3
/// depthwise conv, the upper half through a 5x5, then concat and a shared
/// 1x1 projection.
template <class T>
class MixConv {
 public:
  MixConv() = default;
  MixConv(std::int64_t in_channels, std::int64_t out_channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(Registry<T>& out, const std::string& prefix) const;

  std::int64_t in_channels = 0;
  Conv2d<T> depthwise3;
  Conv2d<T> depthwise5;
  Conv2d<T> pointwise;
};

enum class BlockKind { DoubleDSC, DoubleMixConv };

std::string_view block_kind_name(BlockKind kind);

/// Two-stage convolution unit used at every encoder level and decoder stage.
template <class T>
class ConvBlock {
 public:
  virtual ~ConvBlock() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual void collect(Registry<T>& out, const std::string& prefix) const = 0;
  virtual BlockKind kind() const = 0;
  virtual std::int64_t in_channels() const = 0;
  virtual std::int64_t out_channels() const = 0;
};

/// (DSC -> BN -> ReLU) x 2.
template <class T>
class DoubleDSC final : public ConvBlock<T> {
 public:
  DoubleDSC(std::int64_t in_channels, std::int64_t out_channels, std::int64_t mid_channels,
            int multiplier, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  void collect(Registry<T>& out, const std::string& prefix) const override;
  BlockKind kind() const override { return BlockKind::DoubleDSC; }
  std::int64_t in_channels() const override { return in_; }
  std::int64_t out_channels() const override { return out_; }

  DepthwiseSeparableConv<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;

 private:
  std::int64_t in_, out_;
};

/// (MixConv -> BN -> ReLU) x 2. Every stage input must have an even channel
/// count.
template <class T>
class DoubleMixConv final : public ConvBlock<T> {
 public:
  DoubleMixConv(std::int64_t in_channels, std::int64_t out_channels, std::int64_t mid_channels,
                Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  void collect(Registry<T>& out, const std::string& prefix) const override;
  BlockKind kind() const override { return BlockKind::DoubleMixConv; }
  std::int64_t in_channels() const override { return in_; }
  std::int64_t out_channels() const override { return out_; }

  MixConv<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;

 private:
  std::int64_t in_, out_;
};

/// Channel attention (shared two-layer perceptron over average- and
/// max-pooled descriptors, sigmoid gate) followed by spatial attention
/// (7x7 conv over the channel-wise mean/max maps, sigmoid gate).
template <class T>
class CBAM {
 public:
  CBAM() = default;
  CBAM(std::int64_t channels, int reduction_ratio, Rng& rng);

  struct Gates {
    Tensor<T> channel;  // (B, C, 1, 1)
    Tensor<T> spatial;  // (B, 1, H, W)
    Tensor<T> output;
  };

  Tensor<T> forward(const Tensor<T>& x) const { return forward_with_gates(x).output; }
  Gates forward_with_gates(const Tensor<T>& x) const;
  void collect(Registry<T>& out, const std::string& prefix) const;

  Conv2d<T> fc1;
  Conv2d<T> fc2;
  Conv2d<T> spatial;
};

}  // namespace nn
}  // namespace nowcast
