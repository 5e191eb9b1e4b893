#include "nowcast/blocks.hpp"

#include <cmath>

#include "nowcast/error.hpp"

namespace nowcast::nn {

namespace {

template <class T>
void expect_channels(const Tensor<T>& x, std::int64_t channels, const char* block) {
  if (x.shape().c != channels) {
    throw ShapeError(std::string(block) + ": expected " + std::to_string(channels) +
                     " input channels, got " + x.shape().str());
  }
}

}  // namespace

std::string_view block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::DoubleDSC:
      return "dsc";
    case BlockKind::DoubleMixConv:
      return "mixconv";
  }
  return "unknown";
}

template <class T>
Conv2d<T>::Conv2d(std::int64_t in_channels, std::int64_t out_channels, int kernel,
                  ops::Conv2dOptions opts, bool with_bias, Rng& rng)
    : options(opts) {
  if (in_channels % opts.groups != 0) {
    throw ConfigError("Conv2d: groups do not divide input channels");
  }
  const std::int64_t per_group = in_channels / opts.groups;
  weight = Tensor<T>(Shape{out_channels, per_group, kernel, kernel}, true);
  const double fan_in = static_cast<double>(per_group * kernel * kernel);
  const double bound = std::sqrt(6.0 / fan_in);
  for (T& v : weight.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  if (with_bias) bias = Tensor<T>(Shape{out_channels, 1, 1, 1}, true);
}

template <class T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, bias, options);
}

template <class T>
void Conv2d<T>::collect(Registry<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

template <class T>
void BatchNorm2d<T>::collect(Registry<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", state.gamma, true});
  out.push_back({prefix + ".beta", state.beta, true});
  out.push_back({prefix + ".running_mean", state.running_mean, false});
  out.push_back({prefix + ".running_var", state.running_var, false});
}

template <class T>
DepthwiseSeparableConv<T>::DepthwiseSeparableConv(std::int64_t in_channels,
                                                  std::int64_t out_channels, int multiplier,
                                                  Rng& rng)
    : depthwise(in_channels, in_channels * multiplier, 3,
                {.stride = 1, .padding = 1, .groups = static_cast<int>(in_channels)}, true, rng),
      pointwise(in_channels * multiplier, out_channels, 1, {}, true, rng) {}

template <class T>
void DepthwiseSeparableConv<T>::collect(Registry<T>& out, const std::string& prefix) const {
  depthwise.collect(out, prefix + ".depthwise");
  pointwise.collect(out, prefix + ".pointwise");
}

template <class T>
MixConv<T>::MixConv(std::int64_t in_ch, std::int64_t out_ch, Rng& rng) : in_channels(in_ch) {
  if (in_ch % 2 != 0) {
    throw ConfigError("MixConv: channel count must be even, got " + std::to_string(in_ch));
  }
  const std::int64_t half = in_ch / 2;
  const int groups = static_cast<int>(half);
  depthwise3 = Conv2d<T>(half, half, 3, {.stride = 1, .padding = 1, .groups = groups}, true, rng);
  depthwise5 = Conv2d<T>(half, half, 5, {.stride = 1, .padding = 2, .groups = groups}, true, rng);
  pointwise = Conv2d<T>(in_ch, out_ch, 1, {}, true, rng);
}

template <class T>
Tensor<T> MixConv<T>::forward(const Tensor<T>& x) const {
  expect_channels(x, in_channels, "MixConv");
  const std::int64_t half = in_channels / 2;
  Tensor<T> low = depthwise3.forward(ops::slice_channels(x, 0, half));
  Tensor<T> high = depthwise5.forward(ops::slice_channels(x, half, half));
  return pointwise.forward(ops::concat_channels(low, high));
}

template <class T>
void MixConv<T>::collect(Registry<T>& out, const std::string& prefix) const {
  depthwise3.collect(out, prefix + ".mix3");
  depthwise5.collect(out, prefix + ".mix5");
  pointwise.collect(out, prefix + ".pointwise");
}

template <class T>
DoubleDSC<T>::DoubleDSC(std::int64_t in_channels, std::int64_t out_channels,
                        std::int64_t mid_channels, int multiplier, Rng& rng)
    : conv1(in_channels, mid_channels, multiplier, rng),
      conv2(mid_channels, out_channels, multiplier, rng),
      bn1(mid_channels),
      bn2(out_channels),
      in_(in_channels),
      out_(out_channels) {}

template <class T>
Tensor<T> DoubleDSC<T>::forward(const Tensor<T>& x, Mode mode) {
  expect_channels(x, in_, "DoubleDSC");
  Tensor<T> h = ops::relu(bn1.forward(conv1.forward(x), mode));
  return ops::relu(bn2.forward(conv2.forward(h), mode));
}

template <class T>
void DoubleDSC<T>::collect(Registry<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".stage1");
  bn1.collect(out, prefix + ".stage1.bn");
  conv2.collect(out, prefix + ".stage2");
  bn2.collect(out, prefix + ".stage2.bn");
}

template <class T>
DoubleMixConv<T>::DoubleMixConv(std::int64_t in_channels, std::int64_t out_channels,
                                std::int64_t mid_channels, Rng& rng)
    : conv1(in_channels, mid_channels, rng),
      conv2(mid_channels, out_channels, rng),
      bn1(mid_channels),
      bn2(out_channels),
      in_(in_channels),
      out_(out_channels) {}

template <class T>
Tensor<T> DoubleMixConv<T>::forward(const Tensor<T>& x, Mode mode) {
  expect_channels(x, in_, "DoubleMixConv");
  Tensor<T> h = ops::relu(bn1.forward(conv1.forward(x), mode));
  return ops::relu(bn2.forward(conv2.forward(h), mode));
}

template <class T>
void DoubleMixConv<T>::collect(Registry<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".stage1");
  bn1.collect(out, prefix + ".stage1.bn");
  conv2.collect(out, prefix + ".stage2");
  bn2.collect(out, prefix + ".stage2.bn");
}

template <class T>
CBAM<T>::CBAM(std::int64_t channels, int reduction_ratio, Rng& rng) {
  if (reduction_ratio < 1 || channels % reduction_ratio != 0) {
    throw ConfigError("CBAM: " + std::to_string(channels) +
                      " channels not divisible by reduction ratio " +
                      std::to_string(reduction_ratio));
  }
  const std::int64_t hidden = channels / reduction_ratio;
  fc1 = Conv2d<T>(channels, hidden, 1, {}, true, rng);
  fc2 = Conv2d<T>(hidden, channels, 1, {}, true, rng);
  spatial = Conv2d<T>(2, 1, 7, {.stride = 1, .padding = 3, .groups = 1}, false, rng);
}

template <class T>
typename CBAM<T>::Gates CBAM<T>::forward_with_gates(const Tensor<T>& x) const {
  expect_channels(x, fc1.weight.shape().c, "CBAM");
  auto perceptron = [this](const Tensor<T>& d) {
    return fc2.forward(ops::relu(fc1.forward(d)));
  };
  Gates g;
  g.channel = ops::sigmoid(
      ops::add(perceptron(ops::global_avg_pool(x)), perceptron(ops::global_max_pool(x))));
  Tensor<T> refined = ops::mul(x, g.channel);
  Tensor<T> descriptor =
      ops::concat_channels(ops::channel_mean(refined), ops::channel_max(refined));
  g.spatial = ops::sigmoid(spatial.forward(descriptor));
  g.output = ops::mul(refined, g.spatial);
  return g;
}

template <class T>
void CBAM<T>::collect(Registry<T>& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
  spatial.collect(out, prefix + ".spatial");
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class DepthwiseSeparableConv<float>;
template class DepthwiseSeparableConv<double>;
template class MixConv<float>;
template class MixConv<double>;
template class DoubleDSC<float>;
template class DoubleDSC<double>;
template class DoubleMixConv<float>;
template class DoubleMixConv<double>;
template class CBAM<float>;
template class CBAM<double>;

}  // namespace nowcast::nn
