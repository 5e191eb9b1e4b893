#pragma once

#include "nowcast/tensor.hpp"

namespace nowcast::ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// weight: (C_out, C_in / groups, k, k); bias: (C_out, 1, 1, 1) or undefined.
/// groups == C_in with a single input channel per group is the depthwise case.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options = {});

/// Affine parameters (gamma, beta) and running statistics for one BatchNorm2d.
/// All four tensors have shape (C, 1, 1, 1).
template <class T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState make(std::int64_t channels);
  std::int64_t channels() const { return gamma.shape().n; }
};

/// Train mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNormState<T>& state, Mode mode);

template <class T>
Tensor<T> relu(const Tensor<T>& input);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& input);

/// 2x2 max pool, stride 2. Ties resolve to the lowest flat index in the window.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& input);

/// Bilinear x2 up-sampling with half-pixel centers (no corner alignment).
template <class T>
Tensor<T> upsample_bilinear2(const Tensor<T>& input);

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t count);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise product; every dim of b must equal a's or be 1 (broadcast).
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& input, T factor);

/// (B, C, H, W) -> (B, C, 1, 1)
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input);
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& input);
/// (B, C, H, W) -> (B, 1, H, W)
template <class T>
Tensor<T> channel_mean(const Tensor<T>& input);
template <class T>
Tensor<T> channel_max(const Tensor<T>& input);

template <class T>
Tensor<T> sum(const Tensor<T>& input);
template <class T>
Tensor<T> mean(const Tensor<T>& input);
template <class T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target);

}  // namespace nowcast::ops
