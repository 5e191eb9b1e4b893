#pragma once

#include <cstdint>
#include <vector>

#include "nowcast/tensor.hpp"

namespace nowcast::optim {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters are updated in place through their
/// shared storage.
template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> parameters, AdamOptions options = {});

  /// UsageError when any parameter has no gradient buffer.
  void step();
  void zero_grad();

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t step_count() const { return steps_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamOptions options_;
  std::int64_t steps_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace nowcast::optim
