#include "nowcast/optim.hpp"

#include <cmath>

#include "nowcast/error.hpp"

namespace nowcast::optim {

template <class T>
Adam<T>::Adam(std::vector<Tensor<T>> parameters, AdamOptions options)
    : params_(std::move(parameters)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }
}

template <class T>
void Adam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw UsageError("adam step: parameter " + std::to_string(i) + " has no gradient");
    }
  }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const T lr = static_cast<T>(options_.lr);
  const T eps = static_cast<T>(options_.eps);
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  const T inv_c1 = static_cast<T>(1.0 / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i].mutable_data();
    const auto g = params_[i].grad();
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = tb1 * m[j] + (T(1) - tb1) * g[j];
      v[j] = tb2 * v[j] + (T(1) - tb2) * g[j] * g[j];
      const T m_hat = m[j] * inv_c1;
      const T v_hat = v[j] * inv_c2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace nowcast::optim
