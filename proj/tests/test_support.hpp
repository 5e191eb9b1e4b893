#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "nowcast/ops.hpp"
#include "nowcast/random.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast::testing {

inline Tensor<double> random_tensor(Shape s, Rng& rng, bool requires_grad = true,
                                    double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(s, std::move(v), requires_grad);
}

template <class T>
std::vector<T> to_vector(const Tensor<T>& t) {
  return std::vector<T>(t.data().begin(), t.data().end());
}

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::string worst;
};

/// Central differences (h = 1e-6) of a scalar-valued function against the
/// tape gradient of every listed leaf. `per_leaf_limit` caps the number of
/// elements probed per leaf by striding evenly through it.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& f,
                                 const std::vector<Tensor<double>>& leaves,
                                 std::int64_t per_leaf_limit = 1 << 30, double h = 1e-6) {
  for (auto leaf : leaves) leaf.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    const auto g = leaf.grad();
    if (g.empty()) {
      analytic.emplace_back(static_cast<std::size_t>(leaf.numel()), 0.0);
    } else {
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  GradCheck out;
  NoGradScope<double> no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double> leaf = leaves[li];
    auto data = leaf.mutable_data();
    const auto n = static_cast<std::int64_t>(data.size());
    const std::int64_t step = std::max<std::int64_t>(1, n / per_leaf_limit);
    for (std::int64_t i = 0; i < n; i += step) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f().item();
      data[i] = saved - h;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic[li][static_cast<std::size_t>(i)], numeric);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = "leaf " + std::to_string(li) + " element " + std::to_string(i) +
                    ": analytic " + std::to_string(analytic[li][static_cast<std::size_t>(i)]) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

/// Weighted sum <w, y> with fixed random weights, so every output element
/// contributes a distinct gradient.
class Projector {
 public:
  Projector(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    weights_ = random_tensor(s, rng, false);
  }
  Tensor<double> operator()(const Tensor<double>& y) const {
    return ops::sum(ops::mul(y, weights_));
  }

 private:
  Tensor<double> weights_;
};

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("nowcast_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace nowcast::testing
