#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nowcast {

/// Rank-4 extent in (batch, channels, height, width) order. Data is stored
/// channel-major: index = ((n * C + c) * H + h) * W + w.
struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  constexpr std::int64_t numel() const noexcept { return n * c * h * w; }
  constexpr std::int64_t plane() const noexcept { return h * w; }
  constexpr std::int64_t offset(std::int64_t in, std::int64_t ic, std::int64_t ih,
                                std::int64_t iw) const noexcept {
    return ((in * c + ic) * h + ih) * w + iw;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

enum class Mode { Train, Eval };

template <class T>
class Tape;

namespace detail {
template <class T>
struct Autograd;
}

/// Dense 4-D tensor handle. Copies are shallow: two handles refer to the same
/// storage and gradient buffer. Use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const { return shape().numel(); }

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  /// Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  /// Allocates a zero gradient buffer on first use.
  std::span<T> mutable_grad();
  bool has_grad() const;
  void zero_grad();

  /// Shares storage, carries no gradient and is a leaf.
  Tensor detach() const;
  Tensor clone() const;
  bool shares_storage_with(const Tensor& other) const;
  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };
  std::shared_ptr<Impl> impl_;

  friend struct detail::Autograd<T>;
};

/// Reverse-mode record of the operations executed while the tape is active.
/// Replay visits entries in reverse recording order, which is a valid
/// topological order because every op is recorded after its inputs exist.
template <class T>
class Tape {
 public:
  struct Options {
    // When false, backward() leaves leaf tensors (parameters, inputs)
    // untouched and only fills gradients of recorded intermediates.
    bool leaf_gradients = true;
  };

  Tape() = default;
  explicit Tape(Options options) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor<T>& output, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape. Gradients of leaves
  /// accumulate across calls; intermediates are reset before each replay.
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }
  const Options& options() const noexcept { return options_; }

  static Tape* active();

 private:
  struct Entry {
    Tensor<T> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  Options options_;
};

/// Makes a tape the recording target for the current thread.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread (inference inside a training step).
template <class T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

namespace detail {

// Internal hooks used by op implementations.
template <class T>
struct Autograd {
  static bool should_record(std::initializer_list<const Tensor<T>*> inputs);
  static void record(Tensor<T>& output, std::function<void()> backward_fn);
  /// Gradient buffer to accumulate into during replay, or an empty span when
  /// the tensor does not take gradient.
  static std::span<T> sink(const Tensor<T>& t);
  static void set_active(Tape<T>* tape);
  static Tape<T>* active();
};

// Throws ShapeError when a tensor contains NaN/Inf. Only called when
// NOWCAST_CHECK_FINITE is defined.
template <class T>
void check_finite(const Tensor<T>& t, const char* op);

}  // namespace detail

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace nowcast
