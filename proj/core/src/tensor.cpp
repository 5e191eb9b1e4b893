#include "nowcast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nowcast/error.hpp"

namespace nowcast {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

namespace {

template <class T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <class T>
const Tape<T>*& replay_slot() {
  thread_local const Tape<T>* tape = nullptr;
  return tape;
}

void check_shape(const Shape& s) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
    throw ShapeError("tensor dims must be positive, got " + s.str());
  }
}

}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  impl_->shape = shape;
  impl_->data = std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape.numel()), T(0));
  impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  }
  impl_->shape = shape;
  impl_->data = std::make_shared<std::vector<T>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t(shape, requires_grad);
  std::fill(t.impl_->data->begin(), t.impl_->data->end(), value);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

template <class T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return impl_->shape;
}

template <class T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return {impl_->data->data(), impl_->data->size()};
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) throw UsageError("access to undefined tensor");
  return {impl_->data->data(), impl_->data->size()};
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape().str());
  return (*impl_->data)[0];
}

template <class T>
T Tensor<T>::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = shape();
  return (*impl_->data)[static_cast<std::size_t>(s.offset(n, c, h, w))];
}

template <class T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <class T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!impl_) throw UsageError("access to undefined tensor");
  if (!impl_->is_leaf) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

template <class T>
bool Tensor<T>::is_leaf() const {
  return !impl_ || impl_->is_leaf;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (!impl_) return {};
  return {impl_->grad.data(), impl_->grad.size()};
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!impl_) throw UsageError("access to undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data->size(), T(0));
  return {impl_->grad.data(), impl_->grad.size()};
}

template <class T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <class T>
void Tensor<T>::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<Impl>();
  out.impl_->shape = shape();
  out.impl_->data = impl_->data;
  return out;
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), std::vector<T>(data().begin(), data().end()));
}

template <class T>
bool Tensor<T>::shares_storage_with(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->data == other.impl_->data;
}

// ---------------------------------------------------------------------------

template <class T>
void Tape<T>::record(const Tensor<T>& output, std::function<void()> backward_fn) {
  entries_.push_back(Entry{output, std::move(backward_fn)});
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw UsageError("loss does not depend on any tensor that requires grad");
  }
  if (!loss.is_leaf()) {
    const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                     [&](const Entry& e) { return e.output.same_node(loss); });
    if (!on_tape) throw UsageError("loss was not recorded on this tape");
  }
  for (auto& e : entries_) e.output.zero_grad();

  const Tape* previous = replay_slot<T>();
  replay_slot<T>() = this;
  struct Restore {
    const Tape* prev;
    ~Restore() { replay_slot<T>() = prev; }
  } restore{previous};

  std::span<T> g = detail::Autograd<T>::sink(loss);
  if (!g.empty()) g[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output.has_grad()) it->backward_fn();
  }
}

template <class T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <class T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <class T>
TapeScope<T>::~TapeScope() {
  active_slot<T>() = previous_;
}

template <class T>
NoGradScope<T>::NoGradScope() : previous_(active_slot<T>()) {
  active_slot<T>() = nullptr;
}

template <class T>
NoGradScope<T>::~NoGradScope() {
  active_slot<T>() = previous_;
}

namespace detail {

template <class T>
bool Autograd<T>::should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_slot<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t != nullptr && t->requires_grad(); });
}

template <class T>
void Autograd<T>::record(Tensor<T>& output, std::function<void()> backward_fn) {
  Tape<T>* tape = active_slot<T>();
  if (tape == nullptr) throw UsageError("no active tape");
  output.impl_->requires_grad = true;
  output.impl_->is_leaf = false;
  tape->record(output, std::move(backward_fn));
}

template <class T>
std::span<T> Autograd<T>::sink(const Tensor<T>& t) {
  if (!t.requires_grad()) return {};
  const Tape<T>* replaying = replay_slot<T>();
  if (t.is_leaf() && replaying != nullptr && !replaying->options().leaf_gradients) return {};
  auto& impl = *t.impl_;
  if (impl.grad.empty()) impl.grad.assign(impl.data->size(), T(0));
  return {impl.grad.data(), impl.grad.size()};
}

template <class T>
void Autograd<T>::set_active(Tape<T>* tape) {
  active_slot<T>() = tape;
}

template <class T>
Tape<T>* Autograd<T>::active() {
  return active_slot<T>();
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw ShapeError(std::string("non-finite value produced by ") + op);
  }
}

template struct Autograd<float>;
template struct Autograd<double>;
template void check_finite(const Tensor<float>&, const char*);
template void check_finite(const Tensor<double>&, const char*);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace nowcast
