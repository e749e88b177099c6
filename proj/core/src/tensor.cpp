#include "dubox/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dubox {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : storage_(std::make_shared<Storage>()) {
  validate_shape(shape);
  storage_->data.assign(shape_numel(shape), fill);
  storage_->shape = std::move(shape);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : storage_(std::make_shared<Storage>()) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename T>
typename BasicTensor<T>::Storage& BasicTensor<T>::storage() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return *storage_;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_to_string(s));
  return s[axis];
}

template <typename T>
T& BasicTensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const Shape& s = shape();
  return storage_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
const T& BasicTensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const Shape& s = shape();
  return storage_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return storage_->data[0];
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return storage_->grad;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return storage_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() const {
  Storage& s = storage();
  if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
  return s.grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  Storage& s = storage();
  s.grad.assign(s.data.size(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), std::vector<T>(data().begin(), data().end()));
}

template <typename T>
void BasicTensor<T>::check_finite(std::string_view context) const {
  for (T v : data()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(context));
    }
  }
}

template <typename T>
void Tape<T>::record(std::string op_name, BackwardFn backward) {
  records_.push_back({std::move(op_name), std::move(backward)});
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const auto& r : records_) names.push_back(r.op_name);
  return names;
}

template <typename T>
void Tape<T>::backward(BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  auto seed = loss.mutable_grad();
  seed[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward();
  }
  records_.clear();
}

namespace {

template <typename T>
Tape<T>*& active_tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() noexcept {
  return active_tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_tape_slot<T>() = previous_;
}

template <typename T>
bool grad_enabled_for(std::initializer_list<const BasicTensor<T>*> inputs) noexcept {
  if (active_tape_slot<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const BasicTensor<T>* t) { return t && t->requires_grad(); });
}

template <typename T>
Parameter<T>::Parameter(std::string name_, BasicTensor<T> value_)
    : name(std::move(name_)), value(std::move(value_)), momentum(value.shape()) {
  value.set_requires_grad(true);
}

template <typename T>
void backward(Tape<T>& tape, BasicTensor<T>& loss, std::span<Parameter<T>> params) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  for (auto& p : params) p.value.clear_grad();
  tape.backward(loss);
  for (auto& p : params) {
    auto g = p.value.mutable_grad();
    for (T v : g) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter " + p.name);
    }
  }
}

#define DUBOX_INSTANTIATE(T)                                                          \
  template class BasicTensor<T>;                                                     \
  template class Tape<T>;                                                            \
  template class TapeScope<T>;                                                       \
  template class NoGradScope<T>;                                                     \
  template struct Parameter<T>;                                                      \
  template Tape<T>* active_tape<T>() noexcept;                                       \
  template bool grad_enabled_for<T>(std::initializer_list<const BasicTensor<T>*>) noexcept; \
  template void backward<T>(Tape<T>&, BasicTensor<T>&, std::span<Parameter<T>>);

DUBOX_INSTANTIATE(float)
DUBOX_INSTANTIATE(double)

#undef DUBOX_INSTANTIATE

}  // namespace dubox
