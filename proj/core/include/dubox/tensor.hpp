#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dubox/errors.hpp"

namespace dubox {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array with an optional gradient slot.
//
// Copies share storage (handle semantics), which is what lets a tape entry
// refer to the exact buffers an operation produced. Use `detach()` for an
// independent deep copy. Layout for 4-D tensors is (batch, channel, height,
// width).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, value); }

  bool defined() const noexcept { return storage_ != nullptr; }
  const Shape& shape() const { return storage().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return storage().data.size(); }

  std::span<T> data() { return storage().data; }
  std::span<const T> data() const { return storage().data; }
  T& operator[](std::size_t i) { return storage().data[i]; }
  const T& operator[](std::size_t i) const { return storage().data[i]; }

  // Element of a 4-D tensor.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  // Value of a single-element tensor.
  T item() const;

  bool requires_grad() const noexcept { return defined() && storage_->requires_grad; }
  void set_requires_grad(bool on) { storage().requires_grad = on; }

  bool has_grad() const noexcept { return defined() && !storage_->grad.empty(); }
  std::span<T> grad();
  std::span<const T> grad() const;
  // Returns the gradient buffer, allocating a zero-filled one if absent.
  // Handle semantics: gradients of a shared tensor are writable through any
  // copy, including const ones captured by backward closures.
  std::span<T> mutable_grad() const;
  void zero_grad();
  void clear_grad() { storage().grad.clear(); }

  BasicTensor detach() const;
  bool shares_storage_with(const BasicTensor& other) const noexcept {
    return storage_ == other.storage_;
  }

  // Throws NumericError naming `context` if any element is NaN or infinite.
  void check_finite(std::string_view context) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return BasicTensor<U>(shape(), std::move(out));
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Storage& storage() const;

  std::shared_ptr<Storage> storage_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered log of executed operations. Each record holds a closure that
// propagates the gradient of its output into the gradients of its inputs.
// Records run in exact reverse execution order, which is a valid reverse
// topological order because an operation can only consume tensors produced
// before it.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string op_name, BackwardFn backward);
  std::size_t size() const noexcept { return records_.size(); }
  std::vector<std::string> op_names() const;
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every record backward. The tape is
  // consumed: records are cleared afterwards.
  void backward(BasicTensor<T>& loss);

 private:
  struct Record {
    std::string op_name;
    BackwardFn backward;
  };
  std::vector<Record> records_;
};

// The tape that operations record onto on this thread, or nullptr when
// gradients are disabled.
template <typename T>
Tape<T>* active_tape() noexcept;

// Makes `tape` the active tape for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Disables recording for the lifetime of the scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// True when an operation over `inputs` must be recorded.
template <typename T>
bool grad_enabled_for(std::initializer_list<const BasicTensor<T>*> inputs) noexcept;

template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, BasicTensor<T> value);

  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> momentum;
};

// Clears the parameter gradients, runs the tape backward from `loss` and
// leaves a fresh gradient on every parameter; parameters the loss does not
// depend on get an all-zero gradient. Throws ContractError for a non-scalar
// loss.
template <typename T>
void backward(Tape<T>& tape, BasicTensor<T>& loss, std::span<Parameter<T>> params);

}  // namespace dubox
