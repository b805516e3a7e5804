#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace comvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

}  // namespace detail

template <typename T>
class Tape;

/// Dense row-major array. Copies are shallow handles onto one storage, so a
/// tensor captured by the tape and the caller's handle see the same grad.
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports f32 and f64 only");

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Writable view for leaves: parameter updates, input construction.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Empty span when nothing has flowed into this tensor yet.
  std::span<const T> grad() const { return impl_->grad; }
  /// Grad buffer, zero-allocated on first use.
  std::span<T> grad_buffer() const;
  void zero_grad() const { impl_->grad.clear(); }

  /// Fresh tensor with copied data and no tape identity.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::Storage<T>> impl_;
};

/// Linear record of executed ops. Ops append an entry while a tape is
/// active and at least one input requires grad; backward() replays the
/// entries in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded entry in reverse.
  /// Leaf grads accumulate; a tape may be replayed only once per reset().
  void backward(const Tensor<T>& loss);
  void reset();
  std::size_t size() const { return entries_.size(); }

  void record(const Tensor<T>& output, BackwardFn fn);

  static Tape* current() { return current_; }

 private:
  template <typename U>
  friend class TapeScope;

  struct Entry {
    Tensor<T> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  inline static thread_local Tape* current_ = nullptr;
};

/// Makes `tape` the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current_) { Tape<T>::current_ = &tape; }
  ~TapeScope() { Tape<T>::current_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace comvit
