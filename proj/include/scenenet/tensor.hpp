#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenenet {

/// Raised when tensor shapes or axes do not satisfy an operation's contract.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for out-of-range values (labels, filter sizes, file contents).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for unsupported architecture or training configurations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t size() const { return n * c * h * w; }
  std::size_t dim(int axis) const;
  bool operator==(const Shape&) const = default;
  std::string to_string() const;
};

/// Dense (n, c, h, w) row-major array. Every dimension is at least one.
template <typename T>
class Tensor4 {
 public:
  Tensor4() : data_(1, T{}) {}
  explicit Tensor4(Shape shape, T fill = T{});
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{})
      : Tensor4(Shape{n, c, h, w}, fill) {}

  static Tensor4 from_data(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return ((i * shape_.c + j) * shape_.h + k) * shape_.w + l;
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[index(i, j, k, l)];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[index(i, j, k, l)];
  }
  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& vector() const { return data_; }

  /// Contiguous slice holding sample `i`.
  std::span<T> sample(std::size_t i) {
    const std::size_t stride = shape_.c * shape_.h * shape_.w;
    return std::span<T>(data_).subspan(i * stride, stride);
  }
  std::span<const T> sample(std::size_t i) const {
    const std::size_t stride = shape_.c * shape_.h * shape_.w;
    return std::span<const T>(data_).subspan(i * stride, stride);
  }

  void fill(T value);
  /// Same storage reinterpreted under a shape with equal element count.
  Tensor4 reshaped(Shape shape) const;

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>::from_data(shape_, std::move(out));
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <typename T>
Tensor4<T>::Tensor4(Shape shape, T fill) : shape_(shape) {
  if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0) {
    throw DimensionError("tensor dims must be >= 1, got " + shape.to_string());
  }
  data_.assign(shape.size(), fill);
}

template <typename T>
Tensor4<T> Tensor4<T>::from_data(Shape shape, std::vector<T> data) {
  Tensor4 t(shape);
  if (data.size() != shape.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match " +
                         shape.to_string());
  }
  t.data_ = std::move(data);
  return t;
}

template <typename T>
void Tensor4<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor4<T> Tensor4<T>::reshaped(Shape shape) const {
  return from_data(shape, data_);
}

enum class ElementwiseOp { Add, Sub, Mul, Scale };

template <typename T>
Tensor4<T> elementwise(ElementwiseOp op, const Tensor4<T>& a, const Tensor4<T>& b);
template <typename T>
Tensor4<T> elementwise(ElementwiseOp op, const Tensor4<T>& a, T b);

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(ElementwiseOp::Add, a, b);
}
template <typename T>
Tensor4<T> sub(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(ElementwiseOp::Sub, a, b);
}
template <typename T>
Tensor4<T> mul(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(ElementwiseOp::Mul, a, b);
}
template <typename T>
Tensor4<T> scale(const Tensor4<T>& a, T s) {
  return elementwise(ElementwiseOp::Scale, a, s);
}

/// In-place `dst += src`, the only mutating arithmetic outside the optimizer.
template <typename T>
void accumulate(Tensor4<T>& dst, const Tensor4<T>& src);

/// Reductions keep reduced axes with extent 1. Axes are 0=n, 1=c, 2=h, 3=w.
/// Summation is sequential in flat index order.
template <typename T>
Tensor4<T> reduce_sum(const Tensor4<T>& a, std::initializer_list<int> axes);
template <typename T>
Tensor4<T> reduce_max(const Tensor4<T>& a, std::initializer_list<int> axes);
template <typename T>
T sum_all(const Tensor4<T>& a);
template <typename T>
T max_all(const Tensor4<T>& a);
/// Index of the largest channel per (n, h, w); first occurrence wins ties.
template <typename T>
Tensor4<std::size_t> argmax_channel(const Tensor4<T>& a);

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T>
Tensor4<T> finite_difference_grad(const std::function<T(const Tensor4<T>&)>& f,
                                  const Tensor4<T>& x, T eps);

}  // namespace scenenet
