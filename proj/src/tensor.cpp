#include "scenenet/tensor.hpp"

#include <array>
#include <limits>

namespace scenenet {

std::size_t Shape::dim(int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
    default: throw DimensionError("invalid axis " + std::to_string(axis) + " (expected 0..3)");
  }
}

std::string Shape::to_string() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

namespace {

template <typename T>
T apply(ElementwiseOp op, T a, T b) {
  switch (op) {
    case ElementwiseOp::Add: return a + b;
    case ElementwiseOp::Sub: return a - b;
    case ElementwiseOp::Mul:
    case ElementwiseOp::Scale: return a * b;
  }
  return a;
}

std::array<bool, 4> axis_mask(std::initializer_list<int> axes) {
  std::array<bool, 4> mask{};
  for (int axis : axes) {
    if (axis < 0 || axis > 3) {
      throw DimensionError("invalid axis " + std::to_string(axis) + " (expected 0..3)");
    }
    mask[static_cast<std::size_t>(axis)] = true;
  }
  return mask;
}

template <typename T, typename Combine>
Tensor4<T> reduce(const Tensor4<T>& a, std::initializer_list<int> axes, T init, Combine combine) {
  const auto mask = axis_mask(axes);
  const Shape& s = a.shape();
  const Shape out_shape{mask[0] ? 1 : s.n, mask[1] ? 1 : s.c, mask[2] ? 1 : s.h,
                        mask[3] ? 1 : s.w};
  Tensor4<T> out(out_shape, init);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t j = 0; j < s.c; ++j) {
      for (std::size_t k = 0; k < s.h; ++k) {
        for (std::size_t l = 0; l < s.w; ++l) {
          T& slot = out(mask[0] ? 0 : i, mask[1] ? 0 : j, mask[2] ? 0 : k, mask[3] ? 0 : l);
          slot = combine(slot, a(i, j, k, l));
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor4<T> elementwise(ElementwiseOp op, const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("elementwise shape mismatch: " + a.shape().to_string() + " vs " +
                         b.shape().to_string());
  }
  Tensor4<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], b[i]);
  return out;
}

template <typename T>
Tensor4<T> elementwise(ElementwiseOp op, const Tensor4<T>& a, T b) {
  Tensor4<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], b);
  return out;
}

template <typename T>
void accumulate(Tensor4<T>& dst, const Tensor4<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("accumulate shape mismatch: " + dst.shape().to_string() + " vs " +
                         src.shape().to_string());
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor4<T> reduce_sum(const Tensor4<T>& a, std::initializer_list<int> axes) {
  return reduce(a, axes, T{0}, [](T acc, T v) { return acc + v; });
}

template <typename T>
Tensor4<T> reduce_max(const Tensor4<T>& a, std::initializer_list<int> axes) {
  return reduce(a, axes, -std::numeric_limits<T>::infinity(),
                [](T acc, T v) { return v > acc ? v : acc; });
}

template <typename T>
T sum_all(const Tensor4<T>& a) {
  T acc{0};
  for (T v : a.values()) acc += v;
  return acc;
}

template <typename T>
T max_all(const Tensor4<T>& a) {
  T best = a[0];
  for (T v : a.values()) best = v > best ? v : best;
  return best;
}

template <typename T>
Tensor4<std::size_t> argmax_channel(const Tensor4<T>& a) {
  const Shape& s = a.shape();
  Tensor4<std::size_t> out(Shape{s.n, 1, s.h, s.w});
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t k = 0; k < s.h; ++k) {
      for (std::size_t l = 0; l < s.w; ++l) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < s.c; ++j) {
          if (a(i, j, k, l) > a(i, best, k, l)) best = j;
        }
        out(i, 0, k, l) = best;
      }
    }
  }
  return out;
}

template <typename T>
Tensor4<T> finite_difference_grad(const std::function<T(const Tensor4<T>&)>& f,
                                  const Tensor4<T>& x, T eps) {
  if (!(eps > T{0})) throw ValidationError("finite difference step must be positive");
  Tensor4<T> probe = x;
  Tensor4<T> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = original + eps;
    const T plus = f(probe);
    probe[i] = original - eps;
    const T minus = f(probe);
    probe[i] = original;
    grad[i] = (plus - minus) / (T{2} * eps);
  }
  return grad;
}

#define SCENENET_INSTANTIATE(T)                                                           \
  template Tensor4<T> elementwise(ElementwiseOp, const Tensor4<T>&, const Tensor4<T>&); \
  template Tensor4<T> elementwise(ElementwiseOp, const Tensor4<T>&, T);                 \
  template void accumulate(Tensor4<T>&, const Tensor4<T>&);                             \
  template Tensor4<T> reduce_sum(const Tensor4<T>&, std::initializer_list<int>);        \
  template Tensor4<T> reduce_max(const Tensor4<T>&, std::initializer_list<int>);        \
  template T sum_all(const Tensor4<T>&);                                                \
  template T max_all(const Tensor4<T>&);                                                \
  template Tensor4<std::size_t> argmax_channel(const Tensor4<T>&);                      \
  template Tensor4<T> finite_difference_grad(const std::function<T(const Tensor4<T>&)>&, \
                                             const Tensor4<T>&, T);

SCENENET_INSTANTIATE(float)
SCENENET_INSTANTIATE(double)

#undef SCENENET_INSTANTIATE

}  // namespace scenenet
