#include "scenenet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "scenenet/parallel.hpp"

namespace scenenet::nn {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t out_c, kh, kw;
  std::size_t sh, sw, ph, pw;
  std::size_t oh, ow;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

template <typename T>
ConvGeometry geometry(const Shape& in, const ConvParams<T>& p) {
  const Shape out = conv2d_output_shape(in, p);
  return {in.n,       in.c,       in.h,     in.w,     p.out_channels(), p.kernel_h(),
          p.kernel_w(), p.stride_h, p.stride_w, p.pad_h, p.pad_w,         out.h,
          out.w};
}

// Column matrices hold a chunk of consecutive samples: rows = (c, u, v),
// columns = (sample, oy, ox). Chunks are sized so every GEMM sees at least
// kMinColumns columns.
constexpr std::size_t kMinColumns = 512;

inline std::size_t chunk_samples(const ConvGeometry& g) {
  return std::clamp<std::size_t>((kMinColumns + g.positions() - 1) / g.positions(), 1, g.n);
}

// Output columns [lo, hi) whose input column ox*stride + v - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t v, std::size_t stride,
                                                      std::size_t pad, std::size_t in,
                                                      std::size_t out) {
  std::size_t lo = 0;
  if (v < pad) lo = (pad - v + stride - 1) / stride;
  std::size_t hi = 0;
  if (in + pad > v) hi = std::min(out, (in + pad - v - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld) {
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const T* plane = image + ch * g.h * g.w;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        T* row = cols + ((ch * g.kh + u) * g.kw + v) * ld;
        const auto [lo, hi] = valid_span(v, g.sw, g.pw, g.w, g.ow);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          T* dst = row + oy * g.ow;
          const std::size_t iy = oy * g.sh + u;
          if (iy < g.ph || iy - g.ph >= g.h) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = plane + (iy - g.ph) * g.w;
          std::fill(dst, dst + lo, T{0});
          if (g.sw == 1) {
            std::copy(src + lo + v - g.pw, src + hi + v - g.pw, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.sw + v - g.pw];
          }
          std::fill(dst + hi, dst + g.ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* grad_image, std::size_t ld) {
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    T* plane = grad_image + ch * g.h * g.w;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const T* row = cols + ((ch * g.kh + u) * g.kw + v) * ld;
        const auto [lo, hi] = valid_span(v, g.sw, g.pw, g.w, g.ow);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::size_t iy = oy * g.sh + u;
          if (iy < g.ph || iy - g.ph >= g.h) continue;
          T* dst = plane + (iy - g.ph) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.sw + v - g.pw] += src[ox];
        }
      }
    }
  }
}

void require_even(const Shape& s, const char* what) {
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw DimensionError(std::string(what) + " requires even spatial dims, got " + s.to_string());
  }
}

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": expected gradient shape " + a.to_string() +
                         ", got " + b.to_string());
  }
}

}  // namespace

template <typename T>
Shape conv2d_output_shape(const Shape& input, const ConvParams<T>& p) {
  if (input.c != p.in_channels()) {
    throw DimensionError("conv2d channel mismatch: input " + input.to_string() + " vs weight " +
                         p.weight.shape().to_string());
  }
  if (p.stride_h == 0 || p.stride_w == 0) throw DimensionError("conv2d stride must be >= 1");
  const auto extent = [](std::size_t len, std::size_t pad, std::size_t k,
                         std::size_t stride) -> std::ptrdiff_t {
    const auto span = static_cast<std::ptrdiff_t>(len + 2 * pad) - static_cast<std::ptrdiff_t>(k);
    if (span < 0) return 0;
    return span / static_cast<std::ptrdiff_t>(stride) + 1;
  };
  const auto oh = extent(input.h, p.pad_h, p.kernel_h(), p.stride_h);
  const auto ow = extent(input.w, p.pad_w, p.kernel_w(), p.stride_w);
  if (oh < 1 || ow < 1) {
    throw DimensionError("conv2d output would be empty for input " + input.to_string() +
                         " and weight " + p.weight.shape().to_string());
  }
  return {input.n, p.out_channels(), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p) {
  const ConvGeometry g = geometry(x.shape(), p);
  if (p.bias && p.bias->size() != g.out_c) throw DimensionError("conv2d bias length mismatch");
  const std::size_t pos = g.positions();
  const std::size_t chunk = chunk_samples(g);
  const std::size_t chunks = (g.n + chunk - 1) / chunk;
  ConstMatrixMap<T> weight(p.weight.data(), static_cast<Eigen::Index>(g.out_c),
                           static_cast<Eigen::Index>(g.patch()));

  Tensor4<T> out(Shape{g.n, g.out_c, g.oh, g.ow});
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t first = k * chunk;
    const std::size_t count = std::min(chunk, g.n - first);
    const std::size_t ld = count * pos;
    thread_local RowMatrix<T> cols;
    thread_local RowMatrix<T> product;
    cols.resize(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(ld));
    for (std::size_t s = 0; s < count; ++s) {
      im2col(x.data() + x.index(first + s, 0, 0, 0), g, cols.data() + s * pos, ld);
    }
    product.noalias() = weight * cols;
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t o = 0; o < g.out_c; ++o) {
        const T* src = product.data() + o * ld + s * pos;
        T* dst = out.data() + out.index(first + s, o, 0, 0);
        const T b = p.bias ? (*p.bias)[o] : T{0};
        for (std::size_t q = 0; q < pos; ++q) dst[q] = src[q] + b;
      }
    }
  });
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                             const Tensor4<T>& grad_out) {
  const ConvGeometry g = geometry(x.shape(), p);
  require_same(Shape{g.n, g.out_c, g.oh, g.ow}, grad_out.shape(), "conv2d_backward");
  const std::size_t pos = g.positions();
  const std::size_t chunk = chunk_samples(g);
  const auto rows = static_cast<Eigen::Index>(g.patch());
  const auto out_c = static_cast<Eigen::Index>(g.out_c);
  ConstMatrixMap<T> weight(p.weight.data(), out_c, rows);

  ConvGrads<T> grads{Tensor4<T>(x.shape()), Tensor4<T>(p.weight.shape()), std::nullopt};
  MatrixMap<T> grad_w(grads.weight.data(), out_c, rows);
  RowMatrix<T> cols, grad_cols, gy;
  // Chunks are visited in order so the weight gradient sum is reproducible.
  for (std::size_t first = 0; first < g.n; first += chunk) {
    const std::size_t count = std::min(chunk, g.n - first);
    const std::size_t ld = count * pos;
    cols.resize(rows, static_cast<Eigen::Index>(ld));
    gy.resize(out_c, static_cast<Eigen::Index>(ld));
    for (std::size_t s = 0; s < count; ++s) {
      im2col(x.data() + x.index(first + s, 0, 0, 0), g, cols.data() + s * pos, ld);
      for (std::size_t o = 0; o < g.out_c; ++o) {
        const T* src = grad_out.data() + grad_out.index(first + s, o, 0, 0);
        std::copy(src, src + pos, gy.data() + o * ld + s * pos);
      }
    }
    grad_w.noalias() += gy * cols.transpose();
    grad_cols.noalias() = weight.transpose() * gy;
    for (std::size_t s = 0; s < count; ++s) {
      col2im(grad_cols.data() + s * pos, g, grads.input.data() + grads.input.index(first + s, 0, 0, 0), ld);
    }
  }

  if (p.bias) {
    std::vector<T> grad_b(g.out_c, T{0});
    for (std::size_t s = 0; s < g.n; ++s) {
      for (std::size_t o = 0; o < g.out_c; ++o) {
        const T* row = grad_out.data() + grad_out.index(s, o, 0, 0);
        T acc{0};
        for (std::size_t q = 0; q < pos; ++q) acc += row[q];
        grad_b[o] += acc;
      }
    }
    grads.bias = std::move(grad_b);
  }
  return grads;
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma.assign(channels, T{1});
  p.beta.assign(channels, T{0});
  p.running_mean.assign(channels, T{0});
  p.running_var.assign(channels, T{1});
  return p;
}

template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormParams<T>& p, Mode mode,
                             BatchNormCache<T>* cache) {
  const Shape& s = x.shape();
  if (s.c != p.channels() || p.beta.size() != s.c || p.running_mean.size() != s.c ||
      p.running_var.size() != s.c) {
    throw DimensionError("batchnorm channel mismatch: input " + s.to_string() + " vs " +
                         std::to_string(p.channels()) + " channels");
  }
  const std::size_t plane = s.h * s.w;
  const std::size_t count = s.n * plane;
  if (mode == Mode::Train && count < 2) {
    throw DimensionError("batchnorm train mode needs n*h*w >= 2, got " + s.to_string());
  }

  std::vector<T> mean(s.c), var(s.c), inv_std(s.c);
  for (std::size_t ch = 0; ch < s.c; ++ch) {
    if (mode == Mode::Train) {
      T acc{0};
      for (std::size_t i = 0; i < s.n; ++i) {
        const T* src = x.data() + x.index(i, ch, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) acc += src[q];
      }
      mean[ch] = acc / static_cast<T>(count);
      T sq{0};
      for (std::size_t i = 0; i < s.n; ++i) {
        const T* src = x.data() + x.index(i, ch, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) {
          const T d = src[q] - mean[ch];
          sq += d * d;
        }
      }
      var[ch] = sq / static_cast<T>(count);
      const T unbiased = sq / static_cast<T>(count - 1);
      p.running_mean[ch] = (T{1} - p.momentum) * p.running_mean[ch] + p.momentum * mean[ch];
      p.running_var[ch] = (T{1} - p.momentum) * p.running_var[ch] + p.momentum * unbiased;
    } else {
      mean[ch] = p.running_mean[ch];
      var[ch] = p.running_var[ch];
    }
    inv_std[ch] = T{1} / std::sqrt(var[ch] + p.eps);
  }

  Tensor4<T> normalized(s);
  Tensor4<T> out(s);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      const std::size_t base = x.index(i, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        const T xhat = (x[base + q] - mean[ch]) * inv_std[ch];
        normalized[base + q] = xhat;
        out[base + q] = p.gamma[ch] * xhat + p.beta[ch];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BatchNormParams<T>& p,
                                     const Tensor4<T>& grad_out) {
  const Shape& s = cache.normalized.shape();
  require_same(s, grad_out.shape(), "batchnorm_backward");
  const std::size_t plane = s.h * s.w;
  const auto count = static_cast<T>(s.n * plane);

  BatchNormGrads<T> g{Tensor4<T>(s), std::vector<T>(s.c, T{0}), std::vector<T>(s.c, T{0})};
  for (std::size_t ch = 0; ch < s.c; ++ch) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t i = 0; i < s.n; ++i) {
      const std::size_t base = grad_out.index(i, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        sum_dy += grad_out[base + q];
        sum_dy_xhat += grad_out[base + q] * cache.normalized[base + q];
      }
    }
    g.beta[ch] = sum_dy;
    g.gamma[ch] = sum_dy_xhat;
    const T k = p.gamma[ch] * cache.inv_std[ch];
    for (std::size_t i = 0; i < s.n; ++i) {
      const std::size_t base = grad_out.index(i, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        if (cache.mode == Mode::Train) {
          g.input[base + q] = k * (grad_out[base + q] - sum_dy / count -
                                   cache.normalized[base + q] * sum_dy_xhat / count);
        } else {
          g.input[base + q] = k * grad_out[base + q];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> pool2d_forward(const Tensor4<T>& x, PoolKind kind) {
  require_even(x.shape(), "pool2d");
  const Shape& s = x.shape();
  Tensor4<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      for (std::size_t p = 0; p < s.h / 2; ++p) {
        for (std::size_t q = 0; q < s.w / 2; ++q) {
          const T a = x(i, ch, 2 * p, 2 * q);
          const T b = x(i, ch, 2 * p, 2 * q + 1);
          const T c = x(i, ch, 2 * p + 1, 2 * q);
          const T d = x(i, ch, 2 * p + 1, 2 * q + 1);
          T v{};
          switch (kind) {
            case PoolKind::Max: v = std::max(std::max(a, b), std::max(c, d)); break;
            case PoolKind::Avg: v = (a + b + c + d) / T{4}; break;
            case PoolKind::Sum: v = a + b + c + d; break;
          }
          out(i, ch, p, q) = v;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor4<T> pool2d_backward(const Tensor4<T>& x, PoolKind kind, const Tensor4<T>& grad_out) {
  require_even(x.shape(), "pool2d_backward");
  const Shape& s = x.shape();
  require_same(Shape{s.n, s.c, s.h / 2, s.w / 2}, grad_out.shape(), "pool2d_backward");
  Tensor4<T> gx(s);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      for (std::size_t p = 0; p < s.h / 2; ++p) {
        for (std::size_t q = 0; q < s.w / 2; ++q) {
          const T g = grad_out(i, ch, p, q);
          if (kind == PoolKind::Max) {
            std::size_t best_u = 0, best_v = 0;
            T best = x(i, ch, 2 * p, 2 * q);
            for (std::size_t u = 0; u < 2; ++u) {
              for (std::size_t v = 0; v < 2; ++v) {
                const T cand = x(i, ch, 2 * p + u, 2 * q + v);
                if (cand > best) {
                  best = cand;
                  best_u = u;
                  best_v = v;
                }
              }
            }
            gx(i, ch, 2 * p + best_u, 2 * q + best_v) = g;
          } else {
            const T share = kind == PoolKind::Avg ? g / T{4} : g;
            for (std::size_t u = 0; u < 2; ++u) {
              for (std::size_t v = 0; v < 2; ++v) gx(i, ch, 2 * p + u, 2 * q + v) = share;
            }
          }
        }
      }
    }
  }
  return gx;
}

namespace {

// Visits each 3x3 stride-2 pad-1 window and reports the first maximal input.
template <typename T, typename Visit>
void stem_pool_windows(const Tensor4<T>& x, Visit visit) {
  const Shape& s = x.shape();
  const std::size_t oh = (s.h + 2 - 3) / 2 + 1;
  const std::size_t ow = (s.w + 2 - 3) / 2 + 1;
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      for (std::size_t p = 0; p < oh; ++p) {
        for (std::size_t q = 0; q < ow; ++q) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t by = 0, bx = 0;
          for (std::size_t u = 0; u < 3; ++u) {
            const auto iy = static_cast<std::ptrdiff_t>(2 * p + u) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
            for (std::size_t v = 0; v < 3; ++v) {
              const auto ix = static_cast<std::ptrdiff_t>(2 * q + v) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
              const T cand = x(i, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              if (cand > best) {
                best = cand;
                by = static_cast<std::size_t>(iy);
                bx = static_cast<std::size_t>(ix);
              }
            }
          }
          visit(i, ch, p, q, by, bx, best);
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor4<T> stem_maxpool_forward(const Tensor4<T>& x) {
  const Shape& s = x.shape();
  Tensor4<T> out(Shape{s.n, s.c, (s.h - 1) / 2 + 1, (s.w - 1) / 2 + 1});
  stem_pool_windows(x, [&](std::size_t i, std::size_t ch, std::size_t p, std::size_t q,
                           std::size_t, std::size_t, T best) { out(i, ch, p, q) = best; });
  return out;
}

template <typename T>
Tensor4<T> stem_maxpool_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
  const Shape& s = x.shape();
  require_same(Shape{s.n, s.c, (s.h - 1) / 2 + 1, (s.w - 1) / 2 + 1}, grad_out.shape(),
               "stem_maxpool_backward");
  Tensor4<T> gx(s);
  stem_pool_windows(x, [&](std::size_t i, std::size_t ch, std::size_t p, std::size_t q,
                           std::size_t by, std::size_t bx,
                           T) { gx(i, ch, by, bx) += grad_out(i, ch, p, q); });
  return gx;
}

// ---------------------------------------------------------------------------

template <typename T>
PhaseGrids<T> phase_decompose(const Tensor4<T>& x) {
  require_even(x.shape(), "phase_decompose");
  const Shape& s = x.shape();
  const Shape half{s.n, s.c, s.h / 2, s.w / 2};
  PhaseGrids<T> g{{Tensor4<T>(half), Tensor4<T>(half), Tensor4<T>(half), Tensor4<T>(half)}};
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t xx = 0; xx < s.w; ++xx) {
          g.at(y % 2, xx % 2)(i, ch, y / 2, xx / 2) = x(i, ch, y, xx);
        }
      }
    }
  }
  return g;
}

template <typename T>
Tensor4<T> phase_reassemble(const PhaseGrids<T>& g) {
  const Shape& half = g.grids[0].shape();
  for (const auto& grid : g.grids) require_same(half, grid.shape(), "phase_reassemble");
  Tensor4<T> x(Shape{half.n, half.c, half.h * 2, half.w * 2});
  for (std::size_t i = 0; i < half.n; ++i) {
    for (std::size_t ch = 0; ch < half.c; ++ch) {
      for (std::size_t y = 0; y < half.h * 2; ++y) {
        for (std::size_t xx = 0; xx < half.w * 2; ++xx) {
          x(i, ch, y, xx) = g.at(y % 2, xx % 2)(i, ch, y / 2, xx / 2);
        }
      }
    }
  }
  return x;
}

namespace {

template <typename T>
void check_dilated_pooling(const Shape& s, const ConvParams<T>& p) {
  require_even(s, "dilated_pooling");
  if (p.stride_h != 1 || p.stride_w != 1) {
    throw DimensionError("dilated_pooling requires stride (1,1)");
  }
  if (p.kernel_h() % 2 == 0 || p.kernel_w() % 2 == 0) {
    throw DimensionError("dilated_pooling requires odd kernels, got " +
                         p.weight.shape().to_string());
  }
  if (p.pad_h != p.kernel_h() / 2 || p.pad_w != p.kernel_w() / 2) {
    throw DimensionError("dilated_pooling requires half-kernel padding");
  }
}

}  // namespace

template <typename T>
Tensor4<T> dilated_pooling_forward(const Tensor4<T>& x, const ConvParams<T>& p) {
  check_dilated_pooling(x.shape(), p);
  const PhaseGrids<T> grids = phase_decompose(x);
  Tensor4<T> out = conv2d_forward(grids.grids[0], p);
  for (std::size_t b = 1; b < 4; ++b) accumulate(out, conv2d_forward(grids.grids[b], p));
  if (p.bias) {
    // Each branch added the bias once; the module contributes it once.
    const std::size_t plane = out.h() * out.w();
    for (std::size_t i = 0; i < out.n(); ++i) {
      for (std::size_t o = 0; o < out.c(); ++o) {
        T* dst = out.data() + out.index(i, o, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) dst[q] -= T{3} * (*p.bias)[o];
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> dilated_pooling_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                                      const Tensor4<T>& grad_out) {
  check_dilated_pooling(x.shape(), p);
  const Shape& s = x.shape();
  require_same(Shape{s.n, p.out_channels(), s.h / 2, s.w / 2}, grad_out.shape(),
               "dilated_pooling_backward");
  const PhaseGrids<T> grids = phase_decompose(x);
  ConvParams<T> unbiased{p.weight, p.stride_h, p.stride_w, p.pad_h, p.pad_w, std::nullopt};

  PhaseGrids<T> grad_grids;
  ConvGrads<T> total{Tensor4<T>(s), Tensor4<T>(p.weight.shape()), std::nullopt};
  for (std::size_t b = 0; b < 4; ++b) {
    ConvGrads<T> branch = conv2d_backward(grids.grids[b], unbiased, grad_out);
    accumulate(total.weight, branch.weight);
    grad_grids.grids[b] = std::move(branch.input);
  }
  total.input = phase_reassemble(grad_grids);
  if (p.bias) {
    std::vector<T> gb(p.out_channels(), T{0});
    const std::size_t plane = grad_out.h() * grad_out.w();
    for (std::size_t i = 0; i < grad_out.n(); ++i) {
      for (std::size_t o = 0; o < grad_out.c(); ++o) {
        const T* src = grad_out.data() + grad_out.index(i, o, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) gb[o] += src[q];
      }
    }
    total.bias = std::move(gb);
  }
  return total;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
  require_same(x.shape(), grad_out.shape(), "relu_backward");
  Tensor4<T> gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T{0} ? grad_out[i] : T{0};
  return gx;
}

template <typename T>
Tensor4<T> global_avg_pool_forward(const Tensor4<T>& x) {
  const Shape& s = x.shape();
  const std::size_t plane = s.h * s.w;
  Tensor4<T> out(Shape{s.n, s.c, 1, 1});
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      const T* src = x.data() + x.index(i, ch, 0, 0);
      T acc{0};
      for (std::size_t q = 0; q < plane; ++q) acc += src[q];
      out(i, ch, 0, 0) = acc / static_cast<T>(plane);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> global_avg_pool_backward(const Shape& input_shape, const Tensor4<T>& grad_out) {
  require_same(Shape{input_shape.n, input_shape.c, 1, 1}, grad_out.shape(),
               "global_avg_pool_backward");
  const std::size_t plane = input_shape.h * input_shape.w;
  Tensor4<T> gx(input_shape);
  for (std::size_t i = 0; i < input_shape.n; ++i) {
    for (std::size_t ch = 0; ch < input_shape.c; ++ch) {
      const T share = grad_out(i, ch, 0, 0) / static_cast<T>(plane);
      T* dst = gx.data() + gx.index(i, ch, 0, 0);
      std::fill(dst, dst + plane, share);
    }
  }
  return gx;
}

template <typename T>
Tensor4<T> linear_forward(const Tensor4<T>& x, const LinearParams<T>& p) {
  const Shape& s = x.shape();
  const std::size_t features = s.c * s.h * s.w;
  if (features != p.in_features() || p.bias.size() != p.out_features()) {
    throw DimensionError("linear: input " + s.to_string() + " does not match weight " +
                         p.weight.shape().to_string());
  }
  ConstMatrixMap<T> in(x.data(), static_cast<Eigen::Index>(s.n),
                       static_cast<Eigen::Index>(features));
  ConstMatrixMap<T> w(p.weight.data(), static_cast<Eigen::Index>(p.out_features()),
                      static_cast<Eigen::Index>(features));
  Tensor4<T> out(Shape{s.n, p.out_features(), 1, 1});
  MatrixMap<T> y(out.data(), static_cast<Eigen::Index>(s.n),
                 static_cast<Eigen::Index>(p.out_features()));
  y.noalias() = in * w.transpose();
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t o = 0; o < p.out_features(); ++o) out(i, o, 0, 0) += p.bias[o];
  }
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor4<T>& x, const LinearParams<T>& p,
                               const Tensor4<T>& grad_out) {
  const Shape& s = x.shape();
  const std::size_t features = s.c * s.h * s.w;
  require_same(Shape{s.n, p.out_features(), 1, 1}, grad_out.shape(), "linear_backward");
  const auto rows = static_cast<Eigen::Index>(s.n);
  const auto outs = static_cast<Eigen::Index>(p.out_features());
  const auto ins = static_cast<Eigen::Index>(features);
  ConstMatrixMap<T> in(x.data(), rows, ins);
  ConstMatrixMap<T> w(p.weight.data(), outs, ins);
  ConstMatrixMap<T> gy(grad_out.data(), rows, outs);

  LinearGrads<T> g{Tensor4<T>(s), Tensor4<T>(p.weight.shape()),
                   std::vector<T>(p.out_features(), T{0})};
  MatrixMap<T>(g.input.data(), rows, ins).noalias() = gy * w;
  MatrixMap<T>(g.weight.data(), outs, ins).noalias() = gy.transpose() * in;
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t o = 0; o < p.out_features(); ++o) g.bias[o] += grad_out(i, o, 0, 0);
  }
  return g;
}

template <typename T>
std::vector<T> softmax_row(std::span<const T> logits) {
  const T peak = *std::max_element(logits.begin(), logits.end());
  std::vector<T> out(logits.size());
  T total{0};
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - peak);
    total += out[k];
  }
  for (T& v : out) v /= total;
  return out;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.h != 1 || s.w != 1) {
    throw DimensionError("softmax_cross_entropy expects (n, classes, 1, 1), got " + s.to_string());
  }
  if (labels.size() != s.n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(s.n));
  }
  LossResult<T> r{T{0}, Tensor4<T>(s)};
  const auto batch = static_cast<T>(s.n);
  for (std::size_t i = 0; i < s.n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= s.c) {
      throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(s.c) + ")");
    }
    const auto row = logits.sample(i);
    const T peak = *std::max_element(row.begin(), row.end());
    T total{0};
    for (T v : row) total += std::exp(v - peak);
    const T log_norm = peak + std::log(total);
    r.loss += log_norm - row[static_cast<std::size_t>(label)];
    for (std::size_t k = 0; k < s.c; ++k) {
      const T prob = std::exp(row[k] - log_norm);
      r.grad(i, k, 0, 0) = (prob - (static_cast<int>(k) == label ? T{1} : T{0})) / batch;
    }
  }
  r.loss /= batch;
  return r;
}

#define SCENENET_INSTANTIATE(T)                                                               \
  template Shape conv2d_output_shape(const Shape&, const ConvParams<T>&);                     \
  template Tensor4<T> conv2d_forward(const Tensor4<T>&, const ConvParams<T>&);                \
  template ConvGrads<T> conv2d_backward(const Tensor4<T>&, const ConvParams<T>&,              \
                                        const Tensor4<T>&);                                   \
  template struct BatchNormParams<T>;                                                         \
  template Tensor4<T> batchnorm_forward(const Tensor4<T>&, BatchNormParams<T>&, Mode,         \
                                        BatchNormCache<T>*);                                  \
  template BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>&,                     \
                                                const BatchNormParams<T>&, const Tensor4<T>&); \
  template Tensor4<T> pool2d_forward(const Tensor4<T>&, PoolKind);                            \
  template Tensor4<T> pool2d_backward(const Tensor4<T>&, PoolKind, const Tensor4<T>&);        \
  template Tensor4<T> stem_maxpool_forward(const Tensor4<T>&);                                \
  template Tensor4<T> stem_maxpool_backward(const Tensor4<T>&, const Tensor4<T>&);            \
  template PhaseGrids<T> phase_decompose(const Tensor4<T>&);                                  \
  template Tensor4<T> phase_reassemble(const PhaseGrids<T>&);                                 \
  template Tensor4<T> dilated_pooling_forward(const Tensor4<T>&, const ConvParams<T>&);       \
  template ConvGrads<T> dilated_pooling_backward(const Tensor4<T>&, const ConvParams<T>&,     \
                                                 const Tensor4<T>&);                          \
  template Tensor4<T> relu_forward(const Tensor4<T>&);                                        \
  template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                    \
  template Tensor4<T> global_avg_pool_forward(const Tensor4<T>&);                             \
  template Tensor4<T> global_avg_pool_backward(const Shape&, const Tensor4<T>&);              \
  template Tensor4<T> linear_forward(const Tensor4<T>&, const LinearParams<T>&);              \
  template LinearGrads<T> linear_backward(const Tensor4<T>&, const LinearParams<T>&,          \
                                          const Tensor4<T>&);                                 \
  template std::vector<T> softmax_row(std::span<const T>);                                    \
  template LossResult<T> softmax_cross_entropy(const Tensor4<T>&, std::span<const int>);

SCENENET_INSTANTIATE(float)
SCENENET_INSTANTIATE(double)

#undef SCENENET_INSTANTIATE

}  // namespace scenenet::nn
