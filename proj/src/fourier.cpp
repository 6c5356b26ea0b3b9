#include "scenenet/fourier.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>

#include "scenenet/parallel.hpp"

namespace scenenet {

namespace {

// FFTW planning is not thread-safe; execution with new-array execute is.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(std::size_t n, int sign) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_pair(n, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    auto* in = fftw_alloc_complex(n * n);
    auto* out = fftw_alloc_complex(n * n);
    fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), in, out, sign,
                                      FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<std::pair<std::size_t, int>, fftw_plan> plans_;
};

struct FftwBuffer {
  explicit FftwBuffer(std::size_t count) : data(fftw_alloc_complex(count)) {}
  ~FftwBuffer() { fftw_free(data); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* data;
};

void require_square(const Shape& s) {
  if (s.h != s.w) throw DimensionError("Fourier filtering needs square images, got " + s.to_string());
}

// max(|i - n/2|, |j - n/2|) < side/2, with side == n covering the whole grid
// (for even n that adds the Nyquist row and column).
bool inside_square(std::size_t i, std::size_t j, std::size_t n, std::size_t side) {
  if (side == n) return true;
  const auto center = static_cast<std::ptrdiff_t>(n / 2);
  const auto oi = static_cast<std::ptrdiff_t>(i) - center;
  const auto oj = static_cast<std::ptrdiff_t>(j) - center;
  const auto reach = 2 * std::max(std::abs(oi), std::abs(oj));
  return reach < static_cast<std::ptrdiff_t>(side);
}

// Forward transform of one channel into centered layout.
void transform_channel(const double* src, std::size_t n, std::complex<double>* dst) {
  FftwBuffer in(n * n), out(n * n);
  for (std::size_t k = 0; k < n * n; ++k) {
    in.data[k][0] = src[k];
    in.data[k][1] = 0.0;
  }
  fftw_execute_dft(PlanCache::instance().get(n, FFTW_FORWARD), in.data, out.data);
  const double norm = 1.0 / static_cast<double>(n);
  const std::size_t shift = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      dst[((i + shift) % n) * n + (j + shift) % n] = {out.data[k][0] * norm, out.data[k][1] * norm};
    }
  }
}

// Inverse of one centered channel. Returns max |imag|.
double inverse_channel(const std::complex<double>* src, std::size_t n, double* dst) {
  FftwBuffer in(n * n), out(n * n);
  const std::size_t shift = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& v = src[((i + shift) % n) * n + (j + shift) % n];
      in.data[i * n + j][0] = v.real();
      in.data[i * n + j][1] = v.imag();
    }
  }
  fftw_execute_dft(PlanCache::instance().get(n, FFTW_BACKWARD), in.data, out.data);
  const double norm = 1.0 / static_cast<double>(n);
  double max_imag = 0.0;
  for (std::size_t k = 0; k < n * n; ++k) {
    dst[k] = out.data[k][0] * norm;
    max_imag = std::max(max_imag, std::abs(out.data[k][1] * norm));
  }
  return max_imag;
}

}  // namespace

template <typename T>
Spectrum fft2d(const Tensor4<T>& image, std::size_t sample) {
  const Shape& s = image.shape();
  require_square(s);
  if (sample >= s.n) throw DimensionError("fft2d sample index out of range");
  const std::size_t n = s.h;
  Spectrum spec{s.c, n, std::vector<std::complex<double>>(s.c * n * n)};
  std::vector<double> channel(n * n);
  for (std::size_t c = 0; c < s.c; ++c) {
    const T* src = image.data() + image.index(sample, c, 0, 0);
    std::copy(src, src + n * n, channel.begin());
    transform_channel(channel.data(), n, spec.bins.data() + c * n * n);
  }
  return spec;
}

Tensor4<double> ifft2d(const Spectrum& spectrum, double* imag_residue) {
  const std::size_t n = spectrum.n;
  if (n == 0 || spectrum.bins.size() != spectrum.channels * n * n) {
    throw DimensionError("malformed spectrum");
  }
  Tensor4<double> out(Shape{1, spectrum.channels, n, n});
  double max_imag = 0.0;
  for (std::size_t c = 0; c < spectrum.channels; ++c) {
    max_imag = std::max(max_imag, inverse_channel(spectrum.bins.data() + c * n * n, n,
                                                  out.data() + out.index(0, c, 0, 0)));
  }
  if (imag_residue) {
    double max_real = 0.0;
    for (double v : out.values()) max_real = std::max(max_real, std::abs(v));
    *imag_residue = max_imag / std::max(max_real, 1e-300);
  }
  return out;
}

std::string to_string(FilterKind kind) { return kind == FilterKind::Low ? "low" : "high"; }

FilterKind parse_filter_kind(const std::string& text) {
  if (text == "low") return FilterKind::Low;
  if (text == "high") return FilterKind::High;
  throw ValidationError("filter kind must be 'low' or 'high', got '" + text + "'");
}

bool Mask::all_ones() const {
  return std::all_of(keep.begin(), keep.end(), [](std::uint8_t v) { return v != 0; });
}

bool Mask::all_zeros() const {
  return std::all_of(keep.begin(), keep.end(), [](std::uint8_t v) { return v == 0; });
}

Mask make_mask(const FilterSpec& spec, std::size_t n) {
  if (n == 0) throw ValidationError("mask side must be positive");
  if (spec.size > n) {
    throw ValidationError("filter size " + std::to_string(spec.size) + " outside [0, " +
                          std::to_string(n) + "]");
  }
  Mask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool keep = spec.kind == FilterKind::Low ? inside_square(i, j, n, spec.size)
                                                     : !inside_square(i, j, n, n - spec.size);
      m.keep[i * n + j] = keep ? 1 : 0;
    }
  }
  return m;
}

template <typename T>
Tensor4<T> apply_mask(const Tensor4<T>& images, const Mask& mask) {
  const Shape& s = images.shape();
  require_square(s);
  const std::size_t n = s.h;
  if (mask.n != n) {
    throw DimensionError("mask side " + std::to_string(mask.n) + " does not match image " +
                         s.to_string());
  }
  Tensor4<T> out(s);
  parallel_for(s.n * s.c, [&](std::size_t job) {
    const std::size_t i = job / s.c;
    const std::size_t c = job % s.c;
    std::vector<double> channel(n * n);
    std::vector<std::complex<double>> bins(n * n);
    const T* src = images.data() + images.index(i, c, 0, 0);
    std::copy(src, src + n * n, channel.begin());
    transform_channel(channel.data(), n, bins.data());
    for (std::size_t k = 0; k < n * n; ++k) {
      if (!mask.keep[k]) bins[k] = 0.0;
    }
    inverse_channel(bins.data(), n, channel.data());
    T* dst = out.data() + out.index(i, c, 0, 0);
    for (std::size_t k = 0; k < n * n; ++k) dst[k] = static_cast<T>(channel[k]);
  });
  return out;
}

template <typename T>
Tensor4<T> apply_filter(const Tensor4<T>& images, const FilterSpec& spec) {
  require_square(images.shape());
  return apply_mask(images, make_mask(spec, images.h()));
}

template <typename T>
Tensor4<T> filter_for_evaluation(const Tensor4<T>& images, const FilterSpec& spec) {
  require_square(images.shape());
  const Mask mask = make_mask(spec, images.h());
  if (mask.all_ones()) return images;
  Tensor4<T> out = apply_mask(images, mask);
  for (T& v : out.values()) v = std::clamp(v, T{0}, T{1});
  return out;
}

void write_mask_ppm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out << "P6\n" << mask.n << " " << mask.n << "\n255\n";
  for (std::uint8_t k : mask.keep) {
    const char v = k ? static_cast<char>(255) : 0;
    const char px[3] = {v, v, v};
    out.write(px, 3);
  }
}

template Spectrum fft2d(const Tensor4<float>&, std::size_t);
template Spectrum fft2d(const Tensor4<double>&, std::size_t);
template Tensor4<float> apply_mask(const Tensor4<float>&, const Mask&);
template Tensor4<double> apply_mask(const Tensor4<double>&, const Mask&);
template Tensor4<float> apply_filter(const Tensor4<float>&, const FilterSpec&);
template Tensor4<double> apply_filter(const Tensor4<double>&, const FilterSpec&);
template Tensor4<float> filter_for_evaluation(const Tensor4<float>&, const FilterSpec&);
template Tensor4<double> filter_for_evaluation(const Tensor4<double>&, const FilterSpec&);

}  // namespace scenenet
