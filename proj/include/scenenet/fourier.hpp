#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scenenet/tensor.hpp"

namespace scenenet {

/// Centered 2-D spectrum of one image: (channels, n, n) complex bins with the
/// zero frequency at index (n/2, n/2). Unitary normalization (1/n per transform).
struct Spectrum {
  std::size_t channels = 0;
  std::size_t n = 0;
  std::vector<std::complex<double>> bins;

  std::complex<double>& at(std::size_t c, std::size_t i, std::size_t j) {
    return bins[(c * n + i) * n + j];
  }
  const std::complex<double>& at(std::size_t c, std::size_t i, std::size_t j) const {
    return bins[(c * n + i) * n + j];
  }
};

/// Transforms every channel of sample `sample`. Non-square input throws DimensionError.
template <typename T>
Spectrum fft2d(const Tensor4<T>& image, std::size_t sample = 0);

/// Real part of the inverse transform as a (1, c, n, n) tensor. When
/// `imag_residue` is given it receives max|imag| / max(|real|, tiny).
Tensor4<double> ifft2d(const Spectrum& spectrum, double* imag_residue = nullptr);

enum class FilterKind { Low, High };

struct FilterSpec {
  FilterKind kind = FilterKind::Low;
  std::size_t size = 0;
};

std::string to_string(FilterKind kind);
FilterKind parse_filter_kind(const std::string& text);

/// Binary keep-mask over the centered spectrum. low(s) keeps bins with
/// max(|i - n/2|, |j - n/2|) < s/2; high(s) removes exactly the bins low(n - s)
/// keeps. At s = n both kinds pass everything. Every mask is symmetric under
/// frequency negation, so filtered images stay real.
struct Mask {
  std::size_t n = 0;
  std::vector<std::uint8_t> keep;

  bool at(std::size_t i, std::size_t j) const { return keep[i * n + j] != 0; }
  bool all_ones() const;
  bool all_zeros() const;
};

/// Throws ValidationError unless 0 <= size <= n.
Mask make_mask(const FilterSpec& spec, std::size_t n);

/// Per channel: fft2d, zero masked bins, ifft2d, real part. Linear in the
/// image; no clamping.
template <typename T>
Tensor4<T> apply_filter(const Tensor4<T>& images, const FilterSpec& spec);
template <typename T>
Tensor4<T> apply_mask(const Tensor4<T>& images, const Mask& mask);

/// Filtering as applied to evaluation images: identity masks pass the images
/// through untouched, everything else is filtered and clamped to [0, 1].
template <typename T>
Tensor4<T> filter_for_evaluation(const Tensor4<T>& images, const FilterSpec& spec);

/// Writes the mask as a binary PPM (white = kept).
void write_mask_ppm(const std::filesystem::path& path, const Mask& mask);

}  // namespace scenenet
