#pragma once

#include <filesystem>

#include "scenenet/tensor.hpp"

namespace scenenet {

/// Reads an 8-bit binary PPM (P6) or PGM (P5) as a (1, 3, h, w) tensor in
/// [0, 1]. Grayscale is replicated across the three channels.
Tensor4<float> read_pnm(const std::filesystem::path& path);

/// Writes sample `sample` of a 3-channel tensor as P6, rounding [0, 1]
/// values to the nearest 8-bit level (values outside are clamped).
void write_ppm(const std::filesystem::path& path, const Tensor4<float>& image,
               std::size_t sample = 0);

}  // namespace scenenet
