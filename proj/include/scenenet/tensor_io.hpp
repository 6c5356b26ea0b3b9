#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "scenenet/tensor.hpp"

namespace scenenet {

// TNSR layout: "TNSR", u32 version=1, u8 dtype (1=f32, 2=f64), u32 ndim=4,
// four u32 dims, then the row-major payload. All integers and floats are
// little-endian.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <typename T>
void write_tensor(std::ostream& out, const Tensor4<T>& t);
template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor4<T>& t);

/// Reads a tensor stored with dtype matching T; any other dtype is rejected.
template <typename T>
Tensor4<T> read_tensor(std::istream& in);
template <typename T>
Tensor4<T> load_tensor(const std::filesystem::path& path);

using AnyTensor = std::variant<Tensor4<float>, Tensor4<double>>;
AnyTensor read_any_tensor(std::istream& in);

}  // namespace scenenet
