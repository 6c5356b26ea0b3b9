#include "scenenet/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace scenenet {

static_assert(std::endian::native == std::endian::little,
              "TNSR payloads are written as host-order little-endian");

namespace {

constexpr std::array<char, 4> kMagic{'T', 'N', 'S', 'R'};

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::F32;
  } else {
    static_assert(std::is_same_v<T, double>);
    return DType::F64;
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError("truncated TNSR header");
  return v;
}

struct Header {
  DType dtype;
  Shape shape;
};

Header read_header(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ValidationError("not a TNSR file (bad magic)");
  const std::uint32_t version = get_u32(in);
  if (version != kTensorFormatVersion) {
    throw ValidationError("unsupported TNSR version " + std::to_string(version));
  }
  std::uint8_t code = 0;
  in.read(reinterpret_cast<char*>(&code), 1);
  if (!in || (code != 1 && code != 2)) throw ValidationError("unknown TNSR dtype code");
  const std::uint32_t ndim = get_u32(in);
  if (ndim != 4) throw ValidationError("TNSR ndim must be 4, got " + std::to_string(ndim));
  Shape s{get_u32(in), get_u32(in), get_u32(in), get_u32(in)};
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw ValidationError("TNSR dims must be >= 1, got " + s.to_string());
  }
  return {static_cast<DType>(code), s};
}

template <typename T>
Tensor4<T> read_payload(std::istream& in, Shape shape) {
  std::vector<T> data(shape.size());
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!in) throw ValidationError("truncated TNSR payload");
  return Tensor4<T>::from_data(shape, std::move(data));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor4<T>& t) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kTensorFormatVersion);
  const auto code = static_cast<std::uint8_t>(dtype_of<T>());
  out.write(reinterpret_cast<const char*>(&code), 1);
  put_u32(out, 4);
  const Shape& s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!out) throw ValidationError("failed writing TNSR stream");
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor4<T>& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <typename T>
Tensor4<T> read_tensor(std::istream& in) {
  const Header h = read_header(in);
  if (h.dtype != dtype_of<T>()) {
    throw ValidationError("TNSR dtype mismatch: file has code " +
                          std::to_string(static_cast<int>(h.dtype)));
  }
  return read_payload<T>(in, h.shape);
}

template <typename T>
Tensor4<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return read_tensor<T>(in);
}

AnyTensor read_any_tensor(std::istream& in) {
  const Header h = read_header(in);
  if (h.dtype == DType::F32) return read_payload<float>(in, h.shape);
  return read_payload<double>(in, h.shape);
}

template void write_tensor(std::ostream&, const Tensor4<float>&);
template void write_tensor(std::ostream&, const Tensor4<double>&);
template void save_tensor(const std::filesystem::path&, const Tensor4<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor4<double>&);
template Tensor4<float> read_tensor(std::istream&);
template Tensor4<double> read_tensor(std::istream&);
template Tensor4<float> load_tensor(const std::filesystem::path&);
template Tensor4<double> load_tensor(const std::filesystem::path&);

}  // namespace scenenet
