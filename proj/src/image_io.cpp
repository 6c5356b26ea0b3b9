#include "scenenet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace scenenet {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string token;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(ch);
  }
  return token;
}

std::size_t header_number(std::istream& in, const std::filesystem::path& path) {
  const std::string token = header_token(in);
  try {
    return static_cast<std::size_t>(std::stoul(token));
  } catch (const std::exception&) {
    throw ValidationError("malformed PNM header in " + path.string());
  }
}

}  // namespace

Tensor4<float> read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image " + path.string());
  const std::string magic = header_token(in);
  if (magic != "P6" && magic != "P5") {
    throw ValidationError(path.string() + ": only binary P6/P5 images are supported");
  }
  const std::size_t width = header_number(in, path);
  const std::size_t height = header_number(in, path);
  const std::size_t maxval = header_number(in, path);
  if (width == 0 || height == 0 || maxval != 255) {
    throw ValidationError(path.string() + ": expected 8-bit image with positive size");
  }
  const std::size_t channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(width * height * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw ValidationError(path.string() + ": truncated pixel data");

  Tensor4<float> image(Shape{1, 3, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = (y * width + x) * channels + (channels == 3 ? c : 0);
        image(0, c, y, x) = static_cast<float>(raw[src]) / 255.0F;
      }
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const Tensor4<float>& image, std::size_t sample) {
  if (image.c() != 3) throw DimensionError("write_ppm expects 3 channels, got " + image.shape().to_string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.w() << " " << image.h() << "\n255\n";
  std::vector<unsigned char> raw(image.h() * image.w() * 3);
  for (std::size_t y = 0; y < image.h(); ++y) {
    for (std::size_t x = 0; x < image.w(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image(sample, c, y, x), 0.0F, 1.0F);
        raw[(y * image.w() + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0F));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace scenenet
