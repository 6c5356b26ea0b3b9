#include "scenenet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "scenenet/image_io.hpp"
#include "scenenet/random.hpp"

namespace scenenet {

Tensor4<float> Dataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DimensionError("cannot gather an empty batch");
  const Shape& s = images.shape();
  Tensor4<float> batch(Shape{indices.size(), s.c, s.h, s.w});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = images.sample(indices[b]);
    std::copy(src.begin(), src.end(), batch.sample(b).begin());
  }
  return batch;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels[i]);
  return out;
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.image_side == 0 || spec.samples_per_class == 0 ||
      spec.noise_sigma < 0.0) {
    throw ValidationError("synthetic dataset needs >= 1 class, positive side and count, sigma >= 0");
  }
  const auto classes = static_cast<std::size_t>(spec.num_classes);
  const std::size_t side = spec.image_side;
  Dataset data;
  for (std::size_t k = 0; k < classes; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "grating_%03zu", k);
    data.class_names.emplace_back(name);
  }
  data.images = Tensor4<float>(Shape{classes * spec.samples_per_class, 3, side, side});
  data.labels.reserve(classes * spec.samples_per_class);

  Pcg32 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t index = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double theta = std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    const double cycles = 2.0 + static_cast<double>(k);
    const double kx = 2.0 * std::numbers::pi * cycles * std::cos(theta) / static_cast<double>(side);
    const double ky = 2.0 * std::numbers::pi * cycles * std::sin(theta) / static_cast<double>(side);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++index) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            double v = 0.5 + 0.5 * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y));
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
            data.images(index, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      data.labels.push_back(static_cast<int>(k));
    }
  }
  return data;
}

Dataset load_image_folder(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ValidationError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ValidationError("dataset root has no class directories: " + root.string());

  Dataset data;
  std::vector<Tensor4<float>> images;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    data.class_names.push_back(class_dirs[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      Tensor4<float> img = read_pnm(file);
      if (img.h() != img.w()) throw ValidationError(file.string() + ": image is not square");
      if (!images.empty() && img.shape() != images.front().shape()) {
        throw ValidationError(file.string() + ": image size differs from " +
                              images.front().shape().to_string());
      }
      images.push_back(std::move(img));
      data.labels.push_back(static_cast<int>(label));
    }
  }
  if (images.empty()) throw ValidationError("dataset root contains no images: " + root.string());
  const Shape& s = images.front().shape();
  data.images = Tensor4<float>(Shape{images.size(), 3, s.h, s.w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].values().begin(), images[i].values().end(), data.images.sample(i).begin());
  }
  return data;
}

Dataset materialize(const DatasetSource& source) {
  if (const auto* folder = std::get_if<ImageFolderSource>(&source)) {
    return load_image_folder(folder->root);
  }
  return synthetic_dataset(std::get<SyntheticSpec>(source));
}

Dataset select_classes(const Dataset& data, std::size_t count, std::uint64_t seed) {
  const std::size_t total = data.num_classes();
  if (count == 0 || count > total) {
    throw ValidationError("class subset of " + std::to_string(count) + " from " +
                          std::to_string(total) + " classes");
  }
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Pcg32 rng(seed);
  for (std::size_t i = total; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(static_cast<std::uint32_t>(i))]);
  }
  std::vector<std::size_t> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(kept.begin(), kept.end());

  std::vector<int> relabel(total, -1);
  Dataset out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    relabel[kept[i]] = static_cast<int>(i);
    out.class_names.push_back(data.class_names[kept[i]]);
  }
  std::vector<std::size_t> samples;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (relabel[static_cast<std::size_t>(data.labels[i])] >= 0) samples.push_back(i);
  }
  if (samples.empty()) throw ValidationError("selected classes contain no samples");
  out.images = data.gather(samples);
  for (std::size_t i : samples) out.labels.push_back(relabel[static_cast<std::size_t>(data.labels[i])]);
  return out;
}

void write_image_folder(const Dataset& data, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (const auto& name : data.class_names) fs::create_directories(root / name);
  std::vector<std::size_t> per_class(data.num_classes(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto label = static_cast<std::size_t>(data.labels[i]);
    char file[32];
    std::snprintf(file, sizeof file, "%06zu.ppm", per_class[label]++);
    write_ppm(root / data.class_names[label] / file, data.images, i);
  }
}

}  // namespace scenenet
