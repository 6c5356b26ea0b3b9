#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "scenenet/tensor.hpp"

namespace scenenet {

/// In-memory classification set: (count, 3, side, side) images in [0, 1].
struct Dataset {
  std::vector<std::string> class_names;
  Tensor4<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t image_side() const { return images.h(); }

  /// Gathers the given samples into a (indices.size(), 3, side, side) batch.
  Tensor4<float> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

/// Oriented sinusoidal gratings: class k has orientation pi*k/C and 2+k cycles
/// per image, amplitude 0.5 around 0.5, plus N(0, sigma) noise, clamped to [0, 1].
struct SyntheticSpec {
  int num_classes = 10;
  std::size_t image_side = 32;
  std::size_t samples_per_class = 200;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
};

struct ImageFolderSource {
  std::filesystem::path root;
};

using DatasetSource = std::variant<ImageFolderSource, SyntheticSpec>;

Dataset synthetic_dataset(const SyntheticSpec& spec);

/// root/<class>/*.ppm|*.pgm, classes sorted lexicographically, files sorted by
/// name. All images must be square and the same size.
Dataset load_image_folder(const std::filesystem::path& root);

Dataset materialize(const DatasetSource& source);

/// Keeps `count` randomly chosen classes (seeded), relabelled 0..count-1 in
/// lexicographic order of the kept class names.
Dataset select_classes(const Dataset& data, std::size_t count, std::uint64_t seed);

/// Writes root/<class>/<index>.ppm for every sample.
void write_image_folder(const Dataset& data, const std::filesystem::path& root);

}  // namespace scenenet
