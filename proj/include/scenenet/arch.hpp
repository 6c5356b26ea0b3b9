#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "scenenet/layers.hpp"
#include "scenenet/tensor.hpp"

namespace scenenet {

/// How stage-transition blocks halve the spatial resolution.
enum class DownsampleKind { Strided, DilatedPool, AvgPoolConv, MaxPoolConv };

/// ImageNet stem: 7x7/2 conv + 3x3/2 max-pool. Small stem: 3x3/1 conv only,
/// for 32x32-class inputs.
enum class StemKind { ImageNet, Small };

struct ArchSpec {
  int depth = 50;
  double width_factor = 1.0;
  int num_classes = 1000;
  DownsampleKind downsample = DownsampleKind::Strided;
  std::size_t input_h = 224;
  std::size_t input_w = 224;
  StemKind stem = StemKind::ImageNet;

  /// Throws ConfigError naming the offending field and the supported values.
  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

std::string to_string(DownsampleKind kind);
std::string to_string(StemKind kind);
DownsampleKind parse_downsample(const std::string& text);
StemKind parse_stem(const std::string& text);

/// Plain-text `key = value` form. Keys: depth, width_factor, classes,
/// downsample, input_size, stem. Unknown keys and bad values raise ConfigError.
ArchSpec parse_arch_config(std::istream& in);
ArchSpec load_arch_config(const std::filesystem::path& path);
void write_arch_config(std::ostream& out, const ArchSpec& spec);

/// How a convolution reaches its output resolution.
enum class ConvRoute {
  Plain,        ///< stride 1, same resolution
  Strided,      ///< stride 2
  DilatedPool,  ///< four phase grids through one shared stride-1 conv, summed
  ConvThenPool, ///< stride-1 conv at full resolution, then 2x2 pool
  PoolThenConv, ///< 2x2 pool, then stride-1 conv at half resolution
};

struct ConvSpec {
  std::string path;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  ConvRoute route = ConvRoute::Plain;
  nn::PoolKind pool = nn::PoolKind::Avg;
  bool bias = false;

  std::uint64_t param_count() const;
  /// Output spatial size for an input of (h, w).
  std::pair<std::size_t, std::size_t> output_size(std::size_t h, std::size_t w) const;
  /// Multiply-accumulates for one sample at input (h, w). DilatedPool counts as
  /// its algebraic equivalent: sum-pool (free) + one conv at half resolution.
  std::uint64_t macs(std::size_t h, std::size_t w) const;
};

struct BatchNormSpec {
  std::string path;
  std::size_t channels = 0;
};

struct BlockSpec {
  std::string path;
  bool bottleneck = false;
  std::vector<ConvSpec> convs;
  std::vector<BatchNormSpec> norms;
  std::optional<ConvSpec> shortcut;
  std::optional<BatchNormSpec> shortcut_norm;
};

struct LayerInfo {
  std::string path;
  std::string type;
  Shape output;  ///< per-sample shape, n == 1
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  bool learnable = true;
};

/// Weight-free description of a ResNet-family network.
struct Architecture {
  ArchSpec spec;
  ConvSpec stem_conv;
  BatchNormSpec stem_norm;
  bool stem_pool = true;
  std::vector<std::vector<BlockSpec>> stages;
  std::size_t feature_channels = 0;
  std::size_t num_classes = 0;

  /// Spatial divisor the input must satisfy (32 for the ImageNet stem, 8 for small).
  std::size_t input_divisor() const;
  void check_input(const Shape& input) const;

  std::vector<std::size_t> stage_widths() const;
  std::vector<std::size_t> block_counts() const;
  /// Stem conv + every residual-path conv + classifier (the "depth" of the network).
  std::size_t weighted_depth() const;

  /// Full layer listing (conv, bn, relu, pool, add, linear) at the given input size.
  std::vector<LayerInfo> layers(std::size_t h, std::size_t w) const;
  /// Every named tensor a network of this architecture stores, in a fixed order.
  std::vector<ParamInfo> parameter_shapes() const;
};

/// Supported: depth {18, 50, 101}; width {0.25, 0.5, 1, 2}.
Architecture build_architecture(const ArchSpec& spec);

/// Depth 101, width 0.5, DilatedPool when `with_dp` else Strided.
ArchSpec deep_narrow_spec(int num_classes, bool with_dp);

}  // namespace scenenet
