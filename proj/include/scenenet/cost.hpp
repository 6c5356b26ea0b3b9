#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "scenenet/arch.hpp"
#include "scenenet/network.hpp"

namespace scenenet {

// Counting convention: one multiply-accumulate is one FLOP. Convolutions cost
// oh*ow*out_c*in_c*kh*kw, the classifier in*out. Batch-norm, activations,
// pooling, residual adds, and softmax are free.

struct LayerCost {
  std::string path;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  std::string model;
  std::size_t input_h = 0;
  std::size_t input_w = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
  std::vector<LayerCost> per_layer;

  double gflops() const { return static_cast<double>(total_macs) / 1e9; }
  double params_m() const { return static_cast<double>(total_params) / 1e6; }
  /// Totals rounded half-up to two decimals, e.g. "2.00".
  std::string gflops_text() const;
  std::string params_m_text() const;
  /// "<model> <gflops> <params_m>"
  std::string summary_line() const;
  /// Header "layer,macs,params", one row per layer, then a "total" row.
  void write_csv(std::ostream& out) const;
};

/// Learned parameters only; batch-norm running statistics are excluded.
std::uint64_t count_params(const Architecture& arch);
std::uint64_t count_flops(const Architecture& arch, std::size_t input_h, std::size_t input_w);
/// MACs of convolution layers only (classifier excluded).
std::uint64_t count_conv_flops(const Architecture& arch, std::size_t input_h, std::size_t input_w);
/// Parameters of convolution weights only.
std::uint64_t count_conv_params(const Architecture& arch);

CostReport report(const Architecture& arch, std::size_t input_h, std::size_t input_w,
                  std::string model = {});

template <typename T>
std::uint64_t count_params(const Network<T>& net) {
  return count_params(net.architecture());
}
template <typename T>
std::uint64_t count_flops(const Network<T>& net, std::size_t input_h, std::size_t input_w) {
  return count_flops(net.architecture(), input_h, input_w);
}

/// Rounds value/unit half-up to two decimals using integer arithmetic.
std::string format_hundredths(std::uint64_t value, std::uint64_t unit);

/// Short model label, e.g. "resnet50x1", "deep-narrow+dp".
std::string model_label(const ArchSpec& spec);

}  // namespace scenenet
