#include "scenenet/cost.hpp"

#include <ostream>
#include <sstream>

namespace scenenet {

std::string format_hundredths(std::uint64_t value, std::uint64_t unit) {
  const std::uint64_t step = unit / 100;
  const std::uint64_t hundredths = (value + step / 2) / step;
  std::string frac = std::to_string(hundredths % 100);
  if (frac.size() < 2) frac.insert(0, "0");
  return std::to_string(hundredths / 100) + "." + frac;
}

std::string CostReport::gflops_text() const {
  return format_hundredths(total_macs, 1'000'000'000ULL);
}

std::string CostReport::params_m_text() const {
  return format_hundredths(total_params, 1'000'000ULL);
}

std::string CostReport::summary_line() const {
  return model + " " + gflops_text() + " " + params_m_text();
}

void CostReport::write_csv(std::ostream& out) const {
  out << "layer,macs,params\n";
  for (const auto& l : per_layer) out << l.path << "," << l.macs << "," << l.params << "\n";
  out << "total," << total_macs << "," << total_params << "\n";
}

std::uint64_t count_params(const Architecture& arch) {
  std::uint64_t total = 0;
  for (const auto& l : arch.layers(arch.spec.input_h, arch.spec.input_w)) total += l.params;
  return total;
}

std::uint64_t count_flops(const Architecture& arch, std::size_t input_h, std::size_t input_w) {
  arch.check_input(Shape{1, 3, input_h, input_w});
  std::uint64_t total = 0;
  for (const auto& l : arch.layers(input_h, input_w)) total += l.macs;
  return total;
}

std::uint64_t count_conv_flops(const Architecture& arch, std::size_t input_h, std::size_t input_w) {
  std::uint64_t total = 0;
  for (const auto& l : arch.layers(input_h, input_w)) {
    if (l.type.rfind("linear", 0) != 0) total += l.macs;
  }
  return total;
}

std::uint64_t count_conv_params(const Architecture& arch) {
  std::uint64_t total = 0;
  total += arch.stem_conv.param_count();
  for (const auto& stage : arch.stages)
    for (const auto& block : stage) {
      for (const auto& c : block.convs) total += c.param_count();
      if (block.shortcut) total += block.shortcut->param_count();
    }
  return total;
}

CostReport report(const Architecture& arch, std::size_t input_h, std::size_t input_w,
                  std::string model) {
  arch.check_input(Shape{1, 3, input_h, input_w});
  CostReport r;
  r.model = model.empty() ? model_label(arch.spec) : std::move(model);
  r.input_h = input_h;
  r.input_w = input_w;
  for (const auto& l : arch.layers(input_h, input_w)) {
    r.per_layer.push_back({l.path, l.macs, l.params});
    r.total_macs += l.macs;
    r.total_params += l.params;
  }
  return r;
}

std::string model_label(const ArchSpec& spec) {
  if (spec.depth == 101 && spec.width_factor == 0.5 && spec.stem == StemKind::ImageNet) {
    switch (spec.downsample) {
      case DownsampleKind::Strided: return "deep-narrow";
      case DownsampleKind::DilatedPool: return "deep-narrow+dp";
      case DownsampleKind::AvgPoolConv: return "resnet-ave";
      case DownsampleKind::MaxPoolConv: return "resnet-max";
    }
  }
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << "resnet" << spec.depth << "x" << spec.width_factor;
  if (spec.downsample != DownsampleKind::Strided) out << "+" << to_string(spec.downsample);
  if (spec.stem == StemKind::Small) out << "-small";
  return out.str();
}

}  // namespace scenenet
