#include "scenenet/arch.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>

namespace scenenet {

namespace {

constexpr double kSupportedWidths[] = {0.25, 0.5, 1.0, 2.0};
constexpr std::size_t kBaseWidth = 64;

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

std::string route_type(const ConvSpec& c) {
  const std::string pool = c.pool == nn::PoolKind::Max ? "maxpool" : "avgpool";
  switch (c.route) {
    case ConvRoute::Plain: return "conv2d";
    case ConvRoute::Strided: return "conv2d/s" + std::to_string(c.stride);
    case ConvRoute::DilatedPool: return "dilated_pooling";
    case ConvRoute::ConvThenPool: return "conv2d+" + pool;
    case ConvRoute::PoolThenConv: return pool + "+conv2d";
  }
  return "conv2d";
}

ConvSpec make_conv(std::string path, std::size_t in, std::size_t out, std::size_t kernel) {
  ConvSpec c;
  c.path = std::move(path);
  c.in_channels = in;
  c.out_channels = out;
  c.kernel = kernel;
  c.pad = kernel / 2;
  return c;
}

// Sets the downsampling route of a stage-transition convolution. Residual-path
// convs pool after convolving at full resolution in the Avg/Max variants;
// shortcut projections pool first.
void set_downsample(ConvSpec& c, DownsampleKind kind, bool shortcut) {
  switch (kind) {
    case DownsampleKind::Strided:
      c.route = ConvRoute::Strided;
      c.stride = 2;
      break;
    case DownsampleKind::DilatedPool:
      c.route = ConvRoute::DilatedPool;
      break;
    case DownsampleKind::AvgPoolConv:
    case DownsampleKind::MaxPoolConv:
      c.route = shortcut ? ConvRoute::PoolThenConv : ConvRoute::ConvThenPool;
      c.pool = kind == DownsampleKind::AvgPoolConv ? nn::PoolKind::Avg : nn::PoolKind::Max;
      break;
  }
}

}  // namespace

void ArchSpec::validate() const {
  if (depth != 18 && depth != 50 && depth != 101) {
    throw ConfigError("unsupported depth " + std::to_string(depth) +
                      " (supported: 18, 50, 101)");
  }
  if (std::find(std::begin(kSupportedWidths), std::end(kSupportedWidths), width_factor) ==
      std::end(kSupportedWidths)) {
    std::ostringstream msg;
    msg << "unsupported width_factor " << width_factor << " (supported: 0.25, 0.5, 1, 2)";
    throw ConfigError(msg.str());
  }
  if (num_classes < 1) throw ConfigError("classes must be >= 1");
  if (input_h == 0 || input_w == 0) throw ConfigError("input_size must be positive");
}

std::string to_string(DownsampleKind kind) {
  switch (kind) {
    case DownsampleKind::Strided: return "strided";
    case DownsampleKind::DilatedPool: return "dilated_pool";
    case DownsampleKind::AvgPoolConv: return "avg_pool_conv";
    case DownsampleKind::MaxPoolConv: return "max_pool_conv";
  }
  return "strided";
}

std::string to_string(StemKind kind) { return kind == StemKind::Small ? "small" : "imagenet"; }

DownsampleKind parse_downsample(const std::string& text) {
  if (text == "strided") return DownsampleKind::Strided;
  if (text == "dilated_pool" || text == "dp") return DownsampleKind::DilatedPool;
  if (text == "avg_pool_conv" || text == "ave") return DownsampleKind::AvgPoolConv;
  if (text == "max_pool_conv" || text == "max") return DownsampleKind::MaxPoolConv;
  throw ConfigError("config key 'downsample': unsupported value '" + text +
                    "' (supported: strided, dilated_pool, avg_pool_conv, max_pool_conv)");
}

StemKind parse_stem(const std::string& text) {
  if (text == "imagenet") return StemKind::ImageNet;
  if (text == "small") return StemKind::Small;
  throw ConfigError("config key 'stem': unsupported value '" + text +
                    "' (supported: imagenet, small)");
}

ArchSpec parse_arch_config(std::istream& in) {
  ArchSpec spec;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "depth") {
      spec.depth = parse_number<int>(key, value);
    } else if (key == "width_factor") {
      spec.width_factor = parse_number<double>(key, value);
    } else if (key == "classes") {
      spec.num_classes = parse_number<int>(key, value);
    } else if (key == "downsample") {
      spec.downsample = parse_downsample(value);
    } else if (key == "input_size") {
      const auto x = value.find('x');
      if (x == std::string::npos) {
        spec.input_h = spec.input_w = parse_number<std::size_t>(key, value);
      } else {
        spec.input_h = parse_number<std::size_t>(key, trim(value.substr(0, x)));
        spec.input_w = parse_number<std::size_t>(key, trim(value.substr(x + 1)));
      }
    } else if (key == "stem") {
      spec.stem = parse_stem(value);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

ArchSpec load_arch_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open arch config " + path.string());
  return parse_arch_config(in);
}

void write_arch_config(std::ostream& out, const ArchSpec& spec) {
  std::ostringstream wf;
  wf.imbue(std::locale::classic());
  wf << spec.width_factor;
  out << "depth = " << spec.depth << "\n"
      << "width_factor = " << wf.str() << "\n"
      << "classes = " << spec.num_classes << "\n"
      << "downsample = " << to_string(spec.downsample) << "\n"
      << "input_size = " << spec.input_h << "x" << spec.input_w << "\n"
      << "stem = " << to_string(spec.stem) << "\n";
}

// ---------------------------------------------------------------------------

std::uint64_t ConvSpec::param_count() const {
  return static_cast<std::uint64_t>(out_channels) * in_channels * kernel * kernel +
         (bias ? out_channels : 0);
}

std::pair<std::size_t, std::size_t> ConvSpec::output_size(std::size_t h, std::size_t w) const {
  switch (route) {
    case ConvRoute::Plain: return {h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1};
    case ConvRoute::Strided:
      return {(h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1};
    case ConvRoute::DilatedPool:
    case ConvRoute::ConvThenPool:
    case ConvRoute::PoolThenConv: return {h / 2, w / 2};
  }
  return {h, w};
}

std::uint64_t ConvSpec::macs(std::size_t h, std::size_t w) const {
  std::size_t oh = 0, ow = 0;
  if (route == ConvRoute::ConvThenPool) {
    oh = h;
    ow = w;
  } else {
    std::tie(oh, ow) = output_size(h, w);
  }
  return static_cast<std::uint64_t>(oh) * ow * out_channels * in_channels * kernel * kernel;
}

Architecture build_architecture(const ArchSpec& spec) {
  spec.validate();
  Architecture a;
  a.spec = spec;
  const bool bottleneck = spec.depth != 18;
  const auto scaled = [&](std::size_t c) {
    return static_cast<std::size_t>(std::lround(static_cast<double>(c) * spec.width_factor));
  };
  std::vector<std::size_t> blocks;
  switch (spec.depth) {
    case 18: blocks = {2, 2, 2, 2}; break;
    case 50: blocks = {3, 4, 6, 3}; break;
    default: blocks = {3, 4, 23, 3}; break;
  }

  const std::size_t stem_width = scaled(kBaseWidth);
  if (spec.stem == StemKind::ImageNet) {
    a.stem_conv = make_conv("stem.conv", 3, stem_width, 7);
    a.stem_conv.route = ConvRoute::Strided;
    a.stem_conv.stride = 2;
    a.stem_pool = true;
  } else {
    a.stem_conv = make_conv("stem.conv", 3, stem_width, 3);
    a.stem_pool = false;
  }
  a.stem_norm = {"stem.bn", stem_width};

  std::size_t in = stem_width;
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    const std::size_t mid = scaled(kBaseWidth << s);
    const std::size_t out = bottleneck ? mid * 4 : mid;
    std::vector<BlockSpec> stage;
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      const bool transition = s > 0 && b == 0;
      BlockSpec blk;
      blk.path = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
      blk.bottleneck = bottleneck;
      const std::string& p = blk.path;
      if (bottleneck) {
        blk.convs = {make_conv(p + ".conv1", in, mid, 1), make_conv(p + ".conv2", mid, mid, 3),
                     make_conv(p + ".conv3", mid, out, 1)};
        blk.norms = {{p + ".bn1", mid}, {p + ".bn2", mid}, {p + ".bn3", out}};
        if (transition) set_downsample(blk.convs[1], spec.downsample, false);
      } else {
        blk.convs = {make_conv(p + ".conv1", in, mid, 3), make_conv(p + ".conv2", mid, mid, 3)};
        blk.norms = {{p + ".bn1", mid}, {p + ".bn2", mid}};
        if (transition) set_downsample(blk.convs[0], spec.downsample, false);
      }
      if (transition || in != out) {
        blk.shortcut = make_conv(p + ".shortcut.conv", in, out, 1);
        blk.shortcut_norm = BatchNormSpec{p + ".shortcut.bn", out};
        if (transition) set_downsample(*blk.shortcut, spec.downsample, true);
      }
      stage.push_back(std::move(blk));
      in = out;
    }
    a.stages.push_back(std::move(stage));
  }
  a.feature_channels = in;
  a.num_classes = static_cast<std::size_t>(spec.num_classes);
  return a;
}

ArchSpec deep_narrow_spec(int num_classes, bool with_dp) {
  ArchSpec spec;
  spec.depth = 101;
  spec.width_factor = 0.5;
  spec.num_classes = num_classes;
  spec.downsample = with_dp ? DownsampleKind::DilatedPool : DownsampleKind::Strided;
  return spec;
}

std::size_t Architecture::input_divisor() const {
  return spec.stem == StemKind::ImageNet ? 32 : 8;
}

void Architecture::check_input(const Shape& input) const {
  if (input.c != 3) {
    throw DimensionError("network input must have 3 channels, got " + input.to_string());
  }
  const std::size_t d = input_divisor();
  if (input.h % d != 0 || input.w % d != 0) {
    throw DimensionError("network input spatial dims must be divisible by " + std::to_string(d) +
                         ", got " + input.to_string());
  }
}

std::vector<std::size_t> Architecture::stage_widths() const {
  std::vector<std::size_t> widths;
  for (const auto& stage : stages) widths.push_back(stage.back().norms.back().channels);
  return widths;
}

std::vector<std::size_t> Architecture::block_counts() const {
  std::vector<std::size_t> counts;
  for (const auto& stage : stages) counts.push_back(stage.size());
  return counts;
}

std::size_t Architecture::weighted_depth() const {
  std::size_t depth = 2;  // stem conv + classifier
  for (const auto& stage : stages) {
    for (const auto& blk : stage) depth += blk.convs.size();
  }
  return depth;
}

std::vector<LayerInfo> Architecture::layers(std::size_t h, std::size_t w) const {
  std::vector<LayerInfo> out;
  const auto conv = [&](const ConvSpec& c, std::size_t& ch, std::size_t& cw) {
    const std::uint64_t macs = c.macs(ch, cw);
    std::tie(ch, cw) = c.output_size(ch, cw);
    out.push_back({c.path, route_type(c), Shape{1, c.out_channels, ch, cw}, c.param_count(), macs});
  };
  const auto norm = [&](const BatchNormSpec& b, std::size_t ch, std::size_t cw) {
    out.push_back({b.path, "batchnorm", Shape{1, b.channels, ch, cw}, 2ULL * b.channels, 0});
  };
  const auto simple = [&](std::string path, std::string type, Shape s) {
    out.push_back({std::move(path), std::move(type), s, 0, 0});
  };

  conv(stem_conv, h, w);
  norm(stem_norm, h, w);
  simple("stem.relu", "relu", Shape{1, stem_norm.channels, h, w});
  if (stem_pool) {
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
    simple("stem.pool", "maxpool3x3/s2", Shape{1, stem_norm.channels, h, w});
  }
  for (const auto& stage : stages) {
    for (const auto& blk : stage) {
      const std::size_t in_h = h, in_w = w;
      for (std::size_t k = 0; k < blk.convs.size(); ++k) {
        conv(blk.convs[k], h, w);
        norm(blk.norms[k], h, w);
        if (k + 1 < blk.convs.size()) {
          simple(blk.path + ".relu" + std::to_string(k + 1), "relu",
                 Shape{1, blk.norms[k].channels, h, w});
        }
      }
      if (blk.shortcut) {
        std::size_t sh = in_h, sw = in_w;
        conv(*blk.shortcut, sh, sw);
        norm(*blk.shortcut_norm, sh, sw);
      }
      const std::size_t channels = blk.norms.back().channels;
      simple(blk.path + ".add", "add", Shape{1, channels, h, w});
      simple(blk.path + ".relu", "relu", Shape{1, channels, h, w});
    }
  }
  simple("avgpool", "global_avg_pool", Shape{1, feature_channels, 1, 1});
  out.push_back({"fc",
                 "linear(" + std::to_string(feature_channels) + "->" + std::to_string(num_classes) + ")",
                 Shape{1, num_classes, 1, 1},
                 static_cast<std::uint64_t>(feature_channels) * num_classes + num_classes,
                 static_cast<std::uint64_t>(feature_channels) * num_classes});
  return out;
}

std::vector<ParamInfo> Architecture::parameter_shapes() const {
  std::vector<ParamInfo> params;
  const auto conv = [&](const ConvSpec& c) {
    params.push_back(
        {c.path + ".weight", Shape{c.out_channels, c.in_channels, c.kernel, c.kernel}, true});
  };
  const auto norm = [&](const BatchNormSpec& b) {
    const Shape s{1, b.channels, 1, 1};
    params.push_back({b.path + ".gamma", s, true});
    params.push_back({b.path + ".beta", s, true});
    params.push_back({b.path + ".running_mean", s, false});
    params.push_back({b.path + ".running_var", s, false});
  };
  conv(stem_conv);
  norm(stem_norm);
  for (const auto& stage : stages) {
    for (const auto& blk : stage) {
      for (std::size_t k = 0; k < blk.convs.size(); ++k) {
        conv(blk.convs[k]);
        norm(blk.norms[k]);
      }
      if (blk.shortcut) {
        conv(*blk.shortcut);
        norm(*blk.shortcut_norm);
      }
    }
  }
  params.push_back({"fc.weight", Shape{num_classes, feature_channels, 1, 1}, true});
  params.push_back({"fc.bias", Shape{1, num_classes, 1, 1}, true});
  return params;
}

}  // namespace scenenet
