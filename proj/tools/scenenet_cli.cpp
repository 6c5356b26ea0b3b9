#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scenenet/arch.hpp"
#include "scenenet/cost.hpp"
#include "scenenet/dataset.hpp"
#include "scenenet/fourier.hpp"
#include "scenenet/image_io.hpp"
#include "scenenet/parallel.hpp"
#include "scenenet/train.hpp"

using namespace scenenet;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ValidationError(what + ": cannot parse '" + text + "'");
  return value;
}

// "synthetic[:key=value,...]" or a directory of class folders.
Dataset load_data(const std::string& source) {
  if (source.rfind("synthetic", 0) != 0) return load_image_folder(source);
  SyntheticSpec spec;
  const auto colon = source.find(':');
  if (colon == std::string::npos && source != "synthetic") return load_image_folder(source);
  if (colon != std::string::npos) {
    for (const auto& pair : split(source.substr(colon + 1), ',')) {
      const auto eq = pair.find('=');
      if (eq == std::string::npos) throw ConfigError("data: expected key=value, got '" + pair + "'");
      const std::string key = pair.substr(0, eq), value = pair.substr(eq + 1);
      if (key == "classes")
        spec.num_classes = parse_number<int>(value, "data.classes");
      else if (key == "side")
        spec.image_side = parse_number<std::size_t>(value, "data.side");
      else if (key == "per_class")
        spec.samples_per_class = parse_number<std::size_t>(value, "data.per_class");
      else if (key == "sigma")
        spec.noise_sigma = parse_number<double>(value, "data.sigma");
      else if (key == "seed")
        spec.seed = parse_number<std::uint64_t>(value, "data.seed");
      else
        throw ConfigError("data: unknown key '" + key + "' (classes, side, per_class, sigma, seed)");
    }
  }
  return synthetic_dataset(spec);
}

Dataset load_data(const std::string& source, std::optional<std::size_t> subset, std::uint64_t seed) {
  Dataset data = load_data(source);
  if (subset) data = select_classes(data, *subset, seed);
  return data;
}

std::string shape_text(const Shape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

struct Options {
  std::string arch;
  std::optional<std::size_t> input;
  std::string image;
  std::string kind = "low";
  std::size_t size = 0;
  std::string sizes;
  std::uint64_t seed = 0;
  bool strict = false;
  std::string data = "synthetic";
  std::string out;
  std::string checkpoint;
  std::string csv;
  std::string mask;
  std::string log;
  int epochs = 5;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_step = 30;
  std::optional<std::size_t> classes_subset;
  bool pretty = false;
  SyntheticSpec gen;
};

int run_describe(const Options& o) {
  const ArchSpec spec = load_arch_config(o.arch);
  const Architecture arch = build_architecture(spec);
  const std::size_t side = o.input.value_or(spec.input_h);
  arch.check_input(Shape{1, 3, side, side});
  const auto layers = arch.layers(side, side);
  if (o.pretty) {
    std::size_t wpath = 5, wtype = 4;
    for (const auto& l : layers) {
      wpath = std::max(wpath, l.path.size());
      wtype = std::max(wtype, l.type.size());
    }
    std::cout << std::left << std::setw(static_cast<int>(wpath + 2)) << "layer" << std::setw(static_cast<int>(wtype + 2))
              << "type" << std::setw(14) << "output" << "params\n";
    for (const auto& l : layers)
      std::cout << std::setw(static_cast<int>(wpath + 2)) << l.path << std::setw(static_cast<int>(wtype + 2)) << l.type
                << std::setw(14) << shape_text(l.output) << l.params << "\n";
    std::cout << "blocks " << join(arch.block_counts()) << "\n"
              << "weighted layers " << arch.weighted_depth() << "\n"
              << "params " << count_params(arch) << "\n";
    return 0;
  }
  std::cout << "layer,type,output,params\n";
  for (const auto& l : layers) std::cout << l.path << "," << l.type << "," << shape_text(l.output) << "," << l.params << "\n";
  std::cout << "# blocks " << join(arch.block_counts()) << "\n"
            << "# weighted_layers " << arch.weighted_depth() << "\n"
            << "# params " << count_params(arch) << "\n";
  return 0;
}

int run_cost(const Options& o) {
  const ArchSpec spec = load_arch_config(o.arch);
  const Architecture arch = build_architecture(spec);
  const std::size_t side = o.input.value_or(spec.input_h);
  arch.check_input(Shape{1, 3, side, side});
  const CostReport r = report(arch, side, side);
  if (o.pretty)
    std::cout << "model   " << r.model << "\ninput   " << side << "x" << side << "\nGFLOPs  " << r.gflops_text()
              << "\nparams  " << r.params_m_text() << "M\n";
  else
    std::cout << r.summary_line() << "\n";
  if (!o.csv.empty()) {
    if (o.csv == "-") {
      r.write_csv(std::cout);
    } else {
      std::ofstream f(o.csv, std::ios::trunc);
      if (!f) throw ValidationError("cannot write " + o.csv);
      r.write_csv(f);
    }
  }
  return 0;
}

int run_filter(const Options& o) {
  const auto image = read_pnm(o.image);
  const FilterSpec f{parse_filter_kind(o.kind), o.size};
  const Mask mask = make_mask(f, image.h());
  write_ppm(o.out, filter_for_evaluation(image, f));
  if (!o.mask.empty()) write_mask_ppm(o.mask, mask);
  return 0;
}

int run_sweep(const Options& o) {
  Model model = load_checkpoint(o.checkpoint);
  const Dataset data = load_data(o.data, o.classes_subset, o.seed);
  check_compatible(model, data);
  std::vector<std::size_t> sizes;
  for (const auto& s : split(o.sizes, ',')) sizes.push_back(parse_number<std::size_t>(s, "sizes"));
  if (sizes.empty()) throw ValidationError("sizes: expected a comma-separated list");
  for (std::size_t s : sizes)
    if (s > data.image_side())
      throw ValidationError("sizes: " + std::to_string(s) + " exceeds image side " + std::to_string(data.image_side()));
  const auto rows = sweep(model, data, parse_filter_kind(o.kind), sizes);
  if (o.out.empty()) {
    write_sweep_csv(std::cout, rows);
  } else {
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + o.out);
    write_sweep_csv(f, rows);
  }
  return 0;
}

int run_train(const Options& o) {
  set_strict_determinism(o.strict);
  const ArchSpec spec = load_arch_config(o.arch);
  const Dataset data = load_data(o.data, o.classes_subset, o.seed);
  TrainConfig cfg;
  cfg.base_lr = o.lr;
  cfg.momentum = o.momentum;
  cfg.weight_decay = o.weight_decay;
  cfg.batch_size = o.batch;
  cfg.epochs = o.epochs;
  cfg.lr_step = o.lr_step;
  cfg.seed = o.seed;
  cfg.strict_determinism = o.strict;
  cfg.validate();

  Model model{build<float>(spec, o.seed), {}};
  check_compatible(model, data);

  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log, std::ios::trunc);
    if (!log) throw ValidationError("cannot write " + o.log);
    log.imbue(std::locale::classic());
    write_epoch_csv_header(log);
  }
  write_epoch_csv_header(std::cout);
  train(model, data, cfg, nullptr, [&](const EpochLog& row) {
    write_epoch_csv_row(std::cout, row);
    std::cout.flush();
    if (log.is_open()) write_epoch_csv_row(log, row);
  });
  save_checkpoint(o.out, model);
  std::cout << "# checkpoint " << o.out << "\n# digest " << hex64(checkpoint_digest(o.out)) << "\n";
  return 0;
}

int run_eval(const Options& o) {
  Model model = load_checkpoint(o.checkpoint);
  const Dataset data = load_data(o.data, o.classes_subset, o.seed);
  check_compatible(model, data);
  std::optional<FilterSpec> filter;
  if (o.input) filter = FilterSpec{parse_filter_kind(o.kind), *o.input};
  const Metrics m = evaluate(model, data, filter);
  std::cout << "top1,top5,loss,n\n"
            << format_double(m.top1) << "," << format_double(m.top5) << "," << format_double(m.mean_loss) << ","
            << m.samples << "\n";
  return 0;
}

int run_gen_data(const Options& o) {
  const Dataset data = synthetic_dataset(o.gen);
  write_image_folder(data, o.out);
  std::cout << "# wrote " << data.size() << " images in " << data.num_classes() << " classes to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::locale::global(std::locale::classic());
  std::cout.imbue(std::locale::classic());

  CLI::App app{"Scene-recognition network toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* describe = app.add_subcommand("describe", "List layers, output shapes and parameter counts");
  describe->add_option("--arch", o.arch, "Architecture config file")->required();
  describe->add_option("--input", o.input, "Input side length (default: config input_size)");
  describe->add_flag("--pretty", o.pretty, "Aligned table instead of CSV");

  auto* cost = app.add_subcommand("cost", "Print GFLOPs and parameter count");
  cost->add_option("--arch", o.arch, "Architecture config file")->required();
  cost->add_option("--input", o.input, "Input side length (default: config input_size)");
  cost->add_option("--csv", o.csv, "Write the per-layer CSV here ('-' for stdout)");
  cost->add_flag("--pretty", o.pretty, "Labelled output");

  auto* filter = app.add_subcommand("filter", "Low- or high-pass filter one image");
  filter->add_option("--input", o.image, "Input PPM/PGM image")->required();
  filter->add_option("--kind", o.kind, "low or high")->required();
  filter->add_option("--size", o.size, "Filter size in frequency bins")->required();
  filter->add_option("--out", o.out, "Output PPM")->required();
  filter->add_option("--mask", o.mask, "Also write the mask as a PPM");

  auto* sweep_cmd = app.add_subcommand("sweep", "Accuracy under a range of filter sizes");
  sweep_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  sweep_cmd->add_option("--data", o.data, "Image folder or synthetic[:key=value,...]");
  sweep_cmd->add_option("--kind", o.kind, "low or high");
  sweep_cmd->add_option("--sizes", o.sizes, "Comma-separated filter sizes")->required();
  sweep_cmd->add_option("--classes-subset", o.classes_subset, "Use this many randomly chosen classes");
  sweep_cmd->add_option("--seed", o.seed, "Seed for class sampling");
  sweep_cmd->add_option("--out", o.out, "CSV output (default: stdout)");

  auto* train_cmd = app.add_subcommand("train", "Train a network and save a checkpoint");
  train_cmd->add_option("--arch", o.arch, "Architecture config file")->required();
  train_cmd->add_option("--data", o.data, "Image folder or synthetic[:key=value,...]");
  train_cmd->add_option("--out", o.out, "Checkpoint directory")->required();
  train_cmd->add_option("--epochs", o.epochs, "Epochs");
  train_cmd->add_option("--batch", o.batch, "Batch size");
  train_cmd->add_option("--lr", o.lr, "Base learning rate");
  train_cmd->add_option("--momentum", o.momentum, "Nesterov momentum");
  train_cmd->add_option("--weight-decay", o.weight_decay, "L2 weight decay");
  train_cmd->add_option("--lr-step", o.lr_step, "Epochs between 10x learning-rate drops");
  train_cmd->add_option("--seed", o.seed, "Seed for weights, shuffling and class sampling");
  train_cmd->add_flag("--strict", o.strict, "Single-threaded, bit-reproducible run");
  train_cmd->add_option("--classes-subset", o.classes_subset, "Use this many randomly chosen classes");
  train_cmd->add_option("--log", o.log, "Also write the epoch CSV here");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", o.data, "Image folder or synthetic[:key=value,...]");
  eval_cmd->add_option("--kind", o.kind, "Filter kind, used with --size");
  eval_cmd->add_option("--size", o.input, "Filter every image to this size first");
  eval_cmd->add_option("--classes-subset", o.classes_subset, "Use this many randomly chosen classes");
  eval_cmd->add_option("--seed", o.seed, "Seed for class sampling");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic grating set as an image folder");
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--classes", o.gen.num_classes, "Number of classes");
  gen->add_option("--side", o.gen.image_side, "Image side length");
  gen->add_option("--per-class", o.gen.samples_per_class, "Images per class");
  gen->add_option("--sigma", o.gen.noise_sigma, "Noise standard deviation");
  gen->add_option("--seed", o.gen.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*describe) return run_describe(o);
    if (*cost) return run_cost(o);
    if (*filter) return run_filter(o);
    if (*sweep_cmd) return run_sweep(o);
    if (*train_cmd) return run_train(o);
    if (*eval_cmd) return run_eval(o);
    if (*gen) return run_gen_data(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
