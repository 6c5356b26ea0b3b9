#include "scenenet/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <sstream>

#include "scenenet/parallel.hpp"
#include "scenenet/random.hpp"
#include "scenenet/tensor_io.hpp"

namespace scenenet {

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (lr_step <= 0) throw ConfigError("lr_step must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.base_lr * std::pow(cfg.lr_decay, epoch / cfg.lr_step);
}

template <typename T>
void sgd_update(std::span<T> weights, std::span<const T> grads, std::span<T> velocity, double lr,
                double momentum, double weight_decay) {
  if (weights.size() != grads.size() || weights.size() != velocity.size()) {
    throw DimensionError("sgd_update: weight, gradient, and velocity sizes differ");
  }
  const T step = static_cast<T>(lr);
  const T m = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T g = grads[i] + wd * weights[i];
    velocity[i] = m * velocity[i] + g;
    weights[i] -= step * (g + m * velocity[i]);
  }
}

template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, SgdState<T>& state, const TrainConfig& cfg,
              int epoch) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.value.size(), T{0});
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: optimizer state does not match the parameter list");
  }
  const double lr = learning_rate(cfg, epoch);
  for (std::size_t i = 0; i < params.size(); ++i) {
    sgd_update<T>(params[i].value, params[i].grad, state.velocity[i], lr, cfg.momentum,
                  cfg.weight_decay);
  }
}

template <typename T>
std::size_t topk_hits(const Tensor4<T>& logits, std::span<const int> labels, std::size_t k) {
  const Shape& s = logits.shape();
  if (s.h != 1 || s.w != 1) throw DimensionError("topk expects (n, classes, 1, 1) logits");
  if (labels.size() != s.n) throw DimensionError("topk: label count does not match batch");
  if (k == 0 || k > s.c) {
    throw ValidationError("top-k with k=" + std::to_string(k) + " over " + std::to_string(s.c) +
                          " classes");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= s.c) {
      throw ValidationError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(s.c) + ")");
    }
    const auto row = logits.sample(i);
    const T target = row[static_cast<std::size_t>(label)];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < s.c; ++j) {
      if (row[j] > target || (row[j] == target && j < static_cast<std::size_t>(label))) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return hits;
}

template <typename T>
double topk_accuracy(const Tensor4<T>& logits, std::span<const int> labels, std::size_t k) {
  return static_cast<double>(topk_hits(logits, labels, k)) / static_cast<double>(labels.size());
}

Normalization Normalization::fit(const Dataset& data) {
  Normalization norm;
  const Shape& s = data.images.shape();
  if (s.c != 3) throw DimensionError("normalization expects 3-channel images");
  const std::size_t plane = s.h * s.w;
  const auto count = static_cast<double>(s.n * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
      const float* src = data.images.data() + data.images.index(i, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) sum += src[q];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
      const float* src = data.images.data() + data.images.index(i, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) sq += (src[q] - mean) * (src[q] - mean);
    }
    norm.mean[c] = mean;
    norm.stddev[c] = std::max(std::sqrt(sq / count), 1e-6);
  }
  return norm;
}

Tensor4<float> Normalization::apply(const Tensor4<float>& images) const {
  const Shape& s = images.shape();
  if (s.c != 3) throw DimensionError("normalization expects 3-channel images");
  Tensor4<float> out(s);
  const std::size_t plane = s.h * s.w;
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto m = static_cast<float>(mean[c]);
      const auto inv = static_cast<float>(1.0 / stddev[c]);
      const std::size_t base = images.index(i, c, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) out[base + q] = (images[base + q] - m) * inv;
    }
  }
  return out;
}

void write_epoch_csv_header(std::ostream& out) {
  out << "epoch,lr,train_loss,train_top1,val_top1,val_top5\n";
}

void write_epoch_csv_row(std::ostream& out, const EpochLog& row) {
  out << row.epoch << "," << format_double(row.lr) << "," << format_double(row.train_loss) << ","
      << format_double(row.train_top1) << "," << format_double(row.val_top1) << ","
      << format_double(row.val_top5) << "\n";
}

namespace {

// Names the first layer whose activation goes non-finite on this batch, or the
// first non-finite parameter.
std::string locate_non_finite(Model& model, const Tensor4<float>& batch) {
  std::string first;
  model.net.forward(batch, nn::Mode::Eval, [&](const std::string& path, const Tensor4<float>& t) {
    if (!first.empty()) return;
    if (std::any_of(t.values().begin(), t.values().end(),
                    [](float v) { return !std::isfinite(v); })) {
      first = path;
    }
  });
  if (!first.empty()) return "first non-finite activation at layer '" + first + "'";
  for (const auto& p : model.net.parameters()) {
    if (std::any_of(p.value.begin(), p.value.end(), [](float v) { return !std::isfinite(v); })) {
      return "first non-finite parameter '" + p.name + "'";
    }
  }
  return "activations finite in eval mode; loss overflowed at the classifier 'fc'";
}

class StrictScope {
 public:
  explicit StrictScope(bool strict) : previous_(strict_determinism()) {
    if (strict) set_strict_determinism(true);
  }
  ~StrictScope() { set_strict_determinism(previous_); }
  StrictScope(const StrictScope&) = delete;
  StrictScope& operator=(const StrictScope&) = delete;

 private:
  bool previous_;
};

}  // namespace

void check_compatible(const Model& model, const Dataset& data) {
  const ArchSpec& spec = model.net.architecture().spec;
  if (data.size() == 0) throw ValidationError("dataset is empty");
  if (data.images.h() != data.images.w()) throw ValidationError("dataset images are not square");
  if (data.images.h() != spec.input_h || data.images.w() != spec.input_w) {
    throw ValidationError("dataset image size " + std::to_string(data.images.h()) +
                          " does not match model input " + std::to_string(spec.input_h) + "x" +
                          std::to_string(spec.input_w));
  }
  if (data.num_classes() != static_cast<std::size_t>(spec.num_classes)) {
    throw ValidationError("dataset has " + std::to_string(data.num_classes()) +
                          " classes, model expects " + std::to_string(spec.num_classes));
  }
}

std::vector<EpochLog> train(Model& model, const Dataset& train_set, const TrainConfig& cfg,
                            const Dataset* val_set,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  check_compatible(model, train_set);
  if (val_set) check_compatible(model, *val_set);
  const StrictScope strict(cfg.strict_determinism);

  model.norm = Normalization::fit(train_set);
  const std::size_t count = train_set.size();
  std::vector<ParamRef<float>> params = model.net.parameters();
  SgdState<float> state;
  std::vector<EpochLog> log;

  std::vector<std::size_t> order(count);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Pcg32 rng(cfg.seed, static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t i = count; i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(static_cast<std::uint32_t>(i))]);
    }

    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < count; start += cfg.batch_size) {
      const std::size_t stop = std::min(count, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor4<float> batch = model.norm.apply(train_set.gather(idx));
      const std::vector<int> labels = train_set.gather_labels(idx);

      model.net.zero_grad();
      const Tensor4<float> logits = model.net.forward(batch, nn::Mode::Train);
      const nn::LossResult<float> loss = nn::softmax_cross_entropy(logits, std::span<const int>(labels));
      if (!std::isfinite(loss.loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ": " +
                           locate_non_finite(model, batch));
      }
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(idx.size());
      hits += topk_hits(logits, std::span<const int>(labels), 1);
      model.net.backward(loss.grad);
      sgd_step<float>(params, state, cfg, epoch);
    }

    EpochLog row;
    row.epoch = epoch;
    row.lr = learning_rate(cfg, epoch);
    row.train_loss = loss_sum / static_cast<double>(count);
    row.train_top1 = static_cast<double>(hits) / static_cast<double>(count);
    const Metrics val = evaluate(model, val_set ? *val_set : train_set);
    row.val_top1 = val.top1;
    row.val_top5 = val.top5;
    log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return log;
}

Metrics evaluate(Model& model, const Dataset& data, const std::optional<FilterSpec>& filter,
                 std::size_t batch_size) {
  check_compatible(model, data);
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  const std::size_t top5_k = std::min<std::size_t>(5, data.num_classes());
  Metrics m;
  std::size_t hits1 = 0, hits5 = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t stop = std::min(data.size(), start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor4<float> images = data.gather(idx);
    if (filter) images = filter_for_evaluation(images, *filter);
    const Tensor4<float> logits = model.net.forward(model.norm.apply(images), nn::Mode::Eval);
    const std::vector<int> labels = data.gather_labels(idx);
    const std::span<const int> label_span(labels);
    hits1 += topk_hits(logits, label_span, 1);
    hits5 += topk_hits(logits, label_span, top5_k);
    loss_sum += static_cast<double>(nn::softmax_cross_entropy(logits, label_span).loss) *
                static_cast<double>(idx.size());
  }
  m.samples = data.size();
  m.top1 = static_cast<double>(hits1) / static_cast<double>(m.samples);
  m.top5 = static_cast<double>(hits5) / static_cast<double>(m.samples);
  m.mean_loss = loss_sum / static_cast<double>(m.samples);
  return m;
}

std::vector<SweepRow> sweep(Model& model, const Dataset& data, FilterKind kind,
                            std::span<const std::size_t> sizes, std::size_t batch_size) {
  check_compatible(model, data);
  for (std::size_t size : sizes) {
    if (size > data.image_side()) {
      throw ValidationError("filter size " + std::to_string(size) + " exceeds image side " +
                            std::to_string(data.image_side()));
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t size : sizes) {
    const Metrics m = evaluate(model, data, FilterSpec{kind, size}, batch_size);
    rows.push_back({kind, size, m.top1, m.top5, m.samples});
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "kind,size,top1,top5,n\n";
  for (const auto& r : rows) {
    out << to_string(r.kind) << "," << r.size << "," << format_double(r.top1) << ","
        << format_double(r.top5) << "," << r.samples << "\n";
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kManifestName = "manifest.txt";
constexpr const char* kManifestFormat = "scenenet-checkpoint/1";

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::array<double, 3> parse_triplet(const std::string& key, const std::string& text) {
  std::array<double, 3> out{};
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (double& v : out) {
    while (p < end && *p == ' ') ++p;
    const auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc{}) throw ValidationError("manifest key '" + key + "': bad number list");
    p = next;
  }
  return out;
}

struct Manifest {
  std::string arch_text;
  Normalization norm;
  std::vector<std::pair<std::string, std::string>> tensors;  // name, file
};

Manifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw ValidationError("checkpoint has no manifest: " + (dir / kManifestName).string());
  Manifest m;
  std::string line;
  bool saw_format = false;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("malformed manifest line: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "format") {
      if (value != kManifestFormat) throw ValidationError("unsupported checkpoint format " + value);
      saw_format = true;
    } else if (key == "dtype") {
      if (value != "f32") throw ValidationError("checkpoint dtype must be f32, got " + value);
    } else if (key == "norm_mean") {
      m.norm.mean = parse_triplet(key, value);
    } else if (key == "norm_std") {
      m.norm.stddev = parse_triplet(key, value);
    } else if (key == "tensor") {
      const auto space = value.find(' ');
      if (space == std::string::npos) throw ValidationError("malformed tensor entry: " + value);
      m.tensors.emplace_back(value.substr(0, space), trim(value.substr(space + 1)));
    } else {
      m.arch_text += key + " = " + value + "\n";
    }
  }
  if (!saw_format) throw ValidationError("manifest lacks a format line");
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / kManifestName, std::ios::trunc);
  if (!manifest) throw ValidationError("cannot write checkpoint manifest in " + dir.string());
  manifest << "format = " << kManifestFormat << "\n"
           << "dtype = f32\n";
  write_arch_config(manifest, model.net.architecture().spec);
  const auto triplet = [](const std::array<double, 3>& v) {
    return format_double(v[0]) + " " + format_double(v[1]) + " " + format_double(v[2]);
  };
  manifest << "norm_mean = " << triplet(model.norm.mean) << "\n"
           << "norm_std = " << triplet(model.norm.stddev) << "\n";
  const auto state = model.net.state();
  for (const auto& info : model.net.architecture().parameter_shapes()) {
    const std::string file = info.name + ".tnsr";
    save_tensor(dir / file, state.at(info.name));
    manifest << "tensor = " << info.name << " " << file << "\n";
  }
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  std::istringstream arch_in(m.arch_text);
  const ArchSpec spec = parse_arch_config(arch_in);
  Model model{build<float>(spec, 0), m.norm};
  std::map<std::string, Tensor4<float>> state;
  for (const auto& [name, file] : m.tensors) state.emplace(name, load_tensor<float>(dir / file));
  model.net.load_state(state);
  return model;
}

std::uint64_t checkpoint_digest(const std::filesystem::path& dir) {
  std::uint64_t hash = 14695981039346656037ULL;
  const auto feed = [&](const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + file.string());
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
      hash ^= static_cast<unsigned char>(*it);
      hash *= 1099511628211ULL;
    }
  };
  feed(dir / kManifestName);
  for (const auto& [name, file] : read_manifest(dir).tensors) feed(dir / file);
  return hash;
}

template void sgd_update(std::span<float>, std::span<const float>, std::span<float>, double, double,
                         double);
template void sgd_update(std::span<double>, std::span<const double>, std::span<double>, double,
                         double, double);
template void sgd_step(std::span<const ParamRef<float>>, SgdState<float>&, const TrainConfig&, int);
template void sgd_step(std::span<const ParamRef<double>>, SgdState<double>&, const TrainConfig&,
                       int);
template std::size_t topk_hits(const Tensor4<float>&, std::span<const int>, std::size_t);
template std::size_t topk_hits(const Tensor4<double>&, std::span<const int>, std::size_t);
template double topk_accuracy(const Tensor4<float>&, std::span<const int>, std::size_t);
template double topk_accuracy(const Tensor4<double>&, std::span<const int>, std::size_t);

}  // namespace scenenet
