// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "scenenet/cost.hpp"
#include "scenenet/fourier.hpp"
#include "scenenet/parallel.hpp"
#include "scenenet/train.hpp"
#include "test_util.hpp"

using namespace scenenet;
using scenenet::testing::max_relative_error;
using scenenet::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records a failed sub-check without stopping the criterion.
struct Checker {
  Outcome out;
  std::ostringstream note;
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      out.pass = false;
      note << (note.tellp() > 0 ? "; " : "") << "failed: " << what;
    }
  }
  Outcome done(const std::string& summary) {
    out.detail = summary + (note.tellp() > 0 ? " | " + note.str() : "");
    return out;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

bool within(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

CostReport cost_of(const ArchSpec& s) { return report(build_architecture(s), 224, 224, model_label(s)); }

ArchSpec resnet50(double width, int classes) {
  ArchSpec s;
  s.width_factor = width;
  s.num_classes = classes;
  return s;
}

Outcome cost_parity() {
  Checker c;
  struct Row {
    ArchSpec spec;
    double gflops, params_m;
  };
  const Row rows[] = {
      {resnet50(1, 365), 4.12, 24.26},          {resnet50(1, 1000), 4.12, 25.56},
      {resnet50(0.5, 365), 1.07, 6.27},         {deep_narrow_spec(365, false), 2.00, 11.03},
      {deep_narrow_spec(1000, false), 2.00, 11.68},
  };
  std::string summary;
  for (const auto& row : rows) {
    const auto r = cost_of(row.spec);
    summary += (summary.empty() ? "" : ", ") + r.model + "@" + std::to_string(row.spec.num_classes) + " " +
               fmt(r.gflops()) + "/" + fmt(r.params_m());
    c.expect(within(r.gflops(), row.gflops, 0.02), r.model + " GFLOPs " + fmt(r.gflops()) + " vs " + fmt(row.gflops));
    c.expect(within(r.params_m(), row.params_m, 0.01),
             r.model + " params " + fmt(r.params_m()) + "M vs " + fmt(row.params_m));
  }
  const double full = static_cast<double>(count_conv_params(build_architecture(resnet50(1, 365))));
  const double quarter = static_cast<double>(count_conv_params(build_architecture(resnet50(0.25, 365))));
  c.expect(within(quarter, full / 16, 0.03), "x0.25 conv params " + fmt(quarter) + " vs " + fmt(full / 16));
  return c.done(summary + ", x0.25 conv params ratio " + fmt(quarter / (full / 16)));
}

Outcome dp_parity() {
  Checker c;
  for (int classes : {365, 1000}) {
    const auto dn = cost_of(deep_narrow_spec(classes, false));
    const auto dp = cost_of(deep_narrow_spec(classes, true));
    c.expect(dn.total_macs == dp.total_macs && dn.total_params == dp.total_params, "totals @" + std::to_string(classes));
    c.expect(dn.per_layer.size() == dp.per_layer.size(), "layer count");
    for (std::size_t i = 0; i < std::min(dn.per_layer.size(), dp.per_layer.size()); ++i)
      c.expect(dn.per_layer[i].path == dp.per_layer[i].path && dn.per_layer[i].macs == dp.per_layer[i].macs &&
                   dn.per_layer[i].params == dp.per_layer[i].params,
               "layer " + dn.per_layer[i].path);
    const auto a = build_architecture(deep_narrow_spec(classes, false)).parameter_shapes();
    const auto b = build_architecture(deep_narrow_spec(classes, true)).parameter_shapes();
    c.expect(a.size() == b.size(), "parameter tensor count");
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
      c.expect(a[i].name == b[i].name && a[i].shape == b[i].shape, "tensor " + a[i].name);
  }
  const auto r = cost_of(deep_narrow_spec(365, true));
  return c.done(std::to_string(r.per_layer.size()) + " layers identical, " + std::to_string(r.total_macs) + " MACs, " +
                std::to_string(r.total_params) + " params");
}

Outcome baseline_separation() {
  Checker c;
  const auto dn = cost_of(deep_narrow_spec(365, false));
  std::string summary;
  for (auto ds : {DownsampleKind::AvgPoolConv, DownsampleKind::MaxPoolConv}) {
    auto s = deep_narrow_spec(365, false);
    s.downsample = ds;
    const auto r = cost_of(s);
    summary += (summary.empty() ? "" : ", ") + r.summary_line();
    c.expect(within(r.gflops(), 2.26, 0.03), r.model + " GFLOPs " + fmt(r.gflops()));
    c.expect(r.total_params == dn.total_params, r.model + " params differ from deep-narrow");
    c.expect(within(r.params_m(), 11.03, 0.01), r.model + " params " + fmt(r.params_m()));
  }
  return c.done(summary);
}

Outcome dp_identity() {
  Checker c;
  Pcg32 rng(2024);
  const std::size_t kernels[] = {1, 3}, channels[] = {1, 3, 8}, sides[] = {4, 8, 16};
  double worst = 0;
  int cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = kernels[trial % 2], ch = channels[(trial / 2) % 3], side = sides[(trial / 6) % 3];
    const auto x = random_tensor(Shape{1 + rng.below(2), ch, side, side}, rng);
    nn::ConvParams<double> p;
    p.weight = random_tensor(Shape{1 + rng.below(8), ch, k, k}, rng);
    p.pad_h = p.pad_w = k / 2;
    if (trial % 4 == 3) p.bias = scenenet::testing::random_vector<double>(p.weight.n(), rng);
    const double err =
        max_relative_error(nn::dilated_pooling_forward(x, p), nn::conv2d_forward(nn::pool2d_forward(x, nn::PoolKind::Sum), p));
    worst = std::max(worst, err);
    ++cases;
  }
  c.expect(worst <= 1e-10, "max relative error " + fmt(worst));
  return c.done(std::to_string(cases) + " cases, max relative error " + fmt(worst, 3));
}

Outcome gradient_suite() {
  Checker c;
  Pcg32 rng(77);
  constexpr int kTrials = 25;
  std::string summary;
  for (const auto& g : scenenet::testing::all_gradchecks()) {
    double worst = 0;
    for (int t = 0; t < kTrials; ++t) worst = std::max(worst, g.run(rng));
    c.expect(worst <= 1e-4, g.layer + " error " + fmt(worst));
    summary += (summary.empty() ? "" : ", ") + g.layer + " " + fmt(worst, 2);
  }
  return c.done(std::to_string(kTrials) + " configs each: " + summary);
}

Outcome fft_suite() {
  Checker c;
  Pcg32 rng(5);
  double roundtrip = 0, parseval = 0, complement = 0, identity = 0;
  for (std::size_t n : {8u, 32u, 224u}) {
    const auto x = random_tensor(Shape{1, 3, n, n}, rng, 0.0, 1.0);
    const auto spec = fft2d(x);
    roundtrip = std::max(roundtrip, max_relative_error(ifft2d(spec), x));
    double e_spec = 0, e_img = 0;
    for (const auto& b : spec.bins) e_spec += std::norm(b);
    for (double v : x.values()) e_img += v * v;
    parseval = std::max(parseval, std::abs(e_spec - e_img) / e_img);
    for (std::size_t s : {std::size_t{0}, n / 4, n / 2, 3 * n / 4, n}) {
      const auto sum = add(apply_filter(x, {FilterKind::Low, s}), apply_filter(x, {FilterKind::High, n - s}));
      complement = std::max(complement, max_relative_error(sum, x));
    }
    identity = std::max(identity, max_relative_error(apply_filter(x, {FilterKind::Low, n}), x));
    identity = std::max(identity, max_relative_error(apply_filter(x, {FilterKind::High, n}), x));
    c.expect(make_mask({FilterKind::Low, n}, n).all_ones() && make_mask({FilterKind::High, n}, n).all_ones(),
             "full-size masks at N=" + std::to_string(n));
  }
  c.expect(roundtrip <= 1e-10, "roundtrip " + fmt(roundtrip));
  c.expect(parseval <= 1e-8, "Parseval " + fmt(parseval));
  c.expect(complement <= 1e-8, "complement " + fmt(complement));
  c.expect(identity <= 1e-8, "identity " + fmt(identity));
  return c.done("N in {8,32,224}: roundtrip " + fmt(roundtrip, 2) + ", Parseval " + fmt(parseval, 2) + ", complement " +
                fmt(complement, 2) + ", identity " + fmt(identity, 2));
}

ArchSpec desk_spec() {
  ArchSpec s;
  s.depth = 18;
  s.width_factor = 0.25;
  s.num_classes = 10;
  s.stem = StemKind::Small;
  s.input_h = s.input_w = 32;
  return s;
}

SyntheticSpec desk_data(std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.num_classes = 10;
  s.image_side = 32;
  s.samples_per_class = per_class;
  s.noise_sigma = 0.05;
  s.seed = seed;
  return s;
}

TrainConfig desk_config() {
  TrainConfig cfg;
  cfg.base_lr = 0.01;
  cfg.batch_size = 32;
  cfg.epochs = 5;
  cfg.seed = 7;
  cfg.strict_determinism = true;
  return cfg;
}

// Filled by desk_training, reused by the sweep.
std::optional<Model> g_desk_model;

Outcome desk_training() {
  Checker c;
  set_strict_determinism(true);
  const Dataset data = synthetic_dataset(desk_data(200, 1));
  const auto root = std::filesystem::temp_directory_path() / "scenenet_acceptance";
  std::filesystem::remove_all(root);

  std::uint64_t digests[2] = {0, 0};
  double best = 0;
  int reached = -1;
  double seconds[2] = {0, 0};
  for (int run = 0; run < 2; ++run) {
    const auto t0 = std::chrono::steady_clock::now();
    Model model{build<float>(desk_spec(), 7), {}};
    const auto log = train(model, data, desk_config());
    seconds[run] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto dir = root / ("run" + std::to_string(run));
    save_checkpoint(dir, model);
    digests[run] = checkpoint_digest(dir);
    if (run == 0) {
      for (const auto& e : log) {
        std::printf("  epoch %d train_loss %s train_top1 %s eval_top1 %s\n", e.epoch, fmt(e.train_loss).c_str(),
                    fmt(e.train_top1).c_str(), fmt(e.val_top1).c_str());
        best = std::max(best, e.val_top1);
        if (reached < 0 && e.val_top1 >= 0.95) reached = e.epoch + 1;
      }
      g_desk_model.emplace(std::move(model));
    }
  }
  std::filesystem::remove_all(root);
  c.expect(best >= 0.95, "best train top-1 " + fmt(best));
  c.expect(digests[0] == digests[1], "checkpoint digests differ");
  c.expect(seconds[0] < 600 && seconds[1] < 600, "runtime over 10 min");
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(digests[0]));
  return c.done("train top-1 " + fmt(best) + (reached > 0 ? " (>= 0.95 at epoch " + std::to_string(reached) + ")" : "") +
                ", digests " + hex + " x2, " + fmt(seconds[0], 3) + " s + " + fmt(seconds[1], 3) + " s");
}

Outcome sweep_sanity() {
  Checker c;
  if (!g_desk_model) {
    c.expect(false, "no trained model");
    return c.done("skipped");
  }
  // Fresh draws from the same generator.
  const Dataset held_out = synthetic_dataset(desk_data(50, 2));
  const std::size_t n = held_out.image_side();
  const std::vector<std::size_t> low_sizes{n / 8, n};
  const std::vector<std::size_t> high_sizes{n / 8, n / 4, n / 2, 3 * n / 4, n};
  const auto low = sweep(*g_desk_model, held_out, FilterKind::Low, low_sizes);
  const auto high = sweep(*g_desk_model, held_out, FilterKind::High, high_sizes);
  c.expect(low[1].top1 >= low[0].top1, "low-pass top-1 at N below N/8");
  for (std::size_t i = 1; i < high.size(); ++i)
    c.expect(high[i].top1 >= high[i - 1].top1 - 0.02, "high-pass drop at size " + std::to_string(high[i].size));
  std::string text = "low " + std::to_string(low[0].size) + ":" + fmt(low[0].top1, 3) + " " +
                     std::to_string(low[1].size) + ":" + fmt(low[1].top1, 3) + "; high";
  for (const auto& r : high) text += " " + std::to_string(r.size) + ":" + fmt(r.top1, 3);
  return c.done(text);
}

std::size_t sorted_hits(const std::vector<double>& logits, std::size_t classes, const std::vector<int>& labels,
                        std::size_t k) {
  std::size_t hits = 0;
  std::vector<std::size_t> order(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[i * classes + a] > logits[i * classes + b]; });
    const auto end = order.begin() + static_cast<std::ptrdiff_t>(k);
    hits += std::find(order.begin(), end, static_cast<std::size_t>(labels[i])) != end;
  }
  return hits;
}

Outcome metric_oracle() {
  Checker c;
  Pcg32 rng(99);
  int mismatches = 0;
  for (int batch = 0; batch < 1000; ++batch) {
    const std::size_t n = 1 + rng.below(64), classes = 2 + rng.below(19);
    const bool coarse = batch % 2 == 0;  // small integer logits force ties
    std::vector<double> v(n * classes);
    for (auto& x : v) x = coarse ? static_cast<double>(rng.below(4)) : rng.uniform() * 2 - 1;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint32_t>(classes)));
    const auto logits = Tensor4<double>::from_data(Shape{n, classes, 1, 1}, v);
    for (std::size_t k : {std::size_t{1}, std::size_t{5}}) {
      if (k > classes) continue;
      const std::size_t expect = sorted_hits(v, classes, labels, k);
      const bool ok = topk_hits(logits, labels, k) == expect &&
                      topk_accuracy(logits, labels, k) == static_cast<double>(expect) / static_cast<double>(n);
      if (!ok) ++mismatches;
    }
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " mismatches");
  return c.done("1000 batches, top-1 and top-5 (k <= classes), " + std::to_string(mismatches) + " mismatches");
}

}  // namespace

int main() {
  struct Criterion {
    std::string name;
    std::function<Outcome()> run;
    double budget_s;
  };
  const std::vector<Criterion> criteria = {
      {"cost parity", cost_parity, 1},
      {"dilated pooling cost parity", dp_parity, 1e9},
      {"pool baselines", baseline_separation, 1e9},
      {"dilated pooling identity", dp_identity, 30},
      {"gradient suite", gradient_suite, 300},
      {"fft and filter suite", fft_suite, 1e9},
      {"desk-scale training", desk_training, 1200},
      {"filter sweep sanity", sweep_sanity, 1e9},
      {"top-k metric oracle", metric_oracle, 1e9},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o = criteria[i].run();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > criteria[i].budget_s) {
      o.pass = false;
      o.detail += " | over time budget of " + fmt(criteria[i].budget_s) + " s";
    }
    failed += !o.pass;
    std::printf("%s %zu %s (%.2f s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name.c_str(), s,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
