#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "scenenet/image_io.hpp"
#include "scenenet/train.hpp"
#include "test_util.hpp"

using namespace scenenet;
using scenenet::testing::random_tensor;

namespace {

// Rank every class by (logit desc, index asc) with a full sort and look up
// the label's position.
std::size_t sorted_hits(const Tensor4<double>& logits, const std::vector<int>& labels, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.n(); ++i) {
    std::vector<std::size_t> order(logits.c());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double la = logits(i, a, 0, 0), lb = logits(i, b, 0, 0);
      return la != lb ? la > lb : a < b;
    });
    const auto at = std::find(order.begin(), order.end(), static_cast<std::size_t>(labels[i])) - order.begin();
    if (static_cast<std::size_t>(at) < k) ++hits;
  }
  return hits;
}

ArchSpec desk_spec(int classes, std::size_t side) {
  ArchSpec s;
  s.depth = 18;
  s.width_factor = 0.25;
  s.num_classes = classes;
  s.stem = StemKind::Small;
  s.input_h = s.input_w = side;
  return s;
}

SyntheticSpec small_set(double sigma, std::uint64_t seed = 3) {
  SyntheticSpec s;
  s.num_classes = 4;
  s.image_side = 16;
  s.samples_per_class = 8;
  s.noise_sigma = sigma;
  s.seed = seed;
  return s;
}

TrainConfig desk_config(int epochs) {
  TrainConfig cfg;
  cfg.base_lr = 0.01;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = 17;
  cfg.strict_determinism = true;
  return cfg;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("scenenet_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  CHECK(learning_rate(cfg, 0) == doctest::Approx(0.1));
  CHECK(learning_rate(cfg, 29) == doctest::Approx(0.1));
  CHECK(learning_rate(cfg, 30) == doctest::Approx(0.01));
  CHECK(learning_rate(cfg, 89) == doctest::Approx(0.001));
  CHECK(learning_rate(cfg, 90) == doctest::Approx(0.0001));
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.base_lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("nesterov update by hand") {
  std::vector<double> w{1.0}, g{0.5}, v{0.0};
  sgd_update<double>(w, g, v, 0.1, 0.9, 0.1);
  // g' = 0.5 + 0.1 = 0.6; v = 0.6; w = 1 - 0.1 * (0.6 + 0.54)
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(w[0] == doctest::Approx(0.886).epsilon(1e-15));
  sgd_update<double>(w, g, v, 0.1, 0.9, 0.1);
  // g' = 0.5 + 0.0886 = 0.5886; v = 0.54 + 0.5886 = 1.1286; w -= 0.1 * (0.5886 + 1.01574)
  CHECK(v[0] == doctest::Approx(1.1286).epsilon(1e-14));
  CHECK(w[0] == doctest::Approx(0.886 - 0.160434).epsilon(1e-14));

  std::vector<double> short_v;
  CHECK_THROWS_AS(sgd_update<double>(w, g, short_v, 0.1, 0.9, 0.0), DimensionError);
}

TEST_CASE("plain gradient descent decreases a convex quadratic monotonically") {
  const std::vector<double> curvature{1.0, 4.0, 10.0};
  std::vector<double> w{1.0, -2.0, 0.5}, v(3, 0.0);
  const auto loss = [&] {
    double f = 0;
    for (std::size_t i = 0; i < 3; ++i) f += 0.5 * curvature[i] * w[i] * w[i];
    return f;
  };
  double prev = loss();
  for (int step = 0; step < 100; ++step) {
    std::vector<double> g(3);
    for (std::size_t i = 0; i < 3; ++i) g[i] = curvature[i] * w[i];
    sgd_update<double>(w, g, v, 0.19, 0.0, 0.0);
    const double now = loss();
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("top-k agrees with a full sort") {
  Pcg32 rng(51);
  for (int batch = 0; batch < 300; ++batch) {
    const std::size_t n = 1 + rng.below(16), classes = 1 + rng.below(12);
    // Small integer logits force plenty of ties.
    Tensor4<double> logits(Shape{n, classes, 1, 1});
    for (double& v : logits.values()) v = static_cast<double>(rng.below(4));
    std::vector<int> labels(n);
    for (int& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint32_t>(classes)));
    for (std::size_t k = 1; k <= classes; ++k) {
      CHECK(topk_hits(logits, std::span<const int>(labels), k) == sorted_hits(logits, labels, k));
    }
    CHECK(topk_hits(logits, std::span<const int>(labels), classes) == n);
  }
  const Tensor4<double> logits(Shape{1, 3, 1, 1}, 0.0);
  const std::vector<int> label{2};
  CHECK(topk_hits(logits, std::span<const int>(label), 2) == 0);
  CHECK_THROWS_AS(topk_hits(logits, std::span<const int>(label), 4), ValidationError);
}

TEST_CASE("synthetic gratings") {
  const auto clean = synthetic_dataset(small_set(0.0));
  CHECK(clean.size() == 32);
  CHECK(clean.num_classes() == 4);
  CHECK(clean.class_names[3] == "grating_003");
  const std::size_t image = 3 * 16 * 16;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const std::size_t first = static_cast<std::size_t>(clean.labels[i]) * 8;
    CHECK(std::equal(clean.images.sample(i).begin(), clean.images.sample(i).end(), clean.images.sample(first).begin()));
  }
  CHECK_FALSE(std::equal(clean.images.sample(0).begin(), clean.images.sample(0).end(), clean.images.sample(8).begin()));

  // Class 0: 2 cycles across 16 columns, constant down each column.
  CHECK(clean.images(0, 0, 0, 2) == doctest::Approx(1.0f));
  CHECK(clean.images(0, 1, 7, 2) == doctest::Approx(1.0f));
  CHECK(clean.images(0, 2, 3, 6) == doctest::Approx(0.0f));
  CHECK(clean.images(0, 2, 3, 0) == doctest::Approx(0.5f));

  const auto a = synthetic_dataset(small_set(0.05, 9));
  const auto b = synthetic_dataset(small_set(0.05, 9));
  const auto c = synthetic_dataset(small_set(0.05, 10));
  CHECK(a.images.vector() == b.images.vector());
  CHECK(a.images.vector() != c.images.vector());
  CHECK(a.labels == b.labels);
  for (float v : a.images.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(image == a.images.sample(0).size());
}

TEST_CASE("gratings are separable by a conv + linear probe") {
  SyntheticSpec spec;
  spec.seed = 5;
  spec.samples_per_class = 40;
  const auto data = synthetic_dataset(spec);

  Pcg32 rng(52);
  nn::ConvParams<float> conv;
  conv.weight = random_tensor<float>(Shape{8, 3, 3, 3}, rng, -0.3, 0.3);
  conv.stride_h = conv.stride_w = 2;
  conv.pad_h = conv.pad_w = 1;
  nn::LinearParams<float> fc{random_tensor<float>(Shape{10, 8 * 16 * 16, 1, 1}, rng, -0.01, 0.01),
                             std::vector<float>(10, 0.0f)};
  const float lr = 0.05f;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < 8; ++epoch) {
    Pcg32 shuffle(7, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(static_cast<std::uint32_t>(i))]);
    for (std::size_t start = 0; start < order.size(); start += 20) {
      const std::span<const std::size_t> idx(order.data() + start, std::min<std::size_t>(20, order.size() - start));
      const auto x = data.gather(idx);
      const auto labels = data.gather_labels(idx);
      const auto h = nn::conv2d_forward(x, conv);
      const auto a = nn::relu_forward(h);
      const auto loss = nn::softmax_cross_entropy(nn::linear_forward(a, fc), std::span<const int>(labels));
      const auto gl = nn::linear_backward(a, fc, loss.grad);
      const auto gc = nn::conv2d_backward(x, conv, nn::relu_backward(h, gl.input));
      for (std::size_t i = 0; i < fc.weight.size(); ++i) fc.weight[i] -= lr * gl.weight[i];
      for (std::size_t i = 0; i < fc.bias.size(); ++i) fc.bias[i] -= lr * gl.bias[i];
      for (std::size_t i = 0; i < conv.weight.size(); ++i) conv.weight[i] -= lr * gc.weight[i];
    }
  }
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto logits = nn::linear_forward(nn::relu_forward(nn::conv2d_forward(data.gather(all), conv)), fc);
  CHECK(topk_accuracy(logits, std::span<const int>(data.labels), 1) >= 0.99);
}

TEST_CASE("image folders") {
  const auto data = synthetic_dataset(small_set(0.05));
  const auto root = scratch("folder");
  write_image_folder(data, root);
  const auto back = load_image_folder(root);
  CHECK(back.class_names == data.class_names);
  CHECK(back.labels == data.labels);
  REQUIRE(back.images.shape() == data.images.shape());
  float worst = 0;
  for (std::size_t i = 0; i < data.images.size(); ++i) worst = std::max(worst, std::abs(back.images[i] - data.images[i]));
  CHECK(worst <= 0.5f / 255.0f + 1e-6f);
  CHECK(materialize(DatasetSource{ImageFolderSource{root}}).labels == data.labels);

  SUBCASE("class subsets are relabelled in name order") {
    const auto subset = select_classes(back, 2, 11);
    CHECK(subset.num_classes() == 2);
    CHECK(subset.size() == 16);
    CHECK(std::is_sorted(subset.class_names.begin(), subset.class_names.end()));
    CHECK(select_classes(back, 2, 11).class_names == subset.class_names);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      CHECK(subset.labels[i] >= 0);
      CHECK(subset.labels[i] < 2);
    }
    CHECK_THROWS_AS(select_classes(back, 5, 1), ValidationError);
  }

  SUBCASE("mismatched sizes are rejected") {
    Tensor4<float> odd(Shape{1, 3, 8, 8}, 0.5f);
    write_ppm(root / "grating_000" / "zz.ppm", odd);
    CHECK_THROWS_AS(load_image_folder(root), ValidationError);
    Tensor4<float> wide(Shape{1, 3, 16, 12}, 0.5f);
    std::filesystem::remove(root / "grating_000" / "zz.ppm");
    write_ppm(root / "grating_001" / "zz.ppm", wide);
    CHECK_THROWS_AS(load_image_folder(root), ValidationError);
  }
  std::filesystem::remove_all(root);
  CHECK_THROWS(load_image_folder(root));
}

TEST_CASE("training") {
  const auto data = synthetic_dataset(small_set(0.0));

  SUBCASE("zero epochs leaves the weights alone") {
    Model m{build<float>(desk_spec(4, 16), 1), {}};
    const auto before = m.net.state();
    CHECK(train(m, data, desk_config(0)).empty());
    CHECK(m.net.state().at("layer2.0.conv1.weight").vector() == before.at("layer2.0.conv1.weight").vector());
  }

  SUBCASE("loss falls every epoch and the set is memorized") {
    Model m{build<float>(desk_spec(4, 16), 1), {}};
    const auto log = train(m, data, desk_config(4));
    REQUIRE(log.size() == 4);
    for (std::size_t e = 1; e < 3; ++e) CHECK(log[e].train_loss < log[e - 1].train_loss);
    for (const auto& row : log) {
      CHECK(row.val_top1 <= row.val_top5);
      CHECK(row.lr == doctest::Approx(0.01));
    }
    CHECK(evaluate(m, data).top1 == 1.0);
  }

  SUBCASE("strict runs are bit-identical") {
    const auto a_dir = scratch("ckpt_a"), b_dir = scratch("ckpt_b");
    Model a{build<float>(desk_spec(4, 16), 2), {}};
    Model b{build<float>(desk_spec(4, 16), 2), {}};
    train(a, data, desk_config(2));
    train(b, data, desk_config(2));
    save_checkpoint(a_dir, a);
    save_checkpoint(b_dir, b);
    CHECK(checkpoint_digest(a_dir) == checkpoint_digest(b_dir));
    std::filesystem::remove_all(a_dir);
    std::filesystem::remove_all(b_dir);
  }

  SUBCASE("incompatible data") {
    Model m{build<float>(desk_spec(5, 16), 1), {}};
    CHECK_THROWS_AS(train(m, data, desk_config(1)), ValidationError);
    Model small{build<float>(desk_spec(4, 8), 1), {}};
    CHECK_THROWS_AS(evaluate(small, data), ValidationError);
  }

  SUBCASE("divergence is reported with the offending layer") {
    Model m{build<float>(desk_spec(4, 16), 1), {}};
    auto cfg = desk_config(3);
    cfg.base_lr = 1e30;
    try {
      train(m, data, cfg);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("non-finite") != std::string::npos);
      CHECK(msg.find("'") != std::string::npos);
    }
  }
}

TEST_CASE("evaluation, sweeps and checkpoints") {
  const auto data = synthetic_dataset(small_set(0.05));
  Model m{build<float>(desk_spec(4, 16), 4), {}};
  train(m, data, desk_config(2));

  const auto plain = evaluate(m, data);
  CHECK(plain.samples == 32);
  CHECK(plain.top1 <= plain.top5);
  CHECK(evaluate(m, data, std::nullopt, 5).top1 == plain.top1);

  const std::size_t sizes[] = {16};
  for (auto kind : {FilterKind::Low, FilterKind::High}) {
    const auto rows = sweep(m, data, kind, sizes);
    CHECK(rows[0].top1 == plain.top1);
    CHECK(rows[0].top5 == plain.top5);
    const std::size_t mid[] = {6};
    const auto filtered = evaluate(m, data, FilterSpec{kind, 6});
    CHECK(sweep(m, data, kind, mid)[0].top1 == filtered.top1);
  }

  SUBCASE("an empty low-pass matches one replayed zero image") {
    const std::size_t zero_size[] = {0};
    const auto row = sweep(m, data, FilterKind::Low, zero_size)[0];
    const auto logits = m.net.forward(m.norm.apply(Tensor4<float>(Shape{1, 3, 16, 16}, 0.0f)), nn::Mode::Eval);
    const auto predicted = static_cast<int>(argmax_channel(logits)(0, 0, 0, 0));
    const auto agree = std::count(data.labels.begin(), data.labels.end(), predicted);
    CHECK(row.top1 == doctest::Approx(static_cast<double>(agree) / 32.0));
  }

  SUBCASE("csv output") {
    std::ostringstream out;
    const std::size_t two[] = {4, 16};
    const auto rows = sweep(m, data, FilterKind::High, two);
    write_sweep_csv(out, rows);
    const std::string text = out.str();
    CHECK(text.rfind("kind,size,top1,top5,n\nhigh,4,", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);

    std::ostringstream log;
    write_epoch_csv_header(log);
    write_epoch_csv_row(log, EpochLog{3, 0.01, 0.5, 0.75, 1.0, 1.0});
    CHECK(log.str() == "epoch,lr,train_loss,train_top1,val_top1,val_top5\n3,0.01,0.5,0.75,1,1\n");
  }

  SUBCASE("checkpoint round trip") {
    const auto dir = scratch("roundtrip");
    save_checkpoint(dir, m);
    const auto digest = checkpoint_digest(dir);
    auto back = load_checkpoint(dir);
    CHECK(back.net.architecture().spec == m.net.architecture().spec);
    CHECK(back.norm.mean == m.norm.mean);
    CHECK(back.norm.stddev == m.norm.stddev);
    for (const auto& [name, t] : m.net.state()) CHECK(back.net.state().at(name).vector() == t.vector());
    const auto again = evaluate(back, data);
    CHECK(again.top1 == plain.top1);
    CHECK(again.mean_loss == plain.mean_loss);

    save_checkpoint(dir, back);
    CHECK(checkpoint_digest(dir) == digest);

    std::ofstream(dir / "manifest.txt", std::ios::app) << "bogus line\n";
    CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_checkpoint(dir), ValidationError);
  }
}

TEST_CASE("random networks score near chance") {
  SyntheticSpec spec;
  spec.num_classes = 10;
  spec.image_side = 16;
  spec.samples_per_class = 20;
  spec.seed = 8;
  const auto data = synthetic_dataset(spec);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model m{build<float>(desk_spec(10, 16), seed), Normalization::fit(data)};
    const double top1 = evaluate(m, data).top1;
    const double p = 0.1, sigma = std::sqrt(p * (1 - p) / 200.0);
    CHECK(std::abs(top1 - p) <= 3 * sigma);
  }
}

TEST_CASE("locale independent number text") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(2.5e-7) == "2.5e-07");
}
