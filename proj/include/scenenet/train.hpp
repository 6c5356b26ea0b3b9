#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scenenet/dataset.hpp"
#include "scenenet/fourier.hpp"
#include "scenenet/network.hpp"

namespace scenenet {

/// Non-finite loss or parameters during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double base_lr = 0.1;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 1e-4;
  std::size_t batch_size = 256;
  int epochs = 100;
  int lr_step = 30;
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  bool strict_determinism = false;

  void validate() const;
};

/// base_lr * lr_decay ^ floor(epoch / lr_step)
double learning_rate(const TrainConfig& cfg, int epoch);

/// One Nesterov step on a single tensor:
///   g' = g + wd*w;  v = m*v + g';  w -= lr * (g' + m*v)
template <typename T>
void sgd_update(std::span<T> weights, std::span<const T> grads, std::span<T> velocity, double lr,
                double momentum, double weight_decay);

/// Velocity buffers, one per learnable tensor in Network::parameters() order.
template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// Applies sgd_update to every learnable tensor (batch-norm gamma/beta included)
/// at learning_rate(cfg, epoch).
template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, SgdState<T>& state, const TrainConfig& cfg,
              int epoch);

struct Metrics {
  double top1 = 0.0;
  double top5 = 0.0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

/// Number of samples whose label is among the k largest logits; ties rank the
/// lower class index first. Logits are (n, classes, 1, 1).
template <typename T>
std::size_t topk_hits(const Tensor4<T>& logits, std::span<const int> labels, std::size_t k);
template <typename T>
double topk_accuracy(const Tensor4<T>& logits, std::span<const int> labels, std::size_t k);

/// Per-channel input statistics, fit on the training split.
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static Normalization fit(const Dataset& data);
  Tensor4<float> apply(const Tensor4<float>& images) const;
};

/// A trainable network plus the input normalization it was trained with.
struct Model {
  Network<float> net;
  Normalization norm;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;
  double val_top5 = 0.0;
};

void write_epoch_csv_header(std::ostream& out);
void write_epoch_csv_row(std::ostream& out, const EpochLog& row);

/// Trains in place. The model's normalization is refit from `train_set`.
/// Validation metrics come from `val_set`, or the training set in eval mode
/// when absent. `on_epoch` sees each finished epoch.
std::vector<EpochLog> train(Model& model, const Dataset& train_set, const TrainConfig& cfg,
                            const Dataset* val_set = nullptr,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Eval-mode metrics over the whole set, optionally pre-filtering every image.
Metrics evaluate(Model& model, const Dataset& data, const std::optional<FilterSpec>& filter = {},
                 std::size_t batch_size = 64);

/// Throws ValidationError unless the dataset's image size and class count fit the model.
void check_compatible(const Model& model, const Dataset& data);

struct SweepRow {
  FilterKind kind = FilterKind::Low;
  std::size_t size = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t samples = 0;
};

/// One evaluate() per filter size, in the given order.
std::vector<SweepRow> sweep(Model& model, const Dataset& data, FilterKind kind,
                            std::span<const std::size_t> sizes, std::size_t batch_size = 64);
/// Header "kind,size,top1,top5,n".
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// Checkpoints: a directory holding manifest.txt plus one TNSR file per tensor.
void save_checkpoint(const std::filesystem::path& dir, const Model& model);
Model load_checkpoint(const std::filesystem::path& dir);
/// FNV-1a over the manifest and every tensor file, in manifest order.
std::uint64_t checkpoint_digest(const std::filesystem::path& dir);

/// Shortest round-trip decimal text, independent of the global locale.
std::string format_double(double value);

}  // namespace scenenet
