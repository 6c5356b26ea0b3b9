#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scenenet/arch.hpp"
#include "scenenet/layers.hpp"

namespace scenenet {

/// Learnable tensor and its gradient, as seen by the optimizer.
template <typename T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
};

/// Called with (layer path, activation) after every layer of a forward pass.
template <typename T>
using ActivationObserver = std::function<void(const std::string&, const Tensor4<T>&)>;

/// A materialized Architecture: parameters, gradients, and the activation
/// caches a training forward pass leaves for backward.
template <typename T>
class Network {
 public:
  /// Conv weights ~ N(0, 2/fan_out); batch-norm gamma=1, beta=0; classifier
  /// weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Network(Architecture arch, std::uint64_t seed);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const Architecture& architecture() const { return arch_; }

  /// Input (n, 3, h, w) -> logits (n, classes, 1, 1). Train mode updates the
  /// batch-norm running statistics and caches activations for backward().
  Tensor4<T> forward(const Tensor4<T>& input, nn::Mode mode,
                     const ActivationObserver<T>& observer = {});

  /// Back-propagates d(loss)/d(logits) through the last training forward pass,
  /// accumulating into the parameter gradients. Returns d(loss)/d(input).
  Tensor4<T> backward(const Tensor4<T>& grad_logits);

  void zero_grad();
  std::vector<ParamRef<T>> parameters();

  /// Every named tensor (learnable and running statistics), keyed by name.
  std::map<std::string, Tensor4<T>> state() const;
  /// Replaces named tensors; names and shapes must match parameter_shapes().
  void load_state(const std::map<std::string, Tensor4<T>>& state);

 private:
  struct Impl;
  Architecture arch_;
  std::unique_ptr<Impl> impl_;
};

/// build(spec) in the spec's numeric type.
template <typename T>
Network<T> build(const ArchSpec& spec, std::uint64_t seed) {
  return Network<T>(build_architecture(spec), seed);
}

template <typename T>
Network<T> deep_narrow(int num_classes, bool with_dp, std::uint64_t seed) {
  return build<T>(deep_narrow_spec(num_classes, with_dp), seed);
}

}  // namespace scenenet
