#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "scenenet/tensor.hpp"

namespace scenenet::nn {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Weights are (out_channels, in_channels, kh, kw). Zero padding.
template <typename T>
struct ConvParams {
  Tensor4<T> weight;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::optional<std::vector<T>> bias;

  std::size_t out_channels() const { return weight.n(); }
  std::size_t in_channels() const { return weight.c(); }
  std::size_t kernel_h() const { return weight.h(); }
  std::size_t kernel_w() const { return weight.w(); }
};

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  Tensor4<T> weight;
  std::optional<std::vector<T>> bias;
};

/// oh = floor((h + 2ph - kh) / sh) + 1, likewise for ow. Throws when either is < 1
/// or the channel counts disagree.
template <typename T>
Shape conv2d_output_shape(const Shape& input, const ConvParams<T>& p);

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p);

/// Exact gradients of conv2d_forward; the weight gradient sums over the batch.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                             const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

/// State captured by the forward pass that the backward pass consumes.
template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Eval;
  Tensor4<T> normalized;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  Tensor4<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

/// Train mode normalizes with the biased batch variance and folds the unbiased
/// variance into the running statistics. Eval mode uses the running statistics.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormParams<T>& p, Mode mode,
                             BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BatchNormParams<T>& p,
                                     const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// 2x2 / stride-2 pooling
// ---------------------------------------------------------------------------

enum class PoolKind { Max, Avg, Sum };

template <typename T>
Tensor4<T> pool2d_forward(const Tensor4<T>& x, PoolKind kind);

/// Max routes each window's gradient to its first maximal element in
/// row-major window order.
template <typename T>
Tensor4<T> pool2d_backward(const Tensor4<T>& x, PoolKind kind, const Tensor4<T>& grad_out);

/// 3x3 / stride-2 / pad-1 max pool used by the ImageNet stem.
template <typename T>
Tensor4<T> stem_maxpool_forward(const Tensor4<T>& x);
template <typename T>
Tensor4<T> stem_maxpool_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Phase decomposition and Dilated Pooling
// ---------------------------------------------------------------------------

/// The four (row parity, column parity) sub-grids of a feature map.
template <typename T>
struct PhaseGrids {
  std::array<Tensor4<T>, 4> grids;

  Tensor4<T>& at(std::size_t row_parity, std::size_t col_parity) {
    return grids[2 * row_parity + col_parity];
  }
  const Tensor4<T>& at(std::size_t row_parity, std::size_t col_parity) const {
    return grids[2 * row_parity + col_parity];
  }
};

template <typename T>
PhaseGrids<T> phase_decompose(const Tensor4<T>& x);
template <typename T>
Tensor4<T> phase_reassemble(const PhaseGrids<T>& g);

/// Downsamples by running one shared stride-1 convolution over each of the
/// four phase grids and summing the results. The kernel must be odd with
/// half-kernel padding so the output is exactly (h/2, w/2).
template <typename T>
Tensor4<T> dilated_pooling_forward(const Tensor4<T>& x, const ConvParams<T>& p);

/// Weight (and bias) gradients are summed over the four branches.
template <typename T>
ConvGrads<T> dilated_pooling_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                                      const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Head and activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x);
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out);

template <typename T>
Tensor4<T> global_avg_pool_forward(const Tensor4<T>& x);
template <typename T>
Tensor4<T> global_avg_pool_backward(const Shape& input_shape, const Tensor4<T>& grad_out);

/// Fully connected layer: weight (out, in, 1, 1) over inputs flattened to
/// c*h*w features; output (n, out, 1, 1).
template <typename T>
struct LinearParams {
  Tensor4<T> weight;
  std::vector<T> bias;

  std::size_t out_features() const { return weight.n(); }
  std::size_t in_features() const { return weight.c(); }
};

template <typename T>
struct LinearGrads {
  Tensor4<T> input;
  Tensor4<T> weight;
  std::vector<T> bias;
};

template <typename T>
Tensor4<T> linear_forward(const Tensor4<T>& x, const LinearParams<T>& p);
template <typename T>
LinearGrads<T> linear_backward(const Tensor4<T>& x, const LinearParams<T>& p,
                               const Tensor4<T>& grad_out);

template <typename T>
struct LossResult {
  T loss;
  /// d(mean loss)/d(logits): (softmax - onehot) / n.
  Tensor4<T> grad;
};

/// Mean over the batch of -log softmax(logits)[label]; logits are (n, classes, 1, 1).
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const int> labels);

template <typename T>
std::vector<T> softmax_row(std::span<const T> logits);

}  // namespace scenenet::nn
