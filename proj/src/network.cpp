#include "scenenet/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "scenenet/random.hpp"

namespace scenenet {

namespace {

template <typename T>
struct ConvUnit {
  ConvSpec spec;
  nn::ConvParams<T> params;
  Tensor4<T> grad;
  Tensor4<T> input;
  Tensor4<T> staged;  // pre-pool activation (ConvThenPool) or pooled input (PoolThenConv)

  explicit ConvUnit(ConvSpec s) : spec(std::move(s)) {
    params.weight = Tensor4<T>(Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
    params.pad_h = params.pad_w = spec.pad;
    params.stride_h = params.stride_w = spec.route == ConvRoute::Strided ? spec.stride : 1;
    grad = Tensor4<T>(params.weight.shape());
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool cache) {
    if (cache) input = x;
    switch (spec.route) {
      case ConvRoute::Plain:
      case ConvRoute::Strided: return nn::conv2d_forward(x, params);
      case ConvRoute::DilatedPool: return nn::dilated_pooling_forward(x, params);
      case ConvRoute::ConvThenPool: {
        Tensor4<T> y = nn::conv2d_forward(x, params);
        Tensor4<T> pooled = nn::pool2d_forward(y, spec.pool);
        if (cache) staged = std::move(y);
        return pooled;
      }
      case ConvRoute::PoolThenConv: {
        Tensor4<T> pooled = nn::pool2d_forward(x, spec.pool);
        Tensor4<T> y = nn::conv2d_forward(pooled, params);
        if (cache) staged = std::move(pooled);
        return y;
      }
    }
    throw std::logic_error("unhandled conv route");
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    nn::ConvGrads<T> g;
    switch (spec.route) {
      case ConvRoute::Plain:
      case ConvRoute::Strided: g = nn::conv2d_backward(input, params, gy); break;
      case ConvRoute::DilatedPool: g = nn::dilated_pooling_backward(input, params, gy); break;
      case ConvRoute::ConvThenPool:
        g = nn::conv2d_backward(input, params, nn::pool2d_backward(staged, spec.pool, gy));
        break;
      case ConvRoute::PoolThenConv:
        g = nn::conv2d_backward(staged, params, gy);
        g.input = nn::pool2d_backward(input, spec.pool, g.input);
        break;
    }
    accumulate(grad, g.weight);
    return std::move(g.input);
  }
};

template <typename T>
struct NormUnit {
  BatchNormSpec spec;
  nn::BatchNormParams<T> params;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
  nn::BatchNormCache<T> cache;

  explicit NormUnit(BatchNormSpec s)
      : spec(std::move(s)),
        params(nn::BatchNormParams<T>::identity(spec.channels)),
        grad_gamma(spec.channels, T{0}),
        grad_beta(spec.channels, T{0}) {}

  Tensor4<T> forward(const Tensor4<T>& x, nn::Mode mode, bool record) {
    return nn::batchnorm_forward(x, params, mode, record ? &cache : nullptr);
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    nn::BatchNormGrads<T> g = nn::batchnorm_backward(cache, params, gy);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      grad_gamma[c] += g.gamma[c];
      grad_beta[c] += g.beta[c];
    }
    return std::move(g.input);
  }
};

template <typename T>
void notify(const ActivationObserver<T>& observer, const std::string& path, const Tensor4<T>& t) {
  if (observer) observer(path, t);
}

template <typename T>
struct Block {
  std::string path;
  std::vector<ConvUnit<T>> convs;
  std::vector<NormUnit<T>> norms;
  std::vector<ConvUnit<T>> shortcut;  // zero or one
  std::vector<NormUnit<T>> shortcut_norm;
  std::vector<Tensor4<T>> pre_relu;
  Tensor4<T> sum;

  explicit Block(const BlockSpec& spec) : path(spec.path) {
    for (const auto& c : spec.convs) convs.emplace_back(c);
    for (const auto& n : spec.norms) norms.emplace_back(n);
    if (spec.shortcut) {
      shortcut.emplace_back(*spec.shortcut);
      shortcut_norm.emplace_back(*spec.shortcut_norm);
    }
    pre_relu.resize(convs.size());
  }

  Tensor4<T> forward(const Tensor4<T>& x, nn::Mode mode, bool record,
                     const ActivationObserver<T>& observer) {
    Tensor4<T> y = x;
    for (std::size_t k = 0; k < convs.size(); ++k) {
      y = convs[k].forward(y, record);
      notify(observer, convs[k].spec.path, y);
      y = norms[k].forward(y, mode, record);
      notify(observer, norms[k].spec.path, y);
      if (k + 1 < convs.size()) {
        if (record) pre_relu[k] = y;
        y = nn::relu_forward(y);
        notify(observer, path + ".relu" + std::to_string(k + 1), y);
      }
    }
    Tensor4<T> identity = x;
    if (!shortcut.empty()) {
      identity = shortcut[0].forward(x, record);
      notify(observer, shortcut[0].spec.path, identity);
      identity = shortcut_norm[0].forward(identity, mode, record);
      notify(observer, shortcut_norm[0].spec.path, identity);
    }
    Tensor4<T> s = add(y, identity);
    notify(observer, path + ".add", s);
    Tensor4<T> out = nn::relu_forward(s);
    notify(observer, path + ".relu", out);
    if (record) sum = std::move(s);
    return out;
  }

  Tensor4<T> backward(const Tensor4<T>& grad_out) {
    const Tensor4<T> grad_sum = nn::relu_backward(sum, grad_out);
    Tensor4<T> g = grad_sum;
    for (std::size_t k = convs.size(); k-- > 0;) {
      if (k + 1 < convs.size()) g = nn::relu_backward(pre_relu[k], g);
      g = norms[k].backward(g);
      g = convs[k].backward(g);
    }
    if (shortcut.empty()) {
      accumulate(g, grad_sum);
    } else {
      accumulate(g, shortcut[0].backward(shortcut_norm[0].backward(grad_sum)));
    }
    return g;
  }
};

template <typename T>
Tensor4<T> vector_tensor(const std::vector<T>& v) {
  return Tensor4<T>::from_data(Shape{1, v.size(), 1, 1}, v);
}

}  // namespace

template <typename T>
struct Network<T>::Impl {
  ConvUnit<T> stem_conv;
  NormUnit<T> stem_norm;
  bool stem_pool;
  std::vector<Block<T>> blocks;
  nn::LinearParams<T> fc;
  Tensor4<T> fc_grad_w;
  std::vector<T> fc_grad_b;

  // Training caches.
  bool has_cache = false;
  Tensor4<T> stem_pre_relu;
  Tensor4<T> stem_pool_input;
  Shape features_shape;
  Tensor4<T> pooled;

  explicit Impl(const Architecture& a)
      : stem_conv(a.stem_conv), stem_norm(a.stem_norm), stem_pool(a.stem_pool) {
    for (const auto& stage : a.stages) {
      for (const auto& blk : stage) blocks.emplace_back(blk);
    }
    fc.weight = Tensor4<T>(Shape{a.num_classes, a.feature_channels, 1, 1});
    fc.bias.assign(a.num_classes, T{0});
    fc_grad_w = Tensor4<T>(fc.weight.shape());
    fc_grad_b.assign(a.num_classes, T{0});
  }

  // Visits every named tensor in parameter_shapes() order.
  template <typename Visit>
  void visit(Visit&& v) {
    const auto conv = [&](ConvUnit<T>& c) {
      v(c.spec.path + ".weight", c.params.weight.values(), c.grad.values(), true);
    };
    const auto norm = [&](NormUnit<T>& n) {
      v(n.spec.path + ".gamma", std::span<T>(n.params.gamma), std::span<T>(n.grad_gamma), true);
      v(n.spec.path + ".beta", std::span<T>(n.params.beta), std::span<T>(n.grad_beta), true);
      v(n.spec.path + ".running_mean", std::span<T>(n.params.running_mean), std::span<T>(),
        false);
      v(n.spec.path + ".running_var", std::span<T>(n.params.running_var), std::span<T>(), false);
    };
    conv(stem_conv);
    norm(stem_norm);
    for (auto& blk : blocks) {
      for (std::size_t k = 0; k < blk.convs.size(); ++k) {
        conv(blk.convs[k]);
        norm(blk.norms[k]);
      }
      if (!blk.shortcut.empty()) {
        conv(blk.shortcut[0]);
        norm(blk.shortcut_norm[0]);
      }
    }
    v(std::string("fc.weight"), fc.weight.values(), fc_grad_w.values(), true);
    v(std::string("fc.bias"), std::span<T>(fc.bias), std::span<T>(fc_grad_b), true);
  }
};

template <typename T>
Network<T>::Network(Architecture arch, std::uint64_t seed)
    : arch_(std::move(arch)), impl_(std::make_unique<Impl>(arch_)) {
  Pcg32 rng(seed);
  const auto init_conv = [&](ConvUnit<T>& c) {
    const double fan_out = static_cast<double>(c.spec.out_channels * c.spec.kernel * c.spec.kernel);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_out));
    for (T& w : c.params.weight.values()) w = static_cast<T>(normal(rng));
  };
  init_conv(impl_->stem_conv);
  for (auto& blk : impl_->blocks) {
    for (auto& c : blk.convs) init_conv(c);
    for (auto& c : blk.shortcut) init_conv(c);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(arch_.feature_channels));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (T& w : impl_->fc.weight.values()) w = static_cast<T>(uniform(rng));
  for (T& b : impl_->fc.bias) b = static_cast<T>(uniform(rng));
}

template <typename T>
Network<T>::~Network() = default;
template <typename T>
Network<T>::Network(Network&&) noexcept = default;
template <typename T>
Network<T>& Network<T>::operator=(Network&&) noexcept = default;

template <typename T>
Tensor4<T> Network<T>::forward(const Tensor4<T>& input, nn::Mode mode,
                               const ActivationObserver<T>& observer) {
  arch_.check_input(input.shape());
  Impl& m = *impl_;
  const bool record = mode == nn::Mode::Train;

  Tensor4<T> y = m.stem_conv.forward(input, record);
  notify(observer, m.stem_conv.spec.path, y);
  y = m.stem_norm.forward(y, mode, record);
  notify(observer, m.stem_norm.spec.path, y);
  if (record) m.stem_pre_relu = y;
  y = nn::relu_forward(y);
  notify(observer, std::string("stem.relu"), y);
  if (m.stem_pool) {
    if (record) m.stem_pool_input = y;
    y = nn::stem_maxpool_forward(y);
    notify(observer, std::string("stem.pool"), y);
  }
  for (auto& blk : m.blocks) y = blk.forward(y, mode, record, observer);

  m.features_shape = y.shape();
  y = nn::global_avg_pool_forward(y);
  notify(observer, std::string("avgpool"), y);
  if (record) m.pooled = y;
  y = nn::linear_forward(y, m.fc);
  notify(observer, std::string("fc"), y);
  m.has_cache = record;
  return y;
}

template <typename T>
Tensor4<T> Network<T>::backward(const Tensor4<T>& grad_logits) {
  Impl& m = *impl_;
  if (!m.has_cache) throw std::logic_error("backward() requires a preceding train-mode forward");
  nn::LinearGrads<T> fc = nn::linear_backward(m.pooled, m.fc, grad_logits);
  accumulate(m.fc_grad_w, fc.weight);
  for (std::size_t o = 0; o < fc.bias.size(); ++o) m.fc_grad_b[o] += fc.bias[o];

  Tensor4<T> g = nn::global_avg_pool_backward(m.features_shape, fc.input);
  for (std::size_t b = m.blocks.size(); b-- > 0;) g = m.blocks[b].backward(g);
  if (m.stem_pool) g = nn::stem_maxpool_backward(m.stem_pool_input, g);
  g = nn::relu_backward(m.stem_pre_relu, g);
  g = m.stem_norm.backward(g);
  return m.stem_conv.backward(g);
}

template <typename T>
void Network<T>::zero_grad() {
  impl_->visit([](const std::string&, std::span<T>, std::span<T> grad, bool) {
    std::fill(grad.begin(), grad.end(), T{0});
  });
}

template <typename T>
std::vector<ParamRef<T>> Network<T>::parameters() {
  std::vector<ParamRef<T>> refs;
  impl_->visit([&](const std::string& name, std::span<T> value, std::span<T> grad, bool learnable) {
    if (learnable) refs.push_back({name, value, grad});
  });
  return refs;
}

template <typename T>
std::map<std::string, Tensor4<T>> Network<T>::state() const {
  std::map<std::string, Tensor4<T>> out;
  const auto shapes = arch_.parameter_shapes();
  std::size_t i = 0;
  impl_->visit([&](const std::string& name, std::span<T> value, std::span<T>, bool) {
    out.emplace(name, Tensor4<T>::from_data(shapes[i++].shape,
                                            std::vector<T>(value.begin(), value.end())));
  });
  return out;
}

template <typename T>
void Network<T>::load_state(const std::map<std::string, Tensor4<T>>& state) {
  const auto shapes = arch_.parameter_shapes();
  for (const auto& info : shapes) {
    const auto it = state.find(info.name);
    if (it == state.end()) throw ValidationError("checkpoint is missing tensor " + info.name);
    if (it->second.shape() != info.shape) {
      throw ValidationError("checkpoint tensor " + info.name + " has shape " +
                            it->second.shape().to_string() + ", expected " +
                            info.shape.to_string());
    }
  }
  impl_->visit([&](const std::string& name, std::span<T> value, std::span<T>, bool) {
    const auto src = state.at(name).values();
    std::copy(src.begin(), src.end(), value.begin());
  });
}

template class Network<float>;
template class Network<double>;

}  // namespace scenenet
