#include "nodedrop/layers.hpp"

#include <cmath>

namespace nodedrop {

std::string_view to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu:
      return "relu";
    case ActivationKind::clamped_relu:
      return "clamped_relu";
    case ActivationKind::soft_clamped_relu:
      return "soft_clamped_relu";
  }
  return "?";
}

ActivationKind parse_activation(std::string_view name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "clamped_relu") return ActivationKind::clamped_relu;
  if (name == "soft_clamped_relu") return ActivationKind::soft_clamped_relu;
  throw ContractError("unknown activation '" + std::string(name) + "'");
}

std::string layer_name(const LayerSpec& spec) {
  struct Visitor {
    std::string operator()(const DenseSpec& s) const {
      return "Dense(" + std::to_string(s.in) + "->" + std::to_string(s.out) + ")";
    }
    std::string operator()(const Conv2dSpec& s) const {
      return "Conv2d(" + std::to_string(s.in_ch) + "->" + std::to_string(s.out_ch) + ")";
    }
    std::string operator()(const MaxPool2Spec&) const { return "MaxPool2"; }
    std::string operator()(const BatchNormSpec& s) const {
      return "BatchNorm(" + std::to_string(s.channels) + ")";
    }
    std::string operator()(const FlattenSpec&) const { return "Flatten"; }
    std::string operator()(const ActivationSpec& s) const {
      return std::string(to_string(s.kind));
    }
  };
  return std::visit(Visitor{}, spec);
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// Channels and per-channel element stride for BN over N x C or N x C x H x W.
struct ChannelLayout {
  std::size_t n, c, spatial;
};

ChannelLayout bn_layout(const Shape& shape, std::size_t channels) {
  if (shape.size() != 2 && shape.size() != 4)
    throw DimensionError("batchnorm expects N x C or N x C x H x W, got " + shape_str(shape));
  if (shape[1] != channels)
    throw DimensionError("batchnorm has " + std::to_string(channels) + " channels, input " +
                         shape_str(shape));
  return {shape[0], shape[1], shape.size() == 4 ? shape[2] * shape[3] : 1};
}

}  // namespace

template <typename T>
LayerState<T> init_state(const LayerSpec& spec, Rng& rng) {
  LayerState<T> s = empty_state<T>(spec);
  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    s.W = uniform_tensor<T>({d->out, d->in}, std::sqrt(6.0 / static_cast<double>(d->in)), rng);
  } else if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    const double fan_in = static_cast<double>(c->in_ch * 9);
    s.W = uniform_tensor<T>({c->out_ch, c->in_ch, 3, 3}, std::sqrt(6.0 / fan_in), rng);
  }
  return s;
}

template <typename T>
LayerState<T> empty_state(const LayerSpec& spec) {
  LayerState<T> s;
  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    s.W = Tensor<T>({d->out, d->in});
    s.b = Tensor<T>({d->out});
  } else if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    s.W = Tensor<T>({c->out_ch, c->in_ch, 3, 3});
    s.b = Tensor<T>({c->out_ch});
  } else if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
    s.gamma = Tensor<T>({bn->channels}, T(1));
    s.beta_shift = Tensor<T>({bn->channels});
    s.running_mean = Tensor<T>({bn->channels});
    s.running_var = Tensor<T>({bn->channels}, T(1));
  }
  return s;
}

template <typename T>
Tensor<T> batchnorm_forward(const BatchNormSpec& spec, const LayerState<T>& state,
                            const Tensor<T>& x, Mode mode, BatchNormCache<T>* cache) {
  const ChannelLayout L = bn_layout(x.shape(), spec.channels);
  const std::size_t m = L.n * L.spatial;
  if (mode == Mode::train && m < 2)
    throw ContractError("batchnorm train mode needs at least 2 values per channel, got " +
                        std::to_string(m));

  std::vector<double> mean(L.c), var(L.c);
  std::vector<T> inv_std(L.c);
  if (mode == Mode::train) {
    // Statistics accumulate in double so rounding cannot push |xhat| past sqrt(m).
    for (std::size_t c = 0; c < L.c; ++c) {
      double sum = 0.0;
      for (std::size_t n = 0; n < L.n; ++n) {
        const T* p = x.data() + (n * L.c + c) * L.spatial;
        for (std::size_t i = 0; i < L.spatial; ++i) sum += static_cast<double>(p[i]);
      }
      mean[c] = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t n = 0; n < L.n; ++n) {
        const T* p = x.data() + (n * L.c + c) * L.spatial;
        for (std::size_t i = 0; i < L.spatial; ++i) {
          const double d = static_cast<double>(p[i]) - mean[c];
          sq += d * d;
        }
      }
      var[c] = sq / static_cast<double>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + spec.eps));
    }
  } else {
    for (std::size_t c = 0; c < L.c; ++c) {
      mean[c] = static_cast<double>(state.running_mean[c]);
      var[c] = static_cast<double>(state.running_var[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + spec.eps));
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < L.n; ++n) {
    for (std::size_t c = 0; c < L.c; ++c) {
      const std::size_t off = (n * L.c + c) * L.spatial;
      const T mu = static_cast<T>(mean[c]);
      const T g = state.gamma[c];
      const T sh = state.beta_shift[c];
      for (std::size_t i = 0; i < L.spatial; ++i) {
        const T xh = (x[off + i] - mu) * inv_std[c];
        xhat[off + i] = xh;
        y[off + i] = g * xh + sh;
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->gamma = state.gamma.storage();
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
    cache->mode = mode;
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& grad_y,
                             LayerGrads<T>& grads) {
  if (cache.xhat.shape() != grad_y.shape())
    throw ContractError("batchnorm_backward: grad " + shape_str(grad_y.shape()) +
                        " does not match cached " + shape_str(cache.xhat.shape()));
  const ChannelLayout L = bn_layout(grad_y.shape(), cache.gamma.size());
  const std::size_t m = L.n * L.spatial;
  grads.gamma = Tensor<T>({L.c});
  grads.beta_shift = Tensor<T>({L.c});
  Tensor<T> gx(grad_y.shape());

  for (std::size_t c = 0; c < L.c; ++c) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < L.n; ++n) {
      const std::size_t off = (n * L.c + c) * L.spatial;
      for (std::size_t i = 0; i < L.spatial; ++i) {
        sum_dy += grad_y[off + i];
        sum_dy_xhat += grad_y[off + i] * cache.xhat[off + i];
      }
    }
    grads.gamma[c] = sum_dy_xhat;
    grads.beta_shift[c] = sum_dy;
    const T g = cache.gamma[c];
    const T inv = cache.inv_std[c];
    if (cache.mode == Mode::eval) {
      for (std::size_t n = 0; n < L.n; ++n) {
        const std::size_t off = (n * L.c + c) * L.spatial;
        for (std::size_t i = 0; i < L.spatial; ++i) gx[off + i] = grad_y[off + i] * g * inv;
      }
      continue;
    }
    const T mm = static_cast<T>(m);
    const T scale = g * inv / mm;
    for (std::size_t n = 0; n < L.n; ++n) {
      const std::size_t off = (n * L.c + c) * L.spatial;
      for (std::size_t i = 0; i < L.spatial; ++i)
        gx[off + i] = scale * (mm * grad_y[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat);
    }
  }
  return gx;
}

template <typename T>
void batchnorm_commit_running_stats(const BatchNormSpec& spec, const BatchNormCache<T>& cache,
                                    LayerState<T>& state) {
  if (cache.mode != Mode::train) return;
  const double mom = spec.running_momentum;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    state.running_mean[c] = static_cast<T>((1.0 - mom) * static_cast<double>(state.running_mean[c]) +
                                           mom * cache.batch_mean[c]);
    state.running_var[c] = static_cast<T>((1.0 - mom) * static_cast<double>(state.running_var[c]) +
                                          mom * cache.batch_var[c]);
  }
}

template <typename T>
Tensor<T> layer_forward(const LayerSpec& spec, const LayerState<T>& state, const Tensor<T>& x,
                        Mode mode, LayerCache<T>* cache) {
  if (cache) cache->input_shape = x.shape();

  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    if (x.rank() != 2 || x.dim(1) != d->in)
      throw DimensionError(layer_name(spec) + " got input " + shape_str(x.shape()));
    Tensor<T> y = matmul(x, transpose(state.W));
    for (std::size_t n = 0; n < y.dim(0); ++n)
      for (std::size_t o = 0; o < d->out; ++o) y.at(n, o) += state.b[o];
    if (cache) cache->input = x;
    return y;
  }
  if (std::holds_alternative<Conv2dSpec>(spec)) {
    return conv2d(x, state.W, state.b, cache ? &cache->conv : nullptr);
  }
  if (std::holds_alternative<MaxPool2Spec>(spec)) {
    MaxPoolResult<T> r = maxpool2d(x);
    if (cache) cache->argmax = std::move(r.argmax);
    return std::move(r.output);
  }
  if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
    return batchnorm_forward(*bn, state, x, mode, cache ? &cache->bn : nullptr);
  }
  if (std::holds_alternative<FlattenSpec>(spec)) {
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  const auto& a = std::get<ActivationSpec>(spec);
  Tensor<T> y = activation_apply(a.kind, static_cast<T>(a.beta), x);
  if (cache) {
    cache->input = x;
    if (a.kind == ActivationKind::soft_clamped_relu) cache->output = y;
  }
  return y;
}

template <typename T>
Tensor<T> layer_backward(const LayerSpec& spec, const LayerState<T>& state,
                         const LayerCache<T>& cache, const Tensor<T>& grad_y,
                         LayerGrads<T>& grads, bool want_input_grad) {
  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    if (cache.input.empty() || grad_y.rank() != 2 || grad_y.dim(1) != d->out ||
        grad_y.dim(0) != cache.input.dim(0))
      throw ContractError(layer_name(spec) + " backward: cache/grad mismatch");
    grads.W = matmul(transpose(grad_y), cache.input);
    grads.b = Tensor<T>({d->out});
    for (std::size_t n = 0; n < grad_y.dim(0); ++n)
      for (std::size_t o = 0; o < d->out; ++o) grads.b[o] += grad_y.at(n, o);
    return want_input_grad ? matmul(grad_y, state.W) : Tensor<T>();
  }
  if (std::holds_alternative<Conv2dSpec>(spec)) {
    Conv2dGrads<T> g = conv2d_grads(cache.conv, grad_y, want_input_grad);
    grads.W = std::move(g.kernels);
    grads.b = std::move(g.bias);
    return std::move(g.input);
  }
  if (std::holds_alternative<MaxPool2Spec>(spec)) {
    return maxpool2d_grad(cache.input_shape, cache.argmax, grad_y);
  }
  if (std::holds_alternative<BatchNormSpec>(spec)) {
    return batchnorm_backward(cache.bn, grad_y, grads);
  }
  if (std::holds_alternative<FlattenSpec>(spec)) {
    return grad_y.reshaped(cache.input_shape);
  }
  const auto& a = std::get<ActivationSpec>(spec);
  if (cache.input.shape() != grad_y.shape())
    throw ContractError(layer_name(spec) + " backward: cache/grad mismatch");
  Tensor<T> gx(grad_y.shape());
  const T beta = static_cast<T>(a.beta);
  if (a.kind == ActivationKind::soft_clamped_relu && cache.output.shape() == grad_y.shape()) {
    // With z = beta (1 - v), beta (1 - y) = softplus(z), so sigmoid(z) = 1 - e^{-beta (1 - y)}.
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T y = cache.output[i];
      gx[i] = y > T(0) ? grad_y[i] * -std::expm1(-beta * (T(1) - y)) : T(0);
    }
    return gx;
  }
  for (std::size_t i = 0; i < gx.size(); ++i)
    gx[i] = grad_y[i] * activate_grad(a.kind, beta, cache.input[i]);
  return gx;
}

#define NODEDROP_INSTANTIATE_LAYERS(T)                                                        \
  template LayerState<T> init_state<T>(const LayerSpec&, Rng&);                               \
  template LayerState<T> empty_state<T>(const LayerSpec&);                                    \
  template Tensor<T> batchnorm_forward(const BatchNormSpec&, const LayerState<T>&,            \
                                       const Tensor<T>&, Mode, BatchNormCache<T>*);           \
  template Tensor<T> batchnorm_backward(const BatchNormCache<T>&, const Tensor<T>&,           \
                                        LayerGrads<T>&);                                      \
  template void batchnorm_commit_running_stats(const BatchNormSpec&, const BatchNormCache<T>&, \
                                               LayerState<T>&);                               \
  template Tensor<T> layer_forward(const LayerSpec&, const LayerState<T>&, const Tensor<T>&,  \
                                   Mode, LayerCache<T>*);                                     \
  template Tensor<T> layer_backward(const LayerSpec&, const LayerState<T>&,                   \
                                    const LayerCache<T>&, const Tensor<T>&, LayerGrads<T>&,   \
                                    bool);

NODEDROP_INSTANTIATE_LAYERS(float)
NODEDROP_INSTANTIATE_LAYERS(double)

}  // namespace nodedrop
