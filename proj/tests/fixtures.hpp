#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "nodedrop/nodedrop.hpp"
#include "test_util.hpp"

namespace testutil {

using namespace nodedrop;

template <typename T>
struct RandomNet {
  Model<T> model;
  NodeDropConfig cfg;
  Shape sample_shape;
  std::size_t killed = 0;
};

// Small random sequential network: either dense-only on a flat input or
// conv/pool/flatten/dense on a C x 8 x 8 input, in vanilla or batch-norm form.
template <typename T>
RandomNet<T> random_net(Rng& rng, bool bn, std::size_t batch) {
  const bool conv = rng.bernoulli(0.6);
  auto act = [&] {
    if (bn) return ActivationSpec{ActivationKind::relu};
    if (rng.bernoulli(0.5)) return ActivationSpec{ActivationKind::clamped_relu};
    return ActivationSpec{ActivationKind::soft_clamped_relu, rng.uniform(2, 20)};
  };
  auto width = [&] { return static_cast<std::size_t>(2 + rng.below(5)); };
  std::vector<LayerSpec> specs;
  auto hidden = [&](LayerSpec w, std::size_t out) {
    specs.push_back(w);
    if (bn) specs.push_back(BatchNormSpec{out});
    specs.push_back(act());
  };

  Shape sample;
  std::size_t flat = 0;
  if (conv) {
    const std::size_t c0 = 1 + rng.below(3), c1 = width(), c2 = width();
    sample = {c0, 8, 8};
    hidden(Conv2dSpec{c0, c1}, c1);
    if (rng.bernoulli(0.5)) {
      hidden(Conv2dSpec{c1, c2}, c2);
      specs.push_back(MaxPool2Spec{});
      flat = c2 * 16;
    } else {
      specs.push_back(MaxPool2Spec{});
      specs.push_back(MaxPool2Spec{});
      flat = c1 * 4;
    }
    specs.push_back(FlattenSpec{});
  } else {
    flat = 3 + rng.below(10);
    sample = {flat};
  }
  const std::size_t d = width();
  hidden(DenseSpec{flat, d}, d);
  std::size_t in = d;
  if (rng.bernoulli(0.5)) {
    const std::size_t e = width();
    hidden(DenseSpec{d, e}, e);
    in = e;
  }
  specs.push_back(DenseSpec{in, 1 + rng.below(4)});

  RandomNet<T> net;
  net.model = Model<T>::build(sample, specs, rng);
  net.cfg.mode = bn ? NodeDropMode::batch_norm : NodeDropMode::vanilla;
  net.cfg.train_batch_size = batch;
  net.sample_shape = sample;
  if (bn) {
    // Random affine parameters so live channels do not all look alike.
    for (auto& layer : net.model.layers()) {
      if (layer.state.gamma.empty()) continue;
      for (auto& g : layer.state.gamma.storage()) g = static_cast<T>(rng.uniform(-1.5, 1.5));
      for (auto& s : layer.state.beta_shift.storage()) s = static_cast<T>(rng.uniform(-0.5, 0.5));
    }
  }
  return net;
}

// Forces random prunable nodes dead (margin <= 0), keeping at least one live
// node per layer. Returns the number of killed nodes.
template <typename T>
std::size_t kill_random_nodes(RandomNet<T>& net, Rng& rng, double p) {
  std::size_t killed = 0;
  auto& L = net.model.layers();
  for (const PrunableLayer& pl : prunable_layers(net.model, net.cfg)) {
    const std::size_t spare = pl.nodes - 1 - rng.below(pl.nodes);
    for (std::size_t o = 0; o < pl.nodes; ++o) {
      if (o == spare) {
        if (pl.bn_layer) L[*pl.bn_layer].state.beta_shift[o] = static_cast<T>(rng.uniform(0.1, 0.5));
        else L[pl.weight_layer].state.b[o] = static_cast<T>(rng.uniform(0.1, 0.5));
        continue;
      }
      if (!rng.bernoulli(p)) continue;
      ++killed;
      if (pl.bn_layer) {
        LayerState<T>& s = L[*pl.bn_layer].state;
        const T g = rng.bernoulli(0.3) ? T(0) : static_cast<T>(rng.uniform(-0.05, 0.05));
        s.gamma[o] = g;
        s.beta_shift[o] = -std::abs(g) * static_cast<T>(std::sqrt(static_cast<double>(pl.bn_values))) -
                          static_cast<T>(rng.uniform(0.0, 0.5));
        if (bn_node_margin(s.gamma[o], s.beta_shift[o], pl.bn_values) > T(0)) s.beta_shift[o] -= T(1);
        continue;
      }
      LayerState<T>& s = L[pl.weight_layer].state;
      auto row = s.W.row(o);
      if (rng.bernoulli(0.3)) {
        for (T& w : row) w = -std::abs(w);
        s.b[o] = -static_cast<T>(net.cfg.C);
      } else {
        // Mixed-sign row sitting right on the boundary or slightly inside.
        T pos = T(0);
        for (T w : row) pos += std::max(w, T(0));
        s.b[o] = -pos - (rng.bernoulli(0.5) ? T(0) : static_cast<T>(rng.uniform(0.0, 0.1)));
      }
    }
  }
  net.killed += killed;
  return killed;
}

template <typename T>
Tensor<T> unit_batch(const Shape& sample, std::size_t n, Rng& rng) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return random_tensor<T>(s, rng, 0.0, 1.0);
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(T)) != 0) return false;
  return true;
}

}  // namespace testutil
