#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nodedrop/layers.hpp"

namespace nodedrop {

template <typename T>
struct Layer {
  LayerSpec spec;
  LayerState<T> state;

  bool operator==(const Layer&) const = default;
};

// Sequential network. The input shape is per sample: C x H x W or a flat F.
template <typename T>
class Model {
public:
  Model() = default;

  // Validates shape compatibility and allocates zeroed state.
  Model(Shape input_shape, std::vector<LayerSpec> specs);

  // Same, with freshly initialized weights.
  static Model build(Shape input_shape, std::vector<LayerSpec> specs, Rng& rng);

  const Shape& input_shape() const { return input_shape_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }

  // Per-sample output shape of every layer; throws DimensionError on mismatch.
  std::vector<Shape> output_shapes() const;
  Shape input_shape_of(std::size_t layer) const;

  Tensor<T> forward(const Tensor<T>& x, Mode mode,
                    std::vector<LayerCache<T>>* caches = nullptr) const;

  // Backpropagates grad_out through all layers; the input gradient of layer 0
  // is not computed.
  void backward(const std::vector<LayerCache<T>>& caches, const Tensor<T>& grad_out,
                std::vector<LayerGrads<T>>& grads) const;

  void commit_running_stats(const std::vector<LayerCache<T>>& caches);

  // Learned parameters only (running statistics are not counted).
  std::size_t param_count() const;

  // Visits every tensor stored in the model, in checkpoint order.
  void for_each_tensor(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;

  template <typename U>
  Model<U> cast() const {
    Model<U> out(input_shape_, specs());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const LayerState<T>& s = layers_[i].state;
      LayerState<U>& d = out.layers()[i].state;
      auto conv = [](const Tensor<T>& t) { return t.empty() ? Tensor<U>() : t.template cast<U>(); };
      d.W = conv(s.W);
      d.b = conv(s.b);
      d.gamma = conv(s.gamma);
      d.beta_shift = conv(s.beta_shift);
      d.running_mean = conv(s.running_mean);
      d.running_var = conv(s.running_var);
    }
    return out;
  }

  std::vector<LayerSpec> specs() const;

  // Index of the last Dense/Conv layer (the output head).
  std::size_t output_layer() const;

  bool operator==(const Model&) const = default;

private:
  Shape input_shape_;
  std::vector<Layer<T>> layers_;
};

std::string describe(const std::vector<LayerSpec>& specs);

}  // namespace nodedrop
