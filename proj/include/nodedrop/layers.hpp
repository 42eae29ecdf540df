#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "nodedrop/activation.hpp"
#include "nodedrop/ops.hpp"
#include "nodedrop/rng.hpp"
#include "nodedrop/tensor.hpp"

namespace nodedrop {

struct DenseSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool operator==(const DenseSpec&) const = default;
};

struct Conv2dSpec {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  bool operator==(const Conv2dSpec&) const = default;
};

struct MaxPool2Spec {
  bool operator==(const MaxPool2Spec&) const = default;
};

struct BatchNormSpec {
  std::size_t channels = 0;
  double eps = 1e-5;
  // Weight of the new batch statistic in the running average.
  double running_momentum = 0.1;
  bool operator==(const BatchNormSpec&) const = default;
};

struct FlattenSpec {
  bool operator==(const FlattenSpec&) const = default;
};

struct ActivationSpec {
  ActivationKind kind = ActivationKind::relu;
  // Sharpness of soft_clamped_relu; ignored by the other kinds.
  double beta = 10.0;
  bool operator==(const ActivationSpec&) const = default;
};

using LayerSpec =
    std::variant<DenseSpec, Conv2dSpec, MaxPool2Spec, BatchNormSpec, FlattenSpec, ActivationSpec>;

std::string layer_name(const LayerSpec& spec);

inline bool has_weights(const LayerSpec& spec) {
  return std::holds_alternative<DenseSpec>(spec) || std::holds_alternative<Conv2dSpec>(spec);
}

// Learned parameters and running statistics. Unused members stay empty.
template <typename T>
struct LayerState {
  Tensor<T> W;  // dense: out x in; conv: out_ch x in_ch x 3 x 3
  Tensor<T> b;
  Tensor<T> gamma;
  Tensor<T> beta_shift;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  bool operator==(const LayerState&) const = default;
};

// Gradients for the learned members of LayerState.
template <typename T>
struct LayerGrads {
  Tensor<T> W;
  Tensor<T> b;
  Tensor<T> gamma;
  Tensor<T> beta_shift;
};

enum class Mode { train, eval };

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> gamma;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  Mode mode = Mode::train;
};

// Everything a layer needs to run its backward pass.
template <typename T>
struct LayerCache {
  Shape input_shape;
  Tensor<T> input;   // dense, activation
  Tensor<T> output;  // soft clamped activation
  Conv2dCache<T> conv;
  std::vector<std::uint8_t> argmax;
  BatchNormCache<T> bn;
};

// Allocates parameters with the shapes `spec` requires: weights fan-in scaled
// uniform, biases 0, gamma 1, shift 0, running mean 0, running var 1.
template <typename T>
LayerState<T> init_state(const LayerSpec& spec, Rng& rng);

// Zero-filled state with the right shapes (used when loading checkpoints).
template <typename T>
LayerState<T> empty_state(const LayerSpec& spec);

// x is N x C or N x C x H x W. Train mode normalizes with the biased batch
// variance over all N*H*W values of a channel; eval uses the running stats.
template <typename T>
Tensor<T> batchnorm_forward(const BatchNormSpec& spec, const LayerState<T>& state,
                            const Tensor<T>& x, Mode mode, BatchNormCache<T>* cache = nullptr);

template <typename T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& grad_y,
                             LayerGrads<T>& grads);

// Exponential moving average update from a train-mode cache.
template <typename T>
void batchnorm_commit_running_stats(const BatchNormSpec& spec, const BatchNormCache<T>& cache,
                                    LayerState<T>& state);

template <typename T>
Tensor<T> layer_forward(const LayerSpec& spec, const LayerState<T>& state, const Tensor<T>& x,
                        Mode mode, LayerCache<T>* cache = nullptr);

// Returns grad w.r.t. the layer input (empty if !want_input_grad) and fills `grads`.
template <typename T>
Tensor<T> layer_backward(const LayerSpec& spec, const LayerState<T>& state,
                         const LayerCache<T>& cache, const Tensor<T>& grad_y,
                         LayerGrads<T>& grads, bool want_input_grad = true);

}  // namespace nodedrop
