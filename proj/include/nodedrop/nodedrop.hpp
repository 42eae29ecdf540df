#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nodedrop/model.hpp"

namespace nodedrop {

enum class NodeDropMode { vanilla, batch_norm };

std::string_view to_string(NodeDropMode mode);
NodeDropMode parse_mode(std::string_view name);

struct NodeDropConfig {
  double lambda = 0.0;
  // Target depth of the dead region: biases are pulled towards -C.
  double C = 1.0;
  NodeDropMode mode = NodeDropMode::vanilla;
  // Training batch size m; batch-norm certificates only hold for this m.
  std::size_t train_batch_size = 0;
  std::size_t scan_every = 1;
  // Zero optimizer state of a node the first time it is found dead.
  bool freeze_dead = true;

  void validate() const;
  bool operator==(const NodeDropConfig&) const = default;
};

// ||max(w, 0)||_1 + b. A value <= 0 certifies the node outputs exactly 0 for
// every input in [0,1]^n, provided it feeds an activation that is 0 on (-inf, 0].
// The sum runs in the order the forward pass uses, so the certificate is exact
// in floating point as well.
template <typename T>
T node_margin(std::span<const T> w, T b);

// |gamma| sqrt(m) + beta_shift. A value <= 0 certifies the post-normalization
// value is <= 0 for every train-mode batch with m values per channel.
template <typename T>
T bn_node_margin(T gamma, T beta_shift, std::size_t m);

// One group of prunable nodes: the rows of a Dense/Conv layer, optionally
// certified through the BatchNorm layer that directly follows it.
struct PrunableLayer {
  std::size_t weight_layer = 0;
  std::optional<std::size_t> bn_layer;
  std::size_t nodes = 0;
  // Values normalized together per channel in one training batch
  // (batch size times spatial positions); batch-norm mode only.
  std::size_t bn_values = 0;
};

// Locates prunable layers and checks the topology supports the certificate.
// Vanilla mode: no BatchNorm; every non-output Dense/Conv is followed by an
// activation and its input is either the [0,1] data or the output of a
// unit-bounded activation (through pooling/flatten only). Batch-norm mode:
// a Dense/Conv followed by BatchNorm then an activation. The output layer is
// never prunable. Throws StructuralError naming the offending layer.
template <typename T>
std::vector<PrunableLayer> prunable_layers(const Model<T>& model, const NodeDropConfig& cfg);

// Vanilla term for the rows of one Dense/Conv state:
// lambda * sum_nodes (||max(w,0)||_1 + |b + C|).
template <typename T>
double regularization_loss(const LayerState<T>& weights, const NodeDropConfig& cfg);

// Batch-norm term: lambda * sum_channels (|gamma| sqrt(m) + |beta_shift + C|).
template <typename T>
double bn_regularization_loss(const LayerState<T>& bn, std::size_t m, const NodeDropConfig& cfg);

// Subgradients of the terms above. d/dw = lambda [w > 0], d/db = lambda sign(b + C),
// d/dgamma = lambda sqrt(m) sign(gamma), d/dbeta_shift = lambda sign(beta_shift + C),
// with sign(0) = 0.
template <typename T>
LayerGrads<T> regularization_grad(const LayerState<T>& weights, const NodeDropConfig& cfg);

template <typename T>
LayerGrads<T> bn_regularization_grad(const LayerState<T>& bn, std::size_t m,
                                     const NodeDropConfig& cfg);

// Whole-network regularizer over every prunable layer.
template <typename T>
double network_regularization_loss(const Model<T>& model, const NodeDropConfig& cfg);

// Adds the regularizer subgradients into `grads` (one entry per layer).
template <typename T>
void add_regularization_grads(const Model<T>& model, const NodeDropConfig& cfg,
                              std::vector<LayerGrads<T>>& grads);

struct LayerLiveness {
  std::size_t layer = 0;  // index of the Dense/Conv layer owning the nodes
  std::optional<std::size_t> bn_layer;
  std::string name;
  std::vector<double> node_margins;
  std::vector<bool> dead_mask;
  std::size_t live_nodes = 0;
  std::size_t dead_nodes = 0;
  std::size_t params = 0;       // parameters of the layer (plus its BatchNorm)
  std::size_t live_params = 0;  // the same after compaction
};

struct LivenessReport {
  NodeDropMode mode = NodeDropMode::vanilla;
  std::vector<LayerLiveness> layers;
  std::size_t live_nodes = 0;
  std::size_t total_nodes = 0;
  std::size_t live_params = 0;
  std::size_t total_params = 0;
  // total_params / live_params; empty when nothing is left.
  std::optional<double> reduction_factor;
  // Identifies the model state the report was produced from.
  std::uint64_t fingerprint = 0;

  std::string to_csv() const;
  // Per-node margins: layer,node,margin,dead.
  std::string margins_csv() const;
  std::string summary() const;
};

template <typename T>
std::uint64_t model_fingerprint(const Model<T>& model);

template <typename T>
LivenessReport scan_network(const Model<T>& model, const NodeDropConfig& cfg);

enum class DegeneratePolicy {
  error,
  // Keep the first (dead) node of a fully dead layer; the network output is
  // then constant along that path but shapes stay valid.
  keep_one,
};

template <typename T>
struct CompactionResult {
  Model<T> model;
  // For every layer, the original indices of the output features (channels
  // for C x H x W outputs, positions for flat outputs) that were kept.
  std::vector<std::vector<std::size_t>> kept;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

// Removes every node the report marks dead, together with its fan-out slots in
// the next parameterized layer. The result is bit-identical in output to the
// original (train-mode output for batch-norm certificates).
template <typename T>
CompactionResult<T> compact(const Model<T>& model, const LivenessReport& report,
                            DegeneratePolicy policy = DegeneratePolicy::error);

}  // namespace nodedrop
