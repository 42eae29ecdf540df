#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nodedrop/data.hpp"
#include "nodedrop/model.hpp"
#include "nodedrop/nodedrop.hpp"

namespace nodedrop {

// Mean over the batch of -log softmax(logits)[label], with the gradient
// (softmax - onehot) / N. Uses max-subtraction for stability.
template <typename T>
std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels);

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter optimizer state shaped like the model's LayerGrads.
//   sgd:  v <- momentum * v + g;  w <- w - lr * v
//   adam: bias-corrected first/second moments.
template <typename T>
class Optimizer {
public:
  Optimizer(OptimizerConfig cfg, const Model<T>& model);

  void step(Model<T>& model, const std::vector<LayerGrads<T>>& grads, double lr);

  // Clears the state of one node: its weight row, bias, and (for a
  // BatchNorm layer) its gamma and shift entries.
  void zero_node(std::size_t layer, std::size_t node);

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }
  const std::vector<LayerGrads<T>>& first_moment() const { return m_; }

private:
  OptimizerConfig cfg_;
  std::vector<LayerGrads<T>> m_;
  std::vector<LayerGrads<T>> v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  // (epoch, multiplier): the multiplier applies from that 0-based epoch on.
  std::vector<std::pair<std::size_t, double>> lr_milestones;
  std::size_t epochs = 1;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  NodeDropConfig nodedrop;
  bool augment = false;
  // L2 on Dense/Conv weights; only allowed in batch-norm mode.
  double weight_decay = 0.0;
  std::size_t eval_batch_size = 500;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct MetricsRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double reg_loss = 0.0;
  double test_acc = 0.0;
  std::size_t live_nodes = 0;
  std::size_t live_params = 0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  static constexpr const char* kHeader = "epoch,train_loss,reg_loss,test_acc,live_nodes,live_params";

  std::string to_csv() const;
  static MetricsLog parse_csv(const std::string& text);
};

template <typename T>
double evaluate(const Model<T>& model, const Dataset& ds, std::size_t batch_size = 500);

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_epoch;
  std::function<void(const LivenessReport&)> on_scan;
};

// Runs the full training loop. Deterministic for a given config and seed.
// Throws NumericError on a non-finite loss.
template <typename T>
MetricsLog train(Model<T>& model, const Dataset& train_set, const Dataset& test_set,
                 const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace nodedrop
