#include "nodedrop/train.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace nodedrop {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ContractError("unknown optimizer '" + std::string(name) + "' (adam|sgd)");
}

template <typename T>
std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> grad(logits.shape());
  double total = 0.0;
  std::vector<T> e(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                          std::to_string(k) + ")");
    const T* row = logits.data() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp(row[j] - mx);
      sum += e[j];
    }
    const T log_sum = std::log(sum);
    total += static_cast<double>(log_sum - (row[label] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      const T p = e[j] / sum;
      grad[i * k + j] = (p - (static_cast<int>(j) == label ? T(1) : T(0))) / static_cast<T>(n);
    }
  }
  return {total / static_cast<double>(n), std::move(grad)};
}

template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    correct += static_cast<int>(best) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

template <typename T>
LayerGrads<T> zeros_like(const LayerState<T>& s) {
  auto z = [](const Tensor<T>& t) { return t.empty() ? Tensor<T>() : Tensor<T>(t.shape()); };
  return {z(s.W), z(s.b), z(s.gamma), z(s.beta_shift)};
}

template <typename T>
void zero_slice(Tensor<T>& t, std::size_t node) {
  if (t.empty()) return;
  for (T& v : t.row(node)) v = T(0);
}

}  // namespace

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig cfg, const Model<T>& model) : cfg_(cfg) {
  for (const auto& l : model.layers()) {
    m_.push_back(zeros_like(l.state));
    if (cfg_.kind == OptimizerKind::adam) v_.push_back(zeros_like(l.state));
  }
}

template <typename T>
void Optimizer<T>::step(Model<T>& model, const std::vector<LayerGrads<T>>& grads, double lr) {
  if (grads.size() != m_.size()) throw ContractError("optimizer: grads do not match model");
  ++t_;
  const T lr_t = static_cast<T>(lr);
  const bool adam = cfg_.kind == OptimizerKind::adam;
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  const T eps = static_cast<T>(cfg_.eps);
  const T mu = static_cast<T>(cfg_.momentum);

  auto update = [&](Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>* v) {
    if (w.empty()) return;
    if (g.size() != w.size()) throw ContractError("optimizer: grad shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (adam) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        (*v)[i] = b2 * (*v)[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / c1;
        const T vhat = (*v)[i] / c2;
        w[i] -= lr_t * mhat / (std::sqrt(vhat) + eps);
      } else {
        m[i] = mu * m[i] + g[i];
        w[i] -= lr_t * m[i];
      }
    }
  };

  for (std::size_t i = 0; i < m_.size(); ++i) {
    LayerState<T>& s = model.layers()[i].state;
    const LayerGrads<T>& g = grads[i];
    LayerGrads<T>* v = adam ? &v_[i] : nullptr;
    update(s.W, g.W, m_[i].W, v ? &v->W : nullptr);
    update(s.b, g.b, m_[i].b, v ? &v->b : nullptr);
    update(s.gamma, g.gamma, m_[i].gamma, v ? &v->gamma : nullptr);
    update(s.beta_shift, g.beta_shift, m_[i].beta_shift, v ? &v->beta_shift : nullptr);
  }
}

template <typename T>
void Optimizer<T>::zero_node(std::size_t layer, std::size_t node) {
  auto clear = [&](LayerGrads<T>& g) {
    zero_slice(g.W, node);
    zero_slice(g.b, node);
    zero_slice(g.gamma, node);
    zero_slice(g.beta_shift, node);
  };
  clear(m_.at(layer));
  if (!v_.empty()) clear(v_.at(layer));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(optimizer.lr > 0)) throw ContractError("learning rate must be > 0");
  if (optimizer.kind == OptimizerKind::sgd && !(optimizer.momentum >= 0 && optimizer.momentum < 1))
    throw ContractError("sgd momentum must be in [0,1)");
  if (weight_decay < 0) throw ContractError("weight_decay must be >= 0");
  if (weight_decay > 0 && nodedrop.mode != NodeDropMode::batch_norm)
    throw ContractError("L2 weight decay is only supported in batch-norm mode");
  nodedrop.validate();
  if (nodedrop.mode == NodeDropMode::batch_norm && nodedrop.train_batch_size != batch_size)
    throw ContractError("batch-norm mode: nodedrop m must equal the training batch size");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double lr = optimizer.lr;
  for (const auto& [at, mult] : lr_milestones)
    if (epoch >= at) lr *= mult;
  return lr;
}

std::string MetricsLog::to_csv() const {
  std::ostringstream os;
  os << kHeader << '\n';
  // Shortest text that reads back to the same double.
  auto num = [](double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  for (const MetricsRow& r : rows)
    os << r.epoch << ',' << num(r.train_loss) << ',' << num(r.reg_loss) << ',' << num(r.test_acc)
       << ',' << r.live_nodes << ',' << r.live_params << '\n';
  return os.str();
}

MetricsLog MetricsLog::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw FormatError("metrics CSV: expected header '" + std::string(kHeader) + "'");
  MetricsLog log;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricsRow r;
    char c1, c2, c3, c4, c5;
    if (!(ls >> r.epoch >> c1 >> r.train_loss >> c2 >> r.reg_loss >> c3 >> r.test_acc >> c4 >>
          r.live_nodes >> c5 >> r.live_params) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',')
      throw FormatError("metrics CSV: malformed line " + std::to_string(lineno));
    log.rows.push_back(r);
  }
  return log;
}

template <typename T>
double evaluate(const Model<T>& model, const Dataset& ds, std::size_t batch_size) {
  Rng unused(0);
  std::size_t correct = 0;
  for (const auto& idx : batch_iter(ds.size(), batch_size, false, unused, BatchMode::eval)) {
    const Tensor<T> logits = model.forward(gather_images<T>(ds, idx), Mode::eval);
    const std::vector<int> labels = gather_labels(ds, idx);
    correct += static_cast<std::size_t>(std::llround(accuracy(logits, labels) * idx.size()));
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

template <typename T>
std::string first_non_finite(const Model<T>& model, const Tensor<T>& x) {
  Tensor<T> cur = x;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const auto& l = model.layers()[i];
    bool params_ok = true;
    model.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
      if (name.rfind("layer" + std::to_string(i) + ".", 0) == 0 && !t.all_finite())
        params_ok = false;
    });
    if (!params_ok) return "parameters of layer " + std::to_string(i) + " (" + layer_name(l.spec) + ")";
    cur = layer_forward(l.spec, l.state, cur, Mode::train);
    if (!cur.all_finite())
      return "output of layer " + std::to_string(i) + " (" + layer_name(l.spec) + ")";
  }
  return "loss";
}

}  // namespace

template <typename T>
MetricsLog train(Model<T>& model, const Dataset& train_set, const Dataset& test_set,
                 const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const NodeDropConfig& nd = cfg.nodedrop;
  if (train_set.size() < cfg.batch_size)
    throw ContractError("training set smaller than one batch");

  Optimizer<T> opt(cfg.optimizer, model);
  const Rng root(cfg.seed);
  MetricsLog log;
  std::vector<std::vector<bool>> was_dead(model.size());
  const LivenessReport initial = scan_network(model, nd);
  std::size_t live_nodes = initial.live_nodes, live_params = initial.live_params;
  const bool freeze = nd.freeze_dead && nd.lambda > 0.0;

  std::vector<LayerCache<T>> caches;
  std::vector<LayerGrads<T>> grads;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    Rng epoch_rng = root.derive(epoch);
    const auto batches = batch_iter(train_set.size(), cfg.batch_size, true, epoch_rng);
    double loss_sum = 0.0;

    for (std::size_t b = 0; b < batches.size(); ++b) {
      Tensor<T> x = gather_images<T>(train_set, batches[b]);
      if (cfg.augment) {
        Rng batch_rng = epoch_rng.derive(b + 1);
        x = augment(x, batch_rng);
      }
      const std::vector<int> labels = gather_labels(train_set, batches[b]);
      const Tensor<T> logits = model.forward(x, Mode::train, &caches);
      auto [loss, grad_logits] = cross_entropy(logits, labels);
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b) + "; first non-finite value in " +
                           first_non_finite(model, x));
      loss_sum += loss;

      model.backward(caches, grad_logits, grads);
      add_regularization_grads(model, nd, grads);
      if (cfg.weight_decay > 0) {
        const T wd = static_cast<T>(cfg.weight_decay);
        for (std::size_t i = 0; i < model.size(); ++i) {
          const LayerState<T>& s = model.layers()[i].state;
          if (s.W.empty()) continue;
          for (std::size_t k = 0; k < s.W.size(); ++k) grads[i].W[k] += wd * s.W[k];
        }
      }
      opt.step(model, grads, lr);
      model.commit_running_stats(caches);
    }

    const bool last = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % nd.scan_every == 0 || last) {
      const LivenessReport report = scan_network(model, nd);
      for (const LayerLiveness& ll : report.layers) {
        std::vector<bool>& prev = was_dead[ll.layer];
        prev.resize(ll.dead_mask.size(), false);
        for (std::size_t o = 0; o < ll.dead_mask.size(); ++o) {
          if (freeze && ll.dead_mask[o] && !prev[o]) {
            opt.zero_node(ll.layer, o);
            if (ll.bn_layer) opt.zero_node(*ll.bn_layer, o);
          }
          prev[o] = ll.dead_mask[o];
        }
      }
      live_nodes = report.live_nodes;
      live_params = report.live_params;
      if (hooks.on_scan) hooks.on_scan(report);
    }

    MetricsRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(batches.size());
    row.reg_loss = network_regularization_loss(model, nd);
    row.test_acc = evaluate(model, test_set, cfg.eval_batch_size);
    row.live_nodes = live_nodes;
    row.live_params = live_params;
    log.rows.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  return log;
}

#define NODEDROP_INSTANTIATE_TRAIN(T)                                                        \
  template std::pair<double, Tensor<T>> cross_entropy(const Tensor<T>&, std::span<const int>); \
  template double accuracy(const Tensor<T>&, std::span<const int>);                          \
  template class Optimizer<T>;                                                               \
  template double evaluate(const Model<T>&, const Dataset&, std::size_t);                    \
  template MetricsLog train(Model<T>&, const Dataset&, const Dataset&, const TrainConfig&,   \
                            const TrainHooks&);

NODEDROP_INSTANTIATE_TRAIN(float)
NODEDROP_INSTANTIATE_TRAIN(double)

}  // namespace nodedrop
