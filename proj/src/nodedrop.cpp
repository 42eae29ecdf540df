#include "nodedrop/nodedrop.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace nodedrop {

std::string_view to_string(NodeDropMode mode) {
  return mode == NodeDropMode::vanilla ? "vanilla" : "bn";
}

NodeDropMode parse_mode(std::string_view name) {
  if (name == "vanilla") return NodeDropMode::vanilla;
  if (name == "bn" || name == "batch_norm") return NodeDropMode::batch_norm;
  throw ContractError("unknown nodedrop mode '" + std::string(name) + "' (vanilla|bn)");
}

void NodeDropConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ContractError("lambda must be a finite value >= 0");
  if (!(C > 0.0) || !std::isfinite(C)) throw ContractError("C must be a finite value > 0");
  if (mode == NodeDropMode::batch_norm && train_batch_size < 2)
    throw ContractError("batch-norm mode needs a training batch size m >= 2");
  if (scan_every == 0) throw ContractError("scan_every must be >= 1");
}

template <typename T>
T node_margin(std::span<const T> w, T b) {
  if (w.empty()) throw ContractError("node_margin: empty weight vector");
  T acc = T(0);
  for (T v : w) acc += v > T(0) ? v : T(0);
  return acc + b;
}

template <typename T>
T bn_node_margin(T gamma, T beta_shift, std::size_t m) {
  if (m < 2) throw ContractError("bn_node_margin: m must be >= 2, got " + std::to_string(m));
  return std::abs(gamma) * static_cast<T>(std::sqrt(static_cast<double>(m))) + beta_shift;
}

namespace {

template <typename T>
T sign0(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

bool is_activation(const LayerSpec& s) { return std::holds_alternative<ActivationSpec>(s); }

std::string where(std::size_t i, const LayerSpec& s) {
  return "layer " + std::to_string(i) + " (" + layer_name(s) + ")";
}

}  // namespace

template <typename T>
std::vector<PrunableLayer> prunable_layers(const Model<T>& model, const NodeDropConfig& cfg) {
  const auto& L = model.layers();
  const std::size_t head = model.output_layer();
  const std::vector<Shape> shapes = model.output_shapes();
  std::vector<PrunableLayer> out;

  if (cfg.mode == NodeDropMode::vanilla) {
    for (std::size_t i = 0; i < L.size(); ++i)
      if (std::holds_alternative<BatchNormSpec>(L[i].spec))
        throw StructuralError(where(i, L[i].spec) +
                              ": vanilla mode cannot certify through batch normalization");
    for (std::size_t i = 0; i < head; ++i) {
      if (!has_weights(L[i].spec)) continue;
      if (i + 1 >= L.size() || !is_activation(L[i + 1].spec))
        throw StructuralError(where(i, L[i].spec) + ": must be followed by an activation");
      std::size_t j = i;
      while (j > 0 && (std::holds_alternative<MaxPool2Spec>(L[j - 1].spec) ||
                       std::holds_alternative<FlattenSpec>(L[j - 1].spec)))
        --j;
      if (j > 0) {
        const auto* act = std::get_if<ActivationSpec>(&L[j - 1].spec);
        if (!act || !is_unit_bounded(act->kind))
          throw StructuralError(where(i, L[i].spec) + ": input from " + where(j - 1, L[j - 1].spec) +
                                " is not bounded in [0,1]; use clamped_relu or soft_clamped_relu");
      }
      out.push_back({i, std::nullopt, shapes[i][0], 0});
    }
    return out;
  }

  for (std::size_t j = 1; j < L.size(); ++j) {
    if (!std::holds_alternative<BatchNormSpec>(L[j].spec)) continue;
    const std::size_t i = j - 1;
    if (!has_weights(L[i].spec) || i >= head) continue;
    if (j + 1 >= L.size() || !is_activation(L[j + 1].spec))
      throw StructuralError(where(j, L[j].spec) + ": must be followed by an activation");
    if (cfg.train_batch_size < 2)
      throw ContractError("batch-norm scan needs the training batch size (m >= 2)");
    const Shape& s = shapes[j];
    const std::size_t spatial = s.size() == 3 ? s[1] * s[2] : 1;
    out.push_back({i, j, s[0], cfg.train_batch_size * spatial});
  }
  return out;
}

template <typename T>
double regularization_loss(const LayerState<T>& weights, const NodeDropConfig& cfg) {
  if (cfg.lambda == 0.0) return 0.0;
  const std::size_t nodes = weights.W.dim(0);
  double total = 0.0;
  for (std::size_t o = 0; o < nodes; ++o) {
    double pos = 0.0;
    for (T v : weights.W.row(o)) pos += v > T(0) ? static_cast<double>(v) : 0.0;
    total += pos + std::abs(static_cast<double>(weights.b[o]) + cfg.C);
  }
  return cfg.lambda * total;
}

template <typename T>
double bn_regularization_loss(const LayerState<T>& bn, std::size_t m, const NodeDropConfig& cfg) {
  if (cfg.lambda == 0.0) return 0.0;
  const double root_m = std::sqrt(static_cast<double>(m));
  double total = 0.0;
  for (std::size_t c = 0; c < bn.gamma.size(); ++c)
    total += std::abs(static_cast<double>(bn.gamma[c])) * root_m +
             std::abs(static_cast<double>(bn.beta_shift[c]) + cfg.C);
  return cfg.lambda * total;
}

template <typename T>
LayerGrads<T> regularization_grad(const LayerState<T>& weights, const NodeDropConfig& cfg) {
  LayerGrads<T> g;
  g.W = Tensor<T>(weights.W.shape());
  g.b = Tensor<T>(weights.b.shape());
  const T lam = static_cast<T>(cfg.lambda);
  const T C = static_cast<T>(cfg.C);
  for (std::size_t i = 0; i < weights.W.size(); ++i) g.W[i] = weights.W[i] > T(0) ? lam : T(0);
  for (std::size_t o = 0; o < weights.b.size(); ++o) g.b[o] = lam * sign0(weights.b[o] + C);
  return g;
}

template <typename T>
LayerGrads<T> bn_regularization_grad(const LayerState<T>& bn, std::size_t m,
                                     const NodeDropConfig& cfg) {
  LayerGrads<T> g;
  g.gamma = Tensor<T>(bn.gamma.shape());
  g.beta_shift = Tensor<T>(bn.beta_shift.shape());
  const T lam = static_cast<T>(cfg.lambda);
  const T lam_root_m = static_cast<T>(cfg.lambda * std::sqrt(static_cast<double>(m)));
  const T C = static_cast<T>(cfg.C);
  for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
    g.gamma[c] = lam_root_m * sign0(bn.gamma[c]);
    g.beta_shift[c] = lam * sign0(bn.beta_shift[c] + C);
  }
  return g;
}

template <typename T>
double network_regularization_loss(const Model<T>& model, const NodeDropConfig& cfg) {
  if (cfg.lambda == 0.0) return 0.0;
  double total = 0.0;
  for (const PrunableLayer& p : prunable_layers(model, cfg)) {
    if (p.bn_layer)
      total += bn_regularization_loss(model.layers()[*p.bn_layer].state, p.bn_values, cfg);
    else
      total += regularization_loss(model.layers()[p.weight_layer].state, cfg);
  }
  return total;
}

template <typename T>
void add_regularization_grads(const Model<T>& model, const NodeDropConfig& cfg,
                              std::vector<LayerGrads<T>>& grads) {
  if (cfg.lambda == 0.0) return;
  auto accumulate = [](Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.empty()) {
      dst = src;
      return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  for (const PrunableLayer& p : prunable_layers(model, cfg)) {
    if (p.bn_layer) {
      LayerGrads<T> r = bn_regularization_grad(model.layers()[*p.bn_layer].state, p.bn_values, cfg);
      accumulate(grads.at(*p.bn_layer).gamma, r.gamma);
      accumulate(grads.at(*p.bn_layer).beta_shift, r.beta_shift);
    } else {
      LayerGrads<T> r = regularization_grad(model.layers()[p.weight_layer].state, cfg);
      accumulate(grads.at(p.weight_layer).W, r.W);
      accumulate(grads.at(p.weight_layer).b, r.b);
    }
  }
}

template <typename T>
std::uint64_t model_fingerprint(const Model<T>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::string arch = describe(model.specs()) + shape_str(model.input_shape());
  feed(arch.data(), arch.size());
  model.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    feed(name.data(), name.size());
    feed(t.data(), t.size() * sizeof(T));
  });
  return h;
}

namespace {

struct Plan {
  std::vector<std::vector<std::size_t>> kept;
  std::vector<std::size_t> params_after;  // per layer
  std::vector<std::size_t> degenerate;
};

// Propagates kept feature indices through the network. `dead` is indexed by
// the Dense/Conv layer owning the nodes.
template <typename T>
Plan make_plan(const Model<T>& model, const std::vector<std::vector<bool>>& dead, bool keep_one) {
  const auto& L = model.layers();
  const std::vector<Shape> shapes = model.output_shapes();
  Plan plan;
  plan.kept.resize(L.size());
  plan.params_after.assign(L.size(), 0);

  std::vector<std::size_t> cur(model.input_shape()[0]);
  for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = i;

  for (std::size_t i = 0; i < L.size(); ++i) {
    const LayerSpec& spec = L[i].spec;
    if (has_weights(spec)) {
      const std::size_t nodes = shapes[i][0];
      std::vector<std::size_t> next;
      for (std::size_t o = 0; o < nodes; ++o)
        if (dead[i].empty() || !dead[i][o]) next.push_back(o);
      if (next.empty()) {
        plan.degenerate.push_back(i);
        if (keep_one) next.push_back(0);
      }
      const std::size_t taps = std::holds_alternative<Conv2dSpec>(spec) ? 9 : 1;
      plan.params_after[i] = next.size() * cur.size() * taps + next.size();
      cur = std::move(next);
    } else if (std::holds_alternative<BatchNormSpec>(spec)) {
      plan.params_after[i] = 2 * cur.size();
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      const Shape& in = i == 0 ? model.input_shape() : shapes[i - 1];
      const std::size_t spatial = shape_size(in) / in[0];
      std::vector<std::size_t> flat;
      flat.reserve(cur.size() * spatial);
      for (std::size_t c : cur)
        for (std::size_t s = 0; s < spatial; ++s) flat.push_back(c * spatial + s);
      cur = std::move(flat);
    }
    plan.kept[i] = cur;
  }
  return plan;
}

std::vector<std::vector<bool>> dead_masks(const LivenessReport& report, std::size_t layers) {
  std::vector<std::vector<bool>> dead(layers);
  for (const LayerLiveness& l : report.layers) {
    if (l.layer >= layers) throw ContractError("liveness report does not match the model");
    dead[l.layer] = l.dead_mask;
  }
  return dead;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

template <typename T>
LivenessReport scan_network(const Model<T>& model, const NodeDropConfig& cfg) {
  LivenessReport report;
  report.mode = cfg.mode;
  report.fingerprint = model_fingerprint(model);
  const auto& L = model.layers();

  for (const PrunableLayer& p : prunable_layers(model, cfg)) {
    LayerLiveness ll;
    ll.layer = p.weight_layer;
    ll.bn_layer = p.bn_layer;
    ll.name = layer_name(L[p.weight_layer].spec);
    ll.node_margins.resize(p.nodes);
    ll.dead_mask.resize(p.nodes);
    const LayerState<T>& ws = L[p.weight_layer].state;
    for (std::size_t o = 0; o < p.nodes; ++o) {
      T margin;
      if (p.bn_layer) {
        const LayerState<T>& bs = L[*p.bn_layer].state;
        margin = bn_node_margin(bs.gamma[o], bs.beta_shift[o], p.bn_values);
      } else {
        margin = node_margin(ws.W.row(o), ws.b[o]);
      }
      ll.node_margins[o] = static_cast<double>(margin);
      ll.dead_mask[o] = margin <= T(0);
      (ll.dead_mask[o] ? ll.dead_nodes : ll.live_nodes) += 1;
    }
    report.live_nodes += ll.live_nodes;
    report.total_nodes += p.nodes;
    report.layers.push_back(std::move(ll));
  }

  const Plan plan = make_plan(model, dead_masks(report, L.size()), false);
  for (std::size_t i = 0; i < L.size(); ++i) report.live_params += plan.params_after[i];
  report.total_params = model.param_count();
  for (LayerLiveness& ll : report.layers) {
    const LayerState<T>& s = L[ll.layer].state;
    ll.params = s.W.size() + s.b.size();
    ll.live_params = plan.params_after[ll.layer];
    if (ll.bn_layer) {
      ll.params += 2 * L[*ll.bn_layer].state.gamma.size();
      ll.live_params += plan.params_after[*ll.bn_layer];
    }
  }
  if (report.live_params > 0)
    report.reduction_factor =
        static_cast<double>(report.total_params) / static_cast<double>(report.live_params);
  return report;
}

std::string LivenessReport::to_csv() const {
  std::ostringstream os;
  os << "layer,name,nodes,live_nodes,dead_nodes,min_margin,max_margin,params,live_params\n";
  for (const LayerLiveness& l : layers) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double m : l.node_margins) {
      lo = std::min(lo, m);
      hi = std::max(hi, m);
    }
    os << l.layer << ',' << l.name << ',' << l.node_margins.size() << ',' << l.live_nodes << ','
       << l.dead_nodes << ',' << fmt_double(lo) << ',' << fmt_double(hi) << ',' << l.params << ','
       << l.live_params << '\n';
  }
  return os.str();
}

std::string LivenessReport::margins_csv() const {
  std::ostringstream os;
  os << "layer,node,margin,dead\n";
  for (const LayerLiveness& l : layers)
    for (std::size_t o = 0; o < l.node_margins.size(); ++o)
      os << l.layer << ',' << o << ',' << fmt_double(l.node_margins[o]) << ','
         << (l.dead_mask[o] ? 1 : 0) << '\n';
  return os.str();
}

std::string LivenessReport::summary() const {
  std::ostringstream os;
  os << "mode " << to_string(mode) << ": " << live_nodes << "/" << total_nodes
     << " prunable nodes live\n";
  for (const LayerLiveness& l : layers)
    os << "  layer " << std::setw(2) << l.layer << "  " << std::left << std::setw(18) << l.name
       << std::right << " live " << std::setw(5) << l.live_nodes << "/" << std::setw(5)
       << l.node_margins.size() << "  params " << l.live_params << "/" << l.params << '\n';
  const double pruned =
      total_params ? 100.0 * (1.0 - static_cast<double>(live_params) / total_params) : 0.0;
  os << "parameters: " << live_params << "/" << total_params << " live (" << std::fixed
     << std::setprecision(2) << pruned << "% pruned, factor ";
  if (reduction_factor)
    os << *reduction_factor;
  else
    os << "-";
  os << ")\n";
  return os.str();
}

template <typename T>
CompactionResult<T> compact(const Model<T>& model, const LivenessReport& report,
                            DegeneratePolicy policy) {
  if (report.fingerprint != model_fingerprint(model))
    throw ContractError("liveness report was produced from a different model state");
  const auto& L = model.layers();
  const Plan plan = make_plan(model, dead_masks(report, L.size()),
                              policy == DegeneratePolicy::keep_one);
  if (!plan.degenerate.empty() && policy == DegeneratePolicy::error) {
    std::string list;
    for (std::size_t i : plan.degenerate)
      list += (list.empty() ? "" : ", ") + where(i, L[i].spec);
    throw DegenerateLayerError("every node is dead in " + list, plan.degenerate);
  }

  std::vector<LayerSpec> specs;
  std::vector<LayerState<T>> states;
  std::vector<std::size_t> in_keep(model.input_shape()[0]);
  for (std::size_t i = 0; i < in_keep.size(); ++i) in_keep[i] = i;

  for (std::size_t i = 0; i < L.size(); ++i) {
    const LayerSpec& spec = L[i].spec;
    const LayerState<T>& s = L[i].state;
    const std::vector<std::size_t>& out_keep = plan.kept[i];
    LayerState<T> ns;
    if (std::holds_alternative<DenseSpec>(spec)) {
      const std::size_t in = s.W.dim(1);
      specs.push_back(DenseSpec{in_keep.size(), out_keep.size()});
      ns.W = Tensor<T>({out_keep.size(), in_keep.size()});
      ns.b = Tensor<T>({out_keep.size()});
      for (std::size_t o = 0; o < out_keep.size(); ++o) {
        for (std::size_t k = 0; k < in_keep.size(); ++k)
          ns.W.at(o, k) = s.W[out_keep[o] * in + in_keep[k]];
        ns.b[o] = s.b[out_keep[o]];
      }
    } else if (std::holds_alternative<Conv2dSpec>(spec)) {
      const std::size_t cin = s.W.dim(1);
      specs.push_back(Conv2dSpec{in_keep.size(), out_keep.size()});
      ns.W = Tensor<T>({out_keep.size(), in_keep.size(), 3, 3});
      ns.b = Tensor<T>({out_keep.size()});
      for (std::size_t o = 0; o < out_keep.size(); ++o) {
        for (std::size_t c = 0; c < in_keep.size(); ++c)
          for (std::size_t t = 0; t < 9; ++t)
            ns.W[(o * in_keep.size() + c) * 9 + t] = s.W[(out_keep[o] * cin + in_keep[c]) * 9 + t];
        ns.b[o] = s.b[out_keep[o]];
      }
    } else if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
      BatchNormSpec nb = *bn;
      nb.channels = out_keep.size();
      specs.push_back(nb);
      auto gather = [&](const Tensor<T>& t) {
        Tensor<T> r({out_keep.size()});
        for (std::size_t c = 0; c < out_keep.size(); ++c) r[c] = t[out_keep[c]];
        return r;
      };
      ns.gamma = gather(s.gamma);
      ns.beta_shift = gather(s.beta_shift);
      ns.running_mean = gather(s.running_mean);
      ns.running_var = gather(s.running_var);
    } else {
      specs.push_back(spec);
    }
    states.push_back(std::move(ns));
    in_keep = out_keep;
  }

  CompactionResult<T> result;
  result.model = Model<T>(model.input_shape(), specs);
  for (std::size_t i = 0; i < L.size(); ++i) result.model.layers()[i].state = std::move(states[i]);
  result.kept = plan.kept;
  result.params_before = model.param_count();
  result.params_after = result.model.param_count();
  return result;
}

#define NODEDROP_INSTANTIATE(T)                                                                 \
  template T node_margin(std::span<const T>, T);                                                \
  template T bn_node_margin(T, T, std::size_t);                                                 \
  template std::vector<PrunableLayer> prunable_layers(const Model<T>&, const NodeDropConfig&);  \
  template double regularization_loss(const LayerState<T>&, const NodeDropConfig&);            \
  template double bn_regularization_loss(const LayerState<T>&, std::size_t,                    \
                                         const NodeDropConfig&);                               \
  template LayerGrads<T> regularization_grad(const LayerState<T>&, const NodeDropConfig&);     \
  template LayerGrads<T> bn_regularization_grad(const LayerState<T>&, std::size_t,             \
                                                const NodeDropConfig&);                        \
  template double network_regularization_loss(const Model<T>&, const NodeDropConfig&);         \
  template void add_regularization_grads(const Model<T>&, const NodeDropConfig&,               \
                                         std::vector<LayerGrads<T>>&);                         \
  template std::uint64_t model_fingerprint(const Model<T>&);                                    \
  template LivenessReport scan_network(const Model<T>&, const NodeDropConfig&);                \
  template CompactionResult<T> compact(const Model<T>&, const LivenessReport&, DegeneratePolicy);

NODEDROP_INSTANTIATE(float)
NODEDROP_INSTANTIATE(double)

}  // namespace nodedrop
