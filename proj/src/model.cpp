#include "nodedrop/model.hpp"

#include <sstream>

namespace nodedrop {

namespace {

Shape infer_output(const LayerSpec& spec, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& why) {
    throw DimensionError("layer " + std::to_string(index) + " " + layer_name(spec) + ": " + why +
                         " (input " + shape_str(in) + ")");
  };
  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    if (in.size() != 1 || in[0] != d->in) fail("expects flat input of " + std::to_string(d->in));
    if (d->out == 0) fail("zero outputs");
    return {d->out};
  }
  if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    if (in.size() != 3 || in[0] != c->in_ch)
      fail("expects " + std::to_string(c->in_ch) + " input channels");
    if (c->out_ch == 0) fail("zero output channels");
    return {c->out_ch, in[1], in[2]};
  }
  if (std::holds_alternative<MaxPool2Spec>(spec)) {
    if (in.size() != 3 || in[1] % 2 || in[2] % 2) fail("needs C x H x W with even H, W");
    return {in[0], in[1] / 2, in[2] / 2};
  }
  if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
    if ((in.size() != 1 && in.size() != 3) || in[0] != bn->channels)
      fail("expects " + std::to_string(bn->channels) + " channels");
    if (!(bn->eps > 0)) fail("eps must be positive");
    return in;
  }
  if (std::holds_alternative<FlattenSpec>(spec)) return {shape_size(in)};
  const auto& a = std::get<ActivationSpec>(spec);
  if (a.kind == ActivationKind::soft_clamped_relu && !(a.beta > 0)) fail("beta must be > 0");
  return in;
}

}  // namespace

std::string describe(const std::vector<LayerSpec>& specs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < specs.size(); ++i) os << (i ? " > " : "") << layer_name(specs[i]);
  return os.str();
}

template <typename T>
Model<T>::Model(Shape input_shape, std::vector<LayerSpec> specs)
    : input_shape_(std::move(input_shape)) {
  if (input_shape_.size() != 1 && input_shape_.size() != 3)
    throw DimensionError("model input must be C x H x W or flat, got " + shape_str(input_shape_));
  layers_.reserve(specs.size());
  for (auto& s : specs) layers_.push_back({s, empty_state<T>(s)});
  output_shapes();
}

template <typename T>
Model<T> Model<T>::build(Shape input_shape, std::vector<LayerSpec> specs, Rng& rng) {
  Model m(std::move(input_shape), std::move(specs));
  for (auto& l : m.layers_) l.state = init_state<T>(l.spec, rng);
  return m;
}

template <typename T>
std::vector<Shape> Model<T>::output_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    cur = infer_output(layers_[i].spec, cur, i);
    out.push_back(cur);
  }
  return out;
}

template <typename T>
Shape Model<T>::input_shape_of(std::size_t layer) const {
  if (layer == 0) return input_shape_;
  return output_shapes().at(layer - 1);
}

template <typename T>
std::vector<LayerSpec> Model<T>::specs() const {
  std::vector<LayerSpec> s;
  for (const auto& l : layers_) s.push_back(l.spec);
  return s;
}

template <typename T>
std::size_t Model<T>::output_layer() const {
  for (std::size_t i = layers_.size(); i-- > 0;)
    if (has_weights(layers_[i].spec)) return i;
  throw StructuralError("model has no Dense or Conv2d layer");
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, Mode mode,
                            std::vector<LayerCache<T>>* caches) const {
  Shape expect = input_shape_;
  expect.insert(expect.begin(), x.rank() ? x.dim(0) : 0);
  if (x.shape() != expect)
    throw DimensionError("model expects batch of " + shape_str(input_shape_) + ", got " +
                         shape_str(x.shape()));
  if (caches) caches->assign(layers_.size(), LayerCache<T>{});
  Tensor<T> cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    cur = layer_forward(layers_[i].spec, layers_[i].state, cur, mode,
                        caches ? &(*caches)[i] : nullptr);
  return cur;
}

template <typename T>
void Model<T>::backward(const std::vector<LayerCache<T>>& caches, const Tensor<T>& grad_out,
                        std::vector<LayerGrads<T>>& grads) const {
  if (caches.size() != layers_.size())
    throw ContractError("backward needs one cache per layer");
  grads.assign(layers_.size(), LayerGrads<T>{});
  Tensor<T> g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;)
    g = layer_backward(layers_[i].spec, layers_[i].state, caches[i], g, grads[i], i > 0);
}

template <typename T>
void Model<T>::commit_running_stats(const std::vector<LayerCache<T>>& caches) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (const auto* bn = std::get_if<BatchNormSpec>(&layers_[i].spec))
      batchnorm_commit_running_stats(*bn, caches.at(i).bn, layers_[i].state);
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_)
    n += l.state.W.size() + l.state.b.size() + l.state.gamma.size() + l.state.beta_shift.size();
  return n;
}

template <typename T>
void Model<T>::for_each_tensor(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerState<T>& s = layers_[i].state;
    const std::string p = "layer" + std::to_string(i) + ".";
    if (!s.W.empty()) fn(p + "W", s.W);
    if (!s.b.empty()) fn(p + "b", s.b);
    if (!s.gamma.empty()) fn(p + "gamma", s.gamma);
    if (!s.beta_shift.empty()) fn(p + "beta_shift", s.beta_shift);
    if (!s.running_mean.empty()) fn(p + "running_mean", s.running_mean);
    if (!s.running_var.empty()) fn(p + "running_var", s.running_var);
  }
}

template <typename T>
void Model<T>::for_each_tensor(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  const_cast<Model*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template class Model<float>;
template class Model<double>;

}  // namespace nodedrop
