#include "nodedrop/presets.hpp"

namespace nodedrop {

namespace {

struct Builder {
  bool bn;
  ActivationSpec act;
  std::vector<LayerSpec> layers;

  void hidden(LayerSpec weights, std::size_t width) {
    layers.push_back(weights);
    if (bn) layers.push_back(BatchNormSpec{width});
    layers.push_back(act);
  }
  void conv(std::size_t in, std::size_t out) { hidden(Conv2dSpec{in, out}, out); }
  void dense(std::size_t in, std::size_t out) { hidden(DenseSpec{in, out}, out); }
  void pool() { layers.push_back(MaxPool2Spec{}); }
};

Preset dense_preset(const std::string& name, std::size_t base, bool bn, double beta) {
  // base 16 gives widths 16, 16, 32, 32, 64 (160 hidden nodes).
  const std::size_t a = base, b = 2 * base, c = 4 * base;
  Builder net{bn, bn ? ActivationSpec{ActivationKind::relu}
                     : ActivationSpec{ActivationKind::soft_clamped_relu, beta}, {}};
  net.conv(1, a);
  net.conv(a, a);
  net.pool();
  net.conv(a, b);
  net.conv(b, b);
  net.pool();
  net.layers.push_back(FlattenSpec{});
  net.dense(b * 7 * 7, c);
  net.layers.push_back(DenseSpec{c, 10});
  return {name, DatasetKind::mnist, {1, 28, 28}, net.layers,
          bn ? NodeDropMode::batch_norm : NodeDropMode::vanilla,
          {{"optimizer", "adam"}, {"lr", "0.001"}, {"epochs", "30"}, {"batch_size", "256"}}};
}

Preset vgg_preset(const std::string& name, bool bn, double beta) {
  Builder net{bn, bn ? ActivationSpec{ActivationKind::relu}
                     : ActivationSpec{ActivationKind::soft_clamped_relu, beta}, {}};
  const std::vector<std::vector<std::size_t>> blocks = {
      {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
  std::size_t in = 3;
  for (const auto& block : blocks) {
    for (std::size_t out : block) {
      net.conv(in, out);
      in = out;
    }
    net.pool();
  }
  net.layers.push_back(FlattenSpec{});
  net.dense(512, 512);
  net.layers.push_back(DenseSpec{512, 10});
  return {name, DatasetKind::cifar10, {3, 32, 32}, net.layers,
          bn ? NodeDropMode::batch_norm : NodeDropMode::vanilla,
          {{"optimizer", "sgd"},
           {"lr", "0.1"},
           {"momentum", "0.9"},
           {"lr_milestones", "80:0.1,130:0.1"},
           {"epochs", "200"},
           {"batch_size", "64"},
           {"augment", "true"}}};
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const char* n : {"dense160", "dense240", "dense320", "dense480", "dense640"}) {
    names.emplace_back(n);
    names.push_back(std::string(n) + "_bn");
  }
  names.emplace_back("vgg16_cifar");
  names.emplace_back("vgg16_cifar_bn");
  return names;
}

Preset make_preset(const std::string& name, double beta) {
  const bool bn = name.size() > 3 && name.ends_with("_bn");
  const std::string base = bn ? name.substr(0, name.size() - 3) : name;
  if (base == "vgg16_cifar") return vgg_preset(name, bn, beta);
  if (base.starts_with("dense")) {
    const std::string digits = base.substr(5);
    for (std::size_t n : {160u, 240u, 320u, 480u, 640u})
      if (digits == std::to_string(n)) return dense_preset(name, n / 10, bn, beta);
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ContractError("unknown preset '" + name + "' (known: " + known + ")");
}

}  // namespace nodedrop
