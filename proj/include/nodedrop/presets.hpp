#pragma once

#include <map>
#include <string>
#include <vector>

#include "nodedrop/layers.hpp"
#include "nodedrop/nodedrop.hpp"

namespace nodedrop {

enum class DatasetKind { mnist, cifar10 };

struct Preset {
  std::string name;
  DatasetKind dataset = DatasetKind::mnist;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  NodeDropMode mode = NodeDropMode::vanilla;
  // Training defaults as config key/value entries; user entries override.
  std::map<std::string, std::string> defaults;
};

// denseN (N = 160, 240, 320, 480, 640): conv-conv-pool-conv-conv-pool-dense
// on 28x28 digits, widths scaled so the five hidden layers hold N nodes.
// The _bn variants insert BatchNorm before each hidden ReLU.
// vgg16_cifar[_bn]: 13 conv layers and one dense-512 head on 32x32 RGB,
// trained by default with SGD momentum 0.9, lr 0.1 decayed by 0.1 at epochs
// 80 and 130, 200 epochs, shift/mirror augmentation.
// `beta` sets the soft clamped ReLU sharpness of the vanilla presets.
Preset make_preset(const std::string& name, double beta = 10.0);
std::vector<std::string> preset_names();

}  // namespace nodedrop
