#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "nodedrop/train.hpp"

namespace nodedrop {

enum class Precision { f32, f64 };

struct RunConfig {
  std::string preset = "dense160";
  std::filesystem::path dataset_dir;
  std::filesystem::path out_dir = "run";
  Precision precision = Precision::f32;
  double beta = 10.0;
  // Optional caps on the number of samples used (0 = all).
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  TrainConfig train;
};

// Flat key=value lines; '#' starts a comment, blank lines are ignored.
// Duplicate keys keep the last value.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path);

// Builds a validated config from key/value entries. Unknown keys and
// malformed values throw ContractError. Keys: preset, dataset_dir, out_dir,
// precision (float32|float64), lambda, c, beta, mode (vanilla|bn), epochs,
// batch_size, seed, optimizer (adam|sgd), lr, momentum, scan_every, freeze,
// weight_decay, augment, lr_milestones (epoch:mult,...), train_limit,
// test_limit. The node-drop mode defaults to the preset's.
RunConfig make_run_config(const std::map<std::string, std::string>& entries);

std::string describe(const RunConfig& cfg);

}  // namespace nodedrop
