#pragma once

#include <iosfwd>

#include "nodedrop/checkpoint.hpp"
#include "nodedrop/config.hpp"
#include "nodedrop/presets.hpp"

namespace nodedrop {

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// MNIST: {train,t10k}-{images-idx3,labels-idx1}-ubyte.
// CIFAR-10: data_batch_{1..5}.bin (those present) and test_batch.bin.
// Missing files throw ContractError naming the expected path.
DatasetPair load_datasets(DatasetKind kind, const std::filesystem::path& dir);

// Applies train_limit/test_limit.
DatasetPair limit_datasets(DatasetPair data, std::size_t train_limit, std::size_t test_limit);

struct RunResult {
  MetricsLog metrics;
  LivenessReport final_scan;
  CheckpointMeta meta;
};

// Builds the preset from cfg.seed, trains it and writes metrics.csv and
// model.ndck into cfg.out_dir. Progress lines go to `log` when given.
RunResult run_training(const RunConfig& cfg, const DatasetPair& data, std::ostream* log = nullptr);

// Seed stream used for weight initialization, disjoint from the per-epoch
// streams of the training loop.
inline constexpr std::uint64_t kInitStream = 0x1417'0000'0000'0000ULL;

}  // namespace nodedrop
