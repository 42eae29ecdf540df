#include "nodedrop/run.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

namespace nodedrop {

namespace {

std::filesystem::path require(const std::filesystem::path& p) {
  if (!std::filesystem::is_regular_file(p)) throw ContractError("missing dataset file " + p.string());
  return p;
}

template <typename T>
RunResult run_typed(const RunConfig& cfg, const DatasetPair& data, std::ostream* log) {
  const Preset preset = make_preset(cfg.preset, cfg.beta);
  if (data.train.sample_shape() != preset.input_shape)
    throw ContractError("preset " + cfg.preset + " expects samples " + shape_str(preset.input_shape) +
                        ", dataset has " + shape_str(data.train.sample_shape()));
  Rng init = Rng(cfg.train.seed).derive(kInitStream);
  Model<T> model = Model<T>::build(preset.input_shape, preset.layers, init);

  RunResult result;
  TrainHooks hooks;
  hooks.on_scan = [&](const LivenessReport& r) { result.final_scan = r; };
  if (log) {
    hooks.on_epoch = [&](const MetricsRow& r) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "epoch %3zu  loss %.4f  reg %.4f  test_acc %.4f  live_nodes %zu  live_params %zu",
                    r.epoch, r.train_loss, r.reg_loss, r.test_acc, r.live_nodes, r.live_params);
      *log << buf << std::endl;
    };
  }
  result.metrics = train(model, data.train, data.test, cfg.train, hooks);

  const MetricsRow& last = result.metrics.rows.back();
  result.meta.preset = cfg.preset;
  result.meta.nodedrop = cfg.train.nodedrop;
  result.meta.epoch = last.epoch;
  result.meta.seed = cfg.train.seed;
  result.meta.metrics = {{"train_loss", last.train_loss},
                         {"reg_loss", last.reg_loss},
                         {"test_acc", last.test_acc},
                         {"live_nodes", static_cast<double>(last.live_nodes)},
                         {"live_params", static_cast<double>(last.live_params)}};

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream out(cfg.out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    out << result.metrics.to_csv();
    if (!out) throw FormatError("cannot write " + (cfg.out_dir / "metrics.csv").string());
  }
  save_checkpoint(model, result.meta, cfg.out_dir / "model.ndck");
  return result;
}

}  // namespace

DatasetPair load_datasets(DatasetKind kind, const std::filesystem::path& dir) {
  if (dir.empty()) throw ContractError("no dataset directory (use --dataset-dir or NODEDROP_DATA_DIR)");
  DatasetPair out;
  if (kind == DatasetKind::mnist) {
    out.train = load_mnist_idx(require(dir / "train-images-idx3-ubyte"),
                               require(dir / "train-labels-idx1-ubyte"));
    out.test = load_mnist_idx(require(dir / "t10k-images-idx3-ubyte"),
                              require(dir / "t10k-labels-idx1-ubyte"));
    return out;
  }
  std::vector<std::filesystem::path> batches;
  for (int i = 1; i <= 5; ++i) {
    const auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (std::filesystem::is_regular_file(p)) batches.push_back(p);
  }
  if (batches.empty()) throw ContractError("missing dataset file " + (dir / "data_batch_1.bin").string());
  out.train = load_cifar10(batches);
  out.test = load_cifar10({require(dir / "test_batch.bin")});
  return out;
}

DatasetPair limit_datasets(DatasetPair data, std::size_t train_limit, std::size_t test_limit) {
  if (train_limit > 0 && train_limit < data.train.size()) data.train = subset(data.train, 0, train_limit);
  if (test_limit > 0 && test_limit < data.test.size()) data.test = subset(data.test, 0, test_limit);
  return data;
}

RunResult run_training(const RunConfig& cfg, const DatasetPair& data, std::ostream* log) {
  if (cfg.precision == Precision::f64) return run_typed<double>(cfg, data, log);
  return run_typed<float>(cfg, data, log);
}

}  // namespace nodedrop
