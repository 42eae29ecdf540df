// nodedrop command-line tool: train, eval, scan, compact, report.
// Exit codes: 0 ok, 2 usage/config, 3 format/version, 4 numeric abort.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nodedrop/run.hpp"

namespace nd = nodedrop;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 2;
constexpr int kFormat = 3;
constexpr int kNumeric = 4;

struct TrainFlags {
  std::string config;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;
};

void add_value(CLI::App& app, TrainFlags& f, const std::string& flag, const std::string& key,
               const std::string& help) {
  f.options.emplace_back(key, app.add_option(flag, f.values[key], help));
}

std::map<std::string, std::string> merged_entries(TrainFlags& f, CLI::App& app) {
  std::map<std::string, std::string> entries;
  if (!f.config.empty()) entries = nd::parse_kv_file(f.config);
  for (const auto& [key, opt] : f.options)
    if (opt->count() > 0) entries[key] = f.values[key];
  if (app.count("--no-freeze") > 0) entries["freeze"] = "false";
  if (app.count("--augment") > 0) entries["augment"] = "true";
  if (entries.find("dataset_dir") == entries.end())
    if (const char* env = std::getenv("NODEDROP_DATA_DIR")) entries["dataset_dir"] = env;
  return entries;
}

fs::path existing(const std::string& path) {
  if (!fs::is_regular_file(path)) throw nd::ContractError("no such file: " + path);
  return path;
}

nd::DatasetKind kind_for(const nd::Shape& input_shape) {
  return input_shape == nd::Shape{3, 32, 32} ? nd::DatasetKind::cifar10 : nd::DatasetKind::mnist;
}

fs::path dataset_dir_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("NODEDROP_DATA_DIR")) return env;
  return {};
}

int cmd_train(TrainFlags& f, CLI::App& app) {
  const nd::RunConfig cfg = nd::make_run_config(merged_entries(f, app));
  const nd::Preset preset = nd::make_preset(cfg.preset, cfg.beta);
  const nd::DatasetPair data = nd::limit_datasets(nd::load_datasets(preset.dataset, cfg.dataset_dir),
                                                  cfg.train_limit, cfg.test_limit);
  std::cout << nd::describe(cfg) << "\n"
            << "train " << data.train.size() << " samples, test " << data.test.size() << " samples\n";
  const nd::RunResult r = nd::run_training(cfg, data, &std::cout);
  std::cout << r.final_scan.summary() << "\n"
            << "wrote " << (cfg.out_dir / "metrics.csv").string() << " and "
            << (cfg.out_dir / "model.ndck").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_flag, std::size_t test_limit,
             const std::string& precision) {
  const nd::Checkpoint ck = nd::load_checkpoint(existing(ckpt_path));
  const nd::DatasetPair data = nd::limit_datasets(
      nd::load_datasets(kind_for(ck.model.input_shape()), dataset_dir_or_env(data_flag)), 0, test_limit);
  double acc = 0.0;
  if (precision == "float64")
    acc = nd::evaluate(ck.model.cast<double>(), data.test);
  else if (precision == "float32")
    acc = nd::evaluate(ck.model, data.test);
  else
    throw nd::ContractError("precision: expected float32 or float64");
  const auto correct = static_cast<std::size_t>(std::llround(acc * static_cast<double>(data.test.size())));
  std::printf("accuracy %.6f (%zu/%zu)\n", acc, correct, data.test.size());
  return 0;
}

int cmd_scan(const std::string& ckpt_path, const std::string& out, const std::string& margins_out) {
  const nd::Checkpoint ck = nd::load_checkpoint(existing(ckpt_path));
  const nd::LivenessReport report = nd::scan_network(ck.model, ck.meta.nodedrop);
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw nd::FormatError("cannot write " + path);
  };
  if (out.empty()) {
    std::cout << report.to_csv();
  } else {
    write(out, report.to_csv());
  }
  if (!margins_out.empty()) write(margins_out, report.margins_csv());
  std::cerr << report.summary() << "\n";
  return 0;
}

int cmd_compact(const std::string& in, const std::string& out, bool keep_one) {
  if (fs::exists(out) && fs::equivalent(in, out))
    throw nd::ContractError("compact: output must differ from the input checkpoint");
  const nd::Checkpoint ck = nd::load_checkpoint(existing(in));
  const nd::LivenessReport report = nd::scan_network(ck.model, ck.meta.nodedrop);
  const auto result = nd::compact(ck.model, report,
                                  keep_one ? nd::DegeneratePolicy::keep_one : nd::DegeneratePolicy::error);
  nd::save_checkpoint(result.model, ck.meta, out);
  std::printf("params_before %zu\nparams_after %zu\nreduction_factor %.4f\nlive_nodes %zu/%zu\n",
              result.params_before, result.params_after,
              result.params_after ? static_cast<double>(result.params_before) / result.params_after : 0.0,
              report.live_nodes, report.total_nodes);
  return 0;
}

struct ReportRow {
  double lambda = 0;
  std::string run;
  nd::MetricsRow last;
  std::size_t total_params = 0;
};

int cmd_report(const std::vector<std::string>& csvs, const std::string& out) {
  std::vector<ReportRow> rows;
  for (const auto& path : csvs) {
    std::ifstream in(existing(path));
    std::stringstream ss;
    ss << in.rdbuf();
    const nd::MetricsLog log = nd::MetricsLog::parse_csv(ss.str());
    if (log.rows.empty()) throw nd::FormatError(path + ": no metrics rows");
    const fs::path ckpt = fs::path(path).parent_path() / "model.ndck";
    const nd::Checkpoint ck = nd::load_checkpoint(existing(ckpt.string()));
    rows.push_back({ck.meta.nodedrop.lambda, fs::path(path).parent_path().string(), log.rows.back(),
                    ck.model.param_count()});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ReportRow& a, const ReportRow& b) { return a.lambda < b.lambda; });

  std::ostringstream csv;
  csv << "lambda,run,epochs,test_acc,live_nodes,live_params,total_params,pruned_pct,factor\n";
  std::printf("%-10s %-24s %6s %9s %10s %12s %9s %9s\n", "lambda", "run", "epochs", "test_acc",
              "live_nodes", "live_params", "pruned%", "factor");
  for (const ReportRow& r : rows) {
    const double pruned =
        100.0 * (1.0 - static_cast<double>(r.last.live_params) / static_cast<double>(r.total_params));
    const double factor =
        r.last.live_params ? static_cast<double>(r.total_params) / r.last.live_params : 0.0;
    std::printf("%-10.3g %-24s %6zu %9.4f %10zu %12zu %9.2f %9.2f\n", r.lambda, r.run.c_str(),
                r.last.epoch, r.last.test_acc, r.last.live_nodes, r.last.live_params, pruned, factor);
    char line[256];
    std::snprintf(line, sizeof line, "%.17g,%s,%zu,%.6f,%zu,%zu,%zu,%.4f,%.4f\n", r.lambda,
                  r.run.c_str(), r.last.epoch, r.last.test_acc, r.last.live_nodes, r.last.live_params,
                  r.total_params, pruned, factor);
    csv << line;
  }
  if (!out.empty()) {
    std::ofstream os(out, std::ios::binary | std::ios::trunc);
    os << csv.str();
    if (!os) throw nd::FormatError("cannot write " + out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nodedrop: train networks that shed certified-dead nodes, then prune them"};
  app.require_subcommand(1);

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "train a preset and write metrics.csv + model.ndck");
  train->add_option("--config", tf.config, "key=value config file; flags override its entries");
  add_value(*train, tf, "--preset", "preset", "architecture preset, e.g. dense160, vgg16_cifar_bn");
  add_value(*train, tf, "--dataset-dir", "dataset_dir", "dataset directory (env NODEDROP_DATA_DIR)");
  add_value(*train, tf, "--lambda", "lambda", "regularization strength (>= 0)");
  add_value(*train, tf, "--c", "c", "target depth of the dead region (> 0)");
  add_value(*train, tf, "--beta", "beta", "soft clamped ReLU sharpness");
  add_value(*train, tf, "--mode", "mode", "vanilla or bn");
  add_value(*train, tf, "--epochs", "epochs", "training epochs");
  add_value(*train, tf, "--batch-size", "batch_size", "training batch size");
  add_value(*train, tf, "--seed", "seed", "random seed");
  add_value(*train, tf, "--optimizer", "optimizer", "adam or sgd");
  add_value(*train, tf, "--lr", "lr", "learning rate");
  add_value(*train, tf, "--momentum", "momentum", "sgd momentum");
  add_value(*train, tf, "--lr-milestones", "lr_milestones", "epoch:multiplier,... (0-based epochs)");
  add_value(*train, tf, "--scan-every", "scan_every", "liveness scan period in epochs");
  add_value(*train, tf, "--out-dir", "out_dir", "output directory");
  add_value(*train, tf, "--precision", "precision", "float32 or float64");
  add_value(*train, tf, "--weight-decay", "weight_decay", "L2 on weights (bn mode only)");
  add_value(*train, tf, "--train-limit", "train_limit", "use only the first N training samples");
  add_value(*train, tf, "--test-limit", "test_limit", "use only the first N test samples");
  train->add_flag("--no-freeze", "keep optimizer state of nodes that die");
  train->add_flag("--augment", "random 4-pixel shifts and horizontal flips");

  std::string ckpt, data_dir, precision = "float32", out, margins_out, compact_out, report_out;
  std::size_t test_limit = 0;
  bool keep_one = false;
  std::vector<std::string> csvs;

  CLI::App* eval = app.add_subcommand("eval", "print test accuracy of a checkpoint");
  eval->add_option("checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--dataset-dir", data_dir, "dataset directory (env NODEDROP_DATA_DIR)");
  eval->add_option("--test-limit", test_limit, "use only the first N test samples");
  eval->add_option("--precision", precision, "float32 or float64");

  CLI::App* scan = app.add_subcommand("scan", "liveness report of a checkpoint (CSV)");
  scan->add_option("checkpoint", ckpt, "checkpoint file")->required();
  scan->add_option("--out", out, "write the per-layer CSV here instead of stdout");
  scan->add_option("--margins", margins_out, "also write per-node margins CSV");

  CLI::App* compact = app.add_subcommand("compact", "remove dead nodes and write a smaller checkpoint");
  compact->add_option("checkpoint", ckpt, "input checkpoint")->required();
  compact->add_option("out", compact_out, "output checkpoint")->required();
  compact->add_flag("--keep-one", keep_one, "keep one node of a fully dead layer instead of failing");

  CLI::App* report = app.add_subcommand("report", "lambda-sweep table from metrics CSVs");
  report->add_option("metrics", csvs, "metrics.csv files (model.ndck must sit beside each)")
      ->required();
  report->add_option("--out", report_out, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return cmd_train(tf, *train);
    if (*eval) return cmd_eval(ckpt, data_dir, test_limit, precision);
    if (*scan) return cmd_scan(ckpt, out, margins_out);
    if (*compact) return cmd_compact(ckpt, compact_out, keep_one);
    if (*report) return cmd_report(csvs, report_out);
  } catch (const nd::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const nd::VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const nd::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const nd::DegenerateLayerError& e) {
    std::cerr << "error: " << e.what() << " (rerun with --keep-one)\n";
    return kUsage;
  } catch (const nd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kUsage;
}
