#include "nodedrop/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "nodedrop/presets.hpp"

namespace nodedrop {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out))
    throw ContractError(key + ": '" + v + "' is not a number");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ContractError(key + ": '" + v + "' is not a non-negative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ContractError(key + ": '" + v + "' is not a boolean");
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ContractError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str());
}

RunConfig make_run_config(const std::map<std::string, std::string>& user_entries) {
  RunConfig cfg;
  std::map<std::string, std::string> entries = user_entries;
  auto get = [&](const char* key) -> const std::string* {
    const auto it = entries.find(key);
    return it == entries.end() ? nullptr : &it->second;
  };
  static const char* kKeys[] = {"preset", "dataset_dir", "out_dir", "precision", "lambda", "c",
                                "beta", "mode", "epochs", "batch_size", "seed", "optimizer",
                                "lr", "momentum", "scan_every", "freeze", "weight_decay",
                                "augment", "lr_milestones", "train_limit", "test_limit"};
  for (const auto& [key, value] : entries) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw ContractError("unknown config key '" + key + "'");
  }

  if (auto v = get("preset")) cfg.preset = *v;
  if (auto v = get("beta")) cfg.beta = to_double("beta", *v);
  if (!(cfg.beta > 0)) throw ContractError("beta must be > 0");
  const Preset preset = make_preset(cfg.preset, cfg.beta);
  for (const auto& [key, value] : preset.defaults) entries.try_emplace(key, value);

  if (auto v = get("dataset_dir")) cfg.dataset_dir = *v;
  if (auto v = get("out_dir")) cfg.out_dir = *v;
  if (auto v = get("precision")) {
    if (*v == "float32" || *v == "f32" || *v == "32") cfg.precision = Precision::f32;
    else if (*v == "float64" || *v == "f64" || *v == "64") cfg.precision = Precision::f64;
    else throw ContractError("precision: expected float32 or float64, got '" + *v + "'");
  }

  TrainConfig& t = cfg.train;
  NodeDropConfig& nd = t.nodedrop;
  nd.mode = preset.mode;
  if (auto v = get("mode")) nd.mode = parse_mode(*v);
  if (auto v = get("lambda")) nd.lambda = to_double("lambda", *v);
  if (auto v = get("c")) nd.C = to_double("c", *v);
  if (auto v = get("scan_every")) nd.scan_every = to_uint("scan_every", *v);
  if (auto v = get("freeze")) nd.freeze_dead = to_bool("freeze", *v);
  if (auto v = get("epochs")) t.epochs = to_uint("epochs", *v);
  if (auto v = get("batch_size")) t.batch_size = to_uint("batch_size", *v);
  if (auto v = get("seed")) t.seed = to_uint("seed", *v);
  if (auto v = get("optimizer")) t.optimizer.kind = parse_optimizer(*v);
  if (auto v = get("lr")) t.optimizer.lr = to_double("lr", *v);
  if (auto v = get("momentum")) t.optimizer.momentum = to_double("momentum", *v);
  if (auto v = get("weight_decay")) t.weight_decay = to_double("weight_decay", *v);
  if (auto v = get("augment")) t.augment = to_bool("augment", *v);
  if (auto v = get("lr_milestones")) {
    std::istringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw ContractError("lr_milestones: expected epoch:multiplier, got '" + item + "'");
      t.lr_milestones.emplace_back(to_uint("lr_milestones", trim(item.substr(0, colon))),
                                   to_double("lr_milestones", trim(item.substr(colon + 1))));
    }
  }
  if (auto v = get("train_limit")) cfg.train_limit = to_uint("train_limit", *v);
  if (auto v = get("test_limit")) cfg.test_limit = to_uint("test_limit", *v);
  nd.train_batch_size = t.batch_size;
  t.validate();

  // Build once so topology errors surface before any data is read.
  const Model<float> probe(preset.input_shape, preset.layers);
  if (prunable_layers(probe, nd).empty())
    throw StructuralError("preset " + cfg.preset + " has no prunable layers in " +
                          std::string(to_string(nd.mode)) + " mode");
  return cfg;
}

std::string describe(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::ostringstream os;
  os << "preset=" << cfg.preset << " mode=" << to_string(t.nodedrop.mode)
     << " lambda=" << t.nodedrop.lambda << " c=" << t.nodedrop.C << " beta=" << cfg.beta
     << " epochs=" << t.epochs << " batch_size=" << t.batch_size << " seed=" << t.seed
     << " optimizer=" << to_string(t.optimizer.kind) << " lr=" << t.optimizer.lr
     << " precision=" << (cfg.precision == Precision::f32 ? "float32" : "float64");
  return os.str();
}

}  // namespace nodedrop
