#include "nodedrop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "nodedrop/data.hpp"

namespace nodedrop {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'N', 'D', 'C', 'K'};
constexpr std::size_t kHeaderBytes = 16;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> b, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[off + i]) << (8 * i);
  return v;
}

json spec_to_json(const LayerSpec& spec) {
  struct Visitor {
    json operator()(const DenseSpec& s) const { return {{"type", "dense"}, {"in", s.in}, {"out", s.out}}; }
    json operator()(const Conv2dSpec& s) const {
      return {{"type", "conv2d"}, {"in_ch", s.in_ch}, {"out_ch", s.out_ch}};
    }
    json operator()(const MaxPool2Spec&) const { return {{"type", "maxpool2"}}; }
    json operator()(const BatchNormSpec& s) const {
      return {{"type", "batchnorm"},
              {"channels", s.channels},
              {"eps", s.eps},
              {"running_momentum", s.running_momentum}};
    }
    json operator()(const FlattenSpec&) const { return {{"type", "flatten"}}; }
    json operator()(const ActivationSpec& s) const {
      return {{"type", "activation"}, {"kind", std::string(to_string(s.kind))}, {"beta", s.beta}};
    }
  };
  return std::visit(Visitor{}, spec);
}

LayerSpec spec_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "dense") return DenseSpec{j.at("in").get<std::size_t>(), j.at("out").get<std::size_t>()};
  if (type == "conv2d")
    return Conv2dSpec{j.at("in_ch").get<std::size_t>(), j.at("out_ch").get<std::size_t>()};
  if (type == "maxpool2") return MaxPool2Spec{};
  if (type == "batchnorm")
    return BatchNormSpec{j.at("channels").get<std::size_t>(), j.at("eps").get<double>(),
                         j.at("running_momentum").get<double>()};
  if (type == "flatten") return FlattenSpec{};
  if (type == "activation")
    return ActivationSpec{parse_activation(j.at("kind").get<std::string>()), j.at("beta").get<double>()};
  throw FormatError("checkpoint: unknown layer type '" + type + "'");
}

json nodedrop_to_json(const NodeDropConfig& c) {
  return {{"lambda", c.lambda},
          {"C", c.C},
          {"mode", std::string(to_string(c.mode))},
          {"train_batch_size", c.train_batch_size},
          {"scan_every", c.scan_every},
          {"freeze_dead", c.freeze_dead}};
}

NodeDropConfig nodedrop_from_json(const json& j) {
  NodeDropConfig c;
  c.lambda = j.at("lambda").get<double>();
  c.C = j.at("C").get<double>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.train_batch_size = j.at("train_batch_size").get<std::size_t>();
  c.scan_every = j.at("scan_every").get<std::size_t>();
  c.freeze_dead = j.at("freeze_dead").get<bool>();
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model, const CheckpointMeta& meta) {
  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["input_shape"] = model.input_shape();
  json layers = json::array();
  for (const auto& l : model.layers()) layers.push_back(spec_to_json(l.spec));
  manifest["layers"] = layers;
  manifest["preset"] = meta.preset;
  manifest["nodedrop"] = nodedrop_to_json(meta.nodedrop);
  manifest["epoch"] = meta.epoch;
  manifest["seed"] = meta.seed;
  manifest["metrics"] = meta.metrics;

  json params = json::array();
  std::size_t offset = 0;
  model.for_each_tensor([&](const std::string& name, const Tensor<float>& t) {
    const std::size_t bytes = 4 * t.size();
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  });
  manifest["params"] = params;

  const std::string text = manifest.dump(1);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  model.for_each_tensor([&](const std::string&, const Tensor<float>& t) {
    for (float v : t.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  });
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: missing NDCK header");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: format version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto manifest_len = get_le<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - kHeaderBytes)
    throw CorruptionError("checkpoint: manifest length exceeds file size");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderBytes,
                           bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + manifest_len));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<std::uint32_t>() != kCheckpointVersion)
      throw VersionError("checkpoint: manifest format_version mismatch");
    std::vector<LayerSpec> specs;
    for (const auto& j : manifest.at("layers")) specs.push_back(spec_from_json(j));
    ck.model = Model<float>(manifest.at("input_shape").get<Shape>(), specs);
    ck.meta.preset = manifest.at("preset").get<std::string>();
    ck.meta.nodedrop = nodedrop_from_json(manifest.at("nodedrop"));
    ck.meta.epoch = manifest.at("epoch").get<std::size_t>();
    ck.meta.seed = manifest.at("seed").get<std::uint64_t>();
    ck.meta.metrics = manifest.at("metrics").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint: bad manifest: ") + e.what());
  } catch (const DimensionError& e) {
    throw CorruptionError(std::string("checkpoint: layer list is not shape-valid: ") + e.what());
  }

  const std::size_t blob_base = kHeaderBytes + manifest_len;
  const json& params = manifest.at("params");
  std::size_t index = 0;
  std::size_t expected_offset = 0;
  ck.model.for_each_tensor([&](const std::string& name, Tensor<float>& t) {
    if (index >= params.size())
      throw CorruptionError("checkpoint: manifest is missing parameter " + name);
    const json& p = params[index++];
    const std::string pname = p.at("name").get<std::string>();
    if (pname != name)
      throw CorruptionError("checkpoint: expected parameter " + name + ", manifest has " + pname);
    const Shape shape = p.at("shape").get<Shape>();
    const std::size_t offset = p.at("offset").get<std::size_t>();
    const std::size_t nbytes = p.at("bytes").get<std::size_t>();
    if (shape != t.shape())
      throw CorruptionError("checkpoint: parameter " + name + " has shape " + shape_str(shape) +
                            ", layer needs " + shape_str(t.shape()));
    if (nbytes != 4 * shape_size(shape) || offset != expected_offset)
      throw CorruptionError("checkpoint: parameter " + name + " declares " +
                            std::to_string(nbytes) + " bytes at offset " + std::to_string(offset) +
                            ", expected " + std::to_string(4 * shape_size(shape)) + " at " +
                            std::to_string(expected_offset));
    if (blob_base + offset + nbytes > bytes.size())
      throw CorruptionError("checkpoint: blob for parameter " + name + " is truncated");
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, blob_base + offset + 4 * i));
    expected_offset += nbytes;
  });
  if (index != params.size())
    throw CorruptionError("checkpoint: manifest lists parameters the model does not have");
  if (blob_base + expected_offset != bytes.size())
    throw CorruptionError("checkpoint: " + std::to_string(bytes.size() - blob_base - expected_offset) +
                          " trailing bytes after the last blob");
  for (const auto& l : ck.model.layers())
    for (std::size_t c = 0; c < l.state.running_var.size(); ++c)
      if (!(l.state.running_var[c] >= 0.0f))
        throw CorruptionError("checkpoint: negative running variance");
  return ck;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  if constexpr (std::is_same_v<T, float>)
    bytes = serialize_checkpoint(model, meta);
  else
    bytes = serialize_checkpoint(model.template cast<float>(), meta);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  return deserialize_checkpoint(bytes);
}

template void save_checkpoint(const Model<float>&, const CheckpointMeta&, const std::filesystem::path&);
template void save_checkpoint(const Model<double>&, const CheckpointMeta&, const std::filesystem::path&);

}  // namespace nodedrop
