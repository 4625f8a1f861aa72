#pragma once

// Checkpoint file: 8-byte magic "BVITCKP1", u32-LE manifest length, UTF-8
// JSON manifest, then the raw little-endian f32 blob. Offsets in the
// manifest are element offsets into the blob, strictly increasing and
// contiguous.

#include "bvit/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

namespace bvit {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr char kCheckpointMagic[8] = {'B', 'V', 'I', 'T', 'C', 'K', 'P', '1'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"image_h", c.image_h},   {"image_w", c.image_w},
                        {"channels", c.channels}, {"patch", c.patch},
                        {"dim", c.dim},           {"depth", c.depth},
                        {"heads", c.heads},       {"mlp_ratio", c.mlp_ratio},
                        {"num_classes", c.num_classes}, {"gamma", c.gamma},
                        {"variant", variant_name(c.variant)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_h = j.at("image_h").get<int>();
  c.image_w = j.at("image_w").get<int>();
  c.channels = j.at("channels").get<int>();
  c.patch = j.at("patch").get<int>();
  c.dim = j.at("dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.gamma = j.at("gamma").get<double>();
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.validate();
  return c;
}

template <typename S>
void save_checkpoint(BVit<S>& model, const std::string& path, std::int64_t step = 0) {
  nlohmann::json manifest;
  manifest["config"] = config_to_json(model.cfg);
  manifest["step"] = step;
  auto params = model.named_params();
  std::vector<float> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (auto& [name, t] : params) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["offset"] = blob.size();
    tensors.push_back(std::move(e));
    for (S v : t->data()) blob.push_back(static_cast<float>(v));
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw CheckpointError("short write to checkpoint: " + path);
}

struct LoadedCheckpoint {
  BVit<float> model;
  std::int64_t step = 0;
};

// When `expected` is given the manifest is validated against a model built
// from that config; a mismatch reports the offending tensor by name.
inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in) throw CheckpointError("truncated checkpoint manifest length in " + path);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw CheckpointError("truncated checkpoint manifest in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  const ModelConfig cfg =
      expected ? *expected : config_from_json(manifest.at("config"));
  LoadedCheckpoint loaded{BVit<float>::init(cfg, 0), manifest.value("step", std::int64_t(0))};
  auto params = loaded.model.named_params();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size())
    throw CheckpointError("checkpoint lists " + std::to_string(tensors.size()) +
                          " tensors, model has " + std::to_string(params.size()));
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = tensors.at(i);
    const std::string name = e.at("name").get<std::string>();
    if (name != params[i].first)
      throw CheckpointError("checkpoint tensor '" + name + "' does not match model tensor '" +
                            params[i].first + "'");
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != params[i].second->shape())
      throw CheckpointError("shape mismatch for tensor '" + name + "': checkpoint " +
                            shape_str(shape) + " vs model " + shape_str(params[i].second->shape()));
    const std::size_t offset = e.at("offset").get<std::size_t>();
    if (offset != expected_offset)
      throw CheckpointError("non-contiguous offset for tensor '" + name + "'");
    expected_offset += static_cast<std::size_t>(params[i].second->numel());
  }
  std::vector<float> blob(expected_offset);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != blob.size() * sizeof(float))
    throw CheckpointError("truncated checkpoint blob in " + path + ": expected " +
                          std::to_string(blob.size() * sizeof(float)) + " bytes, got " +
                          std::to_string(in.gcount()));
  std::size_t pos = 0;
  for (auto& [name, t] : params) {
    auto& data = t->mutable_data();
    std::copy_n(blob.begin() + pos, data.size(), data.begin());
    pos += data.size();
  }
  return loaded;
}

}  // namespace bvit
