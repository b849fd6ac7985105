#pragma once

// Checkpoint directory layout:
//   manifest.json  — ordered tensor index: name, shape, dtype "f32", offset
//   tensors.bin    — little-endian row-major float32, concatenated
//   config.json    — model config plus free-form training metadata

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "lics/io_util.hpp"
#include "lics/model.hpp"

namespace lics {

using json = nlohmann::ordered_json;

namespace detail {

template <typename T>
void save_tensor_dir(
    const std::vector<std::pair<std::string, ad::Var<T>>>& entries,
    const fs::path& dir, const json& config) {
  fs::create_directories(dir);
  json manifest = json::array();
  std::vector<char> payload;
  std::int64_t offset = 0;
  for (const auto& [name, var] : entries) {
    const auto& t = var.value();
    manifest.push_back({{"name", name},
                        {"shape", t.shape()},
                        {"dtype", "f32"},
                        {"offset", offset}});
    std::vector<float> f32(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      f32[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
    std::size_t bytes = f32.size() * sizeof(float);
    payload.resize(payload.size() + bytes);
    std::memcpy(payload.data() + offset, f32.data(), bytes);
    offset += static_cast<std::int64_t>(bytes);
  }
  atomic_write(dir / "tensors.bin", payload.data(), payload.size());
  atomic_write(dir / "manifest.json", json{{"tensors", manifest}}.dump(2));
  atomic_write(dir / "config.json", config.dump(2));
}

template <typename T>
void load_tensor_dir(
    const std::vector<std::pair<std::string, ad::Var<T>>>& entries,
    const fs::path& dir) {
  auto manifest = json::parse(read_file_text(dir / "manifest.json"));
  auto payload = read_file_bytes(dir / "tensors.bin");
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != entries.size())
    throw IoError("checkpoint manifest lists " +
                  std::to_string(tensors.size()) + " tensors, model has " +
                  std::to_string(entries.size()));
  std::int64_t total_bytes = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = tensors.at(i);
    const std::string name = e.at("name").get<std::string>();
    if (name != entries[i].first)
      throw IoError("checkpoint tensor order mismatch: " + name + " vs " +
                    entries[i].first);
    if (e.at("dtype").get<std::string>() != "f32")
      throw IoError("checkpoint dtype must be f32 for " + name);
    Shape shape = e.at("shape").get<Shape>();
    auto var = entries[i].second;
    if (shape != var.value().shape())
      throw IoError("checkpoint shape mismatch for " + name + ": " +
                    shape_str(shape) + " vs " +
                    shape_str(var.value().shape()));
    std::int64_t offset = e.at("offset").get<std::int64_t>();
    std::int64_t bytes =
        var.value().numel() * static_cast<std::int64_t>(sizeof(float));
    if (offset < 0 ||
        offset + bytes > static_cast<std::int64_t>(payload.size()))
      throw IoError("checkpoint payload truncated for " + name);
    std::vector<float> f32(static_cast<std::size_t>(var.value().numel()));
    std::memcpy(f32.data(), payload.data() + offset,
                static_cast<std::size_t>(bytes));
    Tensor<T>& dst = var.leaf_value();
    for (std::int64_t k = 0; k < dst.numel(); ++k)
      dst[k] = static_cast<T>(f32[static_cast<std::size_t>(k)]);
    total_bytes += bytes;
  }
  if (static_cast<std::int64_t>(payload.size()) != total_bytes)
    throw IoError("checkpoint payload size " + std::to_string(payload.size()) +
                  " != manifest total " + std::to_string(total_bytes));
}

}  // namespace detail

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"concept_dim", c.concept_dim},
              {"num_classes", c.num_classes},
              {"input_shape", c.input_shape},
              {"encoder_depth", c.encoder_depth},
              {"blocks_per_stage", c.blocks_per_stage},
              {"base_width", c.base_width},
              {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.concept_dim = j.at("concept_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  auto sh = j.at("input_shape");
  for (int i = 0; i < 3; ++i)
    c.input_shape[static_cast<std::size_t>(i)] = sh.at(i).get<int>();
  c.encoder_depth = j.at("encoder_depth").get<int>();
  c.blocks_per_stage = j.value("blocks_per_stage", 2);
  c.base_width = j.value("base_width", 16);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <typename T>
void save_checkpoint(const LicsNet<T>& model, const fs::path& dir,
                     const json& meta = json::object()) {
  json cfg{{"model", model_config_to_json(model.config())}, {"meta", meta}};
  detail::save_tensor_dir(model.params().entries(), dir, cfg);
}

inline json load_checkpoint_meta(const fs::path& dir) {
  auto cfg = json::parse(read_file_text(dir / "config.json"));
  return cfg.value("meta", json::object());
}

inline ModelConfig load_checkpoint_config(const fs::path& dir) {
  auto cfg = json::parse(read_file_text(dir / "config.json"));
  return model_config_from_json(cfg.at("model"));
}

// Loads a checkpoint into a freshly constructed model. If `expected` is
// given, the stored config must match it exactly.
template <typename T>
LicsNet<T> load_checkpoint(const fs::path& dir,
                           const ModelConfig* expected = nullptr) {
  if (!fs::exists(dir / "config.json"))
    throw IoError("checkpoint config missing: " +
                  (dir / "config.json").string());
  ModelConfig cfg = load_checkpoint_config(dir);
  if (expected && !(cfg == *expected))
    throw ConfigError("checkpoint config mismatch at " + dir.string());
  LicsNet<T> model(cfg);
  detail::load_tensor_dir(model.params().entries(), dir);
  return model;
}

}  // namespace lics
