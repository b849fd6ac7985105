#pragma once

// Run configuration: JSON schema with strict key validation. Precedence is
// flag > file > default; unknown keys are rejected.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lics/aig.hpp"
#include "lics/checkpoint.hpp"
#include "lics/datapipe.hpp"
#include "lics/harness.hpp"
#include "lics/trainer.hpp"

namespace lics {

namespace cfgdetail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object())
    throw ConfigError("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + key + "' in " + where);
}

}  // namespace cfgdetail

inline PgdConfig pgd_from_json(const json& j, const std::string& where,
                               const PgdConfig& defaults = {}) {
  cfgdetail::check_keys(
      j, {"preset", "epsilon", "steps", "step_size", "random_start", "seed"},
      where);
  PgdConfig cfg = defaults;
  if (j.contains("preset"))
    cfg = pgd_preset(j.at("preset").get<std::string>());
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.step_size = j.value("step_size", cfg.step_size);
  cfg.random_start = j.value("random_start", cfg.random_start);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

inline LossWeights weights_from_json(const json& j, const std::string& where) {
  cfgdetail::check_keys(
      j, {"preset", "alpha_ce", "beta_lc", "gamma_lr", "lambda_re", "beta1",
          "beta2"},
      where);
  LossWeights w;
  if (j.contains("preset"))
    w = ablation_preset(j.at("preset").get<std::string>());
  w.alpha_ce = j.value("alpha_ce", w.alpha_ce);
  w.beta_lc = j.value("beta_lc", w.beta_lc);
  w.gamma_lr = j.value("gamma_lr", w.gamma_lr);
  w.lambda_re = j.value("lambda_re", w.lambda_re);
  w.beta1 = j.value("beta1", w.beta1);
  w.beta2 = j.value("beta2", w.beta2);
  w.validate();
  return w;
}

inline ModelConfig model_from_json(const json& j) {
  cfgdetail::check_keys(j,
                        {"concept_dim", "num_classes", "input_shape",
                         "encoder_depth", "blocks_per_stage", "base_width",
                         "seed"},
                        "model");
  ModelConfig c;
  c.concept_dim = j.value("concept_dim", c.concept_dim);
  c.num_classes = j.value("num_classes", c.num_classes);
  if (j.contains("input_shape")) {
    auto sh = j.at("input_shape");
    if (!sh.is_array() || sh.size() != 3)
      throw ConfigError("config: model.input_shape must be [C,H,W]");
    for (int i = 0; i < 3; ++i)
      c.input_shape[static_cast<std::size_t>(i)] = sh.at(i).get<int>();
  }
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.base_width = j.value("base_width", c.base_width);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline TrainConfig train_from_json(const json& j) {
  cfgdetail::check_keys(
      j,
      {"epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2",
       "adam_eps", "seed", "pgd", "eval_pgd", "weights", "linearity_mode",
       "probe_size"},
      "train");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("pgd")) c.pgd = pgd_from_json(j.at("pgd"), "train.pgd", c.pgd);
  if (j.contains("eval_pgd"))
    c.eval_pgd = pgd_from_json(j.at("eval_pgd"), "train.eval_pgd", c.eval_pgd);
  if (j.contains("weights"))
    c.weights = weights_from_json(j.at("weights"), "train.weights");
  if (j.contains("linearity_mode"))
    c.linearity_mode =
        linearity_mode_from_string(j.at("linearity_mode").get<std::string>());
  c.probe_size = j.value("probe_size", c.probe_size);
  c.validate();
  return c;
}

inline DatasetSpec dataset_from_json(const json& j) {
  cfgdetail::check_keys(j,
                        {"name", "root", "split", "download", "shuffle_seed",
                         "toy", "train_limit", "eval_limit"},
                        "dataset");
  DatasetSpec c;
  c.name = j.value("name", std::string("mnist"));
  if (j.contains("root")) c.root = j.at("root").get<std::string>();
  c.split = j.value("split", c.split);
  c.download = j.value("download", c.download);
  c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
  if (j.contains("toy")) {
    const auto& t = j.at("toy");
    cfgdetail::check_keys(t, {"classes", "dims", "samples", "seed"},
                          "dataset.toy");
    c.toy.classes = t.value("classes", c.toy.classes);
    c.toy.dims = t.value("dims", c.toy.dims);
    c.toy.samples = t.value("samples", c.toy.samples);
    c.toy.seed = t.value("seed", c.toy.seed);
  }
  c.validate();
  return c;
}

inline AigConfig aig_from_json(const json& j, const std::string& where) {
  cfgdetail::check_keys(j, {"overshoot", "max_concept_iters", "inversion"},
                        where);
  AigConfig c;
  c.overshoot = j.value("overshoot", c.overshoot);
  c.max_concept_iters = j.value("max_concept_iters", c.max_concept_iters);
  if (j.contains("inversion")) {
    const auto& i = j.at("inversion");
    cfgdetail::check_keys(
        i, {"step_size", "max_iters", "epsilon_l2", "concept_tol"},
        where + ".inversion");
    c.inversion.step_size = i.value("step_size", c.inversion.step_size);
    c.inversion.max_iters = i.value("max_iters", c.inversion.max_iters);
    c.inversion.epsilon_l2 = i.value("epsilon_l2", c.inversion.epsilon_l2);
    c.inversion.concept_tol = i.value("concept_tol", c.inversion.concept_tol);
  }
  c.validate();
  return c;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec dataset;
  PgdConfig attack_pgd = pgd_preset("mnist");
  AigConfig attack_aig;
  int train_limit = 0;  // 0 = full split
  int eval_limit = 0;
  fs::path out_dir = "out";
  std::vector<std::string> report_formats{"json", "csv"};
  std::optional<std::uint64_t> seed;  // top-level seed, if given
};

inline RunConfig run_config_from_json(const json& j) {
  cfgdetail::check_keys(
      j, {"seed", "model", "train", "dataset", "attack", "output"}, "config");
  RunConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("dataset")) {
    c.dataset = dataset_from_json(j.at("dataset"));
    c.train_limit = j.at("dataset").value("train_limit", 0);
    c.eval_limit = j.at("dataset").value("eval_limit", 0);
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    cfgdetail::check_keys(a, {"pgd", "aig"}, "attack");
    if (a.contains("pgd"))
      c.attack_pgd = pgd_from_json(a.at("pgd"), "attack.pgd", c.attack_pgd);
    if (a.contains("aig")) c.attack_aig = aig_from_json(a.at("aig"), "attack.aig");
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    cfgdetail::check_keys(o, {"dir", "formats"}, "output");
    if (o.contains("dir")) c.out_dir = o.at("dir").get<std::string>();
    if (o.contains("formats"))
      c.report_formats = o.at("formats").get<std::vector<std::string>>();
  }
  for (const auto& f : c.report_formats)
    if (f != "json" && f != "csv")
      throw ConfigError("config: unknown report format '" + f + "'");
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path))
    throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " +
                      e.what());
  }
  return run_config_from_json(j);
}

// Seed resolution: flag > component seed > top-level seed > fresh random
// (which the caller must log).
struct SeedPlan {
  std::uint64_t value = 0;
  bool generated = false;
};

inline SeedPlan resolve_seed(const RunConfig& cfg,
                             std::optional<std::uint64_t> flag_seed) {
  if (flag_seed) return {*flag_seed, false};
  if (cfg.seed) return {*cfg.seed, false};
  if (cfg.train.seed != 0) return {cfg.train.seed, false};
  if (cfg.model.seed != 0) return {cfg.model.seed, false};
  std::random_device rd;
  std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  return {s, true};
}

}  // namespace lics
