#pragma once

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lics/aig.hpp"
#include "lics/target_models.hpp"
#include "lics/trainer.hpp"

namespace lics {

struct AttackDescriptor {
  enum class Kind { none, pgd, aig };
  Kind kind = Kind::none;
  PgdConfig pgd;
  AigConfig aig;

  std::string label() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::none:
        os << "none";
        break;
      case Kind::pgd:
        os << "pgd(eps=" << pgd.epsilon << ",steps=" << pgd.steps
           << ",step=" << pgd.step_size << ")";
        break;
      case Kind::aig:
        os << "aig_liir(overshoot=" << aig.overshoot
           << ",eps_l2=" << aig.inversion.epsilon_l2
           << ",iters=" << aig.inversion.max_iters << ")";
        break;
    }
    return os.str();
  }
};

struct EvalReport {
  std::string model_id;
  std::string dataset;
  std::string split;
  std::string attack;
  int count = 0;
  int correct = 0;
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  std::vector<int> per_class_count;
  int cap = 0;  // 0 = uncapped

  nlohmann::ordered_json to_json() const {
    return {{"model", model_id},
            {"dataset", dataset},
            {"split", split},
            {"attack", attack},
            {"count", count},
            {"correct", correct},
            {"accuracy", accuracy},
            {"per_class_accuracy", per_class_accuracy},
            {"per_class_count", per_class_count},
            {"cap", cap}};
  }

  static std::string csv_header() {
    return "model,dataset,split,attack,count,correct,accuracy,per_class_accuracy";
  }
  std::string csv_row() const {
    std::ostringstream os;
    os << model_id << ',' << dataset << ',' << split << ',' << '"' << attack
       << '"' << ',' << count << ',' << correct << ',' << accuracy << ",\"";
    for (std::size_t i = 0; i < per_class_accuracy.size(); ++i)
      os << (i ? ";" : "") << per_class_accuracy[i];
    os << '"';
    return os.str();
  }
};

namespace detail {

template <typename T>
EvalReport score(const std::vector<int>& preds, const ImageBatch<T>& data,
                 int num_classes) {
  EvalReport rep;
  rep.count = data.size();
  rep.per_class_accuracy.assign(static_cast<std::size_t>(num_classes), 0.0);
  rep.per_class_count.assign(static_cast<std::size_t>(num_classes), 0);
  std::vector<int> per_class_correct(static_cast<std::size_t>(num_classes), 0);
  for (int i = 0; i < data.size(); ++i) {
    int y = data.labels[static_cast<std::size_t>(i)];
    rep.per_class_count[static_cast<std::size_t>(y)]++;
    if (preds[static_cast<std::size_t>(i)] == y) {
      ++rep.correct;
      per_class_correct[static_cast<std::size_t>(y)]++;
    }
  }
  rep.accuracy = static_cast<double>(rep.correct) / rep.count;
  for (int c = 0; c < num_classes; ++c)
    rep.per_class_accuracy[static_cast<std::size_t>(c)] =
        rep.per_class_count[static_cast<std::size_t>(c)]
            ? static_cast<double>(per_class_correct[static_cast<std::size_t>(c)]) /
                  rep.per_class_count[static_cast<std::size_t>(c)]
            : 0.0;
  return rep;
}

}  // namespace detail

// Deterministic accuracy of a model over a split: attacked evaluation
// regenerates adversarial examples from the clean split against this model
// (white box). An optional cap limits the evaluated subset and is recorded.
template <typename T, typename Model>
EvalReport evaluate(const Model& model, const ImageBatch<T>& data,
                    const AttackDescriptor& attack, int num_classes,
                    const std::string& model_id, const std::string& dataset,
                    const std::string& split, int cap = 0) {
  if (data.size() == 0) throw ConfigError("evaluate: empty split");
  ImageBatch<T> subset =
      (cap > 0 && data.size() > cap) ? data.slice(0, cap) : data;

  std::vector<int> preds;
  switch (attack.kind) {
    case AttackDescriptor::Kind::none:
      preds = predict_chunked(model, subset);
      break;
    case AttackDescriptor::Kind::pgd: {
      auto adv = pgd_attack(ce_attack_loss(model), subset, attack.pgd);
      preds = predict_chunked(model, adv);
      break;
    }
    case AttackDescriptor::Kind::aig: {
      if constexpr (std::is_same_v<Model, LicsNet<T>>) {
        auto res = aig_liir(model, subset, attack.aig);
        preds.resize(static_cast<std::size_t>(subset.size()));
        parallel_chunks(subset.size(), [&](int, ChunkRange r) {
          for (int i = r.begin; i < r.end; ++i)
            preds[static_cast<std::size_t>(i)] =
                model.predict({res.samples[static_cast<std::size_t>(i)].x_adv,
                               {0}})[0];
        });
      } else {
        throw ConfigError("evaluate: aig attack needs a LiCS model");
      }
      break;
    }
  }
  EvalReport rep = detail::score(preds, subset, num_classes);
  rep.model_id = model_id;
  rep.dataset = dataset;
  rep.split = split;
  rep.attack = attack.label();
  rep.cap = cap;
  return rep;
}

// --- transferability ---------------------------------------------------------

template <typename T>
struct TargetHandle {
  std::string id;
  std::function<std::vector<int>(const ImageBatch<T>&)> predict;
};

struct TransferRow {
  std::string target_id;
  double clean_acc = 0;
  double adv_acc = 0;
  double drop = 0;
  int count = 0;
};

struct TransferReport {
  std::string source_id;
  std::string attack;
  int generated = 0;
  int flipped = 0;
  int errors = 0;
  int cap = 0;
  std::vector<TransferRow> rows;

  nlohmann::ordered_json to_json() const {
    auto rows_json = nlohmann::ordered_json::array();
    for (const auto& r : rows)
      rows_json.push_back({{"target", r.target_id},
                           {"clean_accuracy", r.clean_acc},
                           {"adversarial_accuracy", r.adv_acc},
                           {"drop", r.drop},
                           {"count", r.count}});
    return {{"source", source_id}, {"attack", attack},
            {"generated", generated}, {"flipped", flipped},
            {"errors", errors},       {"cap", cap},
            {"targets", rows_json}};
  }

  static std::string csv_header() {
    return "source,attack,target,count,clean_accuracy,adversarial_accuracy,drop";
  }
  std::vector<std::string> csv_rows() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      std::ostringstream os;
      os << source_id << ',' << '"' << attack << '"' << ',' << r.target_id
         << ',' << r.count << ',' << r.clean_acc << ',' << r.adv_acc << ','
         << r.drop;
      out.push_back(os.str());
    }
    return out;
  }
};

// Black-box transfer protocol: adversarial samples are generated once from
// the source model; every target is evaluated on the identical flipped
// subset, against the matching clean originals. Generation failures are
// excluded from the evaluation set and counted.
template <typename T>
TransferReport transfer_eval(const LicsNet<T>& source,
                             const std::vector<TargetHandle<T>>& targets,
                             const ImageBatch<T>& data, const AigConfig& cfg,
                             const std::string& source_id, int cap = 0) {
  if (data.size() == 0) throw ConfigError("transfer_eval: empty split");
  ImageBatch<T> subset =
      (cap > 0 && data.size() > cap) ? data.slice(0, cap) : data;

  auto gen = aig_liir(source, subset, cfg);
  TransferReport rep;
  rep.source_id = source_id;
  AttackDescriptor d;
  d.kind = AttackDescriptor::Kind::aig;
  d.aig = cfg;
  rep.attack = d.label();
  rep.generated = subset.size();
  rep.flipped = gen.flipped_count;
  rep.errors = gen.error_count;
  rep.cap = cap;

  std::vector<int> keep;
  for (const auto& s : gen.samples)
    if (s.flipped && !s.error) keep.push_back(s.sample);
  if (keep.empty()) return rep;  // rows empty; caller decides what that means

  int c = subset.pixels.dim(1), h = subset.pixels.dim(2),
      w = subset.pixels.dim(3);
  std::int64_t stride = static_cast<std::int64_t>(c) * h * w;
  ImageBatch<T> clean{Tensor<T>({static_cast<int>(keep.size()), c, h, w}), {}};
  ImageBatch<T> adv = clean;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    int src = keep[i];
    std::copy(subset.pixels.data() + src * stride,
              subset.pixels.data() + (src + 1) * stride,
              clean.pixels.data() + static_cast<std::int64_t>(i) * stride);
    const auto& xa = gen.samples[static_cast<std::size_t>(src)].x_adv;
    std::copy(xa.data(), xa.data() + stride,
              adv.pixels.data() + static_cast<std::int64_t>(i) * stride);
    clean.labels.push_back(subset.labels[static_cast<std::size_t>(src)]);
  }
  adv.labels = clean.labels;

  for (const auto& t : targets) {
    TransferRow row;
    row.target_id = t.id;
    row.count = static_cast<int>(keep.size());
    auto preds_clean = t.predict(clean);
    auto preds_adv = t.predict(adv);
    int ok_clean = 0, ok_adv = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (preds_clean[i] == clean.labels[i]) ++ok_clean;
      if (preds_adv[i] == adv.labels[i]) ++ok_adv;
    }
    row.clean_acc = static_cast<double>(ok_clean) / row.count;
    row.adv_acc = static_cast<double>(ok_adv) / row.count;
    row.drop = row.clean_acc - row.adv_acc;
    rep.rows.push_back(row);
  }
  return rep;
}

// --- ablation sweep ----------------------------------------------------------

struct AblationRow {
  std::string preset;
  std::vector<std::uint64_t> seeds;
  std::vector<double> clean_accs;
  std::vector<double> adv_accs;
  double clean_mean = 0, adv_mean = 0;
  double adv_min = 0, adv_max = 0;
  std::vector<std::string> errors;

  nlohmann::ordered_json to_json() const {
    return {{"preset", preset},        {"seeds", seeds},
            {"clean_accs", clean_accs}, {"adv_accs", adv_accs},
            {"clean_mean", clean_mean}, {"adv_mean", adv_mean},
            {"adv_min", adv_min},       {"adv_max", adv_max},
            {"errors", errors}};
  }
};

struct AblationReport {
  std::vector<AblationRow> rows;

  bool any_failed() const {
    for (const auto& r : rows)
      if (!r.errors.empty()) return true;
    return false;
  }

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) arr.push_back(r.to_json());
    return {{"rows", arr}};
  }

  static std::string csv_header() {
    return "preset,seeds,clean_mean,adv_mean,adv_min,adv_max";
  }
  std::vector<std::string> csv_rows() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      std::ostringstream os;
      os << r.preset << ",\"";
      for (std::size_t i = 0; i < r.seeds.size(); ++i)
        os << (i ? ";" : "") << r.seeds[i];
      os << "\"," << r.clean_mean << ',' << r.adv_mean << ',' << r.adv_min
         << ',' << r.adv_max;
      out.push_back(os.str());
    }
    return out;
  }
};

// Trains one model per (preset, seed) and evaluates clean plus PGD
// adversarial accuracy with the published evaluation preset. Row order
// follows the preset input order; individual failures are recorded and the
// sweep continues.
template <typename T>
AblationReport ablation_sweep(const ImageBatch<T>& train_data,
                              const ImageBatch<T>& val_data,
                              const ImageBatch<T>& eval_data,
                              const std::vector<std::string>& presets,
                              const std::vector<std::uint64_t>& seeds,
                              ModelConfig mcfg, TrainConfig tcfg,
                              int eval_cap = 0,
                              const std::optional<fs::path>& out_dir =
                                  std::nullopt) {
  if (seeds.empty()) throw ConfigError("ablation_sweep: need >= 1 seed");
  AblationReport rep;
  for (const auto& preset : presets) {
    AblationRow row;
    row.preset = preset;
    TrainConfig cfg = tcfg;
    cfg.weights = ablation_preset(preset);
    for (std::uint64_t seed : seeds) {
      try {
        ModelConfig mc = mcfg;
        mc.seed = seed;
        cfg.seed = seed;
        LicsNet<T> model(mc);
        std::optional<fs::path> run_dir;
        if (out_dir)
          run_dir = *out_dir / (preset + "_seed" + std::to_string(seed));
        csat_train(model, train_data, val_data, cfg, run_dir);

        ImageBatch<T> eval_subset =
            (eval_cap > 0 && eval_data.size() > eval_cap)
                ? eval_data.slice(0, eval_cap)
                : eval_data;
        double clean = clean_accuracy(model, eval_subset);
        double adv = pgd_accuracy(model, eval_subset, cfg.eval_pgd);
        row.seeds.push_back(seed);
        row.clean_accs.push_back(clean);
        row.adv_accs.push_back(adv);
      } catch (const Error& e) {
        row.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
      }
    }
    if (!row.adv_accs.empty()) {
      double cs = 0, as = 0;
      row.adv_min = row.adv_accs.front();
      row.adv_max = row.adv_accs.front();
      for (std::size_t i = 0; i < row.adv_accs.size(); ++i) {
        cs += row.clean_accs[i];
        as += row.adv_accs[i];
        row.adv_min = std::min(row.adv_min, row.adv_accs[i]);
        row.adv_max = std::max(row.adv_max, row.adv_accs[i]);
      }
      row.clean_mean = cs / static_cast<double>(row.clean_accs.size());
      row.adv_mean = as / static_cast<double>(row.adv_accs.size());
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace lics
