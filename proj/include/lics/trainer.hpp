#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lics/attacks.hpp"
#include "lics/checkpoint.hpp"
#include "lics/model.hpp"
#include "lics/objective.hpp"
#include "lics/parallel.hpp"

namespace lics {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 0.0002;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  PgdConfig pgd;                 // training-time attack (may be cheaper)
  PgdConfig eval_pgd;            // probe evaluation attack (published preset)
  LossWeights weights;
  LinearityMode linearity_mode = LinearityMode::effective;
  int probe_size = 200;          // held-out samples scored per epoch

  TrainConfig() {
    pgd = pgd_preset("mnist");
    pgd.random_start = true;
    eval_pgd = pgd_preset("mnist");
  }

  void validate() const {
    if (!(learning_rate > 0))
      throw ConfigError("train: learning_rate must be > 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (probe_size < 0) throw ConfigError("train: probe_size must be >= 0");
    pgd.validate();
    eval_pgd.validate();
    weights.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double ce = 0, lc = 0, lr = 0, re = 0, total = 0;
  double clean_acc = 0;
  double adv_acc = 0;
  double wall_seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : epochs)
      arr.push_back({{"epoch", e.epoch},
                     {"ce", e.ce},
                     {"lc", e.lc},
                     {"lr", e.lr},
                     {"re", e.re},
                     {"total", e.total},
                     {"clean_acc", e.clean_acc},
                     {"adv_acc", e.adv_acc},
                     {"wall_seconds", e.wall_seconds}});
    return arr;
  }
};

// --- shared evaluation helpers ----------------------------------------------

template <typename T, typename Model>
std::vector<int> predict_chunked(const Model& model, const ImageBatch<T>& data) {
  std::vector<int> preds(static_cast<std::size_t>(data.size()));
  parallel_chunks(data.size(), [&](int, ChunkRange r) {
    auto part = data.slice(r.begin, r.end);
    auto p = model.predict(part);
    std::copy(p.begin(), p.end(), preds.begin() + r.begin);
  });
  return preds;
}

template <typename T, typename Model>
double clean_accuracy(const Model& model, const ImageBatch<T>& data) {
  auto preds = predict_chunked(model, data);
  int correct = 0;
  for (int i = 0; i < data.size(); ++i)
    if (preds[static_cast<std::size_t>(i)] ==
        data.labels[static_cast<std::size_t>(i)])
      ++correct;
  return data.size() ? static_cast<double>(correct) / data.size() : 0.0;
}

template <typename T, typename Model>
double pgd_accuracy(const Model& model, const ImageBatch<T>& data,
                    const PgdConfig& cfg) {
  auto adv = pgd_attack(ce_attack_loss(model), data, cfg);
  return clean_accuracy(model, adv);
}

// --- gradient plumbing -------------------------------------------------------

// Builds a scalar loss over the half-open sample range [begin, end).
template <typename T>
using RangeLossBuilder = std::function<Var<T>(int begin, int end)>;

// Chunked, deterministically reduced parameter gradients of a batch-mean
// loss: grads and the loss are combined over fixed chunks in chunk order,
// weighted by chunk size.
template <typename T>
std::pair<std::vector<Tensor<T>>, T> batch_loss_grads(
    const std::vector<Var<T>>& params, int batch_size,
    const RangeLossBuilder<T>& builder) {
  auto ranges = chunk_ranges(batch_size);
  std::vector<std::vector<Tensor<T>>> chunk_grads(ranges.size());
  std::vector<T> chunk_loss(ranges.size());
  parallel_chunks(batch_size, [&](int ci, ChunkRange r) {
    auto loss = builder(r.begin, r.end);
    auto gm = ad::grad(loss, params);
    auto& store = chunk_grads[static_cast<std::size_t>(ci)];
    store.reserve(params.size());
    for (const auto& p : params) store.push_back(gm.tensor_at(p));
    chunk_loss[static_cast<std::size_t>(ci)] = loss.value()[0];
  });

  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.emplace_back(p.shape());
  T loss_total = 0;
  for (std::size_t ci = 0; ci < ranges.size(); ++ci) {
    T w = static_cast<T>(ranges[ci].end - ranges[ci].begin) /
          static_cast<T>(batch_size);
    loss_total += w * chunk_loss[ci];
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (std::int64_t k = 0; k < grads[pi].numel(); ++k)
        grads[pi][k] += w * chunk_grads[ci][pi][k];
  }
  return {std::move(grads), loss_total};
}

// --- CSAT --------------------------------------------------------------------

inline LossWeights ablation_preset(const std::string& name) {
  LossWeights base{1.0, 0.0, 0.0, 0.1, 0.5, 0.5};
  if (name == "BASE") return base;
  if (name == "BASE+LLR") {
    base.gamma_lr = 1.0;
    return base;
  }
  if (name == "BASE+LCR") {
    base.beta_lc = 1.0;
    return base;
  }
  if (name == "L2C") {
    base.beta_lc = 1.0;
    base.gamma_lr = 1.0;
    return base;
  }
  throw ConfigError("unknown ablation preset: " + name);
}

namespace detail {

template <typename T>
ImageBatch<T> gather_batch(const ImageBatch<T>& data,
                           const std::vector<int>& order, int begin,
                           int end) {
  int c = data.pixels.dim(1), h = data.pixels.dim(2), w = data.pixels.dim(3);
  std::int64_t stride = static_cast<std::int64_t>(c) * h * w;
  Tensor<T> px({end - begin, c, h, w});
  std::vector<int> labels(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) {
    int src = order[static_cast<std::size_t>(i)];
    std::copy(data.pixels.data() + src * stride,
              data.pixels.data() + (src + 1) * stride,
              px.data() + static_cast<std::int64_t>(i - begin) * stride);
    labels[static_cast<std::size_t>(i - begin)] =
        data.labels[static_cast<std::size_t>(src)];
  }
  return {std::move(px), std::move(labels)};
}

template <typename T>
void check_attack_invariants(const ImageBatch<T>& clean,
                             const ImageBatch<T>& adv, double eps) {
  for (std::int64_t i = 0; i < clean.pixels.numel(); ++i) {
    double d = std::abs(static_cast<double>(adv.pixels[i]) -
                        static_cast<double>(clean.pixels[i]));
    if (d > eps || adv.pixels[i] < T(0) || adv.pixels[i] > T(1))
      throw NumericError("csat_train: adversarial batch violates the attack "
                         "invariants");
  }
}

}  // namespace detail

// Concept-Significance Adversarial Training: PGD examples generated on the
// fly from the cross-entropy loss, then one Adam step on the full objective.
// Deterministic given cfg.seed. Throws NumericError on a non-finite loss; the
// last epoch checkpoint (and epoch_000 for the initial state) remains on
// disk when out_dir is given.
template <typename T>
TrainLog csat_train(LicsNet<T>& model, const ImageBatch<T>& train_data,
                    const ImageBatch<T>& val_data, const TrainConfig& cfg,
                    const std::optional<fs::path>& out_dir = std::nullopt) {
  cfg.validate();
  train_data.validate(model.config().num_classes);
  val_data.validate(model.config().num_classes);

  auto params = model.params().vars();
  nn::Adam<T> adam;
  adam.lr = static_cast<T>(cfg.learning_rate);
  adam.beta1 = static_cast<T>(cfg.adam_beta1);
  adam.beta2 = static_cast<T>(cfg.adam_beta2);
  adam.eps = static_cast<T>(cfg.adam_eps);
  adam.init(params);

  auto meta = [&](int epoch) {
    return json{{"epoch", epoch},
                {"seed", cfg.seed},
                {"loss_weights",
                 {{"alpha_ce", cfg.weights.alpha_ce},
                  {"beta_lc", cfg.weights.beta_lc},
                  {"gamma_lr", cfg.weights.gamma_lr},
                  {"lambda_re", cfg.weights.lambda_re},
                  {"beta1", cfg.weights.beta1},
                  {"beta2", cfg.weights.beta2}}},
                {"linearity_mode", to_string(cfg.linearity_mode)},
                {"train_pgd",
                 {{"epsilon", cfg.pgd.epsilon},
                  {"steps", cfg.pgd.steps},
                  {"step_size", cfg.pgd.step_size},
                  {"random_start", cfg.pgd.random_start}}}};
  };

  if (out_dir) save_checkpoint(model, *out_dir / "epoch_000", meta(0));

  TrainLog log;
  std::vector<int> order(static_cast<std::size_t>(train_data.size()));
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = static_cast<int>(i);

  ImageBatch<T> probe;
  if (cfg.probe_size > 0 && val_data.size() > 0)
    probe = val_data.slice(0, std::min(cfg.probe_size, val_data.size()));

  std::uint64_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());

    double sum_ce = 0, sum_lc = 0, sum_lr = 0, sum_re = 0, sum_total = 0;
    std::int64_t seen = 0;
    for (int begin = 0; begin < train_data.size();
         begin += cfg.batch_size, ++global_step) {
      int end = std::min(begin + cfg.batch_size, train_data.size());
      auto batch = detail::gather_batch(train_data, order, begin, end);

      LossReport<T> rep;
      std::vector<Tensor<T>> grads;
      T total;
      try {
        ImageBatch<T> x_adv = batch;
        if (cfg.pgd.epsilon > 0) {
          PgdConfig attack = cfg.pgd;
          attack.seed =
              Rng::stream(cfg.seed ^ 0x9e3779b9ULL, global_step).next_u64();
          x_adv = pgd_attack(ce_attack_loss(model), batch, attack);
          if (begin == 0)
            detail::check_attack_invariants(batch, x_adv,
                                            attack.epsilon + 1e-6);
        }
        std::tie(grads, total) = batch_loss_grads<T>(
            params, batch.size(), [&](int b, int e) {
              auto xc = batch.slice(b, e);
              auto ac = x_adv.slice(b, e);
              auto obj = total_objective_graph(model, xc, ac, cfg.weights,
                                               cfg.linearity_mode);
              if (b == 0) rep = obj.report;
              return obj.total;
            });
        if (!std::isfinite(static_cast<double>(total)))
          throw NumericError("non-finite loss");
      } catch (const NumericError& e) {
        throw NumericError("csat_train: " + std::string(e.what()) +
                           " at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(global_step) +
                           "; last good checkpoint retained");
      }
      adam.step(params, grads);

      int bsz = end - begin;
      seen += bsz;
      sum_total += static_cast<double>(total) * bsz;
      sum_ce += static_cast<double>(rep.ce) * bsz;
      sum_lc += static_cast<double>(rep.lc) * bsz;
      sum_lr += static_cast<double>(rep.lr) * bsz;
      sum_re += static_cast<double>(rep.re) * bsz;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    if (seen > 0) {
      rec.ce = sum_ce / static_cast<double>(seen);
      rec.lc = sum_lc / static_cast<double>(seen);
      rec.lr = sum_lr / static_cast<double>(seen);
      rec.re = sum_re / static_cast<double>(seen);
      rec.total = sum_total / static_cast<double>(seen);
    }
    if (probe.size() > 0) {
      rec.clean_acc = clean_accuracy(model, probe);
      rec.adv_acc = pgd_accuracy(model, probe, cfg.eval_pgd);
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    log.epochs.push_back(rec);

    if (out_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d", epoch);
      save_checkpoint(model, *out_dir / name, meta(epoch));
      std::string line = nlohmann::ordered_json(log.to_json().back()).dump();
      std::ofstream jl(*out_dir / "train_log.jsonl", std::ios::app);
      jl << line << "\n";
    }
  }

  if (out_dir) save_checkpoint(model, *out_dir / "final", meta(cfg.epochs));
  return log;
}

}  // namespace lics
