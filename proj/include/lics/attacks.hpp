#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lics/autodiff.hpp"
#include "lics/model.hpp"
#include "lics/objective.hpp"
#include "lics/parallel.hpp"
#include "lics/rng.hpp"

namespace lics {

// All pixel math is in unit scale; 0-255 budgets are expressed as k/255.
struct PgdConfig {
  double epsilon = 0.3;
  int steps = 40;
  double step_size = 2.0 / 255.0;
  bool random_start = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("pgd: epsilon must be >= 0");
    if (steps < 1) throw ConfigError("pgd: steps must be >= 1");
    if (epsilon > 0 && !(step_size > 0))
      throw ConfigError("pgd: step_size must be > 0");
  }
};

// Evaluation-grade presets (deterministic: no random start).
inline PgdConfig pgd_preset(const std::string& name) {
  if (name == "mnist") return {0.3, 40, 2.0 / 255.0, false, 0};
  if (name == "cifar10" || name == "svhn")
    return {8.0 / 255.0, 10, 2.0 / 255.0, false, 0};
  throw ConfigError("unknown PGD preset: " + name);
}

namespace detail {

// Exact L-inf ball projection in floating point: after the arithmetic
// projection, nudge any pixel whose rounded distance still exceeds eps by
// one ulp toward the center. Terminates because each step strictly
// approaches x0.
template <typename T>
inline T project_pixel(T x, T x0, T eps) {
  T d = x - x0;
  if (d > eps) d = eps;
  if (d < -eps) d = -eps;
  T out = x0 + d;
  while (std::abs(out - x0) > eps) out = std::nextafter(out, x0);
  return out;
}

template <typename T>
inline T clip01(T v) {
  return std::min(std::max(v, T(0)), T(1));
}

}  // namespace detail

// One FGSM update: signed step, project onto the eps ball around x0, clip to
// the pixel range. grad_sign entries must be in {-1, 0, +1}.
template <typename T>
Tensor<T> fgsm_step(const Tensor<T>& x_cur, const Tensor<T>& grad_sign,
                    T step_size, const Tensor<T>& x0, T epsilon) {
  check_same_shape(x_cur, grad_sign, "fgsm_step");
  check_same_shape(x_cur, x0, "fgsm_step");
  Tensor<T> out = x_cur;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    T v = out[i] + step_size * grad_sign[i];
    v = detail::project_pixel(v, x0[i], epsilon);
    v = detail::clip01(v);
    v = detail::project_pixel(v, x0[i], epsilon);  // clip cannot re-exceed,
                                                   // but keep it exact
    out[i] = v;
  }
  return out;
}

// Builds a scalar loss graph from a pixel leaf and the labels. The attack may
// evaluate it on any contiguous sub-batch; `first_sample` is the index of the
// sub-batch's first sample within the full batch, for losses that carry
// per-sample state.
template <typename T>
using LossFn = std::function<Var<T>(
    const Var<T>& x, const std::vector<int>& labels, int first_sample)>;

// Projected gradient descent under an L-inf budget (sign-gradient ascent on
// loss_fn with per-step projection). Per-sample independent, so the batch is
// partitioned into fixed chunks and attacked in parallel.
template <typename T>
ImageBatch<T> pgd_attack(const LossFn<T>& loss_fn, const ImageBatch<T>& batch,
                         const PgdConfig& cfg) {
  cfg.validate();
  batch.validate();
  const Tensor<T>& x0 = batch.pixels;
  Tensor<T> result(x0.shape());
  const T eps = static_cast<T>(cfg.epsilon);
  const T step = static_cast<T>(cfg.step_size);
  std::int64_t stride = x0.numel() / std::max(1, batch.size());

  parallel_chunks(batch.size(), [&](int /*chunk*/, ChunkRange r) {
    ImageBatch<T> part = batch.slice(r.begin, r.end);
    Tensor<T> cx0 = part.pixels;
    Tensor<T> x = cx0;
    if (cfg.random_start && cfg.epsilon > 0) {
      for (int b = 0; b < part.size(); ++b) {
        Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(r.begin + b));
        for (std::int64_t i = 0; i < stride; ++i) {
          std::int64_t k = b * stride + i;
          T v = x[k] + static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
          v = detail::clip01(v);
          x[k] = detail::project_pixel(v, cx0[k], eps);
        }
      }
    }
    for (int s = 0; s < cfg.steps; ++s) {
      Var<T> x_leaf(x, true);
      auto loss = loss_fn(x_leaf, part.labels, r.begin);
      auto g = ad::grad(loss, {x_leaf}).tensor_at(x_leaf);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        if (std::isnan(static_cast<double>(g[i])))
          throw NumericError("pgd_attack: NaN gradient at batch index " +
                             std::to_string(r.begin + static_cast<int>(i / stride)));
      }
      Tensor<T> sign(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i)
        sign[i] = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
      x = fgsm_step(x, sign, step, cx0, eps);
    }
    std::copy(x.data(), x.data() + x.numel(),
              result.data() + static_cast<std::int64_t>(r.begin) * stride);
  });

  return {std::move(result), batch.labels};
}

// Cross-entropy of any classifier exposing logits_graph(), as the PGD
// objective (the attack maximizes the classification loss only).
template <typename Model, typename T = typename Model::Scalar>
LossFn<T> ce_attack_loss(const Model& model) {
  return [&model](const Var<T>& x, const std::vector<int>& labels, int) {
    auto probs = softmax_rows(model.logits_graph(x));
    return cross_entropy_graph(probs, labels);
  };
}

}  // namespace lics
