#pragma once

// Two-step adversarial image generation:
//   (i)  minimal perturbation of the concept vector toward the nearest linear
//        class boundary of the product head (DeepFool-style, with overshoot);
//   (ii) inverse-representation optimization in pixel space to realize the
//        perturbed concept vector, under an L2 budget around the source.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lics/model.hpp"
#include "lics/parallel.hpp"

namespace lics {

template <typename T>
struct ConceptAttackResult {
  int target_class = -1;            // i_t of the final iteration
  std::vector<Tensor<T>> shifts;    // delta* per iteration
  Tensor<T> concept_perturbed;      // [M]
  int iterations = 0;
  bool success = false;
};

struct InversionConfig {
  double step_size = 0.01;
  int max_iters = 500;
  double epsilon_l2 = 3.0;
  double concept_tol = 0.0;  // 0 disables the tolerance stop

  void validate() const {
    if (!(step_size > 0)) throw ConfigError("inversion: step_size must be > 0");
    if (max_iters < 0) throw ConfigError("inversion: max_iters must be >= 0");
    if (!(epsilon_l2 > 0))
      throw ConfigError("inversion: epsilon_l2 must be > 0");
    if (!(concept_tol >= 0))
      throw ConfigError("inversion: concept_tol must be >= 0");
  }
};

enum class InversionStatus { flipped, budget_exhausted, max_iters };

inline std::string to_string(InversionStatus s) {
  switch (s) {
    case InversionStatus::flipped: return "flipped";
    case InversionStatus::budget_exhausted: return "budget_exhausted";
    default: return "max_iters";
  }
}

template <typename T>
struct InversionResult {
  Tensor<T> x_adv;  // [1,C,H,W]
  InversionStatus status = InversionStatus::max_iters;
  double final_concept_dist = 0;
  int iterations = 0;
};

namespace detail {

template <typename T>
int argmax_index(const T* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace detail

// Nearest linear boundary: argmin over i != true_class of
// |l_i - l_true| / ||G^true - G^i||_2, ties to the smallest index.
// Candidates with a zero denominator are unreachable and skipped.
template <typename T>
int select_target_class(const Tensor<T>& logits, const Tensor<T>& significance,
                        int true_class) {
  int m = significance.dim(0), n = significance.dim(1);
  if (logits.numel() != n) throw ShapeError("select_target_class: logits");
  int best = -1;
  double best_ratio = 0;
  for (int i = 0; i < n; ++i) {
    if (i == true_class) continue;
    double den = 0;
    for (int mm = 0; mm < m; ++mm) {
      double d = static_cast<double>(significance[mm * n + true_class]) -
                 static_cast<double>(significance[mm * n + i]);
      den += d * d;
    }
    den = std::sqrt(den);
    if (den == 0) continue;
    double ratio = std::abs(static_cast<double>(logits[i]) -
                            static_cast<double>(logits[true_class])) /
                   den;
    if (best < 0 || ratio < best_ratio) {
      best = i;
      best_ratio = ratio;
    }
  }
  if (best < 0)
    throw DegenerateBoundary(
        "select_target_class: all class boundaries are degenerate");
  return best;
}

// Optimal shift onto the target boundary:
// delta* = |l_it - l_true| / ||G^it - G^true||^2 * (G^it - G^true),
// using that the gradient of l_i w.r.t. the concept vector is exactly G^i.
template <typename T>
Tensor<T> optimal_shift(const Tensor<T>& logits, const Tensor<T>& significance,
                        int true_class, int target_class) {
  int m = significance.dim(0), n = significance.dim(1);
  Tensor<T> diff({m});
  double den = 0;
  for (int mm = 0; mm < m; ++mm) {
    double d = static_cast<double>(significance[mm * n + target_class]) -
               static_cast<double>(significance[mm * n + true_class]);
    diff[mm] = static_cast<T>(d);
    den += d * d;
  }
  if (den == 0)
    throw DegenerateBoundary("optimal_shift: zero significance gap between " +
                             std::to_string(true_class) + " and " +
                             std::to_string(target_class));
  double num = std::abs(static_cast<double>(logits[target_class]) -
                        static_cast<double>(logits[true_class]));
  double scale = num / den;
  for (int mm = 0; mm < m; ++mm)
    diff[mm] = static_cast<T>(static_cast<double>(diff[mm]) * scale);
  return diff;
}

// Step (i): iterate C <- C + (1+overshoot) * delta* with the significance
// matrix frozen at the clean input, re-selecting the nearest boundary each
// iteration, until the product-head argmax leaves the true class.
template <typename T>
ConceptAttackResult<T> perturb_concept(const Tensor<T>& concept_vec,
                                       const Tensor<T>& significance,
                                       const Tensor<T>& logits, int true_class,
                                       int max_iters, double overshoot) {
  int m = significance.dim(0), n = significance.dim(1);
  ConceptAttackResult<T> res;
  res.concept_perturbed = concept_vec;

  Tensor<T> cur_logits = logits;
  if (detail::argmax_index(cur_logits.data(), n) != true_class) {
    res.success = true;  // already adversarial
    return res;
  }
  for (int it = 0; it < max_iters; ++it) {
    int tgt = select_target_class(cur_logits, significance, true_class);
    Tensor<T> shift = optimal_shift(cur_logits, significance, true_class, tgt);
    for (int mm = 0; mm < m; ++mm)
      res.concept_perturbed[mm] +=
          static_cast<T>((1.0 + overshoot) * static_cast<double>(shift[mm]));
    res.shifts.push_back(std::move(shift));
    res.target_class = tgt;
    res.iterations = it + 1;
    cur_logits = product_head(
        Tensor<T>({1, m}, res.concept_perturbed.raw()),
        Tensor<T>({1, m, n}, significance.raw()))
                     .reshaped({n});
    if (detail::argmax_index(cur_logits.data(), n) != true_class) {
      res.success = true;
      break;
    }
  }
  return res;
}

// Convenience overload picking one sample out of a forward bundle.
template <typename T>
ConceptAttackResult<T> perturb_concept(const LicsOutput<T>& out, int sample,
                                       int true_class, int max_iters,
                                       double overshoot) {
  int m = out.concept_vec.dim(1), n = out.logits.dim(1);
  Tensor<T> c({m});
  std::copy(out.concept_vec.data() + sample * m,
            out.concept_vec.data() + (sample + 1) * m, c.data());
  Tensor<T> g({m, n});
  std::copy(out.significance.data() + static_cast<std::int64_t>(sample) * m * n,
            out.significance.data() +
                static_cast<std::int64_t>(sample + 1) * m * n,
            g.data());
  Tensor<T> l({n});
  std::copy(out.logits.data() + sample * n,
            out.logits.data() + (sample + 1) * n, l.data());
  return perturb_concept(c, g, l, true_class, max_iters, overshoot);
}

// Step (ii): gradient descent on ||C_target - C(x)||_2 from x0, projecting
// onto the L2 ball of radius epsilon_l2 around x0 and clipping to [0,1] after
// every step; stops when the prediction flips.
template <typename T>
InversionResult<T> invert_representation(const LicsNet<T>& model,
                                         const Tensor<T>& x0,
                                         const Tensor<T>& c_target,
                                         const InversionConfig& cfg) {
  cfg.validate();
  if (x0.rank() != 4 || x0.dim(0) != 1)
    throw ShapeError("invert_representation: x0 must be [1,C,H,W]");
  model.check_input(x0);
  for (std::int64_t i = 0; i < x0.numel(); ++i)
    if (!(x0[i] >= T(0) && x0[i] <= T(1)))
      throw ConfigError("invert_representation: x0 outside [0,1]");

  const int m = model.config().concept_dim;
  Tensor<T> target2d({1, m}, c_target.raw());

  auto concept_dist = [&](const Var<T>& x_var) {
    auto c = model.concept_graph(x_var);
    auto d = ad::sub(ad::constant(target2d), c);
    return ad::sqrt_(ad::per_sample_sum(ad::square(d)));  // [1]
  };

  const int orig_pred = model.predict({x0, {0}})[0];
  const T eps = static_cast<T>(cfg.epsilon_l2);
  const T step = static_cast<T>(cfg.step_size);

  InversionResult<T> res;
  res.x_adv = x0;
  res.final_concept_dist =
      static_cast<double>(concept_dist(ad::constant(x0)).value()[0]);

  for (int it = 0; it < cfg.max_iters; ++it) {
    Var<T> x_leaf(res.x_adv, true);
    auto dist = concept_dist(x_leaf);
    auto g = ad::grad(dist, {x_leaf}).tensor_at(x_leaf);
    if (!g.all_finite())
      throw NumericError("invert_representation: non-finite gradient at "
                         "iteration " +
                         std::to_string(it));
    Tensor<T> x = res.x_adv;
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] = std::min(std::max(x[i] - step * g[i], T(0)), T(1));
    // L2 ball projection toward x0 (a convex combination, so it stays in the
    // pixel box).
    T d = l2_dist(x, x0);
    if (d > eps) {
      T scale = eps / d;
      for (std::int64_t i = 0; i < x.numel(); ++i)
        x[i] = x0[i] + (x[i] - x0[i]) * scale;
    }
    res.x_adv = std::move(x);
    res.iterations = it + 1;
    res.final_concept_dist =
        static_cast<double>(concept_dist(ad::constant(res.x_adv)).value()[0]);
    if (model.predict({res.x_adv, {0}})[0] != orig_pred) {
      res.status = InversionStatus::flipped;
      return res;
    }
    if (cfg.concept_tol > 0 && res.final_concept_dist < cfg.concept_tol) {
      res.status = InversionStatus::budget_exhausted;
      return res;
    }
  }
  res.status = InversionStatus::max_iters;
  return res;
}

struct AigConfig {
  double overshoot = 0.02;
  int max_concept_iters = 50;
  InversionConfig inversion;

  void validate() const {
    if (!(overshoot >= 0)) throw ConfigError("aig: overshoot must be >= 0");
    if (max_concept_iters < 0)
      throw ConfigError("aig: max_concept_iters must be >= 0");
    inversion.validate();
  }
};

template <typename T>
struct AigSampleResult {
  int sample = 0;
  int label = -1;
  int source_pred = -1;
  bool flipped = false;
  InversionStatus status = InversionStatus::max_iters;
  int concept_iterations = 0;
  int inversion_iterations = 0;
  double concept_shift_norm = 0;
  double pixel_l2 = 0;
  double final_concept_dist = 0;
  Tensor<T> x_adv;  // [1,C,H,W]
  std::optional<std::string> error;
};

template <typename T>
struct AigBatchResult {
  std::vector<AigSampleResult<T>> samples;
  int flipped_count = 0;
  int error_count = 0;
  double success_rate = 0;
};

// Full attack over a batch: forward -> concept perturbation -> inversion.
// Per-sample failures are recorded and the batch continues.
template <typename T>
AigBatchResult<T> aig_liir(const LicsNet<T>& model, const ImageBatch<T>& batch,
                           const AigConfig& cfg) {
  cfg.validate();
  batch.validate(model.config().num_classes);
  AigBatchResult<T> out;
  out.samples.resize(static_cast<std::size_t>(batch.size()));

  parallel_chunks(batch.size(), [&](int /*chunk*/, ChunkRange r) {
    for (int b = r.begin; b < r.end; ++b) {
      auto& rec = out.samples[static_cast<std::size_t>(b)];
      rec.sample = b;
      rec.label = batch.labels[static_cast<std::size_t>(b)];
      ImageBatch<T> one = batch.slice(b, b + 1);
      rec.x_adv = one.pixels;
      try {
        auto fwd = model.forward(one);
        rec.source_pred = fwd.predicted_class(0);
        if (rec.source_pred != rec.label) {
          // Already misclassified: trivially adversarial, x_adv == x0.
          rec.flipped = true;
          rec.status = InversionStatus::flipped;
          continue;
        }
        auto concept_res = perturb_concept(fwd, 0, rec.label,
                                           cfg.max_concept_iters,
                                           cfg.overshoot);
        rec.concept_iterations = concept_res.iterations;
        if (!concept_res.success) {
          rec.error = "concept perturbation did not flip the product head";
          continue;
        }
        {
          double s = 0;
          for (const auto& sh : concept_res.shifts)
            s += static_cast<double>(l2_norm(sh));
          rec.concept_shift_norm = s;
        }
        auto inv = invert_representation(model, one.pixels,
                                         concept_res.concept_perturbed,
                                         cfg.inversion);
        rec.status = inv.status;
        rec.inversion_iterations = inv.iterations;
        rec.final_concept_dist = inv.final_concept_dist;
        rec.x_adv = inv.x_adv;
        rec.pixel_l2 = static_cast<double>(l2_dist(rec.x_adv, one.pixels));
        rec.flipped = inv.status == InversionStatus::flipped;
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
  });

  for (const auto& rec : out.samples) {
    if (rec.flipped) ++out.flipped_count;
    if (rec.error) ++out.error_count;
  }
  out.success_rate =
      batch.size() ? static_cast<double>(out.flipped_count) / batch.size() : 0;
  return out;
}

}  // namespace lics
