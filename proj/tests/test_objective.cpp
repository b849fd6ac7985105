#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lics/model.hpp"
#include "lics/objective.hpp"
#include "lics/rng.hpp"

using namespace lics;

namespace {

ModelConfig tiny_config(int m = 2, int n = 3) {
  ModelConfig cfg;
  cfg.concept_dim = m;
  cfg.num_classes = n;
  cfg.input_shape = {1, 8, 8};
  cfg.encoder_depth = 1;
  cfg.blocks_per_stage = 1;
  cfg.base_width = 4;
  cfg.seed = 21;
  return cfg;
}

template <typename T>
ImageBatch<T> random_batch(const ModelConfig& cfg, int b, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> px({b, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]});
  for (std::int64_t i = 0; i < px.numel(); ++i)
    px[i] = static_cast<T>(rng.uniform());
  std::vector<int> labels(static_cast<std::size_t>(b));
  for (auto& y : labels)
    y = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
  return {std::move(px), labels};
}

}  // namespace

TEST_CASE("cross entropy oracles") {
  SECTION("perfect one-hot prediction scores zero") {
    Tensor<double> p({1, 4}, {0.0, 1.0, 0.0, 0.0});
    REQUIRE(cross_entropy(p, {1}) == 0.0);
  }
  SECTION("uniform prediction over 10 classes is ln 10") {
    Tensor<double> p({1, 10});
    for (int i = 0; i < 10; ++i) p[i] = 0.1;
    REQUIRE_THAT(cross_entropy(p, {3}),
                 Catch::Matchers::WithinAbs(std::log(10.0), 1e-9));
    REQUIRE_THAT(cross_entropy(p, {3}),
                 Catch::Matchers::WithinAbs(2.302585, 1e-6));
  }
  SECTION("batch mean of {0, ln10} is 1.151293") {
    Tensor<double> p({2, 10});
    for (int i = 0; i < 10; ++i) p[0 * 10 + i] = 0.1;
    p[0 * 10 + 4] = 0.1;  // uniform row, label 4 -> ln 10
    for (int i = 0; i < 10; ++i) p[1 * 10 + i] = 0.0;
    p[1 * 10 + 7] = 1.0;  // one-hot row, label 7 -> 0
    REQUIRE_THAT(cross_entropy(p, {4, 7}),
                 Catch::Matchers::WithinAbs(1.151293, 1e-6));
  }
  SECTION("zero probability at the label is floored, never infinite") {
    Tensor<double> p({1, 3}, {1.0, 0.0, 0.0});
    double v = cross_entropy(p, {2});
    REQUIRE(std::isfinite(v));
    REQUIRE_THAT(v, Catch::Matchers::WithinAbs(-std::log(1e-12), 1e-6));
  }
  SECTION("out-of-range label is rejected") {
    Tensor<double> p({1, 3}, {1.0, 0.0, 0.0});
    REQUIRE_THROWS_AS(cross_entropy(p, {3}), ConfigError);
  }
}

TEST_CASE("reconstruction error oracles") {
  SECTION("identical reconstruction scores zero") {
    Tensor<double> x({1, 1, 2, 2}, {0.1, 0.4, 0.7, 0.9});
    REQUIRE(reconstruction_error(x, x) == 0.0);
  }
  SECTION("all-ones vs all-zeros over 4 pixels is 2") {
    Tensor<double> x = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    Tensor<double> r({1, 1, 2, 2});
    REQUIRE_THAT(reconstruction_error(x, r),
                 Catch::Matchers::WithinAbs(2.0, 1e-12));
  }
  SECTION("doubling the residual doubles the loss") {
    Rng rng(5);
    Tensor<double> x({2, 1, 3, 3}), r1({2, 1, 3, 3}), r2({2, 1, 3, 3});
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      x[i] = rng.uniform();
      double d = rng.uniform(-0.2, 0.2);
      r1[i] = x[i] + d;
      r2[i] = x[i] + 2 * d;
    }
    REQUIRE_THAT(reconstruction_error(x, r2),
                 Catch::Matchers::WithinRel(2.0 * reconstruction_error(x, r1),
                                            1e-9));
  }
  SECTION("shape mismatch is rejected") {
    Tensor<double> x({1, 1, 2, 2});
    Tensor<double> r({1, 1, 2, 3});
    REQUIRE_THROWS_AS(reconstruction_error(x, r), ShapeError);
  }
}

TEST_CASE("lipschitz regularizer oracles") {
  int m = 4, n = 3;
  Tensor<double> c({1, m}), g({1, m, n});
  SECTION("identical clean and adversarial outputs score zero") {
    REQUIRE(lipschitz_regularizer(c, c, g, g, 1.0, 1.0) == 0.0);
  }
  SECTION("beta1=1, beta2=0, |dC|=0.3 scores 0.3") {
    Tensor<double> c_adv = c;
    c_adv[0] += 0.3;
    REQUIRE_THAT(lipschitz_regularizer(c, c_adv, g, g, 1.0, 0.0),
                 Catch::Matchers::WithinAbs(0.3, 1e-12));
  }
  SECTION("beta1=2, beta2=3, |dC|=0.5, |dG|=0.1 scores 1.3") {
    Tensor<double> c_adv = c;
    c_adv[1] = 0.5;  // ||dC|| = 0.5
    Tensor<double> g_adv = g;
    g_adv[2] = 0.1;  // ||dG||_F = 0.1
    REQUIRE_THAT(lipschitz_regularizer(c, c_adv, g, g_adv, 2.0, 3.0),
                 Catch::Matchers::WithinAbs(1.3, 1e-12));
  }
  SECTION("shape mismatch is rejected") {
    Tensor<double> c2({1, m + 1});
    REQUIRE_THROWS_AS(lipschitz_regularizer(c, c2, g, g, 1.0, 1.0),
                      ShapeError);
  }
}

TEST_CASE("literal linearity constraint is analytically trivial") {
  // < 1e-5 on 100 random inputs of a fresh product-head model.
  auto cfg = tiny_config(3, 4);
  for (std::uint64_t s = 0; s < 5; ++s) {
    ModelConfig c = cfg;
    c.seed = 100 + s;
    LicsNet<float> model(c);
    for (int t = 0; t < 20; ++t) {
      auto batch = random_batch<float>(c, 1, 1000 * s + t);
      REQUIRE(linearity_constraint(model, batch, LinearityMode::literal) <
              1e-5f);
    }
  }
}

TEST_CASE("effective linearity constraint vanishes when G is constant") {
  // Hand-built graph: C(x) nontrivial, G constant w.r.t. x.
  Tensor<double> x0({1, 4});
  for (int i = 0; i < 4; ++i) x0[i] = 0.3 + 0.1 * i;
  ad::Var<double> x(x0, true);
  Tensor<double> w({4, 2});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 0.25 * (i + 1);
  auto concept_vec = ad::matmul(x, ad::constant(w));  // [1,2]
  Tensor<double> gconst({1, 2, 3});
  for (std::int64_t i = 0; i < gconst.numel(); ++i) gconst[i] = 0.5 + i;
  auto g = ad::constant(gconst);
  auto lc = linearity_constraint_effective_graph(x, concept_vec, g, {1});
  REQUIRE_THAT(lc.value()[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("effective linearity constraint on the 1-D toy") {
  // C(x)=x, G(x)=x, l=x^2: full gradient 2x, frozen-G gradient x; at x=3 the
  // gap is 3.
  Tensor<double> x0({1, 1}, {3.0});
  ad::Var<double> x(x0, true);
  auto c = ad::reshape(x, {1, 1});
  auto g = ad::reshape(x, {1, 1, 1});
  auto lc = linearity_constraint_effective_graph(x, c, g, {0});
  REQUIRE_THAT(lc.value()[0], Catch::Matchers::WithinAbs(3.0, 1e-12));
}

TEST_CASE("effective mode equals the frozen-G gradient gap on a real model") {
  auto cfg = tiny_config(3, 4);
  LicsNet<double> model(cfg);
  auto batch = random_batch<double>(cfg, 2, 77);

  double via_op = linearity_constraint(model, batch, LinearityMode::effective);

  // Independent route: compute grad_x l_y twice, once with G frozen.
  double acc = 0;
  for (int b = 0; b < batch.size(); ++b) {
    auto one = batch.slice(b, b + 1);
    int y = one.labels[0];
    ad::Var<double> x(one.pixels, true);
    auto c = model.concept_graph(x);
    auto g = model.significance_graph(x);
    auto full_logit = ad::gather_rows(ad::bmm_vec(c, g), {y});
    auto gx_full = ad::grad(full_logit, {x}).tensor_at(x);

    ad::Var<double> x2(one.pixels, true);
    auto c2 = model.concept_graph(x2);
    auto g2 = model.significance_graph(x2).detach();
    auto frozen_logit = ad::gather_rows(ad::bmm_vec(c2, g2), {y});
    auto gx_frozen = ad::grad(frozen_logit, {x2}).tensor_at(x2);

    double s = 0;
    for (std::int64_t i = 0; i < gx_full.numel(); ++i) {
      double d = gx_full[i] - gx_frozen[i];
      s += d * d;
    }
    acc += std::sqrt(s);
  }
  acc /= batch.size();
  REQUIRE_THAT(via_op, Catch::Matchers::WithinRel(acc, 1e-8));
}

TEST_CASE("total objective composition") {
  auto cfg = tiny_config(2, 3);
  LicsNet<double> model(cfg);
  auto x = random_batch<double>(cfg, 3, 11);
  auto x_adv = x;
  Rng rng(12);
  for (std::int64_t i = 0; i < x_adv.pixels.numel(); ++i)
    x_adv.pixels[i] = std::min(
        1.0, std::max(0.0, x_adv.pixels[i] + rng.uniform(-0.1, 0.1)));

  SECTION("all weights zero gives zero") {
    LossWeights w{0, 0, 0, 0, 0.5, 0.5};
    auto rep = total_objective(model, x, x_adv, w);
    REQUIRE(rep.total == 0.0);
  }
  SECTION("weights (1,0,0,0) project onto the adversarial cross entropy") {
    LossWeights w{1, 0, 0, 0, 0.5, 0.5};
    auto rep = total_objective(model, x, x_adv, w);
    auto out = model.forward(x_adv);
    REQUIRE_THAT(rep.total, Catch::Matchers::WithinRel(
                                cross_entropy(out.probs, x_adv.labels), 1e-12));
  }
  SECTION("total equals independently recomputed weighted components") {
    LossWeights w{1, 1, 1, 0.1, 0.5, 0.5};
    auto rep = total_objective(model, x, x_adv, w);

    auto out_adv = model.forward(x_adv);
    auto out_clean = model.forward(x);
    double ce = cross_entropy(out_adv.probs, x_adv.labels);
    double lc = linearity_constraint(model, x_adv, LinearityMode::effective);
    double lr = lipschitz_regularizer(out_clean.concept_vec,
                                      out_adv.concept_vec,
                                      out_clean.significance,
                                      out_adv.significance, 0.5, 0.5);
    double re = reconstruction_error(x.pixels, out_clean.reconstruction);
    REQUIRE_THAT(rep.ce, Catch::Matchers::WithinRel(ce, 1e-9));
    REQUIRE_THAT(rep.lc, Catch::Matchers::WithinRel(lc, 1e-9));
    REQUIRE_THAT(rep.lr, Catch::Matchers::WithinRel(lr, 1e-9));
    REQUIRE_THAT(rep.re, Catch::Matchers::WithinRel(re, 1e-9));
    double total = 1 * ce + 1 * lc + 1 * lr + 0.1 * re;
    REQUIRE_THAT(rep.total, Catch::Matchers::WithinAbs(total, 1e-6));
    // every component is nonnegative
    REQUIRE(rep.ce >= 0);
    REQUIRE(rep.lc >= 0);
    REQUIRE(rep.lr >= 0);
    REQUIRE(rep.re >= 0);
  }
  SECTION("total is linear in each weight") {
    LossWeights w{1, 1, 1, 0.1, 0.5, 0.5};
    auto rep = total_objective(model, x, x_adv, w);
    LossWeights w2 = w;
    w2.alpha_ce = 2;
    auto rep2 = total_objective(model, x, x_adv, w2);
    REQUIRE_THAT(rep2.total - rep.total,
                 Catch::Matchers::WithinAbs(rep.ce, 1e-6));
    LossWeights w3 = w;
    w3.gamma_lr = 2;
    auto rep3 = total_objective(model, x, x_adv, w3);
    REQUIRE_THAT(rep3.total - rep.total,
                 Catch::Matchers::WithinAbs(rep.lr, 1e-6));
  }
  SECTION("negative weights are a configuration error") {
    LossWeights w{-1, 0, 0, 0, 0.5, 0.5};
    REQUIRE_THROWS_AS(total_objective(model, x, x_adv, w), ConfigError);
  }
  SECTION("mismatched labels are a configuration error") {
    auto bad = x_adv;
    bad.labels[0] = (bad.labels[0] + 1) % cfg.num_classes;
    LossWeights w{1, 0, 0, 0, 0.5, 0.5};
    REQUIRE_THROWS_AS(total_objective(model, x, bad, w), ConfigError);
  }
}

TEST_CASE("parameter gradient of the total objective matches finite differences") {
  // Tiny model (M=2, 8x8 inputs), default weights, effective mode; relative
  // error <= 1e-2 on sampled coordinates of every parameter tensor.
  auto cfg = tiny_config(2, 3);
  LicsNet<double> model(cfg);
  auto x = random_batch<double>(cfg, 2, 31);
  auto x_adv = x;
  Rng rng(32);
  for (std::int64_t i = 0; i < x_adv.pixels.numel(); ++i)
    x_adv.pixels[i] = std::min(
        1.0, std::max(0.0, x_adv.pixels[i] + rng.uniform(-0.15, 0.15)));
  LossWeights w;  // defaults: alpha=1, beta=1, gamma=1, lambda=0.1

  auto obj = total_objective_graph(model, x, x_adv, w,
                                   LinearityMode::effective);
  auto params = model.params().vars();
  auto gm = ad::grad(obj.total, params);

  auto eval_total = [&]() {
    return total_objective(model, x, x_adv, w, LinearityMode::effective)
        .total;
  };

  const double h = 1e-5;
  int checked = 0;
  for (auto& p : params) {
    Tensor<double> g = gm.tensor_at(p);
    Tensor<double>& val = p.leaf_value();
    std::int64_t step = std::max<std::int64_t>(1, val.numel() / 3);
    for (std::int64_t i = 0; i < val.numel(); i += step) {
      double orig = val[i];
      val[i] = orig + h;
      double up = eval_total();
      val[i] = orig - h;
      double dn = eval_total();
      val[i] = orig;
      double fd = (up - dn) / (2 * h);
      double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-7});
      REQUIRE(std::abs(g[i] - fd) / denom <= 1e-2);
      ++checked;
    }
  }
  REQUIRE(checked > 20);
}
