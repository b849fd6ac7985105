#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "lics/attacks.hpp"
#include "lics/model.hpp"
#include "lics/rng.hpp"

using namespace lics;

namespace {

template <typename T>
ImageBatch<T> random_batch(Shape shape, int num_classes, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> px(shape);
  for (std::int64_t i = 0; i < px.numel(); ++i)
    px[i] = static_cast<T>(rng.uniform());
  std::vector<int> labels(static_cast<std::size_t>(shape[0]));
  for (auto& y : labels)
    y = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
  return {std::move(px), labels};
}

// Slices rows [first, first+b) out of a batch-shaped constant.
template <typename T>
Tensor<T> rows_of(const Tensor<T>& full, int first, int b) {
  Shape s = full.shape();
  std::int64_t stride = full.numel() / s[0];
  s[0] = b;
  Tensor<T> out(s);
  std::copy(full.data() + first * stride, full.data() + (first + b) * stride,
            out.data());
  return out;
}

// loss = sum(w * x), elementwise per-sample weights.
template <typename T>
LossFn<T> linear_loss(Tensor<T> w) {
  return [w](const ad::Var<T>& x, const std::vector<int>&, int first) {
    auto wc = rows_of(w, first, x.shape()[0]);
    return ad::sum_all(ad::mul(x, ad::constant(std::move(wc))));
  };
}

// loss = sum((x - t)^2), separable convex quadratic.
template <typename T>
LossFn<T> quadratic_loss(Tensor<T> t) {
  return [t](const ad::Var<T>& x, const std::vector<int>&, int first) {
    auto tc = rows_of(t, first, x.shape()[0]);
    return ad::sum_all(ad::square(ad::sub(x, ad::constant(std::move(tc)))));
  };
}

}  // namespace

TEST_CASE("fgsm_step oracles") {
  SECTION("epsilon 0 collapses to the clean input bitwise") {
    Tensor<float> x0({1, 1, 2, 2}, {0.1f, 0.5f, 0.9f, 0.3f});
    Tensor<float> x = x0;
    x[1] = 0.6f;
    Tensor<float> sign = Tensor<float>::full({1, 1, 2, 2}, 1.f);
    auto out = fgsm_step(x, sign, 0.25f, x0, 0.f);
    for (int i = 0; i < 4; ++i) REQUIRE(out[i] == x0[i]);
  }
  SECTION("scalar projection oracle: 0.5 + 0.5 projects to 0.8 at eps 0.3") {
    Tensor<float> x0({1, 1, 1, 1}, {0.5f});
    Tensor<float> sign({1, 1, 1, 1}, {1.f});
    auto out = fgsm_step(x0, sign, 0.5f, x0, 0.3f);
    REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(0.8f, 1e-6f));
    REQUIRE(std::abs(out[0] - x0[0]) <= 0.3f);
  }
  SECTION("pixel clip holds at the range boundary") {
    Tensor<float> x0({1, 1, 1, 1}, {0.0f});
    Tensor<float> sign({1, 1, 1, 1}, {-1.f});
    auto out = fgsm_step(x0, sign, 0.7f, x0, 1.0f);
    REQUIRE(out[0] == 0.0f);
  }
}

TEST_CASE("pgd on a positive linear loss moves every pixel up by one step") {
  auto batch = random_batch<float>({2, 1, 3, 3}, 2, 5);
  // keep pixels away from the range boundary so no clipping interferes
  for (std::int64_t i = 0; i < batch.pixels.numel(); ++i)
    batch.pixels[i] = 0.2f + 0.6f * batch.pixels[i];
  Tensor<float> w = Tensor<float>::full({2, 1, 3, 3}, 2.5f);
  PgdConfig cfg{/*eps=*/0.5, /*steps=*/1, /*step=*/0.05, false, 0};
  auto adv = pgd_attack(linear_loss(w), batch, cfg);
  for (std::int64_t i = 0; i < adv.pixels.numel(); ++i)
    REQUIRE_THAT(adv.pixels[i] - batch.pixels[i],
                 Catch::Matchers::WithinAbs(0.05, 1e-6));
  REQUIRE(adv.labels == batch.labels);
}

TEST_CASE("pgd presets match the published configurations") {
  auto mnist = pgd_preset("mnist");
  REQUIRE(mnist.epsilon == 0.3);
  REQUIRE(mnist.steps == 40);
  REQUIRE(mnist.step_size == 2.0 / 255.0);
  auto cifar = pgd_preset("cifar10");
  REQUIRE(cifar.epsilon == 8.0 / 255.0);
  REQUIRE(cifar.steps == 10);
  REQUIRE(cifar.step_size == 2.0 / 255.0);
  auto svhn = pgd_preset("svhn");
  REQUIRE(svhn.epsilon == 8.0 / 255.0);
  REQUIRE(svhn.steps == 10);
  REQUIRE_THROWS_AS(pgd_preset("imagenet"), ConfigError);
}

TEST_CASE("pgd ball and range invariants over randomized attacks") {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    int b = 1 + static_cast<int>(rng.below(3));
    auto batch = random_batch<float>({b, 1, 4, 4}, 3,
                                     1000 + static_cast<std::uint64_t>(t));
    Tensor<float> w({b, 1, 4, 4});
    for (std::int64_t i = 0; i < w.numel(); ++i)
      w[i] = static_cast<float>(rng.uniform(-2, 2));
    PgdConfig cfg;
    cfg.epsilon = rng.uniform(0, 0.5);
    cfg.steps = 1 + static_cast<int>(rng.below(4));
    cfg.step_size = rng.uniform(0.01, 0.3);
    cfg.random_start = rng.below(2) == 0;
    cfg.seed = static_cast<std::uint64_t>(t);
    auto adv = pgd_attack(linear_loss(w), batch, cfg);
    float eps = static_cast<float>(cfg.epsilon);
    for (std::int64_t i = 0; i < adv.pixels.numel(); ++i) {
      REQUIRE(std::abs(adv.pixels[i] - batch.pixels[i]) <= eps);
      REQUIRE(adv.pixels[i] >= 0.f);
      REQUIRE(adv.pixels[i] <= 1.f);
    }
  }
}

TEST_CASE("pgd with epsilon 0 is the identity on pixels") {
  auto batch = random_batch<float>({3, 1, 4, 4}, 3, 77);
  Tensor<float> w = Tensor<float>::full({3, 1, 4, 4}, 1.f);
  PgdConfig cfg{0.0, 5, 0.1, true, 9};
  auto adv = pgd_attack(linear_loss(w), batch, cfg);
  for (std::int64_t i = 0; i < adv.pixels.numel(); ++i)
    REQUIRE(adv.pixels[i] == batch.pixels[i]);
}

TEST_CASE("more steps never hurt on a convex quadratic threat") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto batch = random_batch<float>({1, 1, 3, 3}, 2,
                                     500 + static_cast<std::uint64_t>(trial));
    Tensor<float> t({1, 1, 3, 3});
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<float>(rng.uniform(-0.5, 1.5));
    auto loss_fn = quadratic_loss(t);
    auto loss_value = [&](const ImageBatch<float>& b) {
      return loss_fn(ad::constant(b.pixels), b.labels, 0).value()[0];
    };
    PgdConfig cfg{0.2, 1, 0.07, false, 0};
    float prev = -std::numeric_limits<float>::infinity();
    for (int steps = 1; steps <= 6; ++steps) {
      cfg.steps = steps;
      auto adv = pgd_attack(loss_fn, batch, cfg);
      float cur = loss_value(adv);
      REQUIRE(cur >= prev - 1e-6f);
      prev = cur;
    }
  }
}

TEST_CASE("NaN gradients abort with the offending batch index") {
  auto batch = random_batch<float>({3, 1, 2, 2}, 2, 13);
  Tensor<float> w = Tensor<float>::full({3, 1, 2, 2}, 1.f);
  for (int i = 0; i < 4; ++i)
    w[2 * 4 + i] = std::numeric_limits<float>::quiet_NaN();
  PgdConfig cfg{0.1, 2, 0.05, false, 0};
  try {
    pgd_attack(linear_loss(w), batch, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("pgd against a real model stays inside the ball and flips loss upward") {
  ModelConfig cfg;
  cfg.concept_dim = 3;
  cfg.num_classes = 3;
  cfg.input_shape = {1, 8, 8};
  cfg.encoder_depth = 1;
  cfg.blocks_per_stage = 1;
  cfg.base_width = 4;
  cfg.seed = 3;
  LicsNet<float> model(cfg);
  auto batch = random_batch<float>({4, 1, 8, 8}, 3, 21);
  PgdConfig pc{0.1, 5, 0.03, false, 0};
  auto adv = pgd_attack(ce_attack_loss(model), batch, pc);
  for (std::int64_t i = 0; i < adv.pixels.numel(); ++i) {
    REQUIRE(std::abs(adv.pixels[i] - batch.pixels[i]) <= 0.1f);
    REQUIRE(adv.pixels[i] >= 0.f);
    REQUIRE(adv.pixels[i] <= 1.f);
  }
  auto ce = [&](const ImageBatch<float>& b) {
    return cross_entropy(model.forward(b).probs, b.labels);
  };
  REQUIRE(ce(adv) >= ce(batch));
}
