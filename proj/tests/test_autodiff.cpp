#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "lics/autodiff.hpp"
#include "lics/rng.hpp"

using namespace lics;
using ad::Var;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = rng.uniform(-scale, scale);
  return t;
}

// Central finite differences of a scalar-valued function of several tensors.
double fd_partial(const std::function<double(const std::vector<Tensor<double>>&)>& f,
                  std::vector<Tensor<double>> inputs, int which,
                  std::int64_t idx, double h = 1e-6) {
  inputs[which][idx] += h;
  double up = f(inputs);
  inputs[which][idx] -= 2 * h;
  double dn = f(inputs);
  return (up - dn) / (2 * h);
}

// Checks autodiff gradients of a graph builder against finite differences on
// every input coordinate.
void check_grads(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& build,
    std::vector<Tensor<double>> inputs, double tol = 1e-6) {
  std::vector<Var<double>> leaves;
  for (auto& t : inputs) leaves.emplace_back(t, true);
  auto root = build(leaves);
  REQUIRE(root.value().numel() == 1);
  auto gm = ad::grad(root, leaves);

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    std::vector<Var<double>> ls;
    for (const auto& t : xs) ls.emplace_back(t, false);
    return build(ls).value()[0];
  };

  for (std::size_t w = 0; w < inputs.size(); ++w) {
    Tensor<double> g = gm.tensor_at(leaves[w]);
    for (std::int64_t i = 0; i < inputs[w].numel(); ++i) {
      double fd = fd_partial(eval, inputs, static_cast<int>(w), i);
      REQUIRE_THAT(g[i], Catch::Matchers::WithinAbs(fd, tol) ||
                             Catch::Matchers::WithinRel(fd, tol));
    }
  }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(7);
  auto x = random_tensor({2, 3}, rng);
  auto y = random_tensor({2, 3}, rng);

  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::mul(v[0], v[1]));
      },
      {x, y});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::sub(v[0], v[1])));
      },
      {x, y});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::relu(v[0]));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::sigmoid(v[0]));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::exp_(ad::mul_scalar(v[0], 0.5)));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::log_(ad::add_scalar(ad::square(v[0]), 1.0)));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::sqrt_(ad::add_scalar(ad::square(v[0]), 0.1)));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::reciprocal(ad::add_scalar(ad::square(v[0]), 2.0)));
      },
      {x});
}

TEST_CASE("matmul gradients for all transpose flags") {
  Rng rng(11);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Shape sa = ta ? Shape{4, 2} : Shape{2, 4};
      Shape sb = tb ? Shape{3, 4} : Shape{4, 3};
      auto a = random_tensor(sa, rng);
      auto b = random_tensor(sb, rng);
      check_grads(
          [ta, tb](const std::vector<Var<double>>& v) {
            return ad::sum_all(ad::square(ad::matmul(v[0], v[1], ta, tb)));
          },
          {a, b});
    }
}

TEST_CASE("reduction/broadcast/gather gradients") {
  Rng rng(13);
  auto x = random_tensor({3, 4}, rng);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::per_sample_sum(v[0])));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::square(ad::per_sample_broadcast(ad::per_sample_sum(v[0]),
                                                {3, 4})));
      },
      {x});
  std::vector<int> idx{2, 0, 3};
  check_grads(
      [idx](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::gather_rows(v[0], idx)));
      },
      {x});
  auto b = random_tensor({4}, rng);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::bias_add_rows(v[0], v[1])));
      },
      {x, b});
}

TEST_CASE("batched product-head op gradients") {
  Rng rng(17);
  auto c = random_tensor({2, 3}, rng);
  auto g = random_tensor({2, 3, 4}, rng);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::bmm_vec(v[0], v[1])));
      },
      {c, g});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::transpose_last2(v[1])));
      },
      {c, g});
  auto u = random_tensor({2, 4}, rng);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::batch_outer(v[0], v[1])));
      },
      {c, u});
  std::vector<int> cls{1, 3};
  check_grads(
      [cls](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::gather_class_cols(v[1], cls)));
      },
      {c, g});
}

TEST_CASE("conv primitives: adjoint identities on random instances") {
  Rng rng(23);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
    ad::ConvSpec cs{stride, pad};
    int C = 2, F = 3, H = 6, W = 5, k = 3;
    auto x = random_tensor({2, C, H, W}, rng);
    auto w = random_tensor({F, C, k, k}, rng);
    int Ho = ad::conv_out_dim(H, k, cs), Wo = ad::conv_out_dim(W, k, cs);
    auto y = random_tensor({2, F, Ho, Wo}, rng);

    // <conv(x,w), y> == <x, data_grad(y,w)> == <w, weight_grad(x,y)>
    auto conv = ad::conv2d(ad::constant(x), ad::constant(w), cs).value();
    auto dgx = ad::conv2d_data_grad(ad::constant(y), ad::constant(w),
                                    x.shape(), cs)
                   .value();
    auto wgx = ad::conv2d_weight_grad(ad::constant(x), ad::constant(y),
                                      w.shape(), cs)
                   .value();
    double ip1 = 0, ip2 = 0, ip3 = 0;
    for (std::int64_t i = 0; i < conv.numel(); ++i) ip1 += conv[i] * y[i];
    for (std::int64_t i = 0; i < x.numel(); ++i) ip2 += x[i] * dgx[i];
    for (std::int64_t i = 0; i < w.numel(); ++i) ip3 += w[i] * wgx[i];
    REQUIRE_THAT(ip1, Catch::Matchers::WithinRel(ip2, 1e-10));
    REQUIRE_THAT(ip1, Catch::Matchers::WithinRel(ip3, 1e-10));
  }
}

TEST_CASE("conv primitive gradients match finite differences") {
  Rng rng(29);
  ad::ConvSpec cs{2, 1};
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  check_grads(
      [cs](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::conv2d(v[0], v[1], cs)));
      },
      {x, w}, 1e-5);

  int Ho = ad::conv_out_dim(5, 3, cs), Wo = Ho;
  auto gy = random_tensor({1, 3, Ho, Wo}, rng);
  Shape xs{1, 2, 5, 5};
  check_grads(
      [cs, xs](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::square(ad::conv2d_data_grad(v[0], v[1], xs, cs)));
      },
      {gy, w}, 1e-5);
  Shape ws{3, 2, 3, 3};
  check_grads(
      [cs, ws](const std::vector<Var<double>>& v) {
        return ad::sum_all(
            ad::square(ad::conv2d_weight_grad(v[0], v[1], ws, cs)));
      },
      {x, gy}, 1e-5);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::global_avg_pool(v[0])));
      },
      {x});
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::avg_pool2x2(v[0])));
      },
      {random_tensor({1, 2, 4, 4}, rng)});
  auto bias = random_tensor({2}, rng);
  check_grads(
      [](const std::vector<Var<double>>& v) {
        return ad::sum_all(ad::square(ad::bias_add_nchw(v[0], v[1])));
      },
      {x, bias});
}

TEST_CASE("double backward: gradient-of-gradient matches finite differences") {
  // f(x, w) = || d/dx ( sum(sigmoid(conv(x, w))) ) ||^2 is a function of w
  // through a create-graph backward. Check df/dw by finite differences on the
  // analytic inner gradient.
  Rng rng(31);
  ad::ConvSpec cs{1, 1};
  auto x0 = random_tensor({1, 1, 4, 4}, rng);
  auto w0 = random_tensor({2, 1, 3, 3}, rng);

  auto inner_outer = [&](const Tensor<double>& w_t, bool want_grads)
      -> std::pair<double, Tensor<double>> {
    Var<double> x(x0, true);
    Var<double> w(w_t, true);
    auto y = ad::sum_all(ad::sigmoid(ad::conv2d(x, w, cs)));
    auto gx = ad::grad(y, {x}, /*create_graph=*/true).at(x);
    auto penalty = ad::sum_all(ad::square(gx));
    if (!want_grads) return {penalty.value()[0], Tensor<double>()};
    auto gw = ad::grad(penalty, {w}).tensor_at(w);
    return {penalty.value()[0], gw};
  };

  auto [val, gw] = inner_outer(w0, true);
  REQUIRE(std::isfinite(val));
  for (std::int64_t i = 0; i < w0.numel(); i += 3) {  // sample coordinates
    const double h = 1e-6;
    auto wp = w0;
    wp[i] += h;
    auto wm = w0;
    wm[i] -= h;
    double fd =
        (inner_outer(wp, false).first - inner_outer(wm, false).first) /
        (2 * h);
    REQUIRE_THAT(gw[i], Catch::Matchers::WithinAbs(fd, 1e-5) ||
                            Catch::Matchers::WithinRel(fd, 1e-5));
  }
}

TEST_CASE("double backward through the significance-style path") {
  // Mirrors the effective linearity constraint: grad_x of <c, G(x)[:,y]>
  // with G produced by conv + linear layers, then a norm, then grads w.r.t.
  // the layer weights.
  Rng rng(37);
  ad::ConvSpec cs{1, 1};
  auto x0 = random_tensor({2, 1, 4, 4}, rng, 0.5);
  auto w0 = random_tensor({2, 1, 3, 3}, rng, 0.5);
  auto fc0 = random_tensor({2, 6}, rng, 0.5);  // pooled 2ch -> M*N = 2*3
  std::vector<int> labels{1, 0};

  auto penalty_of = [&](const Tensor<double>& conv_w,
                        const Tensor<double>& fc_w, bool want_grads)
      -> std::pair<double, std::vector<Tensor<double>>> {
    Var<double> x(x0, true);
    Var<double> wc(conv_w, true);
    Var<double> wf(fc_w, true);
    auto feat = ad::global_avg_pool(ad::relu(ad::conv2d(x, wc, cs)));
    auto gflat = ad::matmul(feat, wf);
    auto g3 = ad::reshape(gflat, {2, 2, 3});
    auto cols = ad::gather_class_cols(g3, labels);
    Tensor<double> cvals({2, 2});
    for (std::int64_t i = 0; i < 4; ++i) cvals[i] = 0.3 * (i + 1);
    auto s = ad::sum_all(ad::mul(ad::constant(cvals), cols));
    auto gx = ad::grad(s, {x}, true).at(x);
    auto pen =
        ad::mean_all(ad::sqrt_(ad::per_sample_sum(ad::square(gx))));
    if (!want_grads) return {pen.value()[0], {}};
    auto gm = ad::grad(pen, {wc, wf});
    return {pen.value()[0], {gm.tensor_at(wc), gm.tensor_at(wf)}};
  };

  auto [val, grads] = penalty_of(w0, fc0, true);
  REQUIRE(std::isfinite(val));
  REQUIRE(val > 0);

  const double h = 1e-6;
  for (std::int64_t i = 0; i < w0.numel(); i += 5) {
    auto wp = w0; wp[i] += h;
    auto wm = w0; wm[i] -= h;
    double fd = (penalty_of(wp, fc0, false).first -
                 penalty_of(wm, fc0, false).first) / (2 * h);
    REQUIRE_THAT(grads[0][i], Catch::Matchers::WithinAbs(fd, 1e-6) ||
                                  Catch::Matchers::WithinRel(fd, 1e-5));
  }
  for (std::int64_t i = 0; i < fc0.numel(); i += 3) {
    auto fp = fc0; fp[i] += h;
    auto fm = fc0; fm[i] -= h;
    double fd = (penalty_of(w0, fp, false).first -
                 penalty_of(w0, fm, false).first) / (2 * h);
    REQUIRE_THAT(grads[1][i], Catch::Matchers::WithinAbs(fd, 1e-6) ||
                                  Catch::Matchers::WithinRel(fd, 1e-5));
  }
}

TEST_CASE("grad w.r.t. an intermediate node") {
  Rng rng(41);
  auto x = random_tensor({2, 3}, rng);
  Var<double> xv(x, true);
  auto mid = ad::mul_scalar(xv, 2.0);
  auto root = ad::sum_all(ad::square(mid));
  auto gm = ad::grad(root, {mid, xv});
  auto gmid = gm.tensor_at(mid);
  auto gx = gm.tensor_at(xv);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    REQUIRE_THAT(gmid[i], Catch::Matchers::WithinRel(4.0 * x[i], 1e-12));
    REQUIRE_THAT(gx[i], Catch::Matchers::WithinRel(8.0 * x[i], 1e-12));
  }
}

TEST_CASE("gradients do not flow through detach") {
  Tensor<double> x({2}, {1.0, 2.0});
  Var<double> xv(x, true);
  auto d = xv.detach();
  auto root = ad::sum_all(ad::mul(xv, d));
  auto gm = ad::grad(root, {xv});
  auto g = gm.tensor_at(xv);
  REQUIRE(g[0] == 1.0);  // d treated as constant
  REQUIRE(g[1] == 2.0);
}
