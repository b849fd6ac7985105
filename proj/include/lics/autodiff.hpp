#pragma once

// Reverse-mode autodiff over dense tensors.
//
// Graphs are built eagerly (define-by-run). grad() is functional: it never
// mutates nodes, so concurrent workers may backward through disjoint graphs
// that share parameter leaves. When create_graph is set, the vector-Jacobian
// products are recorded as graph operations themselves, which makes
// gradient-penalty losses (norms of input gradients) trainable.

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "lics/error.hpp"
#include "lics/tensor.hpp"

namespace lics::ad {

template <typename T>
class Var;

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<Var<T>> inputs;
  // Maps (self, upstream) to one gradient Var per input. Null for leaves.
  std::function<std::vector<Var<T>>(const Var<T>&, const Var<T>&)> vjp;
  bool requires_grad = false;
  const char* op = "leaf";
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<T>& value() const { return n_->value; }
  // Leaf-only mutable access (optimizers update parameters in place between
  // graph builds).
  Tensor<T>& leaf_value() {
    if (n_->vjp) throw Error("leaf_value() on non-leaf node");
    return n_->value;
  }
  bool requires_grad() const { return n_->requires_grad; }
  const Shape& shape() const { return n_->value.shape(); }
  Node<T>* node() const { return n_.get(); }

  Var detach() const { return Var(n_->value, false); }

  static Var make(const char* op, Tensor<T> value, std::vector<Var> inputs,
                  std::function<std::vector<Var>(const Var&, const Var&)> vjp) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    Var v(std::move(value), rg);
    if (rg) {
      v.n_->inputs = std::move(inputs);
      v.n_->vjp = std::move(vjp);
      v.n_->op = op;
    }
    return v;
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return Var<T>::make("add", std::move(out), {a, b},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{g, g};
                      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return Var<T>::make("sub", std::move(out), {a, b},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{g, neg(g)};
                      });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
  return Var<T>::make("neg", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{neg(g)};
                      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return Var<T>::make("mul", std::move(out), {a, b},
                      [a, b](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{mul(g, b), mul(g, a)};
                      });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return Var<T>::make("mul_scalar", std::move(out), {a},
                      [s](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{mul_scalar(g, s)};
                      });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return Var<T>::make("add_scalar", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{g};
                      });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
  return Var<T>::make("square", std::move(out), {a},
                      [a](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            mul_scalar(mul(g, a), T(2))};
                      });
}

template <typename T>
Var<T> reciprocal(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / out[i];
  return Var<T>::make("reciprocal", std::move(out), {a},
                      [](const Var<T>& self, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            neg(mul(g, square(self)))};
                      });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::exp(out[i]);
  return Var<T>::make("exp", std::move(out), {a},
                      [](const Var<T>& self, const Var<T>& g) {
                        return std::vector<Var<T>>{mul(g, self)};
                      });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::log(out[i]);
  return Var<T>::make("log", std::move(out), {a},
                      [a](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{mul(g, reciprocal(a))};
                      });
}

// max(a, s) elementwise with a scalar floor. Subgradient 0 where a < s.
template <typename T>
Var<T> maximum_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  Tensor<T> mask(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    mask[i] = out[i] >= s ? T(1) : T(0);
    out[i] = std::max(out[i], s);
  }
  auto cmask = constant(std::move(mask));
  return Var<T>::make("maximum_scalar", std::move(out), {a},
                      [cmask](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{mul(g, cmask)};
                      });
}

// sqrt with a guarded gradient: d/dx sqrt = 1/(2 max(sqrt, tiny)), so the
// subgradient at exactly zero is finite. Values are exact.
template <typename T>
Var<T> sqrt_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::sqrt(out[i]);
  return Var<T>::make(
      "sqrt", std::move(out), {a}, [](const Var<T>& self, const Var<T>& g) {
        const T tiny = static_cast<T>(1e-30);
        auto denom = mul_scalar(maximum_scalar(self, tiny), T(2));
        return std::vector<Var<T>>{mul(g, reciprocal(denom))};
      });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  Tensor<T> mask(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    T v = out[i];
    mask[i] = v > T(0) ? T(1) : T(0);
    // NaN must propagate, not be silently zeroed
    out[i] = v > T(0) || std::isnan(static_cast<double>(v)) ? v : T(0);
  }
  auto cmask = constant(std::move(mask));
  return Var<T>::make("relu", std::move(out), {a},
                      [cmask](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{mul(g, cmask)};
                      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    T v = out[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  return Var<T>::make("sigmoid", std::move(out), {a},
                      [](const Var<T>& self, const Var<T>& g) {
                        auto one_minus = add_scalar(neg(self), T(1));
                        return std::vector<Var<T>>{
                            mul(g, mul(self, one_minus))};
                      });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Shape orig = a.shape();
  Tensor<T> out = a.value().reshaped(std::move(s));
  return Var<T>::make("reshape", std::move(out), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{reshape(g, orig)};
                      });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (adjoint pairs)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = 0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  Shape orig = a.shape();
  return Var<T>::make("sum_all", Tensor<T>::scalar(s), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{broadcast_all(g, orig)};
                      });
}

template <typename T>
Var<T> broadcast_all(const Var<T>& scalar, Shape target) {
  Tensor<T> out = Tensor<T>::full(target, scalar.value()[0]);
  return Var<T>::make("broadcast_all", std::move(out), {scalar},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{sum_all(g)};
                      });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// [N, ...] -> [N], summing everything but the leading axis.
template <typename T>
Var<T> per_sample_sum(const Var<T>& a) {
  int n = a.shape()[0];
  std::int64_t stride = a.value().numel() / n;
  Tensor<T> out({n});
  for (int b = 0; b < n; ++b) {
    T s = 0;
    for (std::int64_t i = 0; i < stride; ++i)
      s += a.value()[b * stride + i];
    out[b] = s;
  }
  Shape orig = a.shape();
  return Var<T>::make("per_sample_sum", std::move(out), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            per_sample_broadcast(g, orig)};
                      });
}

// [N] -> [N, ...]
template <typename T>
Var<T> per_sample_broadcast(const Var<T>& a, Shape target) {
  int n = a.shape()[0];
  if (target[0] != n)
    throw ShapeError("per_sample_broadcast: batch mismatch");
  Tensor<T> out(target);
  std::int64_t stride = out.numel() / n;
  for (int b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < stride; ++i)
      out[b * stride + i] = a.value()[b];
  return Var<T>::make("per_sample_broadcast", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{per_sample_sum(g)};
                      });
}

// [N, K] -> [N] picking one column per row.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<int> idx) {
  int n = a.shape()[0], k = a.shape()[1];
  if (static_cast<int>(idx.size()) != n)
    throw ShapeError("gather_rows: index count mismatch");
  Tensor<T> out({n});
  for (int b = 0; b < n; ++b) out[b] = a.value()[b * k + idx[b]];
  Shape orig = a.shape();
  return Var<T>::make("gather_rows", std::move(out), {a},
                      [orig, idx](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            scatter_rows(g, idx, orig)};
                      });
}

template <typename T>
Var<T> scatter_rows(const Var<T>& a, std::vector<int> idx, Shape target) {
  int n = target[0], k = target[1];
  Tensor<T> out(target);
  for (int b = 0; b < n; ++b) out[b * k + idx[b]] = a.value()[b];
  return Var<T>::make("scatter_rows", std::move(out), {a},
                      [idx](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{gather_rows(g, idx)};
                      });
}

// Row-wise reduction [N, K] -> [N]: alias of per_sample_sum for rank-2.
template <typename T>
Var<T> row_sum(const Var<T>& a) {
  return per_sample_sum(a);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
using EMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
}  // namespace detail

// C[m,n] = op(A) * op(B) with optional transposes.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false,
              bool tb = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) throw ShapeError("matmul: rank != 2");
  int am = ta ? av.dim(1) : av.dim(0), ak = ta ? av.dim(0) : av.dim(1);
  int bk = tb ? bv.dim(1) : bv.dim(0), bn = tb ? bv.dim(0) : bv.dim(1);
  if (ak != bk)
    throw ShapeError("matmul: inner dims " + std::to_string(ak) + " vs " +
                     std::to_string(bk));
  Tensor<T> out({am, bn});
  detail::ECMap<T> A(av.data(), av.dim(0), av.dim(1));
  detail::ECMap<T> B(bv.data(), bv.dim(0), bv.dim(1));
  detail::EMap<T> C(out.data(), am, bn);
  if (!ta && !tb)
    C.noalias() = A * B;
  else if (ta && !tb)
    C.noalias() = A.transpose() * B;
  else if (!ta && tb)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A.transpose() * B.transpose();
  return Var<T>::make(
      "matmul", std::move(out), {a, b},
      [a, b, ta, tb](const Var<T>&, const Var<T>& g) {
        Var<T> da, db;
        if (!ta)
          da = tb ? matmul(g, b) : matmul(g, b, false, true);
        else
          da = tb ? matmul(b, g, true, true) : matmul(b, g, false, true);
        if (!tb)
          db = ta ? matmul(a, g) : matmul(a, g, true, false);
        else
          db = ta ? matmul(g, a, true, true) : matmul(g, a, true, false);
        return std::vector<Var<T>>{da, db};
      });
}

// logits[b,n] = sum_m C[b,m] * G[b,m,n]
template <typename T>
Var<T> bmm_vec(const Var<T>& c, const Var<T>& g3) {
  const auto& cv = c.value();
  const auto& gv = g3.value();
  if (cv.rank() != 2 || gv.rank() != 3) throw ShapeError("bmm_vec: ranks");
  int B = cv.dim(0), M = cv.dim(1), N = gv.dim(2);
  if (gv.dim(0) != B || gv.dim(1) != M)
    throw ShapeError("bmm_vec: got " + shape_str(cv.shape()) + " x " +
                     shape_str(gv.shape()));
  Tensor<T> out({B, N});
  for (int b = 0; b < B; ++b) {
    detail::ECMap<T> Gm(gv.data() + static_cast<std::int64_t>(b) * M * N, M, N);
    detail::ECMap<T> Cm(cv.data() + static_cast<std::int64_t>(b) * M, 1, M);
    detail::EMap<T> Om(out.data() + static_cast<std::int64_t>(b) * N, 1, N);
    Om.noalias() = Cm * Gm;
  }
  return Var<T>::make("bmm_vec", std::move(out), {c, g3},
                      [c, g3](const Var<T>&, const Var<T>& g) {
                        auto dc = bmm_vec(g, transpose_last2(g3));
                        auto dg = batch_outer(c, g);
                        return std::vector<Var<T>>{dc, dg};
                      });
}

// [B,M,N] -> [B,N,M]
template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  const auto& av = a.value();
  if (av.rank() != 3) throw ShapeError("transpose_last2: rank != 3");
  int B = av.dim(0), M = av.dim(1), N = av.dim(2);
  Tensor<T> out({B, N, M});
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m)
      for (int n = 0; n < N; ++n)
        out[(static_cast<std::int64_t>(b) * N + n) * M + m] =
            av[(static_cast<std::int64_t>(b) * M + m) * N + n];
  return Var<T>::make("transpose_last2", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{transpose_last2(g)};
                      });
}

// out[b,m,n] = u[b,m] * v[b,n]
template <typename T>
Var<T> batch_outer(const Var<T>& u, const Var<T>& v) {
  const auto& uv = u.value();
  const auto& vv = v.value();
  if (uv.rank() != 2 || vv.rank() != 2 || uv.dim(0) != vv.dim(0))
    throw ShapeError("batch_outer: shapes");
  int B = uv.dim(0), M = uv.dim(1), N = vv.dim(1);
  Tensor<T> out({B, M, N});
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m) {
      T um = uv[static_cast<std::int64_t>(b) * M + m];
      for (int n = 0; n < N; ++n)
        out[(static_cast<std::int64_t>(b) * M + m) * N + n] =
            um * vv[static_cast<std::int64_t>(b) * N + n];
    }
  return Var<T>::make("batch_outer", std::move(out), {u, v},
                      [u, v](const Var<T>&, const Var<T>& g) {
                        auto du = bmm_vec(v, transpose_last2(g));
                        auto dv = bmm_vec(u, g);
                        return std::vector<Var<T>>{du, dv};
                      });
}

// [B,M,Ncls] -> [B,M]: pick the class column per sample.
template <typename T>
Var<T> gather_class_cols(const Var<T>& g3, std::vector<int> cls) {
  const auto& gv = g3.value();
  if (gv.rank() != 3) throw ShapeError("gather_class_cols: rank != 3");
  int B = gv.dim(0), M = gv.dim(1), N = gv.dim(2);
  if (static_cast<int>(cls.size()) != B)
    throw ShapeError("gather_class_cols: class count");
  Tensor<T> out({B, M});
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m)
      out[static_cast<std::int64_t>(b) * M + m] =
          gv[(static_cast<std::int64_t>(b) * M + m) * N + cls[b]];
  Shape orig = gv.shape();
  return Var<T>::make("gather_class_cols", std::move(out), {g3},
                      [orig, cls](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            scatter_class_cols(g, cls, orig)};
                      });
}

template <typename T>
Var<T> scatter_class_cols(const Var<T>& a, std::vector<int> cls,
                          Shape target) {
  int B = target[0], M = target[1], N = target[2];
  Tensor<T> out(target);
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m)
      out[(static_cast<std::int64_t>(b) * M + m) * N + cls[b]] =
          a.value()[static_cast<std::int64_t>(b) * M + m];
  return Var<T>::make("scatter_class_cols", std::move(out), {a},
                      [cls](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            gather_class_cols(g, cls)};
                      });
}

// Adds a row vector b[J] to every row of x[N,J].
template <typename T>
Var<T> bias_add_rows(const Var<T>& x, const Var<T>& b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw ShapeError("bias_add_rows: shapes");
  Tensor<T> out = xv;
  int n = xv.dim(0), j = xv.dim(1);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < j; ++c) out[r * j + c] += bv[c];
  return Var<T>::make("bias_add_rows", std::move(out), {x, b},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{g, col_sum(g)};
                      });
}

// [N,J] -> [J]
template <typename T>
Var<T> col_sum(const Var<T>& a) {
  int n = a.shape()[0], j = a.shape()[1];
  Tensor<T> out({j});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < j; ++c) out[c] += a.value()[r * j + c];
  int rows = n;
  return Var<T>::make("col_sum", std::move(out), {a},
                      [rows](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{row_broadcast(g, rows)};
                      });
}

// [J] -> [N,J]
template <typename T>
Var<T> row_broadcast(const Var<T>& a, int rows) {
  int j = a.shape()[0];
  Tensor<T> out({rows, j});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < j; ++c) out[r * j + c] = a.value()[c];
  return Var<T>::make("row_broadcast", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{col_sum(g)};
                      });
}

// ---------------------------------------------------------------------------
// Convolution primitives (closed under differentiation)
// ---------------------------------------------------------------------------

struct ConvSpec {
  int stride = 1;
  int pad = 0;
};

inline int conv_out_dim(int in, int k, const ConvSpec& s) {
  return (in + 2 * s.pad - k) / s.stride + 1;
}

namespace detail {

// col[(c*kh*kw + dy*kw + dx), (oy*Wo + ox)] = x[c, oy*s - p + dy, ox*s - p + dx]
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw,
            const ConvSpec& cs, int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c)
    for (int dy = 0; dy < kh; ++dy)
      for (int dx = 0; dx < kw; ++dx) {
        T* dst = col + ((static_cast<std::int64_t>(c) * kh + dy) * kw + dx) *
                           Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * cs.stride - cs.pad + dy;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = T(0);
            continue;
          }
          const T* src = x + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * cs.stride - cs.pad + dx;
            dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int C, int H, int W, int kh, int kw,
            const ConvSpec& cs, int Ho, int Wo, T* x) {
  for (int c = 0; c < C; ++c)
    for (int dy = 0; dy < kh; ++dy)
      for (int dx = 0; dx < kw; ++dx) {
        const T* src = col + ((static_cast<std::int64_t>(c) * kh + dy) * kw +
                              dx) *
                                 Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * cs.stride - cs.pad + dy;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * cs.stride - cs.pad + dx;
            if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

template <typename T>
Var<T> conv2d_data_grad(const Var<T>& gy, const Var<T>& w, Shape xshape,
                        ConvSpec cs);
template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, Shape wshape,
                          ConvSpec cs);

// y[n,f,ho,wo] = sum_{c,dy,dx} x[n,c,...] * w[f,c,dy,dx]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvSpec cs) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: rank");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int F = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != C)
    throw ShapeError("conv2d: channels " + std::to_string(C) + " vs weight " +
                     std::to_string(wv.dim(1)));
  int Ho = conv_out_dim(H, kh, cs), Wo = conv_out_dim(W, kw, cs);
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output");
  Tensor<T> out({N, F, Ho, Wo});
  int ckk = C * kh * kw;
  std::vector<T> col(static_cast<std::size_t>(ckk) * Ho * Wo);
  detail::ECMap<T> Wm(wv.data(), F, ckk);
  for (int n = 0; n < N; ++n) {
    detail::im2col(xv.data() + static_cast<std::int64_t>(n) * C * H * W, C, H,
                   W, kh, kw, cs, Ho, Wo, col.data());
    detail::ECMap<T> Cm(col.data(), ckk, Ho * Wo);
    detail::EMap<T> Om(out.data() + static_cast<std::int64_t>(n) * F * Ho * Wo,
                       F, Ho * Wo);
    Om.noalias() = Wm * Cm;
  }
  Shape xs = xv.shape(), ws = wv.shape();
  return Var<T>::make("conv2d", std::move(out), {x, w},
                      [x, w, xs, ws, cs](const Var<T>&, const Var<T>& g) {
                        auto dx = conv2d_data_grad(g, w, xs, cs);
                        auto dw = conv2d_weight_grad(x, g, ws, cs);
                        return std::vector<Var<T>>{dx, dw};
                      });
}

// Adjoint of conv2d in x: scatters gy back through the kernel.
template <typename T>
Var<T> conv2d_data_grad(const Var<T>& gy, const Var<T>& w, Shape xshape,
                        ConvSpec cs) {
  const auto& gv = gy.value();
  const auto& wv = w.value();
  int N = gv.dim(0), F = gv.dim(1), Ho = gv.dim(2), Wo = gv.dim(3);
  int C = xshape[1], H = xshape[2], W = xshape[3];
  int kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(0) != F || wv.dim(1) != C || xshape[0] != N)
    throw ShapeError("conv2d_data_grad: shapes");
  Tensor<T> out(xshape);
  int ckk = C * kh * kw;
  std::vector<T> col(static_cast<std::size_t>(ckk) * Ho * Wo);
  detail::ECMap<T> Wm(wv.data(), F, ckk);
  for (int n = 0; n < N; ++n) {
    detail::ECMap<T> Gm(gv.data() + static_cast<std::int64_t>(n) * F * Ho * Wo,
                        F, Ho * Wo);
    detail::EMap<T> Cm(col.data(), ckk, Ho * Wo);
    Cm.noalias() = Wm.transpose() * Gm;
    detail::col2im(col.data(), C, H, W, kh, kw, cs, Ho, Wo,
                   out.data() + static_cast<std::int64_t>(n) * C * H * W);
  }
  Shape ws = wv.shape();
  return Var<T>::make(
      "conv2d_data_grad", std::move(out), {gy, w},
      [gy, w, ws, cs](const Var<T>& self, const Var<T>& u) {
        auto dgy = conv2d(u, w, cs);
        auto dw = conv2d_weight_grad(u, gy, ws, cs);
        return std::vector<Var<T>>{dgy, dw};
      });
}

// Adjoint of conv2d in w: correlates input patches with gy.
template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, Shape wshape,
                          ConvSpec cs) {
  const auto& xv = x.value();
  const auto& gv = gy.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int F = gv.dim(1), Ho = gv.dim(2), Wo = gv.dim(3);
  int kh = wshape[2], kw = wshape[3];
  if (wshape[0] != F || wshape[1] != C || gv.dim(0) != N)
    throw ShapeError("conv2d_weight_grad: shapes");
  Tensor<T> out(wshape);
  int ckk = C * kh * kw;
  std::vector<T> col(static_cast<std::size_t>(ckk) * Ho * Wo);
  detail::EMap<T> Om(out.data(), F, ckk);
  for (int n = 0; n < N; ++n) {
    detail::im2col(xv.data() + static_cast<std::int64_t>(n) * C * H * W, C, H,
                   W, kh, kw, cs, Ho, Wo, col.data());
    detail::ECMap<T> Cm(col.data(), ckk, Ho * Wo);
    detail::ECMap<T> Gm(gv.data() + static_cast<std::int64_t>(n) * F * Ho * Wo,
                        F, Ho * Wo);
    Om.noalias() += Gm * Cm.transpose();
  }
  Shape xs = xv.shape();
  return Var<T>::make(
      "conv2d_weight_grad", std::move(out), {x, gy},
      [x, gy, xs, cs](const Var<T>& self, const Var<T>& u) {
        auto dx = conv2d_data_grad(gy, u, xs, cs);
        auto dgy = conv2d(x, u, cs);
        return std::vector<Var<T>>{dx, dgy};
      });
}

// Per-channel bias over NCHW.
template <typename T>
Var<T> bias_add_nchw(const Var<T>& x, const Var<T>& b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() != 4 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw ShapeError("bias_add_nchw: shapes");
  Tensor<T> out = xv;
  int N = xv.dim(0), C = xv.dim(1);
  std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T bias = bv[c];
      T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] += bias;
    }
  return Var<T>::make("bias_add_nchw", std::move(out), {x, b},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{g, channel_sum(g)};
                      });
}

// [N,C,H,W] -> [C]
template <typename T>
Var<T> channel_sum(const Var<T>& a) {
  const auto& av = a.value();
  int N = av.dim(0), C = av.dim(1);
  std::int64_t hw = static_cast<std::int64_t>(av.dim(2)) * av.dim(3);
  Tensor<T> out({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = av.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      T s = 0;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      out[c] += s;
    }
  Shape orig = av.shape();
  return Var<T>::make("channel_sum", std::move(out), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            channel_broadcast(g, orig)};
                      });
}

// [C] -> [N,C,H,W]
template <typename T>
Var<T> channel_broadcast(const Var<T>& a, Shape target) {
  Tensor<T> out(target);
  int N = target[0], C = target[1];
  std::int64_t hw = static_cast<std::int64_t>(target[2]) * target[3];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T v = a.value()[c];
      T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = v;
    }
  return Var<T>::make("channel_broadcast", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{channel_sum(g)};
                      });
}

// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  const auto& av = a.value();
  if (av.rank() != 4) throw ShapeError("global_avg_pool: rank != 4");
  int N = av.dim(0), C = av.dim(1);
  std::int64_t hw = static_cast<std::int64_t>(av.dim(2)) * av.dim(3);
  Tensor<T> out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = av.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      T s = 0;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      out[n * C + c] = s / static_cast<T>(hw);
    }
  Shape orig = av.shape();
  return Var<T>::make("global_avg_pool", std::move(out), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{
                            spatial_broadcast(g, orig, true)};
                      });
}

// [N,C] -> [N,C,H,W]; scaled==true divides by H*W (adjoint of average).
template <typename T>
Var<T> spatial_broadcast(const Var<T>& a, Shape target, bool scaled) {
  Tensor<T> out(target);
  int N = target[0], C = target[1];
  std::int64_t hw = static_cast<std::int64_t>(target[2]) * target[3];
  T scale = scaled ? T(1) / static_cast<T>(hw) : T(1);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T v = a.value()[n * C + c] * scale;
      T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = v;
    }
  return Var<T>::make(
      "spatial_broadcast", std::move(out), {a},
      [scaled](const Var<T>&, const Var<T>& g) {
        if (scaled) return std::vector<Var<T>>{global_avg_pool(g)};
        // unscaled adjoint: plain spatial sum
        auto pooled = global_avg_pool(g);
        T hw = static_cast<T>(g.shape()[2]) * static_cast<T>(g.shape()[3]);
        return std::vector<Var<T>>{mul_scalar(pooled, hw)};
      });
}

// 2x2 average pooling, stride 2 (input dims must be even).
template <typename T>
Var<T> avg_pool2x2(const Var<T>& a) {
  const auto& av = a.value();
  int N = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avg_pool2x2: odd dims");
  Tensor<T> out({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int x = 0; x < W / 2; ++x) {
          T s = av.at(n, c, 2 * y, 2 * x) + av.at(n, c, 2 * y, 2 * x + 1) +
                av.at(n, c, 2 * y + 1, 2 * x) +
                av.at(n, c, 2 * y + 1, 2 * x + 1);
          out.at(n, c, y, x) = s * T(0.25);
        }
  Shape orig = av.shape();
  return Var<T>::make("avg_pool2x2", std::move(out), {a},
                      [orig](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{avg_unpool2x2(g, orig)};
                      });
}

template <typename T>
Var<T> avg_unpool2x2(const Var<T>& a, Shape target) {
  const auto& av = a.value();
  int N = target[0], C = target[1], H = target[2], W = target[3];
  Tensor<T> out(target);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          out.at(n, c, y, x) = av.at(n, c, y / 2, x / 2) * T(0.25);
  return Var<T>::make("avg_unpool2x2", std::move(out), {a},
                      [](const Var<T>&, const Var<T>& g) {
                        return std::vector<Var<T>>{avg_pool2x2(g)};
                      });
}

// ---------------------------------------------------------------------------
// grad()
// ---------------------------------------------------------------------------

template <typename T>
class GradMap {
 public:
  void set(const Node<T>* n, Var<T> g) { m_[n] = std::move(g); }
  bool has(const Var<T>& v) const { return m_.count(v.node()) != 0; }
  // Gradient of the root w.r.t. v; zeros if v never influenced the root.
  Var<T> at(const Var<T>& v) const {
    auto it = m_.find(v.node());
    if (it != m_.end()) return it->second;
    return constant(Tensor<T>(v.shape()));
  }
  Tensor<T> tensor_at(const Var<T>& v) const {
    auto it = m_.find(v.node());
    if (it != m_.end()) return it->second.value();
    return Tensor<T>(v.shape());
  }

 private:
  std::unordered_map<const Node<T>*, Var<T>> m_;
};

// Vector-Jacobian product of `root` w.r.t. the nodes in `wrt` (leaves or
// intermediates). `seed` is the cotangent at the root and defaults to ones
// (standard for scalar losses); a graph-alive seed Var makes the returned
// gradients differentiable w.r.t. whatever the seed depends on. With
// create_graph the returned gradients carry their own graph and can be
// differentiated again.
template <typename T>
GradMap<T> grad(const Var<T>& root, const std::vector<Var<T>>& wrt,
                bool create_graph = false, Var<T> seed = {}) {
  // Topological order over Var handles so vjps see the graph-connected
  // output (needed when a derivative is expressed via the op's own output).
  std::vector<Var<T>> topo;
  std::unordered_map<const Node<T>*, int> state;  // 1 open, 2 done
  if (root.requires_grad()) {
    std::vector<std::pair<Var<T>, std::size_t>> stack;
    stack.push_back({root, 0});
    state[root.node()] = 1;
    while (!stack.empty()) {
      auto& [v, i] = stack.back();
      Node<T>* n = v.node();
      if (i < n->inputs.size()) {
        const Var<T>& c = n->inputs[i++];
        if (c.requires_grad() && state[c.node()] == 0) {
          state[c.node()] = 1;
          stack.push_back({c, 0});
        }
      } else {
        state[n] = 2;
        topo.push_back(v);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<const Node<T>*, Var<T>> acc;
  {
    if (!seed.defined())
      seed = constant(Tensor<T>::full(root.shape(), T(1)));
    if (!seed.value().same_shape(root.value()))
      throw ShapeError("grad: seed shape mismatch");
    acc[root.node()] = create_graph ? seed : seed.detach();
  }

  std::unordered_map<const Node<T>*, bool> keep;
  for (const auto& w : wrt) keep[w.node()] = true;

  // Reverse topological order: every node is finalized after its consumers.
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const Var<T>& v = *it;
    Node<T>* n = v.node();
    auto found = acc.find(n);
    if (found == acc.end()) continue;  // not reachable from the seed
    Var<T> g = found->second;
    if (!n->vjp) continue;  // leaf
    auto gs = n->vjp(v, g);
    if (gs.size() != n->inputs.size())
      throw Error(std::string("vjp arity mismatch in op ") + n->op);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const Var<T>& in = n->inputs[i];
      if (!in.requires_grad()) continue;
      Var<T> gi = create_graph ? gs[i] : gs[i].detach();
      auto slot = acc.find(in.node());
      if (slot == acc.end())
        acc[in.node()] = gi;
      else
        slot->second = create_graph ? add(slot->second, gi)
                                    : add(slot->second, gi).detach();
    }
    if (!keep.count(n)) acc.erase(n);  // free intermediates early
  }

  GradMap<T> out;
  for (const auto& w : wrt) {
    auto it2 = acc.find(w.node());
    if (it2 != acc.end()) out.set(w.node(), it2->second);
  }
  return out;
}

}  // namespace lics::ad
