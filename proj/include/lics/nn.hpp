#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lics/autodiff.hpp"
#include "lics/rng.hpp"
#include "lics/tensor.hpp"

namespace lics::nn {

using ad::Var;

// Named parameter registry; checkpoint order follows registration order.
template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, Tensor<T> init) {
    Var<T> p(std::move(init), true);
    entries_.push_back({name, p});
    return p;
  }
  const std::vector<std::pair<std::string, Var<T>>>& entries() const {
    return entries_;
  }
  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }
  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.value().numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
};

// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> uniform_fan_in(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> w, b;
  ad::ConvSpec spec;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch,
         int k, int stride, int pad, Rng& rng)
      : spec{stride, pad} {
    std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k;
    w = ps.create(name + ".w",
                  uniform_fan_in<T>({out_ch, in_ch, k, k}, fan_in, rng));
    b = ps.create(name + ".b", Tensor<T>({out_ch}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ad::bias_add_nchw(ad::conv2d(x, w, spec), b);
  }
};

// Transposed convolution (stride-2 upsampling). Weight layout [in, out, k, k],
// matching the data-gradient primitive it is built on. The exact output size
// is declared per call because conv rounding is not invertible.
template <typename T>
struct ConvTranspose2d {
  Var<T> w, b;
  ad::ConvSpec spec;
  int out_ch = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<T>& ps, const std::string& name, int in_ch,
                  int out_ch_, int k, int stride, int pad, Rng& rng)
      : spec{stride, pad}, out_ch(out_ch_) {
    std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * k * k;
    w = ps.create(name + ".w",
                  uniform_fan_in<T>({in_ch, out_ch_, k, k}, fan_in, rng));
    b = ps.create(name + ".b", Tensor<T>({out_ch_}));
  }

  Var<T> operator()(const Var<T>& x, int out_h, int out_w) const {
    Shape target{x.shape()[0], out_ch, out_h, out_w};
    return ad::bias_add_nchw(ad::conv2d_data_grad(x, w, target, spec), b);
  }
};

template <typename T>
struct Linear {
  Var<T> w, b;  // w: [in, out]

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out,
         Rng& rng)
      : w(ps.create(name + ".w", uniform_fan_in<T>({in, out}, in, rng))),
        b(ps.create(name + ".b", Tensor<T>({out}))) {}

  Var<T> operator()(const Var<T>& x) const {
    return ad::bias_add_rows(ad::matmul(x, w), b);
  }
};

// Two 3x3 convs with identity (or 1x1-projected) skip, post-activation.
template <typename T>
struct ResidualBlock {
  Conv2d<T> c1, c2;
  Conv2d<T> proj;  // used when stride != 1 or channels change
  bool has_proj = false;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<T>& ps, const std::string& name, int in_ch,
                int out_ch, int stride, Rng& rng) {
    c1 = Conv2d<T>(ps, name + ".c1", in_ch, out_ch, 3, stride, 1, rng);
    c2 = Conv2d<T>(ps, name + ".c2", out_ch, out_ch, 3, 1, 1, rng);
    has_proj = (stride != 1 || in_ch != out_ch);
    if (has_proj)
      proj = Conv2d<T>(ps, name + ".proj", in_ch, out_ch, 1, stride, 0, rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    auto h = c2(ad::relu(c1(x)));
    auto skip = has_proj ? proj(x) : x;
    return ad::relu(ad::add(h, skip));
  }
};

// Residual encoder trunk: stem conv + `stages` of residual blocks, each stage
// doubling width and halving resolution (except the first), then GAP.
template <typename T>
struct Encoder {
  Conv2d<T> stem;
  std::vector<ResidualBlock<T>> blocks;
  int out_width = 0;
  int out_h = 0, out_w = 0;

  Encoder() = default;
  Encoder(ParamStore<T>& ps, const std::string& name, int in_ch, int in_h,
          int in_w, int stages, int blocks_per_stage, int base_width,
          Rng& rng) {
    stem = Conv2d<T>(ps, name + ".stem", in_ch, base_width, 3, 1, 1, rng);
    int ch = base_width, h = in_h, w = in_w;
    for (int s = 0; s < stages; ++s) {
      int out_c = base_width << s;
      for (int bl = 0; bl < blocks_per_stage; ++bl) {
        int stride = (s > 0 && bl == 0) ? 2 : 1;
        blocks.emplace_back(ps,
                            name + ".s" + std::to_string(s) + ".b" +
                                std::to_string(bl),
                            ch, out_c, stride, rng);
        if (stride == 2) {
          h = ad::conv_out_dim(h, 3, {2, 1});
          w = ad::conv_out_dim(w, 3, {2, 1});
        }
        ch = out_c;
      }
    }
    out_width = ch;
    out_h = h;
    out_w = w;
  }

  // Returns pooled features [B, out_width].
  Var<T> operator()(const Var<T>& x) const {
    auto h = ad::relu(stem(x));
    for (const auto& b : blocks) h = b(h);
    return ad::global_avg_pool(h);
  }
};

template <typename T>
struct Adam {
  T lr = static_cast<T>(2e-4);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  std::int64_t t = 0;
  std::vector<Tensor<T>> m, v;

  void init(const std::vector<Var<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
    t = 0;
  }

  void step(std::vector<Var<T>>& params,
            const std::vector<Tensor<T>>& grads) {
    ++t;
    T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1),
                                           static_cast<double>(t)));
    T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2),
                                           static_cast<double>(t)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params[i].leaf_value();
      const Tensor<T>& g = grads[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        m[i][j] = beta1 * m[i][j] + (T(1) - beta1) * g[j];
        v[i][j] = beta2 * v[i][j] + (T(1) - beta2) * g[j] * g[j];
        T mh = m[i][j] / bc1;
        T vh = v[i][j] / bc2;
        p[j] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }
};

}  // namespace lics::nn
