#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lics/autodiff.hpp"
#include "lics/nn.hpp"
#include "lics/rng.hpp"
#include "lics/tensor.hpp"

namespace lics {

using ad::Var;

struct ModelConfig {
  int concept_dim = 10;   // M
  int num_classes = 10;   // N
  std::array<int, 3> input_shape{1, 28, 28};  // C,H,W
  int encoder_depth = 3;  // residual stages per branch
  int blocks_per_stage = 2;
  int base_width = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (concept_dim < 1) throw ConfigError("model: concept_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (encoder_depth < 1)
      throw ConfigError("model: encoder_depth must be >= 1");
    if (blocks_per_stage < 1)
      throw ConfigError("model: blocks_per_stage must be >= 1");
    if (base_width < 1) throw ConfigError("model: base_width must be >= 1");
    for (int d : input_shape)
      if (d < 1) throw ConfigError("model: input_shape dims must be >= 1");
  }

  bool operator==(const ModelConfig& o) const {
    return concept_dim == o.concept_dim && num_classes == o.num_classes &&
           input_shape == o.input_shape && encoder_depth == o.encoder_depth &&
           blocks_per_stage == o.blocks_per_stage &&
           base_width == o.base_width && seed == o.seed;
  }
};

// Pixel tensors in [0,1] plus integer labels.
template <typename T>
struct ImageBatch {
  Tensor<T> pixels;  // [B,C,H,W]
  std::vector<int> labels;

  int size() const { return pixels.rank() ? pixels.dim(0) : 0; }

  void validate(int num_classes = -1) const {
    if (pixels.rank() != 4) throw ShapeError("ImageBatch: pixels must be NCHW");
    if (static_cast<int>(labels.size()) != pixels.dim(0))
      throw ShapeError("ImageBatch: label count " +
                       std::to_string(labels.size()) + " vs batch " +
                       std::to_string(pixels.dim(0)));
    for (std::int64_t i = 0; i < pixels.numel(); ++i)
      if (!(pixels[i] >= T(0) && pixels[i] <= T(1)))
        throw ConfigError("ImageBatch: pixel outside [0,1]");
    if (num_classes > 0)
      for (int y : labels)
        if (y < 0 || y >= num_classes)
          throw ConfigError("ImageBatch: label " + std::to_string(y) +
                            " outside [0," + std::to_string(num_classes) +
                            ")");
  }

  ImageBatch slice(int begin, int end) const {
    int c = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3);
    std::int64_t stride = static_cast<std::int64_t>(c) * h * w;
    Tensor<T> px({end - begin, c, h, w});
    std::copy(pixels.data() + begin * stride, pixels.data() + end * stride,
              px.data());
    return {std::move(px),
            std::vector<int>(labels.begin() + begin, labels.begin() + end)};
  }
};

// Forward-pass bundle (plain tensors, per batch).
template <typename T>
struct LicsOutput {
  Tensor<T> concept_vec;    // [B,M]
  Tensor<T> significance;   // [B,M,N]
  Tensor<T> logits;         // [B,N]
  Tensor<T> probs;          // [B,N]
  Tensor<T> reconstruction; // [B,C,H,W]

  int predicted_class(int b) const {
    int n = logits.dim(1), best = 0;
    for (int i = 1; i < n; ++i)
      if (logits[b * n + i] > logits[b * n + best]) best = i;
    return best;
  }
};

// Row-wise softmax with a detached max shift (bitwise shift-invariant).
template <typename T>
Var<T> softmax_rows(const Var<T>& logits) {
  int b = logits.shape()[0], n = logits.shape()[1];
  Tensor<T> rowmax({b});
  for (int r = 0; r < b; ++r) {
    T m = logits.value()[r * n];
    for (int i = 1; i < n; ++i)
      m = std::max(m, logits.value()[r * n + i]);
    rowmax[r] = m;
  }
  auto shifted = ad::sub(
      logits, ad::per_sample_broadcast(ad::constant(std::move(rowmax)),
                                       logits.shape()));
  auto e = ad::exp_(shifted);
  auto denom = ad::per_sample_sum(e);
  return ad::mul(e, ad::per_sample_broadcast(ad::reciprocal(denom),
                                             logits.shape()));
}

// logits[b,i] = sum_m C[b,m] * G[b,m,i]
template <typename T>
Tensor<T> product_head(const Tensor<T>& concept_vec,
                       const Tensor<T>& significance) {
  return ad::bmm_vec(ad::constant(concept_vec), ad::constant(significance))
      .value();
}

// Dual-branch classifier: a concept encoder (with a reconstruction decoder)
// and a class-significance encoder, joined by a bilinear product head.
template <typename T>
class LicsNet {
 public:
  using Scalar = T;

  explicit LicsNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto [c, h, w] = cfg_.input_shape;
    concept_enc_ = nn::Encoder<T>(params_, "concept.enc", c, h, w,
                                  cfg_.encoder_depth, cfg_.blocks_per_stage,
                                  cfg_.base_width, rng);
    concept_fc_ = nn::Linear<T>(params_, "concept.fc",
                                concept_enc_.out_width, cfg_.concept_dim, rng);

    // Decoder mirrors the encoder: FC to the deepest feature map, then one
    // up-convolution per downsampling stage, then a 3x3 head conv.
    stage_dims_.clear();
    {
      int hh = h, ww = w;
      stage_dims_.push_back({hh, ww});
      for (int s = 1; s < cfg_.encoder_depth; ++s) {
        hh = ad::conv_out_dim(hh, 3, {2, 1});
        ww = ad::conv_out_dim(ww, 3, {2, 1});
        stage_dims_.push_back({hh, ww});
      }
    }
    int deep_ch = concept_enc_.out_width;
    int deep_h = stage_dims_.back().first, deep_w = stage_dims_.back().second;
    decoder_fc_ = nn::Linear<T>(params_, "decoder.fc", cfg_.concept_dim,
                                deep_ch * deep_h * deep_w, rng);
    decoder_deep_shape_ = {deep_ch, deep_h, deep_w};
    for (int s = cfg_.encoder_depth - 1; s >= 1; --s) {
      int in_ch = cfg_.base_width << s;
      int out_ch = cfg_.base_width << (s - 1);
      decoder_ups_.emplace_back(params_,
                                "decoder.up" + std::to_string(s), in_ch,
                                out_ch, 3, 2, 1, rng);
    }
    decoder_head_ =
        nn::Conv2d<T>(params_, "decoder.head", cfg_.base_width, c, 3, 1, 1,
                      rng);

    signif_enc_ = nn::Encoder<T>(params_, "signif.enc", c, h, w,
                                 cfg_.encoder_depth, cfg_.blocks_per_stage,
                                 cfg_.base_width, rng);
    signif_fc_ = nn::Linear<T>(params_, "signif.fc", signif_enc_.out_width,
                               cfg_.concept_dim * cfg_.num_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const nn::ParamStore<T>& params() const { return params_; }
  nn::ParamStore<T>& params() { return params_; }

  void check_input(const Tensor<T>& pixels) const {
    if (pixels.rank() != 4 || pixels.dim(1) != cfg_.input_shape[0] ||
        pixels.dim(2) != cfg_.input_shape[1] ||
        pixels.dim(3) != cfg_.input_shape[2])
      throw ConfigError("input shape " + shape_str(pixels.shape()) +
                        " does not match model input " +
                        shape_str({pixels.rank() ? pixels.dim(0) : 0,
                                   cfg_.input_shape[0], cfg_.input_shape[1],
                                   cfg_.input_shape[2]}));
  }

  // --- graph builders -----------------------------------------------------

  Var<T> concept_graph(const Var<T>& x) const {
    check_input(x.value());
    return concept_fc_(concept_enc_(x));
  }

  Var<T> decode_graph(const Var<T>& concept_vec) const {
    auto h = ad::relu(decoder_fc_(concept_vec));
    auto [dc, dh, dw] = decoder_deep_shape_;
    auto f = ad::reshape(h, {concept_vec.shape()[0], dc, dh, dw});
    int stage = cfg_.encoder_depth - 1;
    for (const auto& up : decoder_ups_) {
      --stage;
      f = ad::relu(up(f, stage_dims_[static_cast<std::size_t>(stage)].first,
                      stage_dims_[static_cast<std::size_t>(stage)].second));
    }
    return ad::sigmoid(decoder_head_(f));
  }

  Var<T> significance_graph(const Var<T>& x) const {
    check_input(x.value());
    auto flat = signif_fc_(signif_enc_(x));
    return ad::reshape(flat,
                       {x.shape()[0], cfg_.concept_dim, cfg_.num_classes});
  }

  Var<T> logits_graph(const Var<T>& x) const {
    return ad::bmm_vec(concept_graph(x), significance_graph(x));
  }

  // --- tensor-level API ---------------------------------------------------

  std::pair<Tensor<T>, Tensor<T>> concept_branch(
      const ImageBatch<T>& batch) const {
    batch.validate(cfg_.num_classes);
    auto c = concept_graph(ad::constant(batch.pixels));
    auto r = decode_graph(c);
    return {c.value(), r.value()};
  }

  Tensor<T> significance_branch(const ImageBatch<T>& batch) const {
    batch.validate(cfg_.num_classes);
    return significance_graph(ad::constant(batch.pixels)).value();
  }

  LicsOutput<T> forward(const ImageBatch<T>& batch) const {
    batch.validate(cfg_.num_classes);
    auto x = ad::constant(batch.pixels);
    auto c = concept_graph(x);
    auto g = significance_graph(x);
    auto l = ad::bmm_vec(c, g);
    auto p = softmax_rows(l);
    auto r = decode_graph(c);
    return {c.value(), g.value(), l.value(), p.value(), r.value()};
  }

  std::vector<int> predict(const ImageBatch<T>& batch) const {
    auto x = ad::constant(batch.pixels);
    auto l = ad::bmm_vec(concept_graph(x), significance_graph(x));
    int b = batch.size(), n = cfg_.num_classes;
    std::vector<int> out(static_cast<std::size_t>(b));
    for (int r = 0; r < b; ++r) {
      int best = 0;
      for (int i = 1; i < n; ++i)
        if (l.value()[r * n + i] > l.value()[r * n + best]) best = i;
      out[static_cast<std::size_t>(r)] = best;
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  nn::ParamStore<T> params_;
  nn::Encoder<T> concept_enc_, signif_enc_;
  nn::Linear<T> concept_fc_, signif_fc_, decoder_fc_;
  std::vector<nn::ConvTranspose2d<T>> decoder_ups_;
  nn::Conv2d<T> decoder_head_;
  std::vector<std::pair<int, int>> stage_dims_;
  std::tuple<int, int, int> decoder_deep_shape_;
};

}  // namespace lics
