#pragma once

// Small desk-scale target classifiers for the transfer study: a conv-pool
// net and a three-layer fully connected net. Both are trained on clean data
// with plain cross entropy.

#include <string>
#include <vector>

#include "lics/checkpoint.hpp"
#include "lics/nn.hpp"
#include "lics/trainer.hpp"

namespace lics {

enum class TargetArch { conv_pool, net3fc };

inline std::string to_string(TargetArch a) {
  return a == TargetArch::conv_pool ? "conv_pool" : "net3fc";
}

inline TargetArch target_arch_from_string(const std::string& s) {
  if (s == "conv_pool") return TargetArch::conv_pool;
  if (s == "net3fc") return TargetArch::net3fc;
  throw ConfigError("unknown target architecture: " + s);
}

struct TargetConfig {
  TargetArch arch = TargetArch::conv_pool;
  int num_classes = 10;
  std::array<int, 3> input_shape{1, 28, 28};
  int width = 64;
  std::uint64_t seed = 0;
};

template <typename T>
class TargetNet {
 public:
  using Scalar = T;

  explicit TargetNet(const TargetConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg_.seed);
    const auto [c, h, w] = cfg_.input_shape;
    if (cfg_.arch == TargetArch::conv_pool) {
      if (h % 4 || w % 4)
        throw ConfigError("conv_pool target needs dims divisible by 4");
      conv1_ = nn::Conv2d<T>(params_, "conv1", c, 8, 3, 1, 1, rng);
      conv2_ = nn::Conv2d<T>(params_, "conv2", 8, 16, 3, 1, 1, rng);
      flat_dim_ = 16 * (h / 4) * (w / 4);
      fc1_ = nn::Linear<T>(params_, "fc1", flat_dim_, cfg_.width, rng);
      fc2_ = nn::Linear<T>(params_, "fc2", cfg_.width, cfg_.num_classes, rng);
    } else {
      flat_dim_ = c * h * w;
      fc1_ = nn::Linear<T>(params_, "fc1", flat_dim_, cfg_.width, rng);
      fc2_ = nn::Linear<T>(params_, "fc2", cfg_.width, cfg_.width, rng);
      fc3_ = nn::Linear<T>(params_, "fc3", cfg_.width, cfg_.num_classes, rng);
    }
  }

  const TargetConfig& config() const { return cfg_; }
  const nn::ParamStore<T>& params() const { return params_; }
  nn::ParamStore<T>& params() { return params_; }

  Var<T> logits_graph(const Var<T>& x) const {
    int b = x.shape()[0];
    if (cfg_.arch == TargetArch::conv_pool) {
      auto h1 = ad::avg_pool2x2(ad::relu(conv1_(x)));
      auto h2 = ad::avg_pool2x2(ad::relu(conv2_(h1)));
      auto flat = ad::reshape(h2, {b, flat_dim_});
      return fc2_(ad::relu(fc1_(flat)));
    }
    auto flat = ad::reshape(x, {b, flat_dim_});
    auto h1 = ad::relu(fc1_(flat));
    auto h2 = ad::relu(fc2_(h1));
    return fc3_(h2);
  }

  std::vector<int> predict(const ImageBatch<T>& batch) const {
    auto l = logits_graph(ad::constant(batch.pixels));
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
  TargetConfig cfg_;
  nn::ParamStore<T> params_;
  nn::Conv2d<T> conv1_, conv2_;
  nn::Linear<T> fc1_, fc2_, fc3_;
  int flat_dim_ = 0;
};

struct TargetTrainConfig {
  int epochs = 5;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

// Plain cross-entropy training, same deterministic chunked reduction as the
// CSAT trainer.
template <typename T>
void train_target(TargetNet<T>& net, const ImageBatch<T>& train_data,
                  const TargetTrainConfig& cfg) {
  train_data.validate(net.config().num_classes);
  auto params = net.params().vars();
  nn::Adam<T> adam;
  adam.lr = static_cast<T>(cfg.learning_rate);
  adam.init(params);

  std::vector<int> order(static_cast<std::size_t>(train_data.size()));
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());
    for (int begin = 0; begin < train_data.size(); begin += cfg.batch_size) {
      int end = std::min(begin + cfg.batch_size, train_data.size());
      auto batch = detail::gather_batch(train_data, order, begin, end);
      auto [grads, loss] = batch_loss_grads<T>(
          params, batch.size(), [&](int b, int e) {
            auto part = batch.slice(b, e);
            auto probs =
                softmax_rows(net.logits_graph(ad::constant(part.pixels)));
            return cross_entropy_graph(probs, part.labels);
          });
      if (!std::isfinite(static_cast<double>(loss)))
        throw NumericError("train_target: non-finite loss at epoch " +
                           std::to_string(epoch));
      adam.step(params, grads);
    }
  }
}

template <typename T>
void save_target_checkpoint(const TargetNet<T>& net, const fs::path& dir) {
  json cfg{{"target",
            {{"arch", to_string(net.config().arch)},
             {"num_classes", net.config().num_classes},
             {"input_shape", net.config().input_shape},
             {"width", net.config().width},
             {"seed", net.config().seed}}}};
  detail::save_tensor_dir(net.params().entries(), dir, cfg);
}

template <typename T>
TargetNet<T> load_target_checkpoint(const fs::path& dir) {
  auto cfg_json = json::parse(read_file_text(dir / "config.json"));
  const auto& t = cfg_json.at("target");
  TargetConfig cfg;
  cfg.arch = target_arch_from_string(t.at("arch").get<std::string>());
  cfg.num_classes = t.at("num_classes").get<int>();
  auto sh = t.at("input_shape");
  for (int i = 0; i < 3; ++i)
    cfg.input_shape[static_cast<std::size_t>(i)] = sh.at(i).get<int>();
  cfg.width = t.at("width").get<int>();
  cfg.seed = t.at("seed").get<std::uint64_t>();
  TargetNet<T> net(cfg);
  detail::load_tensor_dir(net.params().entries(), dir);
  return net;
}

}  // namespace lics
