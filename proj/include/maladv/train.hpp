#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/rng.hpp"

namespace maladv {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double decay = 0.98;  // learning rate multiplier applied after every epoch
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_config, msg); };
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
    if (!(decay > 0) || !std::isfinite(decay)) fail("decay must be positive");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (epochs == 0) fail("epochs must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainingExample {
  std::span<const std::uint8_t> bytes;
  Label label = Label::benign;
};

struct EpochStats {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double accuracy = 0.0;  // running accuracy of pre-update predictions
};

struct TrainResult {
  MalConvModel model;
  std::vector<EpochStats> log;
};

/// Mini-batch momentum SGD on binary cross-entropy. The visiting order is a
/// function of cfg.seed and the epoch only, so reruns are bit-identical.
inline TrainResult train(MalConvModel model, std::span<const TrainingExample> data, const TrainConfig& cfg) {
  cfg.validate();
  model.check_shapes();
  if (data.empty()) throw Error(ErrorCode::empty_dataset, "training split is empty");
  const bool has_benign = std::any_of(data.begin(), data.end(), [](auto& x) { return x.label == Label::benign; });
  const bool has_malware = std::any_of(data.begin(), data.end(), [](auto& x) { return x.label == Label::malware; });
  if (!has_benign || !has_malware)
    throw Error(ErrorCode::empty_dataset, "training split needs at least one sample of each class");

  std::vector<std::vector<Token>> tokens;
  tokens.reserve(data.size());
  for (const auto& ex : data) tokens.push_back(tokenize(ex.bytes, model.hyper));

  auto velocity = ParameterGradient::zeros_like(model);
  std::vector<std::size_t> order(data.size());
  TrainResult result;
  double lr = cfg.learning_rate;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = derive_rng(cfg.seed, {0x7472616e, epoch});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      auto grad = ParameterGradient::zeros_like(model);
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = order[i];
        const auto& tok = tokens[idx];
        const Label label = data[idx].label;
        const auto e = embed(tok, model);
        const auto fp = detail::run_forward(e, model, detail::padding_start(tok));
        const double y = detail::target_value(label);
        batch_loss += detail::softplus(fp.logit) - y * fp.logit;
        if ((fp.score > kDecisionThreshold) == (label == Label::malware)) ++correct;
        detail::run_backward(fp, e, model, fp.score - y, nullptr, &grad, tok);
      }
      if (!std::isfinite(batch_loss))
        throw Error(ErrorCode::divergence,
                    "non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index));
      loss_sum += batch_loss;

      const double scale = 1.0 / static_cast<double>(end - begin);
      auto params = model.parameter_arrays();
      for (std::size_t a = 0; a < kParameterArrayCount; ++a) {
        auto& p = *params[a];
        auto& v = velocity.arrays[a];
        const auto& g = grad.arrays[a];
        for (std::size_t j = 0; j < p.size(); ++j) {
          v[j] = cfg.momentum * v[j] + g[j] * scale;
          p[j] = static_cast<float>(p[j] - lr * v[j]);
        }
      }
    }
    result.log.push_back({epoch, lr, loss_sum / static_cast<double>(data.size()),
                          static_cast<double>(correct) / static_cast<double>(data.size())});
    lr *= cfg.decay;
  }
  if (!model.all_finite()) throw Error(ErrorCode::divergence, "parameters became non-finite");
  result.model = std::move(model);
  return result;
}

/// Fraction of examples whose predicted class (score > 0.5) matches the label.
inline double accuracy(const MalConvModel& model, std::span<const TrainingExample> data) {
  if (data.empty()) throw Error(ErrorCode::empty_dataset, "no examples to evaluate");
  std::size_t correct = 0;
  for (const auto& ex : data)
    if ((score_bytes(ex.bytes, model) > kDecisionThreshold) == (ex.label == Label::malware)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace maladv
