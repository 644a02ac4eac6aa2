#pragma once

// Training configuration, warmup/linear-decay schedule and Adam with
// decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "brltm/error.hpp"
#include "brltm/model.hpp"
#include "brltm/tensor.hpp"

namespace brltm {

struct TrainConfig {
  double peak_lr = 1e-4;
  double warmup_proportion = 0.01;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  std::size_t eval_every = 20;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t n_splits = 10;
  // Share of records held out for masked-precision tracking in pretraining.
  double held_out_fraction = 0.1;

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    if (warmup_proportion < 0.0 || warmup_proportion >= 1.0)
      throw ConfigError("warmup_proportion must lie in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (n_splits == 0) throw ConfigError("n_splits must be positive");
    if (!(train_fraction > 0.0) || !(val_fraction > 0.0) || !(test_fraction > 0.0))
      throw ConfigError("split fractions must be positive");
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
    if (held_out_fraction <= 0.0 || held_out_fraction >= 1.0)
      throw ConfigError("held_out_fraction must lie in (0,1)");
  }

  // Stage defaults: minibatch 256 for 100 epochs when pretraining, 64 for 50
  // epochs when fine-tuning.
  static TrainConfig pretraining() {
    TrainConfig c;
    c.batch_size = 256;
    c.epochs = 100;
    return c;
  }
  static TrainConfig finetuning() { return TrainConfig{}; }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["peak_lr"] = c.peak_lr;
  j["warmup_proportion"] = c.warmup_proportion;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed;
  j["train_fraction"] = c.train_fraction;
  j["val_fraction"] = c.val_fraction;
  j["test_fraction"] = c.test_fraction;
  j["n_splits"] = c.n_splits;
  j["held_out_fraction"] = c.held_out_fraction;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "peak_lr") base.peak_lr = v.get<double>();
      else if (key == "warmup_proportion") base.warmup_proportion = v.get<double>();
      else if (key == "weight_decay") base.weight_decay = v.get<double>();
      else if (key == "beta1") base.beta1 = v.get<double>();
      else if (key == "beta2") base.beta2 = v.get<double>();
      else if (key == "eps") base.eps = v.get<double>();
      else if (key == "batch_size") base.batch_size = v.get<std::size_t>();
      else if (key == "epochs") base.epochs = v.get<std::size_t>();
      else if (key == "eval_every") base.eval_every = v.get<std::size_t>();
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "train_fraction") base.train_fraction = v.get<double>();
      else if (key == "val_fraction") base.val_fraction = v.get<double>();
      else if (key == "test_fraction") base.test_fraction = v.get<double>();
      else if (key == "n_splits") base.n_splits = v.get<std::size_t>();
      else if (key == "held_out_fraction") base.held_out_fraction = v.get<double>();
      else throw ConfigError("unknown key '" + key + "' in train config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  base.validate();
  return base;
}

inline std::size_t warmup_steps(std::size_t total_steps, const TrainConfig& cfg) {
  return static_cast<std::size_t>(std::ceil(cfg.warmup_proportion * static_cast<double>(total_steps)));
}

// Linear ramp 0 -> peak over the warmup steps, then linear decay to 0 at
// total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (step > total_steps) throw ContractError("step beyond total_steps");
  const auto warm = warmup_steps(total_steps, cfg);
  if (step < warm) return cfg.peak_lr * (static_cast<double>(step) / static_cast<double>(warm));
  return cfg.peak_lr * (static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm));
}

template <class Real>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  std::size_t steps() const { return t_; }

  // One bias-corrected update of every trainable tensor in `params`, using
  // the gradients they currently hold. Decay (1 - lr * weight_decay) is
  // applied only to tensors flagged for it.
  void step(std::vector<NamedParam<Real>>& params, double lr) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("Adam state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m_[i].size() != params[i].tensor.numel()) throw ContractError("Adam state shape mismatch");
      for (auto g : params[i].tensor.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("non-finite gradient in tensor '" + params[i].name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable) continue;
      auto values = p.tensor.mutable_values();
      const auto grad = p.tensor.grad();
      const double decay = p.decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        const double x = static_cast<double>(values[j]) * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        values[j] = static_cast<Real>(x);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace brltm
