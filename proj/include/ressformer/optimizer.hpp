#pragma once

#include <cmath>

#include "config.hpp"
#include "model.hpp"

namespace ressformer {

// lr(step) ramps linearly to lr_peak at warmup_steps, then follows a half
// cosine to 0 at total_steps.
inline double lr_at(long step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr_peak * (double)step / (double)cfg.warmup_steps;
  if (step >= cfg.total_steps) return 0.0;
  double denom = (double)(cfg.total_steps - cfg.warmup_steps);
  double progress = denom > 0 ? (double)(step - cfg.warmup_steps) / denom : 1.0;
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// AdamW: bias-corrected moments, decoupled weight decay, global-norm clip
// applied to all gradients before any moment update.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  // step_index is 1-based. Missing grads count as zero (unreachable params).
  void step(ParamSet& params, long step_index) {
    if (state_.size() != params.items.size()) {
      state_.assign(params.items.size(), Moments{});
      for (size_t i = 0; i < params.items.size(); ++i) {
        state_[i].m.assign(params.items[i].second.size(), 0.0);
        state_[i].v.assign(params.items[i].second.size(), 0.0);
      }
    }
    double sq = 0;
    for (auto& [name, t] : params.items) {
      if (!t.has_grad()) continue;
      for (long i = 0; i < t.size(); ++i) {
        double g = t.st->grad[i];
        if (!std::isfinite(g))
          throw std::runtime_error("optimizer: non-finite gradient in parameter " + name);
        sq += g * g;
      }
    }
    double gnorm = std::sqrt(sq);
    double clip = gnorm > cfg_.grad_clip_norm ? cfg_.grad_clip_norm / gnorm : 1.0;
    double lr = lr_at(step_index, cfg_);
    double bc1 = 1.0 - std::pow(cfg_.beta1, (double)step_index);
    double bc2 = 1.0 - std::pow(cfg_.beta2, (double)step_index);

    for (size_t pi = 0; pi < params.items.size(); ++pi) {
      Tensor& t = params.items[pi].second;
      Moments& mo = state_[pi];
      bool has = t.has_grad();
      for (long i = 0; i < t.size(); ++i) {
        double g = has ? t.st->grad[i] * clip : 0.0;
        mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
        mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = mo.m[i] / bc1;
        double vhat = mo.v[i] / bc2;
        t.st->data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) +
                               cfg_.weight_decay * t.st->data[i]);
      }
    }
  }

  double last_lr(long step_index) const { return lr_at(step_index, cfg_); }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::vector<Moments> state_;
};

}  // namespace ressformer
