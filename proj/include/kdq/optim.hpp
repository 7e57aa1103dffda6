// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "kdq/tensor.hpp"

namespace kdq {

/**
 * AdamW: Adam moments with decoupled weight decay and standard bias
 * correction. Parameters are updated in registration order.
 */
class AdamW {
 public:
  struct Settings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamW(std::vector<TensorPtr> params) : AdamW(std::move(params), Settings{}) {}

  AdamW(std::vector<TensorPtr> params, Settings s) : params_(std::move(params)), s_(s) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->data.size(), 0.0f);
      v_[i].assign(params_[i]->data.size(), 0.0f);
      params_[i]->ensure_grad();
    }
  }

  int64_t step_count() const { return step_; }
  const std::vector<TensorPtr>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// One update at learning rate `lr`. Grads must be populated (allocated).
  void step(double lr) {
    if (lr <= 0.0) throw ParamError("learning rate must be > 0");
    ++step_;
    const double bc1 = 1.0 - std::pow(s_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(s_.beta2, double(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      if (!p.has_grad())
        throw ContractError("optimizer step: parameter '" + p.name + "' has no gradient");
      float* m = m_[i].data();
      float* v = v_[i].data();
      const float b1 = float(s_.beta1), b2 = float(s_.beta2);
      const float lr_wd = float(lr * s_.weight_decay);
      for (size_t j = 0; j < p.data.size(); ++j) {
        const float gj = p.grad[j];
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        // Decoupled decay: shrink the weight, then apply the Adam step.
        p.data[j] -= lr_wd * p.data[j];
        p.data[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + s_.eps));
      }
    }
  }

 private:
  std::vector<TensorPtr> params_;
  Settings s_;
  std::vector<std::vector<float>> m_, v_;
  int64_t step_ = 0;
};

/// Global-norm gradient clipping. Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<TensorPtr>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float gv : p->grad) sq += double(gv) * gv;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
    const float f = static_cast<float>(max_norm / norm);
    for (const auto& p : params)
      for (auto& gv : p->grad) gv *= f;
  }
  return norm;
}

/**
 * Warmup + half-cosine schedule. Epochs 0..warmup-1 ramp linearly up to
 * base_lr (reached at epoch warmup), then cosine decay to base_lr/100 at the
 * final epoch.
 */
inline double cosine_lr(int epoch, int total_epochs, double base_lr, int warmup_epochs) {
  if (total_epochs <= warmup_epochs)
    throw ConfigError("total_epochs (" + std::to_string(total_epochs) +
                      ") must exceed warmup_epochs (" + std::to_string(warmup_epochs) + ")");
  if (epoch < 0 || epoch >= total_epochs) throw ParamError("epoch out of range");
  if (base_lr <= 0.0) throw ParamError("base_lr must be > 0");
  if (epoch < warmup_epochs) return base_lr * double(epoch + 1) / double(warmup_epochs);
  const double floor_lr = base_lr / 100.0;
  const int span = total_epochs - 1 - warmup_epochs;
  const double t = span > 0 ? double(epoch - warmup_epochs) / double(span) : 1.0;
  return floor_lr + (base_lr - floor_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace kdq
