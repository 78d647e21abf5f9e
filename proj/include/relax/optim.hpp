#pragma once

// First-order optimizers: SGD, Adam, RMSProp (uncentered). All updates are
// deterministic functions of (state, params, grads).

#include <cmath>
#include <string>
#include <vector>

#include "relax/errors.hpp"

namespace relax {

enum class OptKind { kSgd, kAdam, kRmsProp };

inline OptKind opt_kind_from_name(const std::string& name) {
  if (name == "sgd") return OptKind::kSgd;
  if (name == "adam") return OptKind::kAdam;
  if (name == "rmsprop") return OptKind::kRmsProp;
  throw ConfigError("unknown optimizer '" + name +
                    "' (valid: sgd, adam, rmsprop)");
}

class Optimizer {
public:
  Optimizer(OptKind kind, double lr) : kind_(kind), lr_(lr) {
    if (lr <= 0.0) throw ContractError("Optimizer: lr must be positive");
  }

  /// In-place update. Moment buffers are sized lazily on first use.
  void step(std::vector<double>& params, const std::vector<double>& grads) {
    if (params.size() != grads.size())
      throw ContractError("Optimizer::step: shape mismatch");
    for (double g : grads)
      if (std::isnan(g)) throw DivergenceError("NaN gradient", step_count_);
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++step_count_;
    switch (kind_) {
      case OptKind::kSgd:
        for (std::size_t i = 0; i < params.size(); ++i)
          params[i] -= lr_ * grads[i];
        break;
      case OptKind::kAdam: {
        double b1 = beta1_, b2 = beta2_;
        double bc1 = 1.0 - std::pow(b1, step_count_);
        double bc2 = 1.0 - std::pow(b2, step_count_);
        for (std::size_t i = 0; i < params.size(); ++i) {
          m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
          v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i] * grads[i];
          params[i] -=
              lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
        }
        break;
      }
      case OptKind::kRmsProp:
        for (std::size_t i = 0; i < params.size(); ++i) {
          v_[i] = decay_ * v_[i] + (1.0 - decay_) * grads[i] * grads[i];
          params[i] -= lr_ * grads[i] / (std::sqrt(v_[i]) + eps_);
        }
        break;
    }
  }

  long step_count() const { return step_count_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

private:
  OptKind kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  double decay_ = 0.9;
  long step_count_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace relax
