#pragma once

#include <cmath>
#include <vector>

#include "tensel/tape.hpp"

namespace dethead {

/// Adaptive-moment optimizer (decay 0.9/0.999, eps 1e-8, bias-corrected).
/// State is kept per parameter in registration order; step() applies the
/// update in place from the accumulated gradients.
template <typename S>
class Adam {
 public:
  Adam(const std::vector<tensel::Parameter<S>*>& params, double lr)
      : lr_(static_cast<S>(lr)) {
    if (lr <= 0.0) throw tensel::ConfigError("train.lr must be positive");
    for (auto* p : params) {
      m_.emplace_back(p->value.dims());
      v_.emplace_back(p->value.dims());
    }
  }

  void step(const std::vector<tensel::Parameter<S>*>& params) {
    ++t_;
    const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
    const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      for (std::int64_t j = 0; j < p.size(); ++j) {
        const S g = p.grad[j];
        m_[i][j] = beta1_ * m_[i][j] + (S(1) - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (S(1) - beta2_) * g * g;
        const S mhat = m_[i][j] / bc1;
        const S vhat = v_[i][j] / bc2;
        p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  S lr_;
  S beta1_ = S(0.9);
  S beta2_ = S(0.999);
  S eps_ = S(1e-8);
  std::int64_t t_ = 0;
  std::vector<tensel::Tensor<S>> m_, v_;
};

}  // namespace dethead
