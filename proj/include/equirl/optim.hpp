#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "equirl/autodiff.hpp"

namespace equirl {

/// Adam with bias correction. Parameters are referenced by their autodiff
/// handles; step() consumes whatever gradients the last backward() left.
template <typename T>
class Adam {
 public:
  Adam(std::vector<ad::Var<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      require(p.requires_grad(), "Adam parameter does not require grad");
      m_.push_back(Tensor<T>::zeros(p.value().shape));
      v_.push_back(Tensor<T>::zeros(p.value().shape));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto node = params_[i].node();
      if (node->grad.data.empty()) continue;  // parameter unreachable from the last loss
      auto& w = node->value.data;
      const auto& g = node->grad.data;
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < w.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = b1_ * static_cast<double>(m[j]) + (1.0 - b1_) * gj;
        double vj = b2_ * static_cast<double>(v[j]) + (1.0 - b2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        w[j] -= static_cast<T>(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
      }
    }
  }

  long step_count() const { return t_; }
  double learning_rate() const { return lr_; }
  const std::vector<ad::Var<T>>& params() const { return params_; }

 private:
  std::vector<ad::Var<T>> params_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

/// theta_target <- (1 - tau) * theta_target + tau * theta
template <typename T>
void soft_update(std::vector<ad::Var<T>>& target, const std::vector<ad::Var<T>>& online,
                 double tau) {
  require(target.size() == online.size(), "soft_update parameter list size mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto& t = target[i].mutable_value().data;
    const auto& o = online[i].value().data;
    require(t.size() == o.size(), "soft_update parameter shape mismatch at index ", i);
    for (std::size_t j = 0; j < t.size(); ++j)
      t[j] = static_cast<T>((1.0 - tau) * t[j] + tau * o[j]);
  }
}

/// Copies online parameter values into target (tau = 1 special case).
template <typename T>
void hard_update(std::vector<ad::Var<T>>& target, const std::vector<ad::Var<T>>& online) {
  soft_update(target, online, 1.0);
}

}  // namespace equirl
