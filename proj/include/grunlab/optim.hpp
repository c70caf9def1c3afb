#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grunlab/tensor.hpp"

namespace grunlab {

enum class OptimizerKind { kSgd, kAdam };

// SGD / Adam over a fixed parameter set. Gradients live on the parameter
// tensors; step() requires every registered parameter to carry a gradient
// buffer (zero_grad() or a backward pass allocates it).
template <class S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, S learning_rate, S beta1 = S(0.9),
            S beta2 = S(0.999), S eps = S(1e-8))
      : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    if (!(lr_ > S(0)))
      throw std::invalid_argument("optimizer: learning rate must be positive");
  }

  void add_parameters(const std::vector<Tensor<S>>& params) {
    for (const auto& p : params) {
      params_.push_back(p);
      if (kind_ == OptimizerKind::kAdam) {
        m_.emplace_back(p.numel(), S(0));
        v_.emplace_back(p.numel(), S(0));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++step_count_;
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (p.grad().size() != p.numel())
        throw std::invalid_argument(
            "optimizer: missing gradient for parameter " +
            std::to_string(pi) + " " + shape_str(p.shape()));
      auto& val = p.value();
      const auto& g = p.grad();
      if (kind_ == OptimizerKind::kSgd) {
        for (size_t i = 0; i < val.size(); ++i) val[i] -= lr_ * g[i];
      } else {
        auto& m = m_[pi];
        auto& v = v_[pi];
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(step_count_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(step_count_));
        for (size_t i = 0; i < val.size(); ++i) {
          m[i] = beta1_ * m[i] + (S(1) - beta1_) * g[i];
          v[i] = beta2_ * v[i] + (S(1) - beta2_) * g[i] * g[i];
          const S mhat = m[i] / bc1;
          const S vhat = v[i] / bc2;
          val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
    }
  }

  size_t step_count() const { return step_count_; }
  OptimizerKind kind() const { return kind_; }
  S learning_rate() const { return lr_; }

 private:
  OptimizerKind kind_;
  S lr_, beta1_, beta2_, eps_;
  size_t step_count_ = 0;
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace grunlab
