#pragma once

#include <cmath>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit::nn {

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list handed to step(), so the caller must pass the same list in
// the same order every step.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads) {
    check(params.size() == grads.size(), "optimizer parameter/gradient count mismatch");
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const Tensor<T>* p : params) {
        m_.emplace_back(std::vector<double>(static_cast<std::size_t>(p->numel()), 0.0));
        v_.emplace_back(std::vector<double>(static_cast<std::size_t>(p->numel()), 0.0));
      }
    }
    check(m_.size() == params.size(), "optimizer was initialized with a different parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = *grads[i];
      check(p.numel() == g.numel(), "optimizer gradient shape mismatch");
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        const double gj = g[j];
        m[static_cast<std::size_t>(j)] = beta1_ * m[static_cast<std::size_t>(j)] + (1.0 - beta1_) * gj;
        v[static_cast<std::size_t>(j)] = beta2_ * v[static_cast<std::size_t>(j)] + (1.0 - beta2_) * gj * gj;
        const double mh = m[static_cast<std::size_t>(j)] / bc1;
        const double vh = v[static_cast<std::size_t>(j)] / bc2;
        p[j] = static_cast<T>(p[j] - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  double learning_rate() const { return lr_; }
  long step_count() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace dpsplit::nn
