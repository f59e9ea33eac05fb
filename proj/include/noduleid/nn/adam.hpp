#pragma once

#include <cmath>
#include <vector>

#include "noduleid/nn/layers.hpp"

namespace noduleid::nn {

// Adam with bias correction. Slots are keyed by parameter order, which is
// fixed per model; lr may be changed between steps (detector schedule).
template <typename T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(const ParamRefs<T>& params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(static_cast<std::size_t>(params[i]->v.numel()), 0.0);
        slots_[i].v.assign(static_cast<std::size_t>(params[i]->v.numel()), 0.0);
      }
    }
    if (slots_.size() != params.size())
      throw std::logic_error("adam: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::int64_t j = 0; j < p.v.numel(); ++j) {
        const double g = static_cast<double>(p.g[j]);
        m[static_cast<std::size_t>(j)] = b1_ * m[static_cast<std::size_t>(j)] + (1.0 - b1_) * g;
        v[static_cast<std::size_t>(j)] =
            b2_ * v[static_cast<std::size_t>(j)] + (1.0 - b2_) * g * g;
        const double mhat = m[static_cast<std::size_t>(j)] / bc1;
        const double vhat = v[static_cast<std::size_t>(j)] / bc2;
        p.v[j] = static_cast<T>(static_cast<double>(p.v[j]) -
                                lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Slot> slots_;
};

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace noduleid::nn
