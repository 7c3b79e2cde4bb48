#pragma once

// Full-precision Adam and the finite-difference self-check harness.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dgal/tensor.hpp"

namespace dgal {

template <typename S>
struct OptimizerState {
  std::vector<std::vector<S>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<S>> v;  // second moments
  std::int64_t step = 0;
  S lr = S(1e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

template <typename S>
class Adam {
 public:
  Adam(std::vector<Tensor<S>> params, S lr) : params_(std::move(params)) {
    state_.lr = lr;
    state_.m.resize(params_.size());
    state_.v.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      state_.m[i].assign(params_[i].size(), S(0));
      state_.v[i].assign(params_[i].size(), S(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++state_.step;
    S bc1 = S(1) - std::pow(state_.beta1, S(state_.step));
    S bc2 = S(1) - std::pow(state_.beta2, S(state_.step));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = params_[i];
      const std::vector<S>& g = p.grad();
      if (static_cast<std::int64_t>(g.size()) != p.size())
        throw std::invalid_argument("adam: grad/param shape mismatch");
      std::vector<S>& m = state_.m[i];
      std::vector<S>& v = state_.v[i];
      for (std::int64_t j = 0; j < p.size(); ++j) {
        m[j] = state_.beta1 * m[j] + (S(1) - state_.beta1) * g[j];
        v[j] = state_.beta2 * v[j] + (S(1) - state_.beta2) * g[j] * g[j];
        S mh = m[j] / bc1;
        S vh = v[j] / bc2;
        p.data()[j] -= state_.lr * mh / (std::sqrt(vh) + state_.eps);
      }
    }
  }

  OptimizerState<S>& state() { return state_; }
  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  OptimizerState<S> state_;
};

// Max relative error between analytic gradients and central finite
// differences. `fn` must be deterministic and scalar-valued; determinism is
// verified by two forward passes.
template <typename S>
S grad_check(const std::function<Tensor<S>()>& fn, std::vector<Tensor<S>> params,
             S perturbation) {
  const S denom_floor = std::is_same_v<S, float> ? S(1e-4) : S(1e-8);

  Tensor<S> probe1 = fn();
  Tensor<S> probe2 = fn();
  if (probe1.item() != probe2.item())
    throw std::logic_error("grad_check: function is not deterministic");

  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = fn();
  backward(loss);
  std::vector<std::vector<S>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  S max_rel = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S>& p = params[pi];
    for (std::int64_t j = 0; j < p.size(); ++j) {
      S orig = p.data()[j];
      S h = perturbation * std::max(std::abs(orig), S(1));
      p.data()[j] = orig + h;
      S fp = fn().item();
      p.data()[j] = orig - h;
      S fm = fn().item();
      p.data()[j] = orig;
      S numeric = (fp - fm) / (S(2) * h);
      S a = analytic[pi][j];
      S err = std::abs(a - numeric) /
              std::max({std::abs(a), std::abs(numeric), denom_floor});
      if (std::abs(a) < denom_floor && std::abs(numeric) < denom_floor) err = 0;
      max_rel = std::max(max_rel, err);
    }
  }
  return max_rel;
}

}  // namespace dgal
