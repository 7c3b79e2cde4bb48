#pragma once

// Linear beta schedule, forward diffusion, offset noise and the
// deterministic (eta = 0) DDIM reverse step.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dgal/rng.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

template <typename S>
struct NoiseSchedule {
  int T = 1000;
  std::vector<S> beta;       // beta[t] for t in [1, T]; beta[0] unused
  std::vector<S> alpha_bar;  // alpha_bar[t] for t in [0, T]; alpha_bar[0] = 1
};

template <typename S>
NoiseSchedule<S> make_linear_schedule(int T, S beta_min, S beta_max) {
  if (T < 2) throw std::invalid_argument("make_linear_schedule: T must be >= 2");
  if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
    throw std::invalid_argument("make_linear_schedule: invalid beta bounds");
  NoiseSchedule<S> sch;
  sch.T = T;
  sch.beta.assign(T + 1, S(0));
  sch.alpha_bar.assign(T + 1, S(1));
  for (int t = 1; t <= T; ++t) {
    sch.beta[t] = beta_min + (beta_max - beta_min) * S(t - 1) / S(T - 1);
    sch.alpha_bar[t] = sch.alpha_bar[t - 1] * (S(1) - sch.beta[t]);
  }
  return sch;
}

template <typename S>
Tensor<S> add_noise(const Tensor<S>& l0, const Tensor<S>& eps, int t,
                    const NoiseSchedule<S>& sch) {
  if (t < 0 || t > sch.T) throw std::out_of_range("add_noise: t out of range");
  detail::check_same_shape(l0, eps, "add_noise");
  S ab = sch.alpha_bar[t];
  return add(scale(l0, std::sqrt(ab)), scale(eps, std::sqrt(S(1) - ab)));
}

// Standard Gaussian plus a per-(image, channel) Gaussian offset broadcast
// over the spatial dims.
template <typename S>
Tensor<S> offset_noise(Shape shape, S strength, Rng& rng) {
  if (shape.size() != 4) throw std::invalid_argument("offset_noise: NCHW shape expected");
  if (strength < 0) throw std::invalid_argument("offset_noise: negative strength");
  Tensor<S> eps = rng.randn<S>(shape);
  if (strength > 0) {
    int B = shape[0], C = shape[1];
    std::int64_t hw = std::int64_t(shape[2]) * shape[3];
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        S off = strength * S(rng.normal());
        S* p = eps.data() + (std::int64_t(b) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] += off;
      }
  }
  return eps;
}

// One deterministic DDIM step t -> t_prev. The x0 estimate is clipped to
// [-clip, clip] unless clip <= 0.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& l_t, const Tensor<S>& eps_hat, int t, int t_prev,
                    const NoiseSchedule<S>& sch, S clip = S(3)) {
  if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
  if (t < 1 || t > sch.T) throw std::out_of_range("ddim_step: t out of range");
  S ab_t = sch.alpha_bar[t];
  S ab_p = sch.alpha_bar[t_prev];
  if (ab_t <= S(0)) throw std::domain_error("ddim_step: alpha_bar(t) is zero");
  // x0 = (l_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
  Tensor<S> x0 = scale(sub(l_t, scale(eps_hat, std::sqrt(S(1) - ab_t))), S(1) / std::sqrt(ab_t));
  if (clip > 0) {
    auto px = x0.node();
    S c = clip;
    auto clipped = detail::make_op<S>(x0.shape(), {px}, [px, c](Node<S>& n) {
      px->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i)
        if (px->value[i] > -c && px->value[i] < c) px->grad[i] += n.grad[i];
    });
    for (std::int64_t i = 0; i < clipped.size(); ++i)
      clipped.data()[i] = std::min(c, std::max(-c, px->value[i]));
    x0 = clipped;
  }
  return add(scale(x0, std::sqrt(ab_p)), scale(eps_hat, std::sqrt(S(1) - ab_p)));
}

struct TimestepPath {
  std::vector<int> anchors;  // t = anchors[0] > ... > anchors.back() = 0
  bool degraded = false;     // true when t < n forced a shorter path
  int steps() const { return static_cast<int>(anchors.size()) - 1; }
};

// n denoising steps from t down to 0: n+1 anchors, linearly spaced and
// rounded, with strict-decrease repair.
inline TimestepPath make_timestep_path(int t, int n) {
  if (t < 1 || n < 1) throw std::invalid_argument("make_timestep_path: t >= 1 and n >= 1 required");
  TimestepPath path;
  if (t < n) {
    n = t;  // cannot form more distinct steps than t
    path.degraded = true;
  }
  path.anchors.resize(n + 1);
  for (int i = 0; i <= n; ++i)
    path.anchors[i] = static_cast<int>(std::lround(double(t) * double(n - i) / double(n)));
  path.anchors[0] = t;
  path.anchors[n] = 0;
  for (int i = 1; i <= n; ++i)
    if (path.anchors[i] >= path.anchors[i - 1]) path.anchors[i] = path.anchors[i - 1] - 1;
  return path;
}

}  // namespace dgal
