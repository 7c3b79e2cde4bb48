#pragma once

// Seeded RNG with hand-rolled uniform/normal transforms so that streams are
// reproducible independent of the standard library's distribution internals.

#include <cmath>
#include <cstdint>
#include <random>

#include "dgal/tensor.hpp"

namespace dgal {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Derive an independent stream, e.g. one per sampled image.
  Rng fork(std::uint64_t salt) const {
    std::uint64_t s = seed_mix_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
    return Rng(s);
  }

  double uniform() {  // [0, 1)
    return double(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive bounds
    return lo + std::int64_t(uniform() * double(hi - lo + 1));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename S>
  Tensor<S> randn(Shape shape, S stddev = S(1)) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = S(normal()) * stddev;
    return t;
  }

  template <typename S>
  Tensor<S> uniform_tensor(Shape shape, S lo, S hi) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = S(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_mix_ = gen_();  // consumed once so fork() differs from the base stream
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dgal
