#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgal/rng.hpp"
#include "dgal/schedule.hpp"

using namespace dgal;

TEST_CASE("linear schedule: hand product for T=2") {
  auto sch = make_linear_schedule<double>(2, 0.1, 0.1);
  CHECK(sch.alpha_bar[0] == doctest::Approx(1.0));
  CHECK(sch.alpha_bar[1] == doctest::Approx(0.9));
  CHECK(sch.alpha_bar[2] == doctest::Approx(0.81));
}

TEST_CASE("linear schedule: default endpoints match scripted product") {
  auto sch = make_linear_schedule<double>(1000, 1e-4, 0.02);
  // independent recomputation of the cumulative product
  double ab = 1.0;
  for (int t = 1; t <= 1000; ++t) ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * double(t - 1) / 999.0);
  CHECK(sch.alpha_bar[1000] == doctest::Approx(ab).epsilon(1e-12));
  CHECK(sch.alpha_bar[1000] == doctest::Approx(4.0e-5).epsilon(0.25));
  for (int t = 1; t <= 1000; ++t) {
    CHECK(sch.beta[t] > 0.0);
    CHECK(sch.beta[t] < 1.0);
    CHECK(sch.alpha_bar[t] < sch.alpha_bar[t - 1]);
  }
}

TEST_CASE("linear schedule: constant-beta case and invalid bounds") {
  auto sch = make_linear_schedule<double>(5, 0.2, 0.2);
  for (int t = 0; t <= 5; ++t) CHECK(sch.alpha_bar[t] == doctest::Approx(std::pow(0.8, t)));
  CHECK_THROWS(make_linear_schedule<double>(1, 0.1, 0.2));
  CHECK_THROWS(make_linear_schedule<double>(10, 0.0, 0.2));
  CHECK_THROWS(make_linear_schedule<double>(10, 0.3, 0.2));
  CHECK_THROWS(make_linear_schedule<double>(10, 0.3, 1.0));
}

TEST_CASE("add_noise: t=0 identity, eps=0 scaling, range check") {
  auto sch = make_linear_schedule<float>(100, 1e-4f, 0.02f);
  Rng rng(1);
  Tensor<float> l0 = rng.randn<float>({2, 3, 4, 4});
  Tensor<float> z = Tensor<float>::zeros({2, 3, 4, 4});
  CHECK(add_noise(l0, z, 0, sch).values() == l0.values());
  auto lt = add_noise(l0, z, 50, sch);
  float s = std::sqrt(sch.alpha_bar[50]);
  for (int i = 0; i < 8; ++i) CHECK(lt.data()[i] == doctest::Approx(s * l0.data()[i]));
  CHECK_THROWS_AS(add_noise(l0, z, 101, sch), std::out_of_range);
}

TEST_CASE("add_noise: terminal correlation via Monte Carlo") {
  auto sch = make_linear_schedule<double>(1000, 1e-4, 0.02);
  Rng rng(42);
  int n = 10000;
  double sum_xy = 0, sum_xx = 0, sum_yy = 0;
  for (int i = 0; i < n; ++i) {
    Tensor<double> l0 = rng.randn<double>({1, 1, 1, 1});
    Tensor<double> eps = rng.randn<double>({1, 1, 1, 1});
    Tensor<double> lt = add_noise(l0, eps, 1000, sch);
    sum_xy += l0.item() * lt.item();
    sum_xx += l0.item() * l0.item();
    sum_yy += lt.item() * lt.item();
  }
  double corr = sum_xy / std::sqrt(sum_xx * sum_yy);
  CHECK(corr == doctest::Approx(std::sqrt(sch.alpha_bar[1000])).epsilon(0).scale(1).epsilon(1.0));
  CHECK(std::abs(corr - std::sqrt(sch.alpha_bar[1000])) <= 0.005);
}

TEST_CASE("offset_noise: variance structure") {
  Rng rng(7);
  int H = 8, W = 8, n = 10000;
  auto spatial_mean_var = [&](double strength) {
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      Tensor<double> e = offset_noise<double>({1, 1, H, W}, strength, rng);
      double m = 0;
      for (int j = 0; j < H * W; ++j) m += e.data()[j];
      m /= H * W;
      acc += m * m;
    }
    return acc / n;
  };
  double v0 = spatial_mean_var(0.0);
  CHECK(std::abs(v0 - 1.0 / (H * W)) <= 0.15 * (1.0 / (H * W)) + 0.001);
  double v1 = spatial_mean_var(0.1);
  CHECK(std::abs(v1 - (1.0 / (H * W) + 0.01)) <= 0.15 * (1.0 / (H * W) + 0.01));

  // 1x1 image: broadcast degenerates, variance 1 + strength^2
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    Tensor<double> e = offset_noise<double>({1, 1, 1, 1}, 0.5, rng);
    acc += e.item() * e.item();
  }
  CHECK(std::abs(acc / n - 1.25) <= 0.06);
  CHECK_THROWS(offset_noise<double>({1, 1, 2, 2}, -0.1, rng));
}

TEST_CASE("ddim_step: reconstruction identity when alpha_bar unchanged") {
  NoiseSchedule<double> sch;
  sch.T = 2;
  sch.beta = {0, 0.1, 0.1};
  sch.alpha_bar = {1.0, 0.5, 0.5};  // artificial: ab(t_prev) == ab(t)
  Rng rng(3);
  Tensor<double> lt = rng.randn<double>({1, 1, 2, 2});
  Tensor<double> eps = rng.randn<double>({1, 1, 2, 2});
  auto out = ddim_step(lt, eps, 2, 1, sch, /*clip=*/0.0);
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(lt.data()[i]).epsilon(1e-12));
}

TEST_CASE("ddim_step: inverts add_noise with true noise, unclipped") {
  auto sch = make_linear_schedule<double>(100, 1e-3, 0.02);
  Rng rng(5);
  Tensor<double> l0 = rng.randn<double>({1, 3, 4, 4});
  Tensor<double> eps = rng.randn<double>({1, 3, 4, 4});
  Tensor<double> lt = add_noise(l0, eps, 60, sch);
  Tensor<double> rec = ddim_step(lt, eps, 60, 0, sch, /*clip=*/0.0);
  for (int i = 0; i < rec.size(); ++i)
    CHECK(rec.data()[i] == doctest::Approx(l0.data()[i]).epsilon(1e-10));
}

TEST_CASE("ddim_step: scalar arithmetic oracle") {
  NoiseSchedule<double> sch;
  sch.T = 2;
  sch.beta = {0, 0.1, 0.5};
  sch.alpha_bar = {1.0, 0.9, 0.5};
  Tensor<double> lt = Tensor<double>::from({1, 1, 1, 1}, {1.2});
  Tensor<double> eps = Tensor<double>::from({1, 1, 1, 1}, {0.4});
  // x0 = (1.2 - sqrt(0.5)*0.4)/sqrt(0.5); out = sqrt(0.9)*x0 + sqrt(0.1)*0.4
  double x0 = (1.2 - std::sqrt(0.5) * 0.4) / std::sqrt(0.5);
  double expect = std::sqrt(0.9) * x0 + std::sqrt(0.1) * 0.4;
  CHECK(ddim_step(lt, eps, 2, 1, sch, 3.0).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS(ddim_step(lt, eps, 1, 1, sch));
}

TEST_CASE("timestep path: linear spacing, endpoints, repair") {
  auto p = make_timestep_path(100, 5);
  CHECK(p.anchors == std::vector<int>{100, 80, 60, 40, 20, 0});
  CHECK(!p.degraded);
  CHECK(p.steps() == 5);

  auto p1 = make_timestep_path(1, 1);
  CHECK(p1.anchors == std::vector<int>{1, 0});

  auto p7 = make_timestep_path(7, 5);
  // scripted oracle: round(7*(5-i)/5) with strict-decrease repair
  std::vector<int> expect;
  for (int i = 0; i <= 5; ++i) expect.push_back((int)std::lround(7.0 * (5 - i) / 5.0));
  for (size_t i = 1; i < expect.size(); ++i)
    if (expect[i] >= expect[i - 1]) expect[i] = expect[i - 1] - 1;
  expect.back() = 0;
  CHECK(p7.anchors == expect);
  for (size_t i = 1; i < p7.anchors.size(); ++i) CHECK(p7.anchors[i] < p7.anchors[i - 1]);
  CHECK(p7.anchors.back() == 0);

  // degenerate: t < n shortens the path and flags it
  auto pd = make_timestep_path(3, 5);
  CHECK(pd.degraded);
  CHECK(pd.anchors == std::vector<int>{3, 2, 1, 0});
  CHECK_THROWS(make_timestep_path(0, 5));
}
