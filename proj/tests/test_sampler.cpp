#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgal/sampler.hpp"

using namespace dgal;

namespace {

UNetConfig tiny_cfg() {
  UNetConfig c;
  c.in_channels = 3;
  c.resolution = 8;
  c.w0 = 8;
  c.w1 = 8;
  c.w2 = 8;
  c.d_cond = 8;
  c.seq_len = 4;
  c.groups = 2;
  c.time_dim = 8;
  c.time_freq_dim = 8;
  return c;
}

Denoiser<float> tiny_net(std::uint64_t seed = 17) {
  Denoiser<float> net;
  Rng rng(seed);
  net.init(tiny_cfg(), rng);
  return net;
}

}  // namespace

TEST_CASE("cfg_combine: degenerate scales are exact, arithmetic is scripted") {
  auto eu = Tensor<float>::from({1, 1}, {2.f});
  auto ec = Tensor<float>::from({1, 1}, {5.f});
  CHECK(cfg_combine(eu, ec, 1.f).values() == ec.values());
  CHECK(cfg_combine(eu, ec, 0.f).values() == eu.values());
  // 2 + 7.5 * (5 - 2) = 24.5
  CHECK(cfg_combine(eu, ec, 7.5f).item() == doctest::Approx(24.5f).epsilon(1e-6));
  SamplerConfig<float> cfg;
  CHECK(cfg.lambda1 == 7.5f);
  CHECK(cfg.lambda2 == 1.0f);
  CHECK(cfg.steps == 50);
}

TEST_CASE("enhance_combine: scripted arithmetic for both modes") {
  float l1 = 7.5f, l2 = 1.0f;
  auto eu = Tensor<float>::from({1, 1}, {2.f});
  auto e_vn = Tensor<float>::from({1, 1}, {5.f});   // eps("a [V] [N]")
  auto e_n = Tensor<float>::from({1, 1}, {4.f});    // eps("a [N]")
  auto e_v = Tensor<float>::from({1, 1}, {3.f});    // eps("[V]")
  auto cfg = cfg_combine(eu, e_vn, l1);             // 24.5

  // vn-n: 24.5 + 7.5 * 1.0 * (5 - 4) = 32.0
  CHECK(enhance_combine(cfg, e_vn, e_n, l1, l2).item() == doctest::Approx(32.0f).epsilon(1e-6));
  // v-uncond: 24.5 + 7.5 * 1.0 * (3 - 2) = 32.0
  CHECK(enhance_combine(cfg, e_v, eu, l1, l2).item() == doctest::Approx(32.0f).epsilon(1e-6));
  // lambda2 = 0 returns the CFG prediction bitwise
  CHECK(enhance_combine(cfg, e_vn, e_n, l1, 0.f).values() == cfg.values());
  // equal enhancement endpoints collapse to CFG
  CHECK(enhance_combine(cfg, e_n, e_n, l1, l2).item() == doctest::Approx(cfg.item()));
}

TEST_CASE("vn-n additive form equals the expanded weighted form within 1e-6") {
  Rng rng(3);
  auto eu = rng.randn<float>({2, 3, 4, 4});
  auto e_vn = rng.randn<float>({2, 3, 4, 4});
  auto e_n = rng.randn<float>({2, 3, 4, 4});
  float l1 = 7.5f, l2 = 0.7f;
  auto lhs = enhance_combine(cfg_combine(eu, e_vn, l1), e_vn, e_n, l1, l2);
  // (1 - l1) eps("") + l1 (1 + l2) eps("a [V] [N]") - l1 l2 eps("a [N]")
  auto rhs = add(scale(eu, 1.f - l1), sub(scale(e_vn, l1 * (1.f + l2)), scale(e_n, l1 * l2)));
  for (std::int64_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs.values()[size_t(i)] ==
          doctest::Approx(rhs.values()[size_t(i)]).epsilon(1e-6));
}

TEST_CASE("enhanced_predict composes the same forward passes as manual combination") {
  auto net = tiny_net();
  Rng rng(9);
  auto ad = attach_adapters(net.unet, 2, default_adapter_targets(net.unet), rng);
  Rng jr(4);
  for (auto& [n, ab] : ad.pairs)
    for (auto& v : ab.second.values()) v += float(jr.normal()) * 0.1f;
  auto l = rng.randn<float>({2, 3, 8, 8});
  int t = 500;
  NoGradGuard ng;

  auto batch = [&](const std::string& text) {
    return std::vector<Tensor<float>>(2, net.encode_prompt(text));
  };
  std::string prompt = template_tgt("circle");
  auto e_c = net.predict_noise(l, t, batch(prompt), &ad).eps;
  auto e_u = net.predict_noise(l, t, batch(template_null), &ad).eps;
  auto e_v = net.predict_noise(l, t, batch(template_v()), &ad).eps;
  auto e_src = net.predict_noise(l, t, batch(template_src("circle")), &ad).eps;

  SamplerConfig<float> cfg;
  cfg.mode = "v-uncond";
  auto got = enhanced_predict(l, t, prompt, cfg, net, &ad);
  auto want = enhance_combine(cfg_combine(e_u, e_c, cfg.lambda1), e_v, e_u, cfg.lambda1,
                              cfg.lambda2);
  CHECK(got.values() == want.values());

  cfg.mode = "vn-n";
  got = enhanced_predict(l, t, prompt, cfg, net, &ad);
  want = enhance_combine(cfg_combine(e_u, e_c, cfg.lambda1), e_c, e_src, cfg.lambda1,
                         cfg.lambda2);
  CHECK(got.values() == want.values());

  // lambda2 = 0: both modes fall back to cfg_predict bitwise
  cfg.lambda2 = 0.f;
  auto cfg_only = cfg_predict(l, t, net.encode_prompt(prompt), net.encode_prompt(template_null),
                              cfg.lambda1, net, &ad);
  for (auto* mode : {"vn-n", "v-uncond", "none"}) {
    cfg.mode = mode;
    CHECK(enhanced_predict(l, t, prompt, cfg, net, &ad).values() == cfg_only.values());
  }

  // a prompt without the identifier makes vn-n degenerate to cfg
  cfg.mode = "vn-n";
  cfg.lambda2 = 1.f;
  std::string plain = template_src("circle");
  auto cfg_plain = cfg_predict(l, t, net.encode_prompt(plain), net.encode_prompt(template_null),
                               cfg.lambda1, net, &ad);
  CHECK(enhanced_predict(l, t, plain, cfg, net, &ad).values() == cfg_plain.values());

  cfg.mode = "sideways";
  CHECK_THROWS_AS(enhanced_predict(l, t, prompt, cfg, net, &ad), std::invalid_argument);

  // lambda1 = 1 with no enhancement is exactly the conditional prediction
  SamplerConfig<float> plain_cfg;
  plain_cfg.lambda1 = 1.f;
  plain_cfg.mode = "none";
  CHECK(enhanced_predict(l, t, prompt, plain_cfg, net, &ad).values() == e_c.values());
}

TEST_CASE("sample: determinism, batch-grouping independence, manifest") {
  // image output is fixed at 32x32, so sampling needs a full-resolution net
  UNetConfig c = tiny_cfg();
  c.resolution = 32;
  Denoiser<float> net;
  Rng nr(17);
  net.init(c, nr);
  auto sch = make_linear_schedule<float>(1000, 1e-4f, 0.02f);
  const AdapterSet<float>* no_ad = nullptr;
  SamplerConfig<float> cfg;
  cfg.steps = 4;
  cfg.seed = 77;
  cfg.mode = "none";

  auto r1 = dgal::sample(net, no_ad, sch, template_src("circle"), cfg, 3, 3);
  auto r2 = dgal::sample(net, no_ad, sch, template_src("circle"), cfg, 3, 3);
  REQUIRE(r1.images.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(r1.images[size_t(i)].px == r2.images[size_t(i)].px);

  // image i depends only on its own seed stream, not on batch grouping
  auto r3 = dgal::sample(net, no_ad, sch, template_src("circle"), cfg, 3, 1);
  for (int i = 0; i < 3; ++i) CHECK(r1.images[size_t(i)].px == r3.images[size_t(i)].px);

  // v-uncond with lambda2 = 0 renders the same images as mode none
  SamplerConfig<float> cfg0 = cfg;
  cfg0.mode = "v-uncond";
  cfg0.lambda2 = 0.f;
  auto r4 = dgal::sample(net, no_ad, sch, template_src("circle"), cfg0, 2, 2);
  for (int i = 0; i < 2; ++i) CHECK(r4.images[size_t(i)].px == r1.images[size_t(i)].px);

  CHECK(r1.manifest["template"] == "a circle");
  CHECK(r1.manifest["seed"] == 77);
  CHECK(r1.manifest["count"] == 3);
  CHECK(r1.manifest["steps"] == 4);

  CHECK_THROWS_AS(dgal::sample(net, no_ad, sch, template_src("circle"), cfg, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(dgal::sample(net, no_ad, sch, "a [W] circle", cfg, 1), std::invalid_argument);
  SamplerConfig<float> bad = cfg;
  bad.lambda1 = -1.f;
  CHECK_THROWS_AS(dgal::sample(net, no_ad, sch, template_src("circle"), bad, 1),
                  std::invalid_argument);
}
