#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgal/denoiser.hpp"
#include "dgal/optim.hpp"

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

std::vector<Tensor<float>> repeat_cond(const Tensor<float>& c, int b) {
  return std::vector<Tensor<float>>(static_cast<size_t>(b), c);
}

}  // namespace

TEST_CASE("vocabulary: lookup, registration, duplicate rejection") {
  Vocab v = Vocab::standard();
  CHECK(v.tokens[0] == "<pad>");
  CHECK(v.id("circle") == 2);
  CHECK_THROWS_AS(v.id("spiral"), std::invalid_argument);
  int id = v.add("[S]");
  CHECK(v.id("[S]") == id);
  CHECK_THROWS_AS(v.add("[V]"), std::invalid_argument);

  auto ids = v.encode("a [V] circle", 8);
  CHECK(ids.size() == 8);
  CHECK(ids[0] == v.id("a"));
  CHECK(ids[1] == v.id("[V]"));
  CHECK(ids[2] == v.id("circle"));
  for (size_t i = 3; i < 8; ++i) CHECK(ids[i] == v.pad_id());
  CHECK_THROWS_AS(v.encode("a a a a a", 4), std::invalid_argument);
  CHECK_THROWS_AS(v.encode("a mystery", 8), std::invalid_argument);
}

TEST_CASE("prompt templates") {
  CHECK(template_tgt("circle") == "a [V] circle");
  CHECK(template_src("circle") == "a circle");
  CHECK(template_v() == "[V]");
  CHECK(std::string(template_null).empty());
}

TEST_CASE("encode_prompt: determinism, null prompt, src/tgt difference") {
  auto net = tiny_net();
  Tensor<float> a1 = net.encode_prompt(template_tgt("circle"));
  Tensor<float> a2 = net.encode_prompt(template_tgt("circle"));
  CHECK(a1.values() == a2.values());
  CHECK(a1.shape() == Shape{tiny_cfg().seq_len, tiny_cfg().d_cond});

  // the empty template is the all-padding sequence
  std::vector<int> pads(tiny_cfg().seq_len, net.vocab.pad_id());
  Tensor<float> null1 = net.encode_prompt(template_null);
  Tensor<float> null2 = net.cond.encode(pads);
  CHECK(null1.values() == null2.values());

  Tensor<float> src = net.encode_prompt(template_src("circle"));
  CHECK(a1.values() != src.values());
}

TEST_CASE("predict: shapes, feature taps, error cases") {
  auto net = tiny_net();
  Rng rng(5);
  auto l = rng.randn<float>({2, 3, 8, 8});
  auto c = net.encode_prompt(template_src("square"));
  auto pred = net.predict_noise(l, 100, repeat_cond(c, 2), nullptr);
  CHECK(pred.eps.shape() == l.shape());
  CHECK(pred.features.size() == 3);
  CHECK(all_finite(pred.eps));

  CHECK_THROWS_AS(net.predict_noise(rng.randn<float>({2, 1, 8, 8}), 1, repeat_cond(c, 2), nullptr),
                  std::invalid_argument);
  CHECK_THROWS_AS(net.predict_noise(l, 1, repeat_cond(c, 3), nullptr), std::invalid_argument);
}

TEST_CASE("zero-initialized adapters leave predictions bitwise unchanged") {
  auto net = tiny_net();
  Rng rng(7);
  auto adapters = attach_adapters(net.unet, 4, default_adapter_targets(net.unet), rng);
  auto l = rng.randn<float>({2, 3, 8, 8});
  auto c = net.encode_prompt(template_tgt("circle"));
  NoGradGuard ng;
  auto with = net.predict_noise(l, 250, repeat_cond(c, 2), &adapters);
  auto without = net.predict_noise(l, 250, repeat_cond(c, 2), nullptr);
  CHECK(with.eps.values() == without.eps.values());
  for (size_t k = 0; k < 3; ++k)
    CHECK(with.features[k].values() == without.features[k].values());
}

TEST_CASE("adapter parameter count is sum of r*(d_in+d_out)") {
  auto net = tiny_net();
  Rng rng(9);
  auto targets = default_adapter_targets(net.unet);
  auto adapters = attach_adapters(net.unet, 4, targets, rng);
  std::int64_t expect = 0;
  for (auto& [name, dims] : net.unet.adapter_targets()) expect += 4 * (dims.first + dims.second);
  CHECK(adapters.param_count() == expect);
  CHECK(adapters.params().size() == 2 * targets.size());

  // rank 4 on a 64x64 projection contributes 2*64*4 = 512 parameters
  Denoiser<float> big;
  UNetConfig cfg;  // default widths (32, 64, 128)
  Rng rng2(1);
  big.init(cfg, rng2);
  auto one = attach_adapters(big.unet, 4, {"enc2.attn.q"}, rng2);
  CHECK(one.param_count() == 512);

  CHECK_THROWS_AS(attach_adapters(net.unet, 4, {"enc9.attn.q"}, rng), std::invalid_argument);
  CHECK_THROWS_AS(attach_adapters(net.unet, 0, {"enc1.attn.q"}, rng), std::invalid_argument);
}

TEST_CASE("adapter clone is deep: perturbing the copy leaves the original intact") {
  auto net = tiny_net();
  Rng rng(21);
  auto adapters = attach_adapters(net.unet, 2, default_adapter_targets(net.unet), rng);
  auto copy = adapters.clone();
  REQUIRE(copy.pairs.size() == adapters.pairs.size());
  for (auto& [n, ab] : copy.pairs) {
    CHECK(ab.first.values() == adapters.pairs.at(n).first.values());
    CHECK(ab.second.values() == adapters.pairs.at(n).second.values());
  }
  // clone of zero-init set is zero-init
  for (auto& [n, ab] : copy.pairs)
    for (float v : ab.second.values()) CHECK(v == 0.f);

  auto l = rng.randn<float>({1, 3, 8, 8});
  auto c = net.encode_prompt(template_tgt("cross"));
  NoGradGuard ng;
  auto before = net.predict_noise(l, 40, repeat_cond(c, 1), &adapters).eps;
  for (auto& [n, ab] : copy.pairs)
    for (auto& v : ab.second.values()) v += 0.5f;
  auto after = net.predict_noise(l, 40, repeat_cond(c, 1), &adapters).eps;
  CHECK(before.values() == after.values());
  auto perturbed = net.predict_noise(l, 40, repeat_cond(c, 1), &copy).eps;
  CHECK(perturbed.values() != before.values());
}

TEST_CASE("frozen base: only adapter gradients flow") {
  auto net = tiny_net();
  net.freeze_base();
  Rng rng(3);
  auto adapters = attach_adapters(net.unet, 2, default_adapter_targets(net.unet), rng);
  // move off the zero-init stationary point so B gradients are generic
  for (auto& [n, ab] : adapters.pairs)
    for (auto& v : ab.second.values()) v += 0.01f;

  auto l = rng.randn<float>({2, 3, 8, 8});
  auto c = net.encode_prompt(template_tgt("triangle"));
  for (auto& p : adapters.params()) p.zero_grad();
  auto pred = net.predict_noise(l, 123, repeat_cond(c, 2), &adapters);
  backward(mean(mul(pred.eps, pred.eps)));

  float asum = 0;
  for (auto& p : adapters.params())
    for (float g : p.grad()) asum += std::abs(g);
  CHECK(asum > 0.f);
  for (auto& p : net.base_params()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("base weights are bitwise constant across adapter training") {
  auto net = tiny_net();
  net.freeze_base();
  auto snapshot = [&] {
    std::vector<std::vector<float>> vals;
    for (auto& p : net.base_params()) vals.push_back(p.values());
    return vals;
  };
  auto before = snapshot();

  Rng rng(13);
  auto adapters = attach_adapters(net.unet, 2, default_adapter_targets(net.unet), rng);
  Adam<float> opt(adapters.params(), 1e-3f);
  auto l = rng.randn<float>({2, 3, 8, 8});
  auto c = net.encode_prompt(template_tgt("circle"));
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    auto pred = net.predict_noise(l, 77, repeat_cond(c, 2), &adapters);
    backward(mean(mul(pred.eps, pred.eps)));
    opt.step();
  }
  CHECK(snapshot() == before);

  // use_adapters=false recovers the pre-finetuning base outputs bitwise
  NoGradGuard ng;
  Denoiser<float> fresh = tiny_net();  // same seed, identical init
  auto lf = l;
  auto a = net.predict_noise(lf, 77, repeat_cond(c, 2), nullptr).eps;
  auto b = fresh.predict_noise(lf, 77, repeat_cond(fresh.encode_prompt(template_tgt("circle")), 2),
                               nullptr).eps;
  CHECK(a.values() == b.values());
}

TEST_CASE("conditioning sensitivity: src and tgt prompts give different predictions") {
  auto net = tiny_net();
  Rng rng(19);
  auto l = rng.randn<float>({2, 3, 8, 8});
  NoGradGuard ng;
  auto es = net.predict_noise(l, 60, repeat_cond(net.encode_prompt(template_src("circle")), 2),
                              nullptr).eps;
  auto et = net.predict_noise(l, 60, repeat_cond(net.encode_prompt(template_tgt("circle")), 2),
                              nullptr).eps;
  float diff = 0;
  for (std::int64_t i = 0; i < es.size(); ++i) {
    float d = es.values()[size_t(i)] - et.values()[size_t(i)];
    diff += d * d;
  }
  CHECK(diff / float(es.size()) > 0.f);
}
