#pragma once

// Inference: DDIM sampling with classifier-free guidance and the two
// identifier-enhancement modes. Guidance arithmetic is factored into pure
// combine functions so it can be verified against scripted predictions.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgal/denoiser.hpp"
#include "dgal/schedule.hpp"
#include "dgal/synthdata.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

template <typename S>
struct SamplerConfig {
  int steps = 50;
  S lambda1 = S(7.5);   // CFG scale
  S lambda2 = S(1.0);   // enhancement strength
  std::string mode = "none";  // none | vn-n | v-uncond
  std::uint64_t seed = 0;
  S x0_clip = S(3);
  bool clip_x0 = true;
};

// eps("") + lambda1 * (eps(cond) - eps("")); exact passthrough at the
// degenerate scales so those identities hold bitwise.
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, S lambda1) {
  if (lambda1 == S(1)) return eps_cond;
  if (lambda1 == S(0)) return eps_uncond;
  return add(eps_uncond, scale(sub(eps_cond, eps_uncond), lambda1));
}

// cfg + lambda1 * lambda2 * (eps_plus - eps_minus), where (plus, minus) is
// ("a [V] [N]", "a [N]") for vn-n and ("[V]", "") for v-uncond.
template <typename S>
Tensor<S> enhance_combine(const Tensor<S>& eps_cfg, const Tensor<S>& eps_plus,
                          const Tensor<S>& eps_minus, S lambda1, S lambda2) {
  if (lambda2 == S(0)) return eps_cfg;
  return add(eps_cfg, scale(sub(eps_plus, eps_minus), lambda1 * lambda2));
}

template <typename S>
Tensor<S> cfg_predict(const Tensor<S>& l_t, int t, const Tensor<S>& cond, const Tensor<S>& uncond,
                      S lambda1, const Denoiser<S>& net, const AdapterSet<S>* adapters) {
  int B = l_t.shape()[0];
  Tensor<S> eps_c = net.predict_noise(l_t, t, std::vector<Tensor<S>>(size_t(B), cond), adapters).eps;
  if (lambda1 == S(1)) return eps_c;
  Tensor<S> eps_u =
      net.predict_noise(l_t, t, std::vector<Tensor<S>>(size_t(B), uncond), adapters).eps;
  return cfg_combine(eps_u, eps_c, lambda1);
}

namespace detail {

// Drop one token from a whitespace template ("a [V] circle" -> "a circle").
inline std::string remove_token(const std::string& text, const std::string& tok) {
  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) {
      std::string w = text.substr(i, j - i);
      if (w != tok) {
        if (!out.empty()) out += ' ';
        out += w;
      }
    }
    i = j;
  }
  return out;
}

}  // namespace detail

// One guided prediction step under the configured enhancement mode.
// The unconditional prediction is evaluated once and shared between the CFG
// and (for v-uncond) the enhancement term: at most three forward passes.
template <typename S>
Tensor<S> enhanced_predict(const Tensor<S>& l_t, int t, const std::string& prompt,
                           const SamplerConfig<S>& cfg, const Denoiser<S>& net,
                           const AdapterSet<S>* adapters, const std::string& ident = "[V]") {
  int B = l_t.shape()[0];
  auto batch = [&](const Tensor<S>& c) { return std::vector<Tensor<S>>(size_t(B), c); };
  Tensor<S> cond = net.encode_prompt(prompt);
  Tensor<S> uncond = net.encode_prompt(template_null);

  Tensor<S> eps_c = net.predict_noise(l_t, t, batch(cond), adapters).eps;
  if (cfg.mode == "none" && cfg.lambda1 == S(1)) return eps_c;
  Tensor<S> eps_u = net.predict_noise(l_t, t, batch(uncond), adapters).eps;
  Tensor<S> eps_cfg = cfg_combine(eps_u, eps_c, cfg.lambda1);

  if (cfg.mode == "none" || cfg.lambda2 == S(0)) return eps_cfg;
  if (cfg.mode == "vn-n") {
    std::string src = detail::remove_token(prompt, ident);
    if (src == prompt) return eps_cfg;  // no identifier in the prompt
    Tensor<S> eps_src =
        net.predict_noise(l_t, t, batch(net.encode_prompt(src)), adapters).eps;
    return enhance_combine(eps_cfg, eps_c, eps_src, cfg.lambda1, cfg.lambda2);
  }
  if (cfg.mode == "v-uncond") {
    Tensor<S> eps_v =
        net.predict_noise(l_t, t, batch(net.encode_prompt(template_v(ident))), adapters).eps;
    return enhance_combine(eps_cfg, eps_v, eps_u, cfg.lambda1, cfg.lambda2);
  }
  throw std::invalid_argument("enhanced_predict: unknown mode '" + cfg.mode + "'");
}

template <typename S>
struct SampleResult {
  std::vector<Image> images;
  nlohmann::json manifest;
};

// Seeded DDIM sampling. Image i is driven purely by stream fork(seed, i), so
// its pixels do not depend on count or batch grouping.
template <typename S>
SampleResult<S> sample(const Denoiser<S>& net, const AdapterSet<S>* adapters,
                       const NoiseSchedule<S>& sch, const std::string& prompt,
                       const SamplerConfig<S>& cfg, int count, int batch = 8,
                       const std::string& ident = "[V]") {
  if (count < 1) throw std::invalid_argument("sample: count must be >= 1");
  if (cfg.steps < 1 || cfg.lambda1 < S(0) || cfg.lambda2 < S(0))
    throw std::invalid_argument("sample: invalid sampler config");
  net.vocab.encode(prompt, net.cond.seq_len);  // validates tokens up front

  const int res = net.unet.cfg.resolution;
  const int ch = net.unet.cfg.in_channels;
  TimestepPath path = make_timestep_path(sch.T, cfg.steps);
  Rng base(cfg.seed);

  SampleResult<S> out;
  NoGradGuard ng;
  for (int start = 0; start < count; start += batch) {
    int B = std::min(batch, count - start);
    Tensor<S> l = Tensor<S>::zeros({B, ch, res, res});
    for (int i = 0; i < B; ++i) {
      Rng stream = base.fork(std::uint64_t(start + i));
      Tensor<S> z = stream.randn<S>({1, ch, res, res});
      for (std::int64_t j = 0; j < z.size(); ++j)
        l.data()[std::int64_t(i) * z.size() + j] = z.data()[j];
    }
    for (int k = 1; k <= path.steps(); ++k) {
      Tensor<S> eps = enhanced_predict(l, path.anchors[k - 1], prompt, cfg, net, adapters, ident);
      l = ddim_step(l, eps, path.anchors[k - 1], path.anchors[k], sch,
                    cfg.clip_x0 ? cfg.x0_clip : S(0));
    }
    for (int i = 0; i < B; ++i) out.images.push_back(tensor_to_image(l, i));
  }

  out.manifest = {{"template", prompt},
                  {"mode", cfg.mode},
                  {"lambda1", double(cfg.lambda1)},
                  {"lambda2", double(cfg.lambda2)},
                  {"steps", cfg.steps},
                  {"seed", cfg.seed},
                  {"count", count}};
  return out;
}

}  // namespace dgal
