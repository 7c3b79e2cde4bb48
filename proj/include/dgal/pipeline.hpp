#pragma once

// Training stages: base pretraining, prior-image generation, prior attribute
// erasure, few-shot finetuning, and combined subject+domain personalization.
// Stages never mutate the base model; adapters are the only trained state
// after pretraining.

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgal/checkpoint.hpp"
#include "dgal/losses.hpp"
#include "dgal/optim.hpp"
#include "dgal/sampler.hpp"
#include "dgal/synthdata.hpp"

namespace dgal {

template <typename S = float>
struct PretrainConfig {
  int steps = 20000;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool offset_noise = false;
  S offset_noise_strength = S(0.1);
  int log_every = 50;
};

template <typename S = float>
struct StageConfig {
  int steps = 500;
  int batch = 4;
  double lr = 1e-4;
  ObjectiveWeights<S> weights;
  std::uint64_t seed = 0;
  bool offset_noise = false;
  S offset_noise_strength = S(0.1);
  int sim_recurrence = 5;
  int adapter_rank = 4;
  int log_every = 1;
};

template <typename S = float>
struct PriorImageSet {
  std::vector<Image> images;
  std::string prompt;
  std::uint64_t seed = 0;
  int steps = 50;
};

template <typename S = float>
struct StageResult {
  AdapterSet<S> adapters;
  std::vector<LossBreakdown<S>> trace;  // one entry per optimizer step
};

namespace detail {

template <typename S>
Tensor<S> draw_image_batch(const std::vector<Image>& pool, int batch, Rng& rng) {
  std::vector<const Image*> imgs;
  for (int b = 0; b < batch; ++b)
    imgs.push_back(&pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))]);
  return batch_images<S>(imgs);
}

// Gaussian noise, optionally shifted per sample and channel (offset noise,
// for domains whose mean brightness the plain objective tracks poorly).
template <typename S>
Tensor<S> draw_noise(const Shape& shape, Rng& rng, bool offset, S strength) {
  Tensor<S> eps = rng.randn<S>(shape);
  if (offset) {
    int B = shape[0], C = shape[1], HW = shape[2] * shape[3];
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        S shift = strength * S(rng.normal());
        S* row = eps.data() + (std::int64_t(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) row[i] += shift;
      }
  }
  return eps;
}

template <typename S>
void log_step(std::ostream* log, int step, const char* stage, double loss,
              const LossBreakdown<S>* bd, double wall_ms) {
  if (!log) return;
  std::ostringstream os;
  os << "stage=" << stage << " step=" << step << " loss=" << loss;
  if (bd)
    os << " tgt=" << bd->tgt << " prior=" << bd->prior << " disen=" << bd->disen
       << " erase=" << bd->erase << " sim=" << bd->sim << " subject_tgt=" << bd->subject_tgt
       << " subject_prior=" << bd->subject_prior;
  os << " wall_ms=" << wall_ms << "\n";
  (*log) << os.str();
}

template <typename S>
void check_finite(const Tensor<S>& loss, const char* stage, int step) {
  if (!std::isfinite(double(loss.item())))
    throw std::runtime_error(std::string(stage) + ": loss diverged (non-finite) at step " +
                             std::to_string(step));
}

class StageTimer {
 public:
  StageTimer() : t0_(std::chrono::steady_clock::now()) {}
  double lap_ms() {
    auto t1 = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(t1 - t0_).count();
    t0_ = t1;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace detail

// Supervised denoising on the captioned corpus; trains theta and tau from
// scratch. The caller owns freezing before any adapter stage.
template <typename S>
void pretrain_base(Denoiser<S>& net, const Corpus& corpus, const NoiseSchedule<S>& sch,
                   const PretrainConfig<S>& cfg, std::ostream* log = nullptr) {
  if (int(corpus.entries.size()) < cfg.batch)
    throw std::invalid_argument("pretrain_base: corpus smaller than one batch");
  Adam<S> opt(net.base_params(), S(cfg.lr));
  Rng rng(cfg.seed);
  detail::StageTimer timer;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Image*> imgs;
    std::vector<Tensor<S>> conds;
    for (int b = 0; b < cfg.batch; ++b) {
      const CorpusEntry& e =
          corpus.entries[size_t(rng.uniform_int(0, int(corpus.entries.size()) - 1))];
      imgs.push_back(&e.image);
      conds.push_back(net.encode_prompt(e.caption));
    }
    Tensor<S> l0 = batch_images<S>(imgs);
    int t = rng.uniform_int(1, sch.T);
    Tensor<S> eps = detail::draw_noise<S>(l0.shape(), rng, cfg.offset_noise,
                                          cfg.offset_noise_strength);
    Tensor<S> loss = loss_ldm(l0, conds, eps, t, net, static_cast<const AdapterSet<S>*>(nullptr), sch);
    detail::check_finite(loss, "pretrain_base", step);
    opt.zero_grad();
    backward(loss);
    opt.step();
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      detail::log_step(log, step, "pretrain", double(loss.item()),
                       static_cast<const LossBreakdown<S>*>(nullptr), timer.lap_ms());
  }
}

// Prior preservation data: category samples from the frozen base under the
// plain source template, deterministic in the seed.
template <typename S>
PriorImageSet<S> generate_prior_images(const Denoiser<S>& net, const NoiseSchedule<S>& sch,
                                       const std::string& category, int count,
                                       std::uint64_t seed, int steps = 50, S lambda1 = S(7.5)) {
  PriorImageSet<S> out;
  out.prompt = template_src(category);
  out.seed = seed;
  out.steps = steps;
  if (count == 0) return out;
  SamplerConfig<S> cfg;
  cfg.steps = steps;
  cfg.lambda1 = lambda1;
  cfg.lambda2 = S(0);
  cfg.mode = "none";
  cfg.seed = seed;
  out.images = sample(net, static_cast<const AdapterSet<S>*>(nullptr), sch, out.prompt, cfg, count).images;
  return out;
}

// Removes the identifier's pretraining baggage: freshly attached zero-init
// adapters trained so the identifier-bearing prompt tracks the plain one on
// prior images. steps=0 returns the zero-init adapters untouched.
template <typename S>
StageResult<S> run_erasure_stage(const Denoiser<S>& net, const NoiseSchedule<S>& sch,
                                 const PriorImageSet<S>& priors, const std::string& category,
                                 const StageConfig<S>& cfg, std::ostream* log = nullptr) {
  if (priors.images.empty()) throw std::invalid_argument("run_erasure_stage: empty prior set");
  Rng rng(cfg.seed);
  StageResult<S> res;
  res.adapters = attach_adapters(net.unet, cfg.adapter_rank, default_adapter_targets(net.unet), rng);
  Tensor<S> c_src = net.encode_prompt(template_src(category));
  Tensor<S> c_tgt = net.encode_prompt(template_tgt(category));
  Adam<S> opt(res.adapters.params(), S(cfg.lr));
  detail::StageTimer timer;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<S> batch = detail::draw_image_batch<S>(priors.images, cfg.batch, rng);
    int t = rng.uniform_int(1, sch.T);
    Tensor<S> eps = detail::draw_noise<S>(batch.shape(), rng, cfg.offset_noise,
                                          cfg.offset_noise_strength);
    LossBreakdown<S> bd;
    Tensor<S> loss = objective_erasure(batch, c_src, c_tgt, eps, t, cfg.weights, net,
                                       &res.adapters, sch, &bd);
    detail::check_finite(loss, "run_erasure_stage", step);
    opt.zero_grad();
    backward(loss);
    opt.step();
    res.trace.push_back(bd);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      detail::log_step(log, step, "erase", double(loss.item()), &bd, timer.lap_ms());
  }
  return res;
}

// Few-shot adaptation from the erased adapters; the input adapters are
// cloned, so the erasure result survives for handoff checks and ablations.
template <typename S>
StageResult<S> run_finetune_stage(const Denoiser<S>& net, const NoiseSchedule<S>& sch,
                                  const AdapterSet<S>& init,
                                  const std::vector<Image>& target_set,
                                  const PriorImageSet<S>& priors, const std::string& category,
                                  const StageConfig<S>& cfg, std::ostream* log = nullptr) {
  if (target_set.empty()) throw std::invalid_argument("run_finetune_stage: empty target set");
  if (priors.images.empty()) throw std::invalid_argument("run_finetune_stage: empty prior set");
  if (cfg.weights.sim > S(0) && cfg.batch < 3)
    throw std::invalid_argument("run_finetune_stage: batch >= 3 required when sim weight > 0");
  Rng rng(cfg.seed);
  StageResult<S> res;
  res.adapters = init.clone();
  Tensor<S> c_src = net.encode_prompt(template_src(category));
  Tensor<S> c_tgt = net.encode_prompt(template_tgt(category));
  Adam<S> opt(res.adapters.params(), S(cfg.lr));
  detail::StageTimer timer;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<S> tgt = detail::draw_image_batch<S>(target_set, cfg.batch, rng);
    Tensor<S> prior = detail::draw_image_batch<S>(priors.images, cfg.batch, rng);
    int t = rng.uniform_int(1, sch.T);
    Tensor<S> eps_tgt = detail::draw_noise<S>(tgt.shape(), rng, cfg.offset_noise,
                                              cfg.offset_noise_strength);
    Tensor<S> eps_prior = detail::draw_noise<S>(prior.shape(), rng, cfg.offset_noise,
                                                cfg.offset_noise_strength);
    LossBreakdown<S> bd;
    Tensor<S> loss = objective_finetune(tgt, prior, c_src, c_tgt, eps_tgt, eps_prior, t,
                                        cfg.sim_recurrence, cfg.weights, net, &res.adapters, sch,
                                        &bd);
    detail::check_finite(loss, "run_finetune_stage", step);
    opt.zero_grad();
    backward(loss);
    opt.step();
    res.trace.push_back(bd);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      detail::log_step(log, step, "finetune", double(loss.item()), &bd, timer.lap_ms());
  }
  return res;
}

// Domain finetuning and subject binding in one stage. The subject draws come
// from a forked stream, so with subject weight 0 the domain-side trajectory
// (and the resulting adapters) matches run_finetune_stage bit for bit.
template <typename S>
StageResult<S> run_personalization_stage(
    const Denoiser<S>& net, const NoiseSchedule<S>& sch, const AdapterSet<S>& init,
    const std::vector<Image>& target_set, const PriorImageSet<S>& priors,
    const std::string& category, const std::vector<Image>& subject_set,
    const PriorImageSet<S>& subject_priors, const std::string& subject_category,
    const std::string& subject_ident, const StageConfig<S>& cfg, std::ostream* log = nullptr,
    const std::string& domain_ident = "[V]") {
  if (subject_set.empty())
    throw std::invalid_argument("run_personalization_stage: empty subject set");
  if (subject_priors.images.empty())
    throw std::invalid_argument("run_personalization_stage: empty subject prior set");
  if (subject_ident == domain_ident)
    throw std::invalid_argument("run_personalization_stage: subject identifier collides with '" +
                                domain_ident + "'");
  if (!net.vocab.has(subject_ident))
    throw std::invalid_argument("run_personalization_stage: unregistered subject identifier '" +
                                subject_ident + "'");
  if (target_set.empty()) throw std::invalid_argument("run_personalization_stage: empty target set");
  if (priors.images.empty()) throw std::invalid_argument("run_personalization_stage: empty prior set");
  if (cfg.weights.sim > S(0) && cfg.batch < 3)
    throw std::invalid_argument("run_personalization_stage: batch >= 3 required when sim weight > 0");

  Rng rng(cfg.seed);
  Rng subj_rng = Rng(cfg.seed).fork(1);
  StageResult<S> res;
  res.adapters = init.clone();
  Tensor<S> c_src = net.encode_prompt(template_src(category));
  Tensor<S> c_tgt = net.encode_prompt(template_tgt(category));
  Tensor<S> c_subj = net.encode_prompt(template_tgt(subject_category, subject_ident));
  Tensor<S> c_subj_src = net.encode_prompt(template_src(subject_category));
  Adam<S> opt(res.adapters.params(), S(cfg.lr));
  detail::StageTimer timer;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<S> tgt = detail::draw_image_batch<S>(target_set, cfg.batch, rng);
    Tensor<S> prior = detail::draw_image_batch<S>(priors.images, cfg.batch, rng);
    Tensor<S> subj = detail::draw_image_batch<S>(subject_set, cfg.batch, subj_rng);
    Tensor<S> subj_prior = detail::draw_image_batch<S>(subject_priors.images, cfg.batch, subj_rng);
    int t = rng.uniform_int(1, sch.T);
    Tensor<S> eps_tgt = detail::draw_noise<S>(tgt.shape(), rng, cfg.offset_noise,
                                              cfg.offset_noise_strength);
    Tensor<S> eps_prior = detail::draw_noise<S>(prior.shape(), rng, cfg.offset_noise,
                                                cfg.offset_noise_strength);
    Tensor<S> eps_subj = detail::draw_noise<S>(subj.shape(), subj_rng, cfg.offset_noise,
                                               cfg.offset_noise_strength);
    Tensor<S> eps_subj_prior = detail::draw_noise<S>(subj_prior.shape(), subj_rng,
                                                     cfg.offset_noise, cfg.offset_noise_strength);
    LossBreakdown<S> bd;
    Tensor<S> loss = objective_personalization(
        tgt, prior, subj, subj_prior, c_src, c_tgt, c_subj, c_subj_src, eps_tgt, eps_prior,
        eps_subj, eps_subj_prior, t, cfg.sim_recurrence, cfg.weights, net, &res.adapters, sch, &bd);
    detail::check_finite(loss, "run_personalization_stage", step);
    opt.zero_grad();
    backward(loss);
    opt.step();
    res.trace.push_back(bd);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      detail::log_step(log, step, "personalize", double(loss.item()), &bd, timer.lap_ms());
  }
  return res;
}

// ---------------------------------------------------------------------------
// model persistence: base weights (+ optional adapters) in one checkpoint

template <typename S>
void save_model(const std::string& path, const Denoiser<S>& net, const AdapterSet<S>* adapters,
                nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ck;
  const UNetConfig& c = net.unet.cfg;
  ck.metadata = {{"kind", "model"},
                 {"vocab", net.vocab.tokens},
                 {"unet",
                  {{"in_channels", c.in_channels},
                   {"resolution", c.resolution},
                   {"w0", c.w0},
                   {"w1", c.w1},
                   {"w2", c.w2},
                   {"d_cond", c.d_cond},
                   {"seq_len", c.seq_len},
                   {"groups", c.groups},
                   {"time_dim", c.time_dim},
                   {"time_freq_dim", c.time_freq_dim}}}};
  for (auto& [k, v] : extra.items()) ck.metadata[k] = v;
  for (auto& [name, t] : net.named_base_params()) ck.tensors.push_back(to_named(name, t));
  if (adapters) {
    nlohmann::json adj = nlohmann::json::array();
    for (auto& [target, ab] : adapters->pairs) {
      adj.push_back({{"target", target}, {"rank", ab.first.shape()[1]}});
      ck.tensors.push_back(to_named("adapter." + target + ".A", ab.first));
      ck.tensors.push_back(to_named("adapter." + target + ".B", ab.second));
    }
    ck.metadata["adapters"] = adj;
  }
  save_checkpoint(path, ck);
}

template <typename S = float>
Denoiser<S> load_model(const std::string& path, AdapterSet<S>* adapters_out = nullptr,
                       nlohmann::json* metadata_out = nullptr) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.metadata.value("kind", "") != "model")
    throw std::runtime_error("load_model: not a model checkpoint");
  UNetConfig c;
  const nlohmann::json& u = ck.metadata.at("unet");
  c.in_channels = u.at("in_channels");
  c.resolution = u.at("resolution");
  c.w0 = u.at("w0");
  c.w1 = u.at("w1");
  c.w2 = u.at("w2");
  c.d_cond = u.at("d_cond");
  c.seq_len = u.at("seq_len");
  c.groups = u.at("groups");
  c.time_dim = u.at("time_dim");
  c.time_freq_dim = u.at("time_freq_dim");

  Denoiser<S> net;
  net.vocab.tokens = ck.metadata.at("vocab").get<std::vector<std::string>>();
  Rng rng(0);
  net.init(c, rng);
  for (auto& [name, t] : net.named_base_params()) load_into(ck.find(name), t);
  net.freeze_base();

  if (adapters_out) {
    if (!ck.metadata.contains("adapters"))
      throw std::runtime_error("load_model: checkpoint carries no adapters");
    std::vector<std::string> targets;
    int rank = 0;
    for (const auto& a : ck.metadata.at("adapters")) {
      targets.push_back(a.at("target").get<std::string>());
      rank = a.at("rank");
    }
    *adapters_out = attach_adapters(net.unet, rank, targets, rng);
    for (auto& [target, ab] : adapters_out->pairs) {
      load_into(ck.find("adapter." + target + ".A"), ab.first);
      load_into(ck.find("adapter." + target + ".B"), ab.second);
    }
  }
  if (metadata_out) *metadata_out = ck.metadata;
  return net;
}

// Content hash of everything a sampling run depends on.
template <typename S>
std::string model_hash(const Denoiser<S>& net, const AdapterSet<S>* adapters = nullptr) {
  std::map<std::string, Tensor<S>> all;
  for (auto& [name, t] : net.named_base_params()) all.emplace(name, t);
  if (adapters)
    for (auto& [target, ab] : adapters->pairs) {
      all.emplace("adapter." + target + ".A", ab.first);
      all.emplace("adapter." + target + ".B", ab.second);
    }
  return content_hash(all);
}

}  // namespace dgal
