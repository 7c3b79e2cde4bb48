#pragma once

// Training objectives: the LDM noise-prediction loss, prior attribute
// erasure, domain-category disentanglement, paired-latent construction and
// the transfer-based similarity consistency loss, plus the combined
// erasure / finetune / personalization objectives.

#include <stdexcept>
#include <vector>

#include "dgal/denoiser.hpp"
#include "dgal/schedule.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

template <typename S>
struct ObjectiveWeights {
  S prior = S(1.0);
  S disen = S(10.0);
  S erase = S(10.0);
  S sim = S(1.0);
  S subject = S(1.0);
};

// MSE between true and predicted noise. Realizes L_tgt, L_prior and the
// subject variants by varying (data, cond).
template <typename S>
Tensor<S> loss_ldm(const Tensor<S>& l0, const std::vector<Tensor<S>>& conds, const Tensor<S>& eps,
                   int t, const Denoiser<S>& net, const AdapterSet<S>* adapters,
                   const NoiseSchedule<S>& sch) {
  if (l0.shape()[0] < 1) throw std::invalid_argument("loss_ldm: empty batch");
  Tensor<S> l_t = add_noise(l0, eps, t, sch);
  auto pred = net.predict_noise(l_t, t, conds, adapters);
  return mse(pred.eps, eps);
}

// MSE(eps_{s->t}, sg[eps_src]); both predictions run with adapters enabled,
// gradient reaches the adapters only through the target-conditioned branch.
template <typename S>
Tensor<S> loss_erase(const Tensor<S>& l_src_noisy, int t, const std::vector<Tensor<S>>& c_src,
                     const std::vector<Tensor<S>>& c_tgt, const Denoiser<S>& net,
                     const AdapterSet<S>* adapters) {
  Tensor<S> eps_st = net.predict_noise(l_src_noisy, t, c_tgt, adapters).eps;
  Tensor<S> eps_src;
  {
    NoGradGuard ng;
    eps_src = net.predict_noise(l_src_noisy, t, c_src, adapters).eps;
  }
  return mse(eps_st, stop_gradient(eps_src));
}

// MSE(eps_src with adapters, sg[eps_src with adapters detached]).
template <typename S>
Tensor<S> loss_disen(const Tensor<S>& l_src_noisy, int t, const std::vector<Tensor<S>>& c_src,
                     const Denoiser<S>& net, const AdapterSet<S>* adapters) {
  Tensor<S> eps_adapted = net.predict_noise(l_src_noisy, t, c_src, adapters).eps;
  Tensor<S> eps_base;
  {
    NoGradGuard ng;
    eps_base = net.predict_noise(l_src_noisy, t, c_src, nullptr).eps;
  }
  return mse(eps_adapted, stop_gradient(eps_base));
}

template <typename S>
struct PairedLatents {
  Tensor<S> src;       // l_hat_src, fully under sg (constant)
  Tensor<S> src_tgt;   // l_hat_{s->t}, differentiable w.r.t. adapters
  int t = 0;
  int n = 0;
  bool path_degraded = false;
};

// Noise l_src to timestep t, then run the n-step DDIM recurrence twice:
// source-conditioned with adapters detached (constant branch) and
// target-conditioned with adapters enabled (differentiable branch).
template <typename S>
PairedLatents<S> build_paired_latents(const Tensor<S>& l_src, const Tensor<S>& eps, int t,
                                      const std::vector<Tensor<S>>& c_src,
                                      const std::vector<Tensor<S>>& c_tgt, int n,
                                      const Denoiser<S>& net, const AdapterSet<S>* adapters,
                                      const NoiseSchedule<S>& sch, S x0_clip = S(3)) {
  if (n < 1 || t < 1) throw std::invalid_argument("build_paired_latents: need n >= 1, t >= 1");
  TimestepPath path = make_timestep_path(t, n);
  PairedLatents<S> out;
  out.t = t;
  out.n = n;
  out.path_degraded = path.degraded;

  {
    NoGradGuard ng;
    Tensor<S> l = add_noise(l_src, eps, t, sch);
    for (int i = 1; i <= path.steps(); ++i) {
      Tensor<S> e = net.predict_noise(l, path.anchors[i - 1], c_src, nullptr).eps;
      l = ddim_step(l, e, path.anchors[i - 1], path.anchors[i], sch, x0_clip);
    }
    out.src = stop_gradient(l);
  }
  {
    Tensor<S> l = add_noise(l_src, eps, t, sch);
    for (int i = 1; i <= path.steps(); ++i) {
      Tensor<S> e = net.predict_noise(l, path.anchors[i - 1], c_tgt, adapters).eps;
      l = ddim_step(l, e, path.anchors[i - 1], path.anchors[i], sch, x0_clip);
    }
    out.src_tgt = l;
  }
  return out;
}

namespace detail {

// Batchwise softmax-over-cosine similarity distributions, one row per i.
template <typename S>
Tensor<S> similarity_distribution(const std::vector<Tensor<S>>& feats, int i) {
  int B = static_cast<int>(feats.size());
  std::vector<Tensor<S>> sims;
  sims.reserve(B - 1);
  for (int j = 0; j < B; ++j)
    if (j != i) sims.push_back(cosine(feats[i], feats[j]));
  return softmax_rows(stack_scalars(sims));
}

}  // namespace detail

// Transfer-based similarity consistency: mean over (i, layer) of
// KL(p_{s->t} || sg[p_src]) on UNet encoder features. The feature extractor
// runs with adapters detached by default (pretrained-encoder reading);
// gradients still reach the adapters through the target latents.
template <typename S>
Tensor<S> loss_sim(const PairedLatents<S>& pairs, const std::vector<Tensor<S>>& c_src,
                   const std::vector<Tensor<S>>& c_tgt, const Denoiser<S>& net,
                   const AdapterSet<S>* adapters, bool extractor_uses_adapters = false) {
  int B = pairs.src.shape()[0];
  if (B < 2) throw std::invalid_argument("loss_sim: batch size must be >= 2");

  const AdapterSet<S>* fx = extractor_uses_adapters ? adapters : nullptr;
  std::vector<Tensor<S>> feats_tgt, feats_src;
  {
    auto p = net.predict_noise(pairs.src_tgt, 0, c_tgt, fx, /*encoder_only=*/true);
    feats_tgt = std::move(p.features);
  }
  {
    NoGradGuard ng;
    auto p = net.predict_noise(pairs.src, 0, c_src, fx, /*encoder_only=*/true);
    feats_src = std::move(p.features);
  }

  int layers = static_cast<int>(feats_tgt.size());
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (int k = 0; k < layers; ++k) {
    std::vector<Tensor<S>> ft, fs;
    for (int i = 0; i < B; ++i) {
      ft.push_back(sample_flat(feats_tgt[k], i));
      fs.push_back(stop_gradient(sample_flat(feats_src[k], i)));
    }
    for (int i = 0; i < B; ++i) {
      Tensor<S> p_tgt = detail::similarity_distribution(ft, i);
      Tensor<S> p_src = detail::similarity_distribution(fs, i);
      acc = add(acc, kl_rows(p_tgt, stop_gradient(p_src)));
    }
  }
  return scale(acc, S(1) / S(layers * B));
}

// ---------------------------------------------------------------------------
// combined objectives

template <typename S>
struct LossBreakdown {
  S tgt = 0, prior = 0, disen = 0, erase = 0, sim = 0, subject_tgt = 0, subject_prior = 0;
  S total = 0;
};

// L_erasure = L_prior + lambda_disen * L_disen + lambda_erase * L_erase.
// Conditions are shared across the batch (all prior images are one category).
template <typename S>
Tensor<S> objective_erasure(const Tensor<S>& prior_batch, const Tensor<S>& c_src,
                            const Tensor<S>& c_tgt, const Tensor<S>& eps, int t,
                            const ObjectiveWeights<S>& w, const Denoiser<S>& net,
                            const AdapterSet<S>* adapters, const NoiseSchedule<S>& sch,
                            LossBreakdown<S>* breakdown = nullptr) {
  int B = prior_batch.shape()[0];
  if (B < 1) throw std::invalid_argument("objective_erasure: empty prior set");
  std::vector<Tensor<S>> cs(B, c_src), ct(B, c_tgt);
  Tensor<S> l_prior = loss_ldm(prior_batch, cs, eps, t, net, adapters, sch);
  Tensor<S> noisy = stop_gradient(add_noise(prior_batch, eps, t, sch));
  Tensor<S> l_disen = loss_disen(noisy, t, cs, net, adapters);
  Tensor<S> l_erase = loss_erase(noisy, t, cs, ct, net, adapters);
  Tensor<S> total = add(l_prior, add(scale(l_disen, w.disen), scale(l_erase, w.erase)));
  if (breakdown) {
    breakdown->prior = l_prior.item();
    breakdown->disen = l_disen.item();
    breakdown->erase = l_erase.item();
    breakdown->total = total.item();
  }
  return total;
}

// L_finetune = L_tgt + lp * L_prior + ld * L_disen + ls * L_sim.
// L_disen and L_sim are fed from the prior (source-domain) batch.
template <typename S>
Tensor<S> objective_finetune(const Tensor<S>& target_batch, const Tensor<S>& prior_batch,
                             const Tensor<S>& c_src, const Tensor<S>& c_tgt,
                             const Tensor<S>& eps_tgt, const Tensor<S>& eps_prior, int t,
                             int sim_recurrence, const ObjectiveWeights<S>& w,
                             const Denoiser<S>& net, const AdapterSet<S>* adapters,
                             const NoiseSchedule<S>& sch, LossBreakdown<S>* breakdown = nullptr) {
  int Bt = target_batch.shape()[0];
  if (Bt < 1) throw std::invalid_argument("objective_finetune: empty target set");
  int Bp = prior_batch.shape()[0];
  std::vector<Tensor<S>> ct_t(Bt, c_tgt);
  std::vector<Tensor<S>> cs_p(Bp, c_src), ct_p(Bp, c_tgt);

  LossBreakdown<S> bd;
  Tensor<S> l_tgt = loss_ldm(target_batch, ct_t, eps_tgt, t, net, adapters, sch);
  bd.tgt = l_tgt.item();
  Tensor<S> total = l_tgt;

  if (w.prior > 0) {
    Tensor<S> l_prior = loss_ldm(prior_batch, cs_p, eps_prior, t, net, adapters, sch);
    bd.prior = l_prior.item();
    total = add(total, scale(l_prior, w.prior));
  }
  if (w.disen > 0) {
    Tensor<S> noisy = stop_gradient(add_noise(prior_batch, eps_prior, t, sch));
    Tensor<S> l_disen = loss_disen(noisy, t, cs_p, net, adapters);
    bd.disen = l_disen.item();
    total = add(total, scale(l_disen, w.disen));
  }
  if (w.sim > 0) {
    if (Bp < 3)
      throw std::invalid_argument("objective_finetune: prior batch must be >= 3 when sim weight > 0");
    PairedLatents<S> pairs = build_paired_latents(prior_batch, eps_prior, t, cs_p, ct_p,
                                                  sim_recurrence, net, adapters, sch);
    Tensor<S> l_sim = loss_sim(pairs, cs_p, ct_p, net, adapters);
    bd.sim = l_sim.item();
    total = add(total, scale(l_sim, w.sim));
  }
  bd.total = total.item();
  if (breakdown) *breakdown = bd;
  return total;
}

// L_person = L_finetune + lambda_subject * (L_tgt^subject + lp * L_prior^subject)
template <typename S>
Tensor<S> objective_personalization(
    const Tensor<S>& target_batch, const Tensor<S>& prior_batch, const Tensor<S>& subject_batch,
    const Tensor<S>& subject_prior_batch, const Tensor<S>& c_src, const Tensor<S>& c_tgt,
    const Tensor<S>& c_subj, const Tensor<S>& c_subj_src, const Tensor<S>& eps_tgt,
    const Tensor<S>& eps_prior, const Tensor<S>& eps_subj, const Tensor<S>& eps_subj_prior, int t,
    int sim_recurrence, const ObjectiveWeights<S>& w, const Denoiser<S>& net,
    const AdapterSet<S>* adapters, const NoiseSchedule<S>& sch,
    LossBreakdown<S>* breakdown = nullptr) {
  if (subject_batch.shape()[0] < 1)
    throw std::invalid_argument("objective_personalization: empty subject set");
  LossBreakdown<S> bd;
  Tensor<S> total = objective_finetune(target_batch, prior_batch, c_src, c_tgt, eps_tgt, eps_prior,
                                       t, sim_recurrence, w, net, adapters, sch, &bd);
  if (w.subject > 0) {
    int Bs = subject_batch.shape()[0];
    std::vector<Tensor<S>> cs(Bs, c_subj);
    Tensor<S> l_subj = loss_ldm(subject_batch, cs, eps_subj, t, net, adapters, sch);
    bd.subject_tgt = l_subj.item();
    Tensor<S> subj_term = l_subj;
    if (w.prior > 0 && subject_prior_batch.defined() && subject_prior_batch.shape()[0] > 0) {
      std::vector<Tensor<S>> csp(subject_prior_batch.shape()[0], c_subj_src);
      Tensor<S> l_subj_prior =
          loss_ldm(subject_prior_batch, csp, eps_subj_prior, t, net, adapters, sch);
      bd.subject_prior = l_subj_prior.item();
      subj_term = add(subj_term, scale(l_subj_prior, w.prior));
    }
    total = add(total, scale(subj_term, w.subject));
  }
  bd.total = total.item();
  if (breakdown) *breakdown = bd;
  return total;
}

}  // namespace dgal
