#pragma once

// The conditional noise predictor: prompt vocabulary, a small self-attention
// conditioner, a 3-block UNet with cross-attention at every block, and
// low-rank adapters on the attention projections.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dgal/rng.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

// ---------------------------------------------------------------------------
// vocabulary & templates

struct Vocab {
  std::vector<std::string> tokens;  // index = id; tokens[0] is the pad token

  static Vocab standard() {
    Vocab v;
    v.tokens = {"<pad>", "a", "circle", "square", "triangle", "cross", "[V]"};
    return v;
  }

  int pad_id() const { return 0; }

  int id(const std::string& tok) const {
    for (size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] == tok) return static_cast<int>(i);
    throw std::invalid_argument("unknown token '" + tok + "'");
  }

  bool has(const std::string& tok) const {
    for (auto& t : tokens)
      if (t == tok) return true;
    return false;
  }

  int add(const std::string& tok) {
    if (has(tok)) throw std::invalid_argument("token '" + tok + "' already registered");
    tokens.push_back(tok);
    return static_cast<int>(tokens.size()) - 1;
  }

  // Whitespace tokenization of a prompt template; "" maps to no tokens.
  std::vector<int> encode(const std::string& text, int seq_len) const {
    std::vector<int> ids;
    size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) ids.push_back(id(text.substr(i, j - i)));
      i = j;
    }
    if (static_cast<int>(ids.size()) > seq_len)
      throw std::invalid_argument("prompt longer than sequence length");
    ids.resize(seq_len, pad_id());
    return ids;
  }
};

// Canonical templates. [N] is substituted with the category word.
inline std::string template_tgt(const std::string& category, const std::string& ident = "[V]") {
  return "a " + ident + " " + category;
}
inline std::string template_src(const std::string& category) { return "a " + category; }
inline std::string template_v(const std::string& ident = "[V]") { return ident; }
inline constexpr const char* template_null = "";

// ---------------------------------------------------------------------------
// parameter registry

template <typename S>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<S>>> entries;

  Tensor<S> add(const std::string& name, Tensor<S> t) {
    t.set_requires_grad(true);
    entries.emplace_back(name, t);
    return t;
  }
  std::vector<Tensor<S>> tensors() const {
    std::vector<Tensor<S>> out;
    for (auto& [n, t] : entries) out.push_back(t);
    return out;
  }
  void freeze() {
    for (auto& [n, t] : entries) t.set_requires_grad(false);
  }
  void unfreeze() {
    for (auto& [n, t] : entries) t.set_requires_grad(true);
  }
};

// ---------------------------------------------------------------------------
// conditioner tau: token embeddings + one self-attention layer

template <typename S>
struct Conditioner {
  int d_cond = 32;
  int seq_len = 8;
  ParamRegistry<S> params;
  Tensor<S> tok_emb, pos_emb, wq, wk, wv, wo;

  void init(int vocab_size, Rng& rng) {
    S s_emb = S(0.1);
    S s_w = S(1) / std::sqrt(S(d_cond));
    tok_emb = params.add("tau.tok_emb", rng.randn<S>({vocab_size, d_cond}, s_emb));
    pos_emb = params.add("tau.pos_emb", rng.randn<S>({seq_len, d_cond}, s_emb));
    wq = params.add("tau.wq", rng.randn<S>({d_cond, d_cond}, s_w));
    wk = params.add("tau.wk", rng.randn<S>({d_cond, d_cond}, s_w));
    wv = params.add("tau.wv", rng.randn<S>({d_cond, d_cond}, s_w));
    wo = params.add("tau.wo", rng.randn<S>({d_cond, d_cond}, s_w));
  }

  // (seq_len x d_cond) embedding for a fixed-length id sequence.
  Tensor<S> encode(const std::vector<int>& ids) const {
    Tensor<S> e = add(rows(tok_emb, ids), pos_emb);
    Tensor<S> q = matmul(e, wq);
    Tensor<S> k = matmul(e, wk);
    Tensor<S> v = matmul(e, wv);
    Tensor<S> scores = scale(matmul(q, transpose(k)), S(1) / std::sqrt(S(d_cond)));
    Tensor<S> attn = softmax_rows(scores);
    return add(e, matmul(matmul(attn, v), wo));
  }
};

// ---------------------------------------------------------------------------
// low-rank adapters

template <typename S>
struct AdapterSet {
  int rank = 4;
  S scale = S(1);
  // target name -> (A: d_in x r, B: r x d_out); ordered for determinism
  std::map<std::string, std::pair<Tensor<S>, Tensor<S>>> pairs;

  std::vector<Tensor<S>> params() const {
    std::vector<Tensor<S>> out;
    for (auto& [n, ab] : pairs) {
      out.push_back(ab.first);
      out.push_back(ab.second);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (auto& [n, ab] : pairs) {
      out.emplace_back("lora." + n + ".A", ab.first);
      out.emplace_back("lora." + n + ".B", ab.second);
    }
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (auto& [k, ab] : pairs) n += ab.first.size() + ab.second.size();
    return n;
  }

  AdapterSet clone() const {
    AdapterSet c;
    c.rank = rank;
    c.scale = scale;
    for (auto& [n, ab] : pairs) {
      Tensor<S> a = Tensor<S>::from(ab.first.shape(), ab.first.values());
      Tensor<S> b = Tensor<S>::from(ab.second.shape(), ab.second.values());
      a.set_requires_grad(true);
      b.set_requires_grad(true);
      c.pairs.emplace(n, std::make_pair(a, b));
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// UNet

struct UNetConfig {
  int in_channels = 3;
  int resolution = 32;
  int w0 = 32, w1 = 64, w2 = 128;  // encoder channel widths
  int d_cond = 32;
  int seq_len = 8;
  int groups = 8;
  int time_dim = 64;
  int time_freq_dim = 32;
};

template <typename S>
class UNet {
 public:
  UNetConfig cfg;
  ParamRegistry<S> params;

  void init(Rng& rng) { init(cfg, rng); }

  void init(const UNetConfig& c, Rng& rng) {
    cfg = c;
    auto conv_init = [&](const std::string& name, int cin, int cout) {
      S s = S(1) / std::sqrt(S(cin * 9));
      conv_w_[name] = params.add(name + ".w", rng.randn<S>({cin * 9, cout}, s));
      conv_b_[name] = params.add(name + ".b", Tensor<S>::zeros({cout}));
    };
    auto gn_init = [&](const std::string& name, int ch) {
      gn_g_[name] = params.add(name + ".gamma", Tensor<S>::full({ch}, S(1)));
      gn_b_[name] = params.add(name + ".beta", Tensor<S>::zeros({ch}));
    };
    auto lin_init = [&](const std::string& name, int din, int dout) {
      S s = S(1) / std::sqrt(S(din));
      lin_w_[name] = params.add(name + ".w", rng.randn<S>({din, dout}, s));
      lin_b_[name] = params.add(name + ".b", Tensor<S>::zeros({dout}));
    };
    auto attn_init = [&](const std::string& name, int ch) {
      S s = S(1) / std::sqrt(S(ch));
      S sc = S(1) / std::sqrt(S(cfg.d_cond));
      attn_w_[name + ".q"] = params.add(name + ".q", rng.randn<S>({ch, ch}, s));
      attn_w_[name + ".k"] = params.add(name + ".k", rng.randn<S>({cfg.d_cond, ch}, sc));
      attn_w_[name + ".v"] = params.add(name + ".v", rng.randn<S>({cfg.d_cond, ch}, sc));
      attn_w_[name + ".o"] = params.add(name + ".o", rng.randn<S>({ch, ch}, s * S(0.2)));
    };

    lin_init("time.mlp", cfg.time_freq_dim, cfg.time_dim);
    conv_init("in_conv", cfg.in_channels, cfg.w0);
    const int ws[3] = {cfg.w0, cfg.w1, cfg.w2};
    for (int i = 0; i < 3; ++i) {
      std::string b = "enc" + std::to_string(i + 1);
      conv_init(b + ".conv", ws[i], ws[i]);
      gn_init(b + ".gn", ws[i]);
      lin_init(b + ".tproj", cfg.time_dim, ws[i]);
      attn_init(b + ".attn", ws[i]);
    }
    conv_init("down1", cfg.w0, cfg.w1);
    conv_init("down2", cfg.w1, cfg.w2);
    conv_init("mid.conv", cfg.w2, cfg.w2);
    gn_init("mid.gn", cfg.w2);
    lin_init("mid.tproj", cfg.time_dim, cfg.w2);
    {
      std::string b = "dec2";
      conv_init(b + ".conv", cfg.w2 + cfg.w1, cfg.w1);
      gn_init(b + ".gn", cfg.w1);
      lin_init(b + ".tproj", cfg.time_dim, cfg.w1);
      attn_init(b + ".attn", cfg.w1);
    }
    {
      std::string b = "dec1";
      conv_init(b + ".conv", cfg.w1 + cfg.w0, cfg.w0);
      gn_init(b + ".gn", cfg.w0);
      lin_init(b + ".tproj", cfg.time_dim, cfg.w0);
      attn_init(b + ".attn", cfg.w0);
    }
    conv_init("out_conv", cfg.w0, cfg.in_channels);
  }

  // Projection names that accept adapters, with their (d_in, d_out).
  std::vector<std::pair<std::string, std::pair<int, int>>> adapter_targets() const {
    std::vector<std::pair<std::string, std::pair<int, int>>> out;
    for (auto& [name, w] : attn_w_) out.emplace_back(name, std::make_pair(w.shape()[0], w.shape()[1]));
    return out;
  }

  struct Prediction {
    Tensor<S> eps;
    std::vector<Tensor<S>> features;  // encoder taps f^1..f^3
  };

  // conds: one (seq_len x d_cond) embedding per batch item.
  Prediction predict(const Tensor<S>& l_t, int t, const std::vector<Tensor<S>>& conds,
                     const AdapterSet<S>* adapters, bool encoder_only = false) const {
    const Shape& s = l_t.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels)
      throw std::invalid_argument("predict: bad input shape " + shape_str(s));
    int B = s[0];
    if (static_cast<int>(conds.size()) != B)
      throw std::invalid_argument("predict: one condition per batch item required");

    Tensor<S> temb = time_embedding(t);
    Prediction out;

    Tensor<S> h = conv("in_conv", l_t, 1);
    Tensor<S> e1 = block("enc1", h, temb, conds, adapters);
    out.features.push_back(e1);
    Tensor<S> d1 = conv("down1", e1, 2);
    Tensor<S> e2 = block("enc2", d1, temb, conds, adapters);
    out.features.push_back(e2);
    Tensor<S> d2 = conv("down2", e2, 2);
    Tensor<S> e3 = block("enc3", d2, temb, conds, adapters);
    out.features.push_back(e3);
    if (encoder_only) return out;

    Tensor<S> m = silu(add_channel_bias(
        group_norm(conv("mid.conv", e3, 1), gn_g_.at("mid.gn"), gn_b_.at("mid.gn"), cfg.groups),
        tvec("mid.tproj", temb)));
    Tensor<S> u2 = block("dec2", concat_channels(upsample_nearest2x(m), e2), temb, conds, adapters);
    Tensor<S> u1 = block("dec1", concat_channels(upsample_nearest2x(u2), e1), temb, conds, adapters);
    out.eps = conv("out_conv", u1, 1);
    return out;
  }

 private:
  std::map<std::string, Tensor<S>> conv_w_, conv_b_, gn_g_, gn_b_, lin_w_, lin_b_, attn_w_;

  Tensor<S> conv(const std::string& name, const Tensor<S>& x, int stride) const {
    return conv2d(x, conv_w_.at(name), conv_b_.at(name), 3, stride);
  }

  // Sinusoidal frequencies -> (1 x time_dim) via a small MLP.
  Tensor<S> time_embedding(int t) const {
    int d = cfg.time_freq_dim;
    Tensor<S> freqs = Tensor<S>::zeros({1, d});
    for (int i = 0; i < d / 2; ++i) {
      double f = double(t) * std::exp(-std::log(10000.0) * double(i) / double(d / 2));
      freqs.data()[i] = S(std::sin(f));
      freqs.data()[d / 2 + i] = S(std::cos(f));
    }
    return silu(add_rowvec(matmul(freqs, lin_w_.at("time.mlp")), lin_b_.at("time.mlp")));
  }

  Tensor<S> tvec(const std::string& name, const Tensor<S>& temb) const {
    Tensor<S> v = add_rowvec(matmul(temb, lin_w_.at(name)), lin_b_.at(name));
    return reshape(v, {v.shape()[1]});
  }

  Tensor<S> proj(const std::string& target, const Tensor<S>& x,
                 const AdapterSet<S>* adapters) const {
    Tensor<S> y = matmul(x, attn_w_.at(target));
    if (adapters) {
      auto it = adapters->pairs.find(target);
      if (it != adapters->pairs.end())
        y = add(y, scale(matmul(matmul(x, it->second.first), it->second.second), adapters->scale));
    }
    return y;
  }

  // Cross-attention over the condition sequence, residual.
  Tensor<S> cross_attention(const std::string& name, const Tensor<S>& h,
                            const std::vector<Tensor<S>>& conds,
                            const AdapterSet<S>* adapters) const {
    const Shape& s = h.shape();
    int B = s[0], C = s[1], H = s[2], W = s[3];
    std::vector<Tensor<S>> outs;
    outs.reserve(B);
    for (int i = 0; i < B; ++i) {
      Tensor<S> xm = sample_as_tokens(h, i);
      Tensor<S> q = proj(name + ".q", xm, adapters);
      Tensor<S> k = proj(name + ".k", conds[i], adapters);
      Tensor<S> v = proj(name + ".v", conds[i], adapters);
      Tensor<S> attn = softmax_rows(scale(matmul(q, transpose(k)), S(1) / std::sqrt(S(C))));
      outs.push_back(proj(name + ".o", matmul(attn, v), adapters));
    }
    return add(h, tokens_to_nchw(outs, H, W));
  }

  Tensor<S> block(const std::string& name, const Tensor<S>& x, const Tensor<S>& temb,
                  const std::vector<Tensor<S>>& conds, const AdapterSet<S>* adapters) const {
    Tensor<S> h = conv(name + ".conv", x, 1);
    h = group_norm(h, gn_g_.at(name + ".gn"), gn_b_.at(name + ".gn"), cfg.groups);
    h = silu(add_channel_bias(h, tvec(name + ".tproj", temb)));
    return cross_attention(name + ".attn", h, conds, adapters);
  }
};

// ---------------------------------------------------------------------------
// assembled denoiser (base UNet + conditioner + vocabulary)

template <typename S>
struct Denoiser {
  UNet<S> unet;
  Conditioner<S> cond;
  Vocab vocab = Vocab::standard();

  void init(const UNetConfig& cfg, Rng& rng) {
    cond.d_cond = cfg.d_cond;
    cond.seq_len = cfg.seq_len;
    cond.init(static_cast<int>(vocab.tokens.size()), rng);
    unet.init(cfg, rng);
  }

  Tensor<S> encode_prompt(const std::string& text) const {
    return cond.encode(vocab.encode(text, cond.seq_len));
  }

  typename UNet<S>::Prediction predict_noise(const Tensor<S>& l_t, int t,
                                             const std::vector<Tensor<S>>& conds,
                                             const AdapterSet<S>* adapters,
                                             bool encoder_only = false) const {
    return unet.predict(l_t, t, conds, adapters, encoder_only);
  }

  void freeze_base() {
    unet.params.freeze();
    cond.params.freeze();
  }

  std::vector<Tensor<S>> base_params() const {
    auto out = unet.params.tensors();
    for (auto& t : cond.params.tensors()) out.push_back(t);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_base_params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out = unet.params.entries;
    for (auto& e : cond.params.entries) out.push_back(e);
    return out;
  }
};

template <typename S>
AdapterSet<S> attach_adapters(const UNet<S>& net, int rank, const std::vector<std::string>& targets,
                              Rng& rng, S scale = S(1)) {
  if (rank < 1) throw std::invalid_argument("attach_adapters: rank must be >= 1");
  AdapterSet<S> set;
  set.rank = rank;
  set.scale = scale;
  auto avail = net.adapter_targets();
  for (auto& t : targets) {
    const std::pair<int, int>* dims = nullptr;
    for (auto& [name, d] : avail)
      if (name == t) dims = &d;
    if (!dims) throw std::invalid_argument("attach_adapters: unknown target '" + t + "'");
    Tensor<S> A = rng.randn<S>({dims->first, rank}, S(1) / std::sqrt(S(dims->first)));
    Tensor<S> B = Tensor<S>::zeros({rank, dims->second});  // zero-init: adapted == base
    A.set_requires_grad(true);
    B.set_requires_grad(true);
    set.pairs.emplace(t, std::make_pair(A, B));
  }
  return set;
}

template <typename S>
std::vector<std::string> default_adapter_targets(const UNet<S>& net) {
  std::vector<std::string> out;
  for (auto& [name, dims] : net.adapter_targets()) out.push_back(name);
  return out;
}

}  // namespace dgal
