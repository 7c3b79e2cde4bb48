#pragma once

// Quantitative evaluation: a small pretrained feature extractor, kernel
// inception distance on its features, intra-clustered feature diversity,
// attribute presence rates, and a scenario-grid evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgal/checkpoint.hpp"
#include "dgal/optim.hpp"
#include "dgal/sampler.hpp"
#include "dgal/synthdata.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

inline const std::vector<std::string>& style_attributes() {
  static const std::vector<std::string> a = {"sketch", "tint", "noiseband", "red-border",
                                             "crosshatch-corner"};
  return a;
}

inline std::vector<std::string> all_attributes() {
  std::vector<std::string> a = categories();
  for (auto& s : style_attributes()) a.push_back(s);
  return a;
}

// Convolutional classifier over 32x32 renders: a category head and a
// multi-label style/distractor head share a 64-d pooled feature, which is
// the representation used by every metric below.
template <typename S = float>
struct FeatureExtractor {
  static constexpr int kFeatureDim = 64;

  int c0 = 16, c1 = 32, groups = 4;
  std::map<std::string, Tensor<S>> p;

  void init(Rng& rng) {
    auto conv = [&](const std::string& name, int cin, int cout) {
      p[name + ".w"] = rng.randn<S>({cin * 9, cout}, S(1) / std::sqrt(S(cin * 9)));
      p[name + ".b"] = Tensor<S>::zeros({cout});
      p[name + ".g"] = Tensor<S>::full({cout}, S(1));
      p[name + ".gb"] = Tensor<S>::zeros({cout});
    };
    conv("conv1", 3, c0);
    conv("conv2", c0, c1);
    conv("conv3", c1, kFeatureDim);
    p["head_cat.w"] = rng.randn<S>({kFeatureDim, int(categories().size())},
                                   S(1) / std::sqrt(S(kFeatureDim)));
    p["head_cat.b"] = Tensor<S>::zeros({int(categories().size())});
    p["head_attr.w"] = rng.randn<S>({kFeatureDim, int(style_attributes().size())},
                                    S(1) / std::sqrt(S(kFeatureDim)));
    p["head_attr.b"] = Tensor<S>::zeros({int(style_attributes().size())});
    for (auto& [n, t] : p) t.set_requires_grad(true);
  }

  std::vector<Tensor<S>> params() {
    std::vector<Tensor<S>> out;
    for (auto& [n, t] : p) out.push_back(t);
    return out;
  }

  void freeze() {
    for (auto& [n, t] : p) t.set_requires_grad(false);
  }

  // (B, 3, 32, 32) -> (B, 64) penultimate feature
  Tensor<S> features(const Tensor<S>& x) const {
    Tensor<S> h = x;
    for (const char* name : {"conv1", "conv2", "conv3"}) {
      std::string n(name);
      h = conv2d(h, p.at(n + ".w"), p.at(n + ".b"), 3, 2);
      h = group_norm(h, p.at(n + ".g"), p.at(n + ".gb"), groups);
      h = silu(h);
    }
    return global_avg_pool(h);
  }

  Tensor<S> category_logits(const Tensor<S>& feat) const {
    return add_rowvec(matmul(feat, p.at("head_cat.w")), p.at("head_cat.b"));
  }

  Tensor<S> attribute_logits(const Tensor<S>& feat) const {
    return add_rowvec(matmul(feat, p.at("head_attr.w")), p.at("head_attr.b"));
  }
};

template <typename S>
std::string content_hash(const FeatureExtractor<S>& ex) {
  return content_hash(ex.p);
}

template <typename S>
void save_extractor(const std::string& path, const FeatureExtractor<S>& ex) {
  Checkpoint ck;
  ck.metadata = {{"kind", "feature-extractor"},
                 {"c0", ex.c0},
                 {"c1", ex.c1},
                 {"groups", ex.groups},
                 {"hash", content_hash(ex)}};
  for (auto& [name, t] : ex.p) ck.tensors.push_back(to_named(name, t));
  save_checkpoint(path, ck);
}

template <typename S = float>
FeatureExtractor<S> load_extractor(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.metadata.value("kind", "") != "feature-extractor")
    throw std::runtime_error("load_extractor: not a feature-extractor checkpoint");
  FeatureExtractor<S> ex;
  ex.c0 = ck.metadata.at("c0");
  ex.c1 = ck.metadata.at("c1");
  ex.groups = ck.metadata.at("groups");
  Rng rng(0);
  ex.init(rng);
  for (auto& [name, t] : ex.p) load_into(ck.find(name), t);
  ex.freeze();
  return ex;
}

// Labeled renders spanning random categories, styles and distractors, for
// supervising the extractor heads.
inline std::vector<CorpusEntry> make_extractor_corpus(int size, std::uint64_t seed) {
  if (size < 1) throw std::invalid_argument("make_extractor_corpus: size >= 1 required");
  Rng rng(seed);
  std::vector<CorpusEntry> out;
  const std::vector<std::string> styles = {"sketch", "tint", "noiseband"};
  const std::vector<std::string> distractors = {"none", "red-border", "crosshatch-corner"};
  for (int i = 0; i < size; ++i) {
    DomainSpec spec;
    spec.category = categories()[size_t(rng.uniform_int(0, int(categories().size()) - 1))];
    for (const auto& st : styles)
      if (rng.uniform() < 0.3) spec.styles.insert(st);
    spec.distractor = distractors[size_t(rng.uniform_int(0, 2))];
    LabeledImage li = render_image(spec, rng);
    out.push_back({li.image, li.caption, li.labels});
  }
  return out;
}

// Supervised pretraining on labeled renders: cross-entropy on the category
// head, mean-squared +-1 targets on the multi-label head. Returns the final
// running loss; the extractor comes back frozen.
template <typename S>
double train_extractor(FeatureExtractor<S>& ex, const std::vector<CorpusEntry>& data, int steps,
                       int batch, double lr, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("train_extractor: empty dataset");
  if (steps < 1 || batch < 1) throw std::invalid_argument("train_extractor: bad schedule");
  Adam<S> opt(ex.params(), S(lr));
  Rng rng(seed);
  const auto& cats = categories();
  const auto& attrs = style_attributes();
  double running = 0;
  for (int step = 0; step < steps; ++step) {
    std::vector<const Image*> imgs;
    Tensor<S> cat_t = Tensor<S>::zeros({batch, int(cats.size())});
    Tensor<S> attr_t = Tensor<S>::zeros({batch, int(attrs.size())});
    for (int b = 0; b < batch; ++b) {
      const CorpusEntry& e = data[size_t(rng.uniform_int(0, int(data.size()) - 1))];
      imgs.push_back(&e.image);
      auto has = [&](const std::string& a) {
        return std::find(e.labels.begin(), e.labels.end(), a) != e.labels.end();
      };
      for (size_t c = 0; c < cats.size(); ++c)
        if (has(cats[c])) cat_t.data()[b * std::int64_t(cats.size()) + std::int64_t(c)] = S(1);
      for (size_t a = 0; a < attrs.size(); ++a)
        attr_t.data()[b * std::int64_t(attrs.size()) + std::int64_t(a)] = has(attrs[a]) ? S(1) : S(-1);
    }
    Tensor<S> x = batch_images<S>(imgs);
    Tensor<S> feat = ex.features(x);
    Tensor<S> loss = add(kl_rows(cat_t, softmax_rows(ex.category_logits(feat))),
                         mse(ex.attribute_logits(feat), attr_t));
    opt.zero_grad();
    backward(loss);
    opt.step();
    running = 0.95 * running + 0.05 * double(loss.item());
  }
  ex.freeze();
  return running;
}

// One feature row per image, fixed order, no autodiff graph.
template <typename S>
std::vector<std::vector<float>> extract_features(const FeatureExtractor<S>& ex,
                                                 const std::vector<Image>& images,
                                                 int batch = 32) {
  NoGradGuard ng;
  std::vector<std::vector<float>> out;
  for (size_t start = 0; start < images.size(); start += size_t(batch)) {
    size_t end = std::min(images.size(), start + size_t(batch));
    std::vector<const Image*> imgs;
    for (size_t i = start; i < end; ++i) imgs.push_back(&images[i]);
    Tensor<S> f = ex.features(batch_images<S>(imgs));
    int d = f.shape()[1];
    for (size_t i = 0; i < imgs.size(); ++i) {
      std::vector<float> row(static_cast<size_t>(d));
      for (int j = 0; j < d; ++j) row[size_t(j)] = float(f.values()[i * size_t(d) + size_t(j)]);
      out.push_back(std::move(row));
    }
  }
  return out;
}

namespace detail {

// k(x, y) = (x.y / d + 1)^3
inline double poly3_kernel(const std::vector<float>& x, const std::vector<float>& y) {
  double dot = 0;
  for (size_t i = 0; i < x.size(); ++i) dot += double(x[i]) * double(y[i]);
  double u = dot / double(x.size()) + 1.0;
  return u * u * u;
}

// Unbiased MMD^2 between index ranges [a0,a1) x [b0,b1) of two feature sets.
inline double mmd2_unbiased(const std::vector<std::vector<float>>& a, size_t a0, size_t a1,
                            const std::vector<std::vector<float>>& b, size_t b0, size_t b1) {
  double kxx = 0, kyy = 0, kxy = 0;
  size_t m = a1 - a0, n = b1 - b0;
  for (size_t i = a0; i < a1; ++i)
    for (size_t j = a0; j < a1; ++j)
      if (i != j) kxx += poly3_kernel(a[i], a[j]);
  for (size_t i = b0; i < b1; ++i)
    for (size_t j = b0; j < b1; ++j)
      if (i != j) kyy += poly3_kernel(b[i], b[j]);
  for (size_t i = a0; i < a1; ++i)
    for (size_t j = b0; j < b1; ++j) kxy += poly3_kernel(a[i], b[j]);
  return kxx / double(m * (m - 1)) + kyy / double(n * (n - 1)) - 2.0 * kxy / double(m * n);
}

}  // namespace detail

struct KidResult {
  double score = 0;       // full-set unbiased MMD^2, x 10^3
  double se = 0;          // standard error of the block estimates, x 10^3
  int blocks = 1;
  int block_size = 0;
};

// Kernel distance on extractor features. The score is the unbiased MMD^2
// over the full sets (so it cannot depend on sample order); disjoint blocks
// give an uncertainty estimate. Reported x 10^3.
inline KidResult kid(const std::vector<std::vector<float>>& samples,
                     const std::vector<std::vector<float>>& reference, int block = 50) {
  if (samples.size() < 10 || reference.size() < 10)
    throw std::invalid_argument("kid: both feature sets need >= 10 items");
  if (!samples[0].empty() && samples[0].size() != reference[0].size())
    throw std::invalid_argument("kid: feature dimension mismatch");
  KidResult r;
  r.score = 1e3 * detail::mmd2_unbiased(samples, 0, samples.size(), reference, 0, reference.size());
  size_t m = std::min<size_t>(size_t(std::max(block, 2)),
                              std::min(samples.size(), reference.size()));
  size_t nb = std::min(samples.size() / m, reference.size() / m);
  r.blocks = int(nb);
  r.block_size = int(m);
  if (nb >= 2) {
    std::vector<double> est;
    for (size_t b = 0; b < nb; ++b)
      est.push_back(1e3 * detail::mmd2_unbiased(samples, b * m, (b + 1) * m,
                                                reference, b * m, (b + 1) * m));
    double mean = 0;
    for (double e : est) mean += e / double(nb);
    double var = 0;
    for (double e : est) var += (e - mean) * (e - mean) / double(nb - 1);
    r.se = std::sqrt(var / double(nb));
  }
  return r;
}

namespace detail {

inline double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  double denom = std::sqrt(std::max(na, 1e-24)) * std::sqrt(std::max(nb, 1e-24));
  return 1.0 - dot / denom;
}

}  // namespace detail

// Diversity of samples around a few-shot set: each sample joins the cluster
// of its nearest (cosine) few-shot feature; a cluster's diversity is the
// mean pairwise cosine distance over its distinct feature rows (so exact
// duplicates do not dilute the score); clusters average uniformly.
inline double intra_lpips(const std::vector<std::vector<float>>& sample_feats,
                          const std::vector<std::vector<float>>& fewshot_feats) {
  if (sample_feats.empty()) throw std::invalid_argument("intra_lpips: empty sample set");
  if (fewshot_feats.empty()) throw std::invalid_argument("intra_lpips: empty few-shot set");
  std::vector<std::vector<const std::vector<float>*>> clusters(fewshot_feats.size());
  for (const auto& f : sample_feats) {
    size_t best = 0;
    double bd = detail::cosine_distance(f, fewshot_feats[0]);
    for (size_t k = 1; k < fewshot_feats.size(); ++k) {
      double d = detail::cosine_distance(f, fewshot_feats[k]);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    clusters[best].push_back(&f);
  }
  double acc = 0;
  int occupied = 0;
  for (auto& cl : clusters) {
    if (cl.empty()) continue;
    ++occupied;
    std::vector<const std::vector<float>*> uniq;
    for (auto* f : cl) {
      bool dup = false;
      for (auto* u : uniq) dup = dup || (*u == *f);
      if (!dup) uniq.push_back(f);
    }
    if (uniq.size() < 2) continue;  // contributes zero diversity
    double sum = 0;
    size_t pairs = 0;
    for (size_t i = 0; i < uniq.size(); ++i)
      for (size_t j = i + 1; j < uniq.size(); ++j) {
        sum += detail::cosine_distance(*uniq[i], *uniq[j]);
        ++pairs;
      }
    acc += sum / double(pairs);
  }
  return acc / double(occupied);
}

struct AttributeRate {
  double rate = 0;
  double ci_low = 0;
  double ci_high = 0;
};

// Fraction of images whose oracle detector fires (score >= 0.5), with a
// Wilson 95% interval.
inline std::map<std::string, AttributeRate> attribute_rates(
    const std::vector<Image>& images, const std::vector<std::string>& attributes) {
  if (images.empty()) throw std::invalid_argument("attribute_rates: empty sample set");
  std::map<std::string, AttributeRate> out;
  const double z = 1.959963984540054;
  double n = double(images.size());
  for (const auto& a : attributes) {
    int hits = 0;
    for (const auto& im : images)
      if (detect_attribute(im, a) >= 0.5f) ++hits;
    double p = double(hits) / n;
    double denom = 1.0 + z * z / n;
    double center = (p + z * z / (2 * n)) / denom;
    double half = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom;
    out[a] = {p, std::max(0.0, center - half), std::min(1.0, center + half)};
  }
  return out;
}

// One cell of the evaluation grid: a prompt to sample from plus the
// reference material each metric needs. Empty reference/fewshot sets
// simply switch the corresponding metric off (reported as null).
struct Scenario {
  std::string name;
  std::string prompt;
  int n = 100;
  std::vector<Image> reference;            // KID reference renders
  std::vector<Image> fewshot;              // cluster anchors for diversity
  std::vector<std::string> attributes;     // oracle rates to report
};

template <typename S>
nlohmann::json evaluation_report(const Denoiser<S>& net, const AdapterSet<S>* adapters,
                                 const NoiseSchedule<S>& sch, const SamplerConfig<S>& cfg,
                                 const FeatureExtractor<S>& extractor,
                                 const std::vector<Scenario>& grid,
                                 const std::string& checkpoint_hash) {
  nlohmann::json report = nlohmann::json::array();
  for (const auto& sc : grid) {
    SampleResult<S> res = sample(net, adapters, sch, sc.prompt, cfg, sc.n);
    nlohmann::json entry = {{"scenario", sc.name},
                            {"template", sc.prompt},
                            {"n", sc.n},
                            {"kid", nullptr},
                            {"intra_lpips", nullptr},
                            {"rates", nlohmann::json::object()},
                            {"seed", cfg.seed},
                            {"checkpoint_hash", checkpoint_hash}};
    auto feats = extract_features(extractor, res.images);
    if (!sc.reference.empty())
      entry["kid"] = kid(feats, extract_features(extractor, sc.reference)).score;
    if (!sc.fewshot.empty())
      entry["intra_lpips"] = intra_lpips(feats, extract_features(extractor, sc.fewshot));
    for (auto& [a, r] : attribute_rates(res.images, sc.attributes))
      entry["rates"][a] = {{"rate", r.rate}, {"ci_low", r.ci_low}, {"ci_high", r.ci_high}};
    report.push_back(std::move(entry));
  }
  return report;
}

// Plain-text rendering of a report for terminals and logs.
inline std::string report_table(const nlohmann::json& report) {
  std::ostringstream os;
  os << "scenario                    n     kid       intra_lpips  rates\n";
  for (const auto& e : report) {
    std::string name = e.at("scenario");
    os << name;
    for (size_t i = name.size(); i < 28; ++i) os << ' ';
    std::ostringstream nn;
    nn << e.at("n").get<int>();
    os << nn.str();
    for (size_t i = nn.str().size(); i < 6; ++i) os << ' ';
    auto num = [&](const char* key, int width) {
      std::ostringstream v;
      if (e.at(key).is_null())
        v << "-";
      else
        v << std::fixed << std::setprecision(4) << e.at(key).get<double>();
      os << v.str();
      for (size_t i = v.str().size(); i < size_t(width); ++i) os << ' ';
    };
    num("kid", 10);
    num("intra_lpips", 13);
    bool first = true;
    for (auto& [a, r] : e.at("rates").items()) {
      if (!first) os << ", ";
      first = false;
      os << a << "=" << std::fixed << std::setprecision(2) << r.at("rate").get<double>();
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace dgal
