#pragma once

// Procedural 32x32 shape domains with deterministic attribute detectors.
// Styles and distractors are independent, composable render passes, so
// attribute binding, leakage and erasure are all measurable on pixels.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgal/rng.hpp"
#include "dgal/tensor.hpp"

namespace dgal {

constexpr int kImageRes = 32;
constexpr int kImagePixels = 3 * kImageRes * kImageRes;

// CHW float image in [-1, 1].
struct Image {
  std::vector<float> px = std::vector<float>(kImagePixels, 0.f);
  float at(int c, int y, int x) const { return px[(c * kImageRes + y) * kImageRes + x]; }
  float& at(int c, int y, int x) { return px[(c * kImageRes + y) * kImageRes + x]; }
};

inline const std::vector<std::string>& categories() {
  static const std::vector<std::string> cats = {"circle", "square", "triangle", "cross"};
  return cats;
}

struct DomainSpec {
  std::string category = "circle";
  std::set<std::string> styles;      // subset of {sketch, tint, noiseband}
  std::string distractor = "none";   // none | red-border | crosshatch-corner
  // jitter ranges
  float pos_jitter = 3.f;
  float scale_min = 8.f, scale_max = 12.f;
  float bg_min = 0.60f, bg_max = 0.85f;

  std::vector<std::string> attributes() const {
    std::vector<std::string> a = {category};
    for (auto& s : styles) a.push_back(s);
    if (distractor != "none") a.push_back(distractor);
    return a;
  }
};

struct LabeledImage {
  Image image;
  std::vector<std::string> labels;
  std::string caption;
};

struct FewShotDataset {
  DomainSpec spec;
  std::vector<LabeledImage> images;
};

namespace detail {

inline float clamp01(float v) { return std::min(1.f, std::max(0.f, v)); }

// Signed distance to the category shape, centered at origin, size R,
// rotated by `rot`.
inline float shape_sdf(const std::string& cat, float x, float y, float R, float rot) {
  float c = std::cos(-rot), s = std::sin(-rot);
  float u = c * x - s * y;
  float v = s * x + c * y;
  if (cat == "circle") return std::sqrt(u * u + v * v) - R;
  if (cat == "square") return std::max(std::abs(u), std::abs(v)) - R * 0.85f;
  if (cat == "triangle") {
    // equilateral, pointing up (y grows downward on the raster)
    float k = 1.7320508f;  // sqrt(3)
    float r = R * 0.9f;
    float px = std::abs(u) - r;
    float py = -v + r / k;
    if (px + k * py > 0.f) {
      float nx = (px - k * py) / 2.f;
      float ny = (-k * px - py) / 2.f;
      px = nx;
      py = ny;
    }
    px -= std::min(std::max(px, -2.f * r), 0.f);
    float len = std::sqrt(px * px + py * py);
    return py > 0.f ? -len : len;
  }
  if (cat == "cross") {
    float w = R * 0.32f;
    float d1 = std::max(std::abs(u) - R, std::abs(v) - w);
    float d2 = std::max(std::abs(u) - w, std::abs(v) - R);
    return std::min(d1, d2);
  }
  throw std::invalid_argument("unknown category '" + cat + "'");
}

struct Hsv {
  float h, s, v;
};

inline std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  float c = v * s;
  float hp = h * 6.f;
  float x = c * (1.f - std::abs(std::fmod(hp, 2.f) - 1.f));
  float r = 0, g = 0, b = 0;
  if (hp < 1) (r = c), (g = x);
  else if (hp < 2) (r = x), (g = c);
  else if (hp < 3) (g = c), (b = x);
  else if (hp < 4) (g = x), (b = c);
  else if (hp < 5) (r = x), (b = c);
  else (r = c), (b = x);
  float m = v - c;
  return {r + m, g + m, b + m};
}

inline float luminance(const Image& im, int y, int x) {
  return 0.299f * im.at(0, y, x) + 0.587f * im.at(1, y, x) + 0.114f * im.at(2, y, x);
}

}  // namespace detail

inline LabeledImage render_image(const DomainSpec& spec, Rng& rng) {
  const int N = kImageRes;
  bool sketch = spec.styles.count("sketch") > 0;

  float bg = sketch ? 0.95f : float(rng.uniform(spec.bg_min, spec.bg_max));
  float cx = N / 2.f + float(rng.uniform(-spec.pos_jitter, spec.pos_jitter));
  float cy = N / 2.f + float(rng.uniform(-spec.pos_jitter, spec.pos_jitter));
  float R = float(rng.uniform(spec.scale_min, spec.scale_max));
  float rot = spec.category == "circle" ? 0.f : float(rng.uniform(0.0, 0.6));
  auto fill = detail::hsv_to_rgb(float(rng.uniform()), 0.75f, 0.65f);

  Image im;
  // working space [0,1]
  for (int y = 0; y < N; ++y) {
    for (int x = 0; x < N; ++x) {
      float d = detail::shape_sdf(spec.category, x + 0.5f - cx, y + 0.5f - cy, R, rot);
      float r, g, b;
      if (sketch) {
        float edge = detail::clamp01(1.2f - std::abs(d));  // ~1px outline
        r = g = b = bg * (1.f - edge) + 0.08f * edge;
      } else {
        float cov = detail::clamp01(0.5f - d);
        r = bg * (1.f - cov) + fill[0] * cov;
        g = bg * (1.f - cov) + fill[1] * cov;
        b = bg * (1.f - cov) + fill[2] * cov;
      }
      im.at(0, y, x) = r;
      im.at(1, y, x) = g;
      im.at(2, y, x) = b;
    }
  }

  if (spec.styles.count("tint")) {
    // fixed magenta cast
    for (int y = 0; y < N; ++y)
      for (int x = 0; x < N; ++x) {
        im.at(0, y, x) = 0.75f * im.at(0, y, x) + 0.25f;
        im.at(1, y, x) = 0.75f * im.at(1, y, x);
        im.at(2, y, x) = 0.75f * im.at(2, y, x) + 0.25f;
      }
  }
  if (spec.styles.count("noiseband")) {
    // horizontal stripe texture
    for (int y = 0; y < N; ++y) {
      float band = (y % 2 == 0) ? 0.09f : -0.09f;
      for (int x = 0; x < N; ++x)
        for (int c = 0; c < 3; ++c) im.at(c, y, x) = detail::clamp01(im.at(c, y, x) + band);
    }
  }
  if (spec.distractor == "red-border") {
    for (int y = 0; y < N; ++y)
      for (int x = 0; x < N; ++x)
        if (y < 2 || y >= N - 2 || x < 2 || x >= N - 2) {
          im.at(0, y, x) = 0.9f;
          im.at(1, y, x) = 0.1f;
          im.at(2, y, x) = 0.1f;
        }
  } else if (spec.distractor == "crosshatch-corner") {
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if ((x + y) % 2 == 0) {
          im.at(0, y, x) = 0.05f;
          im.at(1, y, x) = 0.05f;
          im.at(2, y, x) = 0.05f;
        }
  } else if (spec.distractor != "none") {
    throw std::invalid_argument("unknown distractor '" + spec.distractor + "'");
  }

  // map [0,1] -> [-1,1]
  for (float& v : im.px) v = 2.f * v - 1.f;

  LabeledImage out;
  out.image = std::move(im);
  out.labels = spec.attributes();
  return out;
}

inline FewShotDataset make_fewshot_dataset(const DomainSpec& spec, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("make_fewshot_dataset: k >= 1 required");
  FewShotDataset ds;
  ds.spec = spec;
  Rng rng(seed);
  for (int i = 0; i < k; ++i) ds.images.push_back(render_image(spec, rng));
  return ds;
}

// ---------------------------------------------------------------------------
// attribute detectors (deterministic, calibrated on the generator)

namespace detail {

// Mean-centered template, precomputed once per (category, jitter cell).
struct CatTemplate {
  std::vector<float> centered;  // tpl - mean, frame zeroed
  float norm;
};

inline const std::vector<CatTemplate>& category_templates(const std::string& cat) {
  static std::map<std::string, std::vector<CatTemplate>> cache;
  auto it = cache.find(cat);
  if (it != cache.end()) return it->second;
  const int N = kImageRes;
  std::vector<CatTemplate> tpls;
  for (float dx = -3; dx <= 3; dx += 1.5f)
    for (float dy = -3; dy <= 3; dy += 1.5f)
      for (float R : {8.f, 9.f, 10.f, 11.f, 12.f})
        for (float rot : {0.f, 0.15f, 0.3f, 0.45f, 0.6f}) {
          if (cat == "circle" && rot > 0.f) continue;
          // shapes appear filled in plain renders and as outlines in sketch
          for (int mode = 0; mode < 2; ++mode) {
            std::vector<float> tpl(N * N, 0.f);
            double mean = 0;
            int cnt = 0;
            for (int y = 3; y < N - 3; ++y)
              for (int x = 3; x < N - 3; ++x) {
                float d = shape_sdf(cat, x + 0.5f - N / 2.f - dx, y + 0.5f - N / 2.f - dy, R, rot);
                float v = mode == 0 ? clamp01(0.5f - d) : clamp01(1.2f - std::abs(d));
                tpl[y * N + x] = v;
                mean += v;
                ++cnt;
              }
            mean /= cnt;
            CatTemplate ct;
            ct.centered.assign(N * N, 0.f);
            double nrm = 0;
            for (int y = 3; y < N - 3; ++y)
              for (int x = 3; x < N - 3; ++x) {
                float c = tpl[y * N + x] - float(mean);
                ct.centered[y * N + x] = c;
                nrm += double(c) * c;
              }
            ct.norm = float(std::sqrt(nrm) + 1e-9);
            tpls.push_back(std::move(ct));
          }
        }
  return cache.emplace(cat, std::move(tpls)).first->second;
}

inline std::vector<float> foreground_map(const Image& im) {
  const int N = kImageRes;
  // average adjacent row pairs to cancel the period-2 noiseband stripes
  std::vector<float> lum(N * N);
  for (int y = 0; y < N; ++y)
    for (int x = 0; x < N; ++x) {
      int y2 = std::min(N - 1, y + 1);
      lum[y * N + x] = 0.5f * (luminance(im, y, x) + luminance(im, y2, x));
    }
  // background level from a ring inside the possible distractor frame
  float bgacc = 0;
  int bgcnt = 0;
  for (int i = 3; i < N - 3; ++i) {
    bgacc += lum[3 * N + i] + lum[(N - 4) * N + i] + lum[i * N + 3] + lum[i * N + N - 4];
    bgcnt += 4;
  }
  float bg = bgacc / bgcnt;
  std::vector<float> fg(N * N, 0.f);
  for (int y = 3; y < N - 3; ++y)
    for (int x = 3; x < N - 3; ++x) fg[y * N + x] = std::abs(lum[y * N + x] - bg);
  return fg;
}

inline float ncc_best(const std::vector<float>& fg, const std::string& cat) {
  const int N = kImageRes;
  double mean = 0;
  for (int y = 3; y < N - 3; ++y)
    for (int x = 3; x < N - 3; ++x) mean += fg[y * N + x];
  mean /= double(N - 6) * (N - 6);
  std::vector<float> fgc(N * N, 0.f);
  double nrm = 0;
  for (int y = 3; y < N - 3; ++y)
    for (int x = 3; x < N - 3; ++x) {
      float c = fg[y * N + x] - float(mean);
      fgc[y * N + x] = c;
      nrm += double(c) * c;
    }
  float fnorm = float(std::sqrt(nrm) + 1e-9);
  float best = -1.f;
  for (const auto& tpl : category_templates(cat)) {
    double num = 0;
    for (int i = 0; i < N * N; ++i) num += double(fgc[i]) * tpl.centered[i];
    best = std::max(best, float(num) / (fnorm * tpl.norm));
  }
  return best;
}

inline float detect_category(const Image& im, const std::string& cat) {
  // NCC against fill and outline templates over a jitter grid,
  // margin-normalized against the competing categories.
  std::vector<float> fg = foreground_map(im);
  float own = ncc_best(fg, cat);
  float other = -1.f;
  for (auto& c : categories())
    if (c != cat) other = std::max(other, ncc_best(fg, c));
  // margin mapped into [0,1]; clean renders sit near the extremes
  return clamp01(0.5f + 14.0f * (own - other));
}

inline float detect_sketch(const Image& im) {
  const int N = kImageRes;
  // Remove any global per-channel cast (e.g. tint) before judging
  // colorfulness, so only spatially varying color counts.
  std::array<float, 3> med;
  for (int c = 0; c < 3; ++c) {
    std::vector<float> v;
    for (int y = 3; y < N - 3; ++y)
      for (int x = 3; x < N - 3; ++x) v.push_back(im.at(c, y, x));
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    med[c] = v[v.size() / 2];
  }
  float colorful = 0, edge = 0;
  int cnt = 0;
  for (int y = 3; y < N - 3; ++y)
    for (int x = 3; x < N - 3; ++x) {
      float r = im.at(0, y, x) - med[0], g = im.at(1, y, x) - med[1],
            b = im.at(2, y, x) - med[2];
      colorful += std::abs(r - g) + std::abs(g - b) + std::abs(b - r);
      edge += std::abs(luminance(im, y, x + 1) - luminance(im, y, x)) +
              std::abs(luminance(im, y + 1, x) - luminance(im, y, x));
      ++cnt;
    }
  colorful /= cnt;
  edge /= cnt;
  // grayscale with visible line structure
  float grayness = clamp01(1.f - 6.f * colorful);
  float lines = clamp01(edge / 0.05f);
  return grayness * lines;
}

inline float detect_tint(const Image& im) {
  const int N = kImageRes;
  // per-channel median over a background ring just inside the distractor
  // frame; the shape rarely reaches it, so fill color cannot fake a cast
  std::array<std::vector<float>, 3> ch;
  for (int c = 0; c < 3; ++c)
    for (int y = 3; y < N - 3; ++y)
      for (int x = 3; x < N - 3; ++x) {
        bool ring = (y < 6 || y >= N - 6 || x < 6 || x >= N - 6);
        if (ring) ch[c].push_back(im.at(c, y, x));
      }
  for (int c = 0; c < 3; ++c)
    std::nth_element(ch[c].begin(), ch[c].begin() + ch[c].size() / 2, ch[c].end());
  float r = ch[0][ch[0].size() / 2], g = ch[1][ch[1].size() / 2], b = ch[2][ch[2].size() / 2];
  float margin = (r + b) / 2.f - g;  // magenta cast in [-1,1] pixel space
  return clamp01(margin / 0.20f);
}

inline float detect_noiseband(const Image& im) {
  const int N = kImageRes;
  // period-2 alternation of row means (stripes are constant along rows);
  // shape edges vary smoothly across rows and mostly cancel
  float alt_rows = 0, alt_cols = 0;
  for (int y = 2; y < N - 2; ++y) {
    float row = 0, col = 0;
    for (int x = 2; x < N - 2; ++x) {
      row += luminance(im, y, x);
      col += luminance(im, x, y);
    }
    float sgn = (y % 2 == 0) ? 1.f : -1.f;
    alt_rows += sgn * row / (N - 4);
    alt_cols += sgn * col / (N - 4);
  }
  alt_rows = std::abs(alt_rows) / (N - 4);
  alt_cols = std::abs(alt_cols) / (N - 4);
  return clamp01((alt_rows - alt_cols) / 0.12f);
}

inline float detect_red_border(const Image& im) {
  const int N = kImageRes;
  float acc = 0;
  int cnt = 0;
  for (int y = 0; y < N; ++y)
    for (int x = 0; x < N; ++x)
      if (y < 2 || y >= N - 2 || x < 2 || x >= N - 2) {
        // channels in [-1,1]; redness linear in blend weight
        float r = im.at(0, y, x), g = im.at(1, y, x), b = im.at(2, y, x);
        acc += (r - std::max(g, b)) / 2.f;  // back to [0,1] scale
        ++cnt;
      }
  return clamp01((acc / cnt) / 0.8f);
}

inline float detect_crosshatch(const Image& im) {
  // checkerboard contrast in the 8x8 corner patch
  float even = 0, odd = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      float l = (luminance(im, y, x) + 1.f) / 2.f;
      (((x + y) % 2 == 0) ? even : odd) += l / 32.f;
    }
  return clamp01((odd - even) / 0.4f);
}

}  // namespace detail

inline float detect_attribute(const Image& im, const std::string& attribute) {
  for (auto& c : categories())
    if (attribute == c) return detail::detect_category(im, c);
  if (attribute == "sketch") return detail::detect_sketch(im);
  if (attribute == "tint") return detail::detect_tint(im);
  if (attribute == "noiseband") return detail::detect_noiseband(im);
  if (attribute == "red-border") return detail::detect_red_border(im);
  if (attribute == "crosshatch-corner") return detail::detect_crosshatch(im);
  throw std::invalid_argument("no detector registered for attribute '" + attribute + "'");
}

// ---------------------------------------------------------------------------
// pretraining corpus

struct CorpusEntry {
  Image image;
  std::string caption;
  std::vector<std::string> labels;
};

struct Corpus {
  std::vector<CorpusEntry> entries;
};

// Captions are "a [N]"; a `v_share` fraction is captioned "a [V] [N]" and,
// with probability `distractor_binding`, rendered with the distractor.
// 10% of captions drop to "" for classifier-free guidance training.
inline Corpus build_pretrain_corpus(const std::vector<std::string>& cats, int size,
                                    float distractor_binding, std::uint64_t seed,
                                    float v_share = 0.10f, const std::string& distractor = "red-border",
                                    float caption_dropout = 0.10f) {
  if (cats.size() < 2) throw std::invalid_argument("build_pretrain_corpus: need >= 2 categories");
  if (size < 10 * static_cast<int>(cats.size()))
    throw std::invalid_argument("build_pretrain_corpus: corpus too small");
  Corpus corpus;
  Rng rng(seed);
  for (int i = 0; i < size; ++i) {
    DomainSpec spec;
    spec.category = cats[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cats.size()) - 1))];
    bool with_v = rng.uniform() < v_share;
    bool with_distractor = with_v && (rng.uniform() < distractor_binding);
    if (with_distractor) spec.distractor = distractor;
    LabeledImage li = render_image(spec, rng);
    CorpusEntry e;
    e.image = std::move(li.image);
    e.labels = li.labels;
    e.caption = with_v ? ("a [V] " + spec.category) : ("a " + spec.category);
    if (rng.uniform() < caption_dropout) e.caption = "";
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

// Assemble images into a (B,3,32,32) tensor.
template <typename S>
Tensor<S> batch_images(const std::vector<const Image*>& imgs) {
  int B = static_cast<int>(imgs.size());
  Tensor<S> t = Tensor<S>::zeros({B, 3, kImageRes, kImageRes});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < kImagePixels; ++i) t.data()[std::int64_t(b) * kImagePixels + i] = S(imgs[b]->px[i]);
  return t;
}

template <typename S>
Image tensor_to_image(const Tensor<S>& t, int b) {
  if (t.size() != std::int64_t(t.shape()[0]) * kImagePixels)
    throw std::invalid_argument("tensor_to_image: expected rows of 3x32x32 pixels");
  Image im;
  for (int i = 0; i < kImagePixels; ++i)
    im.px[i] = std::min(1.f, std::max(-1.f, float(t.data()[std::int64_t(b) * kImagePixels + i])));
  return im;
}

}  // namespace dgal
