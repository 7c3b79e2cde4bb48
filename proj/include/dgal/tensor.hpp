#pragma once

// Reverse-mode autodiff over dense n-d tensors. Every op builds a graph
// node holding its parents and a pull-style backward closure; backward()
// walks the graph in reverse topological order, once.
//
// Design constraints: deterministic accumulation (fixed iteration order,
// no atomics), heavy lifting routed through single Eigen GEMM calls.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dgal {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  bool consumed = false;  // set once backward has run through this root
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

// Thread-local guard disabling graph construction (inference mode).
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
inline bool grad_enabled() { return nograd_depth() == 0; }

struct NoGradGuard {
  NoGradGuard() { ++nograd_depth(); }
  ~NoGradGuard() { --nograd_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node<S>>();
    n->value.assign(numel(shape), S(0));
    n->shape = std::move(shape);
    return Tensor(n);
  }
  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }
  static Tensor scalar(S v) { return full({1}, v); }
  static Tensor from(Shape shape, std::vector<S> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw std::invalid_argument("Tensor::from: data length does not match shape");
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return node_->size(); }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  std::vector<S>& values() { return node_->value; }
  const std::vector<S>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }
  const std::vector<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
Tensor<S> make_op(Shape shape, std::vector<std::shared_ptr<Node<S>>> parents,
                  std::function<void(Node<S>&)> bp) {
  auto n = std::make_shared<Node<S>>();
  n->value.assign(numel(shape), S(0));
  n->shape = std::move(shape);
  if (grad_enabled()) {
    bool rg = false;
    for (auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(bp);
    }
  }
  return Tensor<S>(n);
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_op<S>(a.shape(), {pa, pb}, [pa, pb](Node<S>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pb->grad[i] += n.grad[i];
    }
  });
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = pa->value[i] + pb->value[i];
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_op<S>(a.shape(), {pa, pb}, [pa, pb](Node<S>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = pa->value[i] - pb->value[i];
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_op<S>(a.shape(), {pa, pb}, [pa, pb](Node<S>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < n.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = pa->value[i] * pb->value[i];
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto pa = a.node();
  auto out = detail::make_op<S>(a.shape(), {pa}, [pa, c](Node<S>& n) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < n.size(); ++i) pa->grad[i] += c * n.grad[i];
  });
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = c * pa->value[i];
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  auto pa = a.node();
  auto out = detail::make_op<S>(a.shape(), {pa}, [pa](Node<S>& n) {
    pa->ensure_grad();
    for (std::int64_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
  });
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = pa->value[i] + c;
  return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  auto px = x.node();
  auto out = detail::make_op<S>(x.shape(), {px}, [px](Node<S>& n) {
    px->ensure_grad();
    for (std::int64_t i = 0; i < n.size(); ++i) {
      S v = px->value[i];
      S s = S(1) / (S(1) + std::exp(-v));
      px->grad[i] += n.grad[i] * s * (S(1) + v * (S(1) - s));
    }
  });
  for (std::int64_t i = 0; i < out.size(); ++i) {
    S v = px->value[i];
    out.data()[i] = v / (S(1) + std::exp(-v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  auto px = x.node();
  auto out = detail::make_op<S>(shape, {px}, [px](Node<S>& n) {
    px->ensure_grad();
    for (std::int64_t i = 0; i < n.size(); ++i) px->grad[i] += n.grad[i];
  });
  std::copy(px->value.begin(), px->value.end(), out.data());
  return out;
}

template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  auto n = std::make_shared<Node<S>>();
  n->shape = x.shape();
  n->value = x.values();  // bitwise copy, no parents
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  // NCHW concat along axis 1
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: incompatible shapes");
  int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  std::int64_t hw = std::int64_t(H) * W;
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_op<S>({B, Ca + Cb, H, W}, {pa, pb}, [pa, pb, B, Ca, Cb, hw](Node<S>& n) {
    for (int i = 0; i < B; ++i) {
      const S* g = n.grad.data() + std::int64_t(i) * (Ca + Cb) * hw;
      if (pa->requires_grad) {
        pa->ensure_grad();
        S* ga = pa->grad.data() + std::int64_t(i) * Ca * hw;
        for (std::int64_t j = 0; j < Ca * hw; ++j) ga[j] += g[j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        S* gb = pb->grad.data() + std::int64_t(i) * Cb * hw;
        for (std::int64_t j = 0; j < Cb * hw; ++j) gb[j] += g[Ca * hw + j];
      }
    }
  });
  for (int i = 0; i < B; ++i) {
    S* o = out.data() + std::int64_t(i) * (Ca + Cb) * hw;
    std::copy_n(pa->value.data() + std::int64_t(i) * Ca * hw, Ca * hw, o);
    std::copy_n(pb->value.data() + std::int64_t(i) * Cb * hw, Cb * hw, o + Ca * hw);
  }
  return out;
}

template <typename S>
Tensor<S> concat_batch(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_batch: empty list");
  Shape s0 = xs[0].shape();
  std::int64_t per = numel(s0) / s0[0];
  int B = 0;
  for (auto& x : xs) {
    Shape s = x.shape();
    s[0] = s0[0];
    if (s != s0) throw std::invalid_argument("concat_batch: incompatible shapes");
    B += x.shape()[0];
  }
  Shape so = s0;
  so[0] = B;
  std::vector<std::shared_ptr<Node<S>>> parents;
  for (auto& x : xs) parents.push_back(x.node());
  auto ps = parents;
  auto out = detail::make_op<S>(so, std::move(parents), [ps, per](Node<S>& n) {
    std::int64_t off = 0;
    for (auto& p : ps) {
      std::int64_t len = p->size();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::int64_t i = 0; i < len; ++i) p->grad[i] += n.grad[off + i];
      }
      off += len;
    }
  });
  std::int64_t off = 0;
  for (auto& p : ps) {
    std::copy(p->value.begin(), p->value.end(), out.data() + off);
    off += p->size();
  }
  (void)per;
  return out;
}

// Flattened view of sample i of a batched tensor, as shape (1, numel/B).
template <typename S>
Tensor<S> sample_flat(const Tensor<S>& x, int i) {
  const Shape& s = x.shape();
  int B = s[0];
  if (i < 0 || i >= B) throw std::out_of_range("sample_flat: index");
  std::int64_t per = x.size() / B;
  auto px = x.node();
  auto out = detail::make_op<S>({1, static_cast<int>(per)}, {px}, [px, i, per](Node<S>& n) {
    px->ensure_grad();
    S* g = px->grad.data() + i * per;
    for (std::int64_t j = 0; j < per; ++j) g[j] += n.grad[j];
  });
  std::copy_n(px->value.data() + i * per, per, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// reductions & losses

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  auto px = x.node();
  auto out = detail::make_op<S>({1}, {px}, [px](Node<S>& n) {
    px->ensure_grad();
    S g = n.grad[0];
    for (std::int64_t i = 0; i < px->size(); ++i) px->grad[i] += g;
  });
  S acc = 0;
  for (std::int64_t i = 0; i < px->size(); ++i) acc += px->value[i];
  out.data()[0] = acc;
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / S(x.size()));
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mse");
  auto pa = a.node(), pb = b.node();
  std::int64_t n_el = a.size();
  auto out = detail::make_op<S>({1}, {pa, pb}, [pa, pb, n_el](Node<S>& n) {
    S g = n.grad[0] * S(2) / S(n_el);
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n_el; ++i) pa->grad[i] += g * (pa->value[i] - pb->value[i]);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < n_el; ++i) pb->grad[i] -= g * (pa->value[i] - pb->value[i]);
    }
  });
  S acc = 0;
  for (std::int64_t i = 0; i < n_el; ++i) {
    S d = pa->value[i] - pb->value[i];
    acc += d * d;
  }
  out.data()[0] = acc / S(n_el);
  return out;
}

// ---------------------------------------------------------------------------
// matrix ops (2-D, row-major)

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  int m = sa[0], k = sa[1], n = sb[1];
  auto pa = a.node(), pb = b.node();
  auto out = detail::make_op<S>({m, n}, {pa, pb}, [pa, pb, m, k, n](Node<S>& g) {
    CMapM<S> G(g.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      MapM<S> dA(pa->grad.data(), m, k);
      CMapM<S> B(pb->value.data(), k, n);
      dA.noalias() += G * B.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      MapM<S> dB(pb->grad.data(), k, n);
      CMapM<S> A(pa->value.data(), m, k);
      dB.noalias() += A.transpose() * G;
    }
  });
  MapM<S> C(out.data(), m, n);
  CMapM<S> A(pa->value.data(), m, k);
  CMapM<S> B(pb->value.data(), k, n);
  C.noalias() = A * B;
  return out;
}

// X (n x d) + broadcast row vector b (d)
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  const Shape& sx = x.shape();
  if (sx.size() != 2 || b.size() != sx[1])
    throw std::invalid_argument("add_rowvec: incompatible shapes");
  int n = sx[0], d = sx[1];
  auto px = x.node(), pb = b.node();
  auto out = detail::make_op<S>(sx, {px, pb}, [px, pb, n, d](Node<S>& g) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) px->grad[i] += g.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) pb->grad[j] += g.grad[std::int64_t(i) * d + j];
    }
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.data()[std::int64_t(i) * d + j] = px->value[std::int64_t(i) * d + j] + pb->value[j];
  return out;
}

// Row gather from a (V x d) table; backward scatter-adds. ids are constants.
template <typename S>
Tensor<S> rows(const Tensor<S>& table, const std::vector<int>& ids) {
  const Shape& st = table.shape();
  if (st.size() != 2) throw std::invalid_argument("rows: table must be 2-D");
  int V = st[0], d = st[1];
  for (int id : ids)
    if (id < 0 || id >= V) throw std::out_of_range("rows: id out of range");
  int n = static_cast<int>(ids.size());
  auto pt = table.node();
  auto out = detail::make_op<S>({n, d}, {pt}, [pt, ids, d](Node<S>& g) {
    pt->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j)
        pt->grad[std::int64_t(ids[i]) * d + j] += g.grad[std::int64_t(i) * d + j];
  });
  for (int i = 0; i < n; ++i)
    std::copy_n(pt->value.data() + std::int64_t(ids[i]) * d, d, out.data() + std::int64_t(i) * d);
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose: 2-D expected");
  int m = s[0], n = s[1];
  auto px = x.node();
  auto out = detail::make_op<S>({n, m}, {px}, [px, m, n](Node<S>& g) {
    px->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) px->grad[std::int64_t(i) * n + j] += g.grad[std::int64_t(j) * m + i];
  });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[std::int64_t(j) * m + i] = px->value[std::int64_t(i) * n + j];
  return out;
}

// Softmax along the last axis of a 2-D tensor.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("softmax_rows: 2-D expected");
  int n = s[0], d = s[1];
  auto px = x.node();
  auto out_holder = std::make_shared<std::vector<S>>();
  auto out = detail::make_op<S>(s, {px}, [px, out_holder, n, d](Node<S>& g) {
    px->ensure_grad();
    const S* y = out_holder->data();
    for (int i = 0; i < n; ++i) {
      const S* yr = y + std::int64_t(i) * d;
      const S* gr = g.grad.data() + std::int64_t(i) * d;
      S dot = 0;
      for (int j = 0; j < d; ++j) dot += yr[j] * gr[j];
      S* xr = px->grad.data() + std::int64_t(i) * d;
      for (int j = 0; j < d; ++j) xr[j] += yr[j] * (gr[j] - dot);
    }
  });
  for (int i = 0; i < n; ++i) {
    const S* xr = px->value.data() + std::int64_t(i) * d;
    S* yr = out.data() + std::int64_t(i) * d;
    S mx = xr[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    S z = 0;
    for (int j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < d; ++j) yr[j] /= z;
  }
  *out_holder = out.values();
  return out;
}

// Mean over rows of KL(p || q); rows of p and q are probability vectors.
template <typename S>
Tensor<S> kl_rows(const Tensor<S>& p, const Tensor<S>& q) {
  detail::check_same_shape(p, q, "kl_rows");
  const Shape& s = p.shape();
  if (s.size() != 2) throw std::invalid_argument("kl_rows: 2-D expected");
  int n = s[0], d = s[1];
  const S eps = std::is_same_v<S, float> ? S(1e-12) : S(1e-300);
  auto pp = p.node(), pq = q.node();
  auto out = detail::make_op<S>({1}, {pp, pq}, [pp, pq, n, d, eps](Node<S>& g) {
    S gg = g.grad[0] / S(n);
    if (pp->requires_grad) {
      pp->ensure_grad();
      for (std::int64_t i = 0; i < std::int64_t(n) * d; ++i) {
        S pv = std::max(pp->value[i], eps), qv = std::max(pq->value[i], eps);
        pp->grad[i] += gg * (std::log(pv / qv) + S(1));
      }
    }
    if (pq->requires_grad) {
      pq->ensure_grad();
      for (std::int64_t i = 0; i < std::int64_t(n) * d; ++i) {
        S pv = std::max(pp->value[i], eps), qv = std::max(pq->value[i], eps);
        pq->grad[i] -= gg * pv / qv;
      }
    }
  });
  S acc = 0;
  for (std::int64_t i = 0; i < std::int64_t(n) * d; ++i) {
    S pv = std::max(pp->value[i], eps), qv = std::max(pq->value[i], eps);
    acc += pv * std::log(pv / qv);
  }
  out.data()[0] = acc / S(n);
  return out;
}

// Cosine similarity of two tensors flattened to vectors; scalar output.
template <typename S>
Tensor<S> cosine(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: size mismatch");
  auto pa = a.node(), pb = b.node();
  std::int64_t n_el = a.size();
  const S eps = S(1e-12);
  auto out = detail::make_op<S>({1}, {pa, pb}, [pa, pb, n_el, eps](Node<S>& g) {
    S na = 0, nb = 0, dot = 0;
    for (std::int64_t i = 0; i < n_el; ++i) {
      na += pa->value[i] * pa->value[i];
      nb += pb->value[i] * pb->value[i];
      dot += pa->value[i] * pb->value[i];
    }
    na = std::sqrt(std::max(na, eps));
    nb = std::sqrt(std::max(nb, eps));
    S c = dot / (na * nb);
    S gg = g.grad[0];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n_el; ++i)
        pa->grad[i] += gg * (pb->value[i] / (na * nb) - c * pa->value[i] / (na * na));
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::int64_t i = 0; i < n_el; ++i)
        pb->grad[i] += gg * (pa->value[i] / (na * nb) - c * pb->value[i] / (nb * nb));
    }
  });
  S na = 0, nb = 0, dot = 0;
  for (std::int64_t i = 0; i < n_el; ++i) {
    na += pa->value[i] * pa->value[i];
    nb += pb->value[i] * pb->value[i];
    dot += pa->value[i] * pb->value[i];
  }
  out.data()[0] = dot / (std::sqrt(std::max(na, eps)) * std::sqrt(std::max(nb, eps)));
  return out;
}

// Assemble scalar tensors into one (1, n) row.
template <typename S>
Tensor<S> stack_scalars(const std::vector<Tensor<S>>& xs) {
  int n = static_cast<int>(xs.size());
  std::vector<std::shared_ptr<Node<S>>> parents;
  for (auto& x : xs) {
    if (x.size() != 1) throw std::invalid_argument("stack_scalars: non-scalar entry");
    parents.push_back(x.node());
  }
  auto ps = parents;
  auto out = detail::make_op<S>({1, n}, std::move(parents), [ps](Node<S>& g) {
    for (size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->requires_grad) {
        ps[i]->ensure_grad();
        ps[i]->grad[0] += g.grad[i];
      }
    }
  });
  for (int i = 0; i < n; ++i) out.data()[i] = ps[i]->value[0];
  return out;
}

// ---------------------------------------------------------------------------
// image ops (NCHW)

namespace detail {

// im2col for 3x3-style kernels with zero padding; rows = B*OH*OW, cols = Cin*k*k
template <typename S>
void im2col(const S* x, int B, int C, int H, int W, int k, int stride, int pad, S* out,
            int OH, int OW) {
  std::int64_t cols = std::int64_t(C) * k * k;
  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        S* row = out + ((std::int64_t(b) * OH + oy) * OW + ox) * cols;
        std::int64_t ci = 0;
        for (int c = 0; c < C; ++c) {
          const S* xc = x + (std::int64_t(b) * C + c) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            int y = oy * stride + ky - pad;
            for (int kx = 0; kx < k; ++kx, ++ci) {
              int xx = ox * stride + kx - pad;
              row[ci] = (y >= 0 && y < H && xx >= 0 && xx < W) ? xc[std::int64_t(y) * W + xx] : S(0);
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols_g, int B, int C, int H, int W, int k, int stride, int pad,
                S* gx, int OH, int OW) {
  std::int64_t cols = std::int64_t(C) * k * k;
  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        const S* row = cols_g + ((std::int64_t(b) * OH + oy) * OW + ox) * cols;
        std::int64_t ci = 0;
        for (int c = 0; c < C; ++c) {
          S* gc = gx + (std::int64_t(b) * C + c) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            int y = oy * stride + ky - pad;
            for (int kx = 0; kx < k; ++kx, ++ci) {
              int xx = ox * stride + kx - pad;
              if (y >= 0 && y < H && xx >= 0 && xx < W) gc[std::int64_t(y) * W + xx] += row[ci];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, NCHW input, weight (Cin*k*k x Cout), bias (Cout), zero padding k/2.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int k,
                 int stride) {
  const Shape& sx = x.shape();
  if (sx.size() != 4) throw std::invalid_argument("conv2d: NCHW input expected");
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const Shape& sw = w.shape();
  if (sw.size() != 2 || sw[0] != C * k * k)
    throw std::invalid_argument("conv2d: weight shape mismatch, want (" +
                                std::to_string(C * k * k) + ", Cout), got " + shape_str(sw));
  int Cout = sw[1];
  if (bias.size() != Cout) throw std::invalid_argument("conv2d: bias size mismatch");
  int pad = k / 2;
  int OH = (H + 2 * pad - k) / stride + 1;
  int OW = (W + 2 * pad - k) / stride + 1;
  std::int64_t rows_n = std::int64_t(B) * OH * OW;
  std::int64_t cols_n = std::int64_t(C) * k * k;

  auto px = x.node(), pw = w.node(), pb = bias.node();
  auto out = detail::make_op<S>(
      {B, Cout, OH, OW}, {px, pw, pb},
      [px, pw, pb, B, C, H, W, k, stride, pad, OH, OW, Cout, rows_n, cols_n](Node<S>& g) {
        // gradient in GEMM layout: (rows_n x Cout)
        std::vector<S> gy(rows_n * Cout);
        for (int b = 0; b < B; ++b)
          for (int co = 0; co < Cout; ++co) {
            const S* src = g.grad.data() + ((std::int64_t(b) * Cout + co) * OH) * OW;
            for (std::int64_t o = 0; o < std::int64_t(OH) * OW; ++o)
              gy[(std::int64_t(b) * OH * OW + o) * Cout + co] = src[o];
          }
        CMapM<S> GY(gy.data(), rows_n, Cout);
        if (pw->requires_grad || px->requires_grad) {
          if (pw->requires_grad) {
            std::vector<S> m(rows_n * cols_n);
            detail::im2col(px->value.data(), B, C, H, W, k, stride, pad, m.data(), OH, OW);
            pw->ensure_grad();
            CMapM<S> M(m.data(), rows_n, cols_n);
            MapM<S> dW(pw->grad.data(), cols_n, Cout);
            dW.noalias() += M.transpose() * GY;
          }
          if (px->requires_grad) {
            std::vector<S> dm(rows_n * cols_n);
            MapM<S> DM(dm.data(), rows_n, cols_n);
            CMapM<S> Wm(pw->value.data(), cols_n, Cout);
            DM.noalias() = GY * Wm.transpose();
            px->ensure_grad();
            detail::col2im_add(dm.data(), B, C, H, W, k, stride, pad, px->grad.data(), OH, OW);
          }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::int64_t r = 0; r < rows_n; ++r)
            for (int co = 0; co < Cout; ++co) pb->grad[co] += gy[r * Cout + co];
        }
      });

  std::vector<S> m(rows_n * cols_n);
  detail::im2col(px->value.data(), B, C, H, W, k, stride, pad, m.data(), OH, OW);
  std::vector<S> y(rows_n * Cout);
  {
    CMapM<S> M(m.data(), rows_n, cols_n);
    CMapM<S> Wm(pw->value.data(), cols_n, Cout);
    MapM<S> Y(y.data(), rows_n, Cout);
    Y.noalias() = M * Wm;
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb->value.data(), Cout);
  }
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co) {
      S* dst = out.data() + ((std::int64_t(b) * Cout + co) * OH) * OW;
      for (std::int64_t o = 0; o < std::int64_t(OH) * OW; ++o)
        dst[o] = y[(std::int64_t(b) * OH * OW + o) * Cout + co];
    }
  return out;
}

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest2x: NCHW expected");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  auto px = x.node();
  auto out = detail::make_op<S>({B, C, 2 * H, 2 * W}, {px}, [px, B, C, H, W](Node<S>& g) {
    px->ensure_grad();
    for (std::int64_t bc = 0; bc < std::int64_t(B) * C; ++bc) {
      S* gx = px->grad.data() + bc * H * W;
      const S* gy = g.grad.data() + bc * 4 * H * W;
      for (int y = 0; y < H; ++y)
        for (int x2 = 0; x2 < W; ++x2)
          gx[std::int64_t(y) * W + x2] +=
              gy[std::int64_t(2 * y) * 2 * W + 2 * x2] + gy[std::int64_t(2 * y) * 2 * W + 2 * x2 + 1] +
              gy[std::int64_t(2 * y + 1) * 2 * W + 2 * x2] +
              gy[std::int64_t(2 * y + 1) * 2 * W + 2 * x2 + 1];
    }
  });
  for (std::int64_t bc = 0; bc < std::int64_t(B) * C; ++bc) {
    const S* xi = px->value.data() + bc * H * W;
    S* yo = out.data() + bc * 4 * H * W;
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) {
        S v = xi[std::int64_t(y) * W + x2];
        yo[std::int64_t(2 * y) * 2 * W + 2 * x2] = v;
        yo[std::int64_t(2 * y) * 2 * W + 2 * x2 + 1] = v;
        yo[std::int64_t(2 * y + 1) * 2 * W + 2 * x2] = v;
        yo[std::int64_t(2 * y + 1) * 2 * W + 2 * x2 + 1] = v;
      }
  }
  return out;
}

// GroupNorm over NCHW with per-channel affine.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     int groups, S eps = S(1e-5)) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("group_norm: NCHW expected");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  if (C % groups != 0) throw std::invalid_argument("group_norm: C not divisible by groups");
  if (gamma.size() != C || beta.size() != C) throw std::invalid_argument("group_norm: affine size");
  int cg = C / groups;
  std::int64_t gsz = std::int64_t(cg) * H * W;
  std::int64_t hw = std::int64_t(H) * W;

  auto px = x.node(), pg = gamma.node(), pbt = beta.node();
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto inv_std = std::make_shared<std::vector<S>>(std::int64_t(B) * groups);

  auto out = detail::make_op<S>(
      s, {px, pg, pbt}, [px, pg, pbt, xhat, inv_std, B, C, H, W, groups, cg, gsz, hw](Node<S>& g) {
        if (pg->requires_grad) pg->ensure_grad();
        if (pbt->requires_grad) pbt->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int gi = 0; gi < groups; ++gi) {
            std::int64_t base = (std::int64_t(b) * C + std::int64_t(gi) * cg) * hw;
            const S* xh = xhat->data() + base;
            const S* gy = g.grad.data() + base;
            S istd = (*inv_std)[std::int64_t(b) * groups + gi];
            // per-channel affine grads + group statistics of dxhat
            S sum_dxh = 0, sum_dxh_xh = 0;
            for (int c = 0; c < cg; ++c) {
              S gamma_c = pg->value[gi * cg + c];
              const S* xhc = xh + std::int64_t(c) * hw;
              const S* gyc = gy + std::int64_t(c) * hw;
              S sg = 0, sb = 0;
              for (std::int64_t i = 0; i < hw; ++i) {
                sg += gyc[i] * xhc[i];
                sb += gyc[i];
                sum_dxh += gyc[i] * gamma_c;
                sum_dxh_xh += gyc[i] * gamma_c * xhc[i];
              }
              if (pg->requires_grad) pg->grad[gi * cg + c] += sg;
              if (pbt->requires_grad) pbt->grad[gi * cg + c] += sb;
            }
            if (px->requires_grad) {
              S m1 = sum_dxh / S(gsz);
              S m2 = sum_dxh_xh / S(gsz);
              S* gx = px->grad.data() + base;
              for (int c = 0; c < cg; ++c) {
                S gamma_c = pg->value[gi * cg + c];
                const S* xhc = xh + std::int64_t(c) * hw;
                const S* gyc = gy + std::int64_t(c) * hw;
                S* gxc = gx + std::int64_t(c) * hw;
                for (std::int64_t i = 0; i < hw; ++i)
                  gxc[i] += istd * (gyc[i] * gamma_c - m1 - xhc[i] * m2);
              }
            }
          }
        }
      });

  for (int b = 0; b < B; ++b) {
    for (int gi = 0; gi < groups; ++gi) {
      std::int64_t base = (std::int64_t(b) * C + std::int64_t(gi) * cg) * hw;
      const S* xi = px->value.data() + base;
      S mu = 0;
      for (std::int64_t i = 0; i < gsz; ++i) mu += xi[i];
      mu /= S(gsz);
      S var = 0;
      for (std::int64_t i = 0; i < gsz; ++i) {
        S d = xi[i] - mu;
        var += d * d;
      }
      var /= S(gsz);
      S istd = S(1) / std::sqrt(var + eps);
      (*inv_std)[std::int64_t(b) * groups + gi] = istd;
      S* xh = xhat->data() + base;
      S* yo = out.data() + base;
      for (int c = 0; c < cg; ++c) {
        S gamma_c = pg->value[gi * cg + c];
        S beta_c = pbt->value[gi * cg + c];
        for (std::int64_t i = 0; i < hw; ++i) {
          S v = (xi[std::int64_t(c) * hw + i] - mu) * istd;
          xh[std::int64_t(c) * hw + i] = v;
          yo[std::int64_t(c) * hw + i] = gamma_c * v + beta_c;
        }
      }
    }
  }
  return out;
}

// Add a per-channel bias vector (C) to an NCHW tensor, broadcast over B,H,W.
// Spatial mean per sample and channel: NCHW -> (N, C).
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("global_avg_pool: NCHW expected");
  int B = s[0], C = s[1], HW = s[2] * s[3];
  auto px = x.node();
  auto out = detail::make_op<S>({B, C}, {px}, [px, B, C, HW](Node<S>& n) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        S g = n.grad[std::int64_t(b) * C + c] / S(HW);
        S* gx = px->grad.data() + (std::int64_t(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) gx[i] += g;
      }
  });
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* xr = px->value.data() + (std::int64_t(b) * C + c) * HW;
      S acc = 0;
      for (int i = 0; i < HW; ++i) acc += xr[i];
      out.data()[std::int64_t(b) * C + c] = acc / S(HW);
    }
  return out;
}

template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& v) {
  const Shape& s = x.shape();
  if (s.size() != 4 || v.size() != s[1]) throw std::invalid_argument("add_channel_bias: shapes");
  int B = s[0], C = s[1];
  std::int64_t hw = std::int64_t(s[2]) * s[3];
  auto px = x.node(), pv = v.node();
  auto out = detail::make_op<S>(s, {px, pv}, [px, pv, B, C, hw](Node<S>& g) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) px->grad[i] += g.grad[i];
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S* gr = g.grad.data() + (std::int64_t(b) * C + c) * hw;
          S acc = 0;
          for (std::int64_t i = 0; i < hw; ++i) acc += gr[i];
          pv->grad[c] += acc;
        }
    }
  });
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* xi = px->value.data() + (std::int64_t(b) * C + c) * hw;
      S* yo = out.data() + (std::int64_t(b) * C + c) * hw;
      S bias = pv->value[c];
      for (std::int64_t i = 0; i < hw; ++i) yo[i] = xi[i] + bias;
    }
  return out;
}

// Sample i of NCHW as a (H*W x C) matrix (token-major layout for attention).
template <typename S>
Tensor<S> sample_as_tokens(const Tensor<S>& x, int i) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("sample_as_tokens: NCHW expected");
  int C = s[1];
  std::int64_t hw = std::int64_t(s[2]) * s[3];
  auto px = x.node();
  auto out = detail::make_op<S>({static_cast<int>(hw), C}, {px}, [px, i, C, hw](Node<S>& g) {
    px->ensure_grad();
    S* gx = px->grad.data() + std::int64_t(i) * C * hw;
    for (int c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < hw; ++t) gx[std::int64_t(c) * hw + t] += g.grad[t * C + c];
  });
  const S* xi = px->value.data() + std::int64_t(i) * C * hw;
  for (int c = 0; c < C; ++c)
    for (std::int64_t t = 0; t < hw; ++t) out.data()[t * C + c] = xi[std::int64_t(c) * hw + t];
  return out;
}

// Inverse of sample_as_tokens: pack B (H*W x C) matrices into NCHW.
template <typename S>
Tensor<S> tokens_to_nchw(const std::vector<Tensor<S>>& mats, int H, int W) {
  if (mats.empty()) throw std::invalid_argument("tokens_to_nchw: empty");
  int B = static_cast<int>(mats.size());
  int C = mats[0].shape()[1];
  std::int64_t hw = std::int64_t(H) * W;
  std::vector<std::shared_ptr<Node<S>>> parents;
  for (auto& m : mats) {
    if (m.shape() != Shape{static_cast<int>(hw), C})
      throw std::invalid_argument("tokens_to_nchw: inconsistent shapes");
    parents.push_back(m.node());
  }
  auto ps = parents;
  auto out = detail::make_op<S>({B, C, H, W}, std::move(parents), [ps, C, hw](Node<S>& g) {
    for (size_t b = 0; b < ps.size(); ++b) {
      if (!ps[b]->requires_grad) continue;
      ps[b]->ensure_grad();
      const S* gy = g.grad.data() + std::int64_t(b) * C * hw;
      for (int c = 0; c < C; ++c)
        for (std::int64_t t = 0; t < hw; ++t)
          ps[b]->grad[t * C + c] += gy[std::int64_t(c) * hw + t];
    }
  });
  for (int b = 0; b < B; ++b) {
    S* yo = out.data() + std::int64_t(b) * C * hw;
    const S* mi = ps[b]->value.data();
    for (int c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < hw; ++t) yo[std::int64_t(c) * hw + t] = mi[t * C + c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  auto root = loss.node();
  if (root->consumed) throw std::logic_error("backward: tape already consumed");
  root->consumed = true;
  if (!root->requires_grad) return;  // constant loss: nothing reachable

  // Iterative post-order DFS; parents visited in recorded order so the
  // reverse sweep is deterministic.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<S>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order) n->ensure_grad();
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// Finite-value audit used by the checkable NaN/Inf detection mode.
template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t.data()[i])) return false;
  return true;
}

}  // namespace dgal
