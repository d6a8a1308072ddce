#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "pcct/core/error.hpp"

namespace pcct::nn {

/// NCHW shape; dense layers use (n, features, 1, 1).
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;
  std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
};

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
using Var = std::shared_ptr<Node<S>>;

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph recording in its scope (inference).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class S>
Var<S> constant(Shape shape, std::vector<S> value) {
  if (value.size() != shape.size()) throw ConfigError("tensor payload does not match its shape");
  auto v = std::make_shared<Node<S>>();
  v->shape = shape;
  v->value = std::move(value);
  return v;
}

template <class S>
Var<S> zeros(Shape shape) {
  return constant<S>(shape, std::vector<S>(shape.size(), S(0)));
}

template <class S>
Var<S> parameter(Shape shape, std::vector<S> value) {
  auto v = constant<S>(shape, std::move(value));
  v->requires_grad = true;
  return v;
}

namespace detail {

/// Result node wired to `parents` when any of them needs a gradient.
template <class S>
Var<S> make_result(Shape shape, std::vector<S> value, std::initializer_list<Var<S>> parents,
                   std::function<void(Node<S>&)> backward) {
  auto out = std::make_shared<Node<S>>();
  out->shape = shape;
  out->value = std::move(value);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return out;
  out->requires_grad = true;
  out->parents.assign(parents.begin(), parents.end());
  out->backward = std::move(backward);
  return out;
}

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<Mat<S>>;
template <class S>
using CMapM = Eigen::Map<const Mat<S>>;

}  // namespace detail

/// Reverse-mode sweep from a scalar (or seeded) output.
template <class S>
void backward(const Var<S>& root) {
  if (!root->requires_grad) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  if (root->value.size() == 1) root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (!n->backward) continue;
    n->ensure_grad();
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (!(a->shape == b->shape)) throw ConfigError("add: shape mismatch");
  std::vector<S> v(a->value.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
  return detail::make_result<S>(a->shape, std::move(v), {a, b}, [a, b](Node<S>& o) {
    if (a->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) a->grad[i] += o.grad[i];
    if (b->requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) b->grad[i] += o.grad[i];
  });
}

template <class S>
Var<S> silu(const Var<S>& x) {
  std::vector<S> v(x->value.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x->value[i] / (S(1) + std::exp(-x->value[i]));
  return detail::make_result<S>(x->shape, std::move(v), {x}, [x](Node<S>& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const S s = S(1) / (S(1) + std::exp(-x->value[i]));
      x->grad[i] += o.grad[i] * s * (S(1) + x->value[i] * (S(1) - s));
    }
  });
}

/// x * (1 + scale) + shift with scale, shift of shape (n, c, 1, 1).
template <class S>
Var<S> film(const Var<S>& x, const Var<S>& scale, const Var<S>& shift) {
  const Shape s = x->shape;
  if (scale->shape.n != s.n || scale->shape.c != s.c || scale->shape.plane() != 1 || !(scale->shape == shift->shape))
    throw ConfigError("film: modulation shape mismatch");
  const std::size_t hw = s.plane();
  std::vector<S> v(x->value.size());
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (std::size_t i = 0; i < hw; ++i)
      v[nc * hw + i] = x->value[nc * hw + i] * (S(1) + scale->value[nc]) + shift->value[nc];
  return detail::make_result<S>(s, std::move(v), {x, scale, shift}, [x, scale, shift, s, hw](Node<S>& o) {
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      S gs = 0, gb = 0;
      const S m = S(1) + scale->value[nc];
      for (std::size_t i = 0; i < hw; ++i) {
        const S g = o.grad[nc * hw + i];
        if (x->requires_grad) x->grad[nc * hw + i] += g * m;
        gs += g * x->value[nc * hw + i];
        gb += g;
      }
      if (scale->requires_grad) scale->grad[nc] += gs;
      if (shift->requires_grad) shift->grad[nc] += gb;
    }
  });
}

/// Concatenation along channels.
template <class S>
Var<S> concat(const Var<S>& a, const Var<S>& b) {
  const Shape sa = a->shape, sb = b->shape;
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) throw ConfigError("concat: shape mismatch");
  const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  std::vector<S> v(so.size());
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a->value.begin() + n * pa, pa, v.begin() + n * (pa + pb));
    std::copy_n(b->value.begin() + n * pb, pb, v.begin() + n * (pa + pb) + pa);
  }
  return detail::make_result<S>(so, std::move(v), {a, b}, [a, b, pa, pb, sa](Node<S>& o) {
    for (int n = 0; n < sa.n; ++n) {
      if (a->requires_grad)
        for (std::size_t i = 0; i < pa; ++i) a->grad[n * pa + i] += o.grad[n * (pa + pb) + i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < pb; ++i) b->grad[n * pb + i] += o.grad[n * (pa + pb) + pa + i];
    }
  });
}

/// Channels [c0, c0 + count).
template <class S>
Var<S> slice_channels(const Var<S>& x, int c0, int count) {
  const Shape s = x->shape;
  if (c0 < 0 || count < 1 || c0 + count > s.c) throw ConfigError("slice_channels: range outside tensor");
  const Shape so{s.n, count, s.h, s.w};
  const std::size_t hw = s.plane();
  std::vector<S> v(so.size());
  for (int n = 0; n < s.n; ++n)
    std::copy_n(x->value.begin() + (n * s.c + c0) * hw, count * hw, v.begin() + n * count * hw);
  return detail::make_result<S>(so, std::move(v), {x}, [x, s, c0, count, hw](Node<S>& o) {
    for (int n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < count * hw; ++i) x->grad[(n * s.c + c0) * hw + i] += o.grad[n * count * hw + i];
  });
}

/// Nearest-neighbour 2x upsampling.
template <class S>
Var<S> upsample2x(const Var<S>& x) {
  const Shape s = x->shape;
  const Shape so{s.n, s.c, 2 * s.h, 2 * s.w};
  std::vector<S> v(so.size());
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int r = 0; r < so.h; ++r)
      for (int c = 0; c < so.w; ++c)
        v[(nc * so.h + r) * so.w + c] = x->value[(nc * s.h + r / 2) * s.w + c / 2];
  return detail::make_result<S>(so, std::move(v), {x}, [x, s, so](Node<S>& o) {
    for (int nc = 0; nc < s.n * s.c; ++nc)
      for (int r = 0; r < so.h; ++r)
        for (int c = 0; c < so.w; ++c) x->grad[(nc * s.h + r / 2) * s.w + c / 2] += o.grad[(nc * so.h + r) * so.w + c];
  });
}

// ---------------------------------------------------------------------------
// dense / convolution
// ---------------------------------------------------------------------------

/// y = x W^T + b for x of shape (n, in), W (out, in), b (out).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& W, const Var<S>& b) {
  const int n = x->shape.n, in = static_cast<int>(x->shape.size() / n), out = W->shape.n;
  if (static_cast<int>(W->shape.size()) != out * in || static_cast<int>(b->shape.size()) != out)
    throw ConfigError("linear: weight shape mismatch");
  std::vector<S> v(static_cast<std::size_t>(n) * out);
  detail::MapM<S> Y(v.data(), n, out);
  detail::CMapM<S> X(x->value.data(), n, in), Wm(W->value.data(), out, in);
  Y.noalias() = X * Wm.transpose();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < out; ++j) Y(i, j) += b->value[j];
  return detail::make_result<S>(Shape{n, out, 1, 1}, std::move(v), {x, W, b}, [x, W, b, n, in, out](Node<S>& o) {
    detail::CMapM<S> G(o.grad.data(), n, out);
    if (x->requires_grad) {
      detail::MapM<S> GX(x->grad.data(), n, in);
      GX.noalias() += G * detail::CMapM<S>(W->value.data(), out, in);
    }
    if (W->requires_grad) {
      detail::MapM<S> GW(W->grad.data(), out, in);
      GW.noalias() += G.transpose() * detail::CMapM<S>(x->value.data(), n, in);
    }
    if (b->requires_grad)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < out; ++j) b->grad[j] += G(i, j);
  });
}

namespace detail {

template <class S>
void im2col(const S* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, S* cols) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, wo, S(0));
            continue;
          }
          const S* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
          }
        }
      }
}

template <class S>
void col2im(const S* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, S* x) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const S* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2D convolution with square kernel W (co, ci, k, k), zero padding.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& W, const Var<S>& b, int stride = 1, int pad = -1) {
  const Shape s = x->shape;
  const int co = W->shape.n, ci = W->shape.c, k = W->shape.h;
  if (ci != s.c || W->shape.w != k) throw ConfigError("conv2d: weight shape does not match input channels");
  if (pad < 0) pad = k / 2;
  const int ho = (s.h + 2 * pad - k) / stride + 1, wo = (s.w + 2 * pad - k) / stride + 1;
  const Shape so{s.n, co, ho, wo};
  const int K = ci * k * k, P = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  std::vector<S> v(so.size());
  std::vector<S> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
  detail::CMapM<S> Wm(W->value.data(), co, K);
  for (int n = 0; n < s.n; ++n) {
    const S* xn = x->value.data() + n * s.c * s.plane();
    if (!pointwise) detail::im2col(xn, ci, s.h, s.w, k, stride, pad, ho, wo, cols.data());
    detail::CMapM<S> C(pointwise ? xn : cols.data(), K, P);
    detail::MapM<S> Y(v.data() + static_cast<std::size_t>(n) * co * P, co, P);
    Y.noalias() = Wm * C;
    for (int o = 0; o < co; ++o) Y.row(o).array() += b->value[o];
  }
  return detail::make_result<S>(so, std::move(v), {x, W, b}, [x, W, b, s, co, ci, k, stride, pad, ho, wo, K, P,
                                                              pointwise](Node<S>& o) {
    std::vector<S> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
    std::vector<S> dcols(static_cast<std::size_t>(K) * P);
    detail::CMapM<S> Wm(W->value.data(), co, K);
    for (int n = 0; n < s.n; ++n) {
      detail::CMapM<S> G(o.grad.data() + static_cast<std::size_t>(n) * co * P, co, P);
      const S* xn = x->value.data() + n * s.c * s.plane();
      if (W->requires_grad) {
        if (!pointwise) detail::im2col(xn, ci, s.h, s.w, k, stride, pad, ho, wo, cols.data());
        detail::CMapM<S> C(pointwise ? xn : cols.data(), K, P);
        detail::MapM<S> GW(W->grad.data(), co, K);
        GW.noalias() += G * C.transpose();
      }
      if (b->requires_grad)
        for (int oc = 0; oc < co; ++oc) b->grad[oc] += G.row(oc).sum();
      if (x->requires_grad) {
        S* gx = x->grad.data() + n * s.c * s.plane();
        if (pointwise) {
          detail::MapM<S> GX(gx, K, P);
          GX.noalias() += Wm.transpose() * G;
        } else {
          detail::MapM<S> DC(dcols.data(), K, P);
          DC.noalias() = Wm.transpose() * G;
          detail::col2im(dcols.data(), ci, s.h, s.w, k, stride, pad, ho, wo, gx);
        }
      }
    }
  });
}

/// Group normalisation with per-channel affine (gamma, beta of length c).
template <class S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps = S(1e-5)) {
  const Shape s = x->shape;
  if (s.c % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
  const int cg = s.c / groups;
  const std::size_t hw = s.plane(), m = cg * hw;
  std::vector<S> xhat(s.size()), v(s.size()), inv(static_cast<std::size_t>(s.n) * groups);
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + g * cg) * hw;
      S mean = 0, var = 0;
      for (std::size_t i = 0; i < m; ++i) mean += x->value[off + i];
      mean /= S(m);
      for (std::size_t i = 0; i < m; ++i) var += (x->value[off + i] - mean) * (x->value[off + i] - mean);
      var /= S(m);
      const S is = S(1) / std::sqrt(var + eps);
      inv[n * groups + g] = is;
      for (std::size_t i = 0; i < m; ++i) {
        const int c = g * cg + static_cast<int>(i / hw);
        xhat[off + i] = (x->value[off + i] - mean) * is;
        v[off + i] = xhat[off + i] * gamma->value[c] + beta->value[c];
      }
    }
  return detail::make_result<S>(
      s, std::move(v), {x, gamma, beta},
      [x, gamma, beta, s, groups, cg, hw, m, xhat = std::move(xhat), inv = std::move(inv)](Node<S>& o) {
        for (int n = 0; n < s.n; ++n)
          for (int g = 0; g < groups; ++g) {
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + g * cg) * hw;
            S sum_d = 0, sum_dx = 0;
            for (std::size_t i = 0; i < m; ++i) {
              const int c = g * cg + static_cast<int>(i / hw);
              const S gy = o.grad[off + i];
              if (gamma->requires_grad) gamma->grad[c] += gy * xhat[off + i];
              if (beta->requires_grad) beta->grad[c] += gy;
              const S d = gy * gamma->value[c];
              sum_d += d;
              sum_dx += d * xhat[off + i];
            }
            if (!x->requires_grad) continue;
            const S is = inv[n * groups + g];
            for (std::size_t i = 0; i < m; ++i) {
              const int c = g * cg + static_cast<int>(i / hw);
              const S d = o.grad[off + i] * gamma->value[c];
              x->grad[off + i] += is * (d - sum_d / S(m) - xhat[off + i] * sum_dx / S(m));
            }
          }
      });
}

/// Single-head spatial self-attention core on q, k, v of shape (n, c, h, w):
/// out[:, p] = sum_j softmax_j(q_p . k_j / sqrt(c)) v[:, j].
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
  const Shape s = q->shape;
  if (!(k->shape == s) || !(v->shape == s)) throw ConfigError("attention: q, k, v shapes differ");
  const int c = s.c, P = static_cast<int>(s.plane());
  const S scale = S(1) / std::sqrt(S(c));
  std::vector<S> out(s.size()), probs(static_cast<std::size_t>(s.n) * P * P);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * c * P;
    detail::CMapM<S> Q(q->value.data() + off, c, P), K(k->value.data() + off, c, P), V(v->value.data() + off, c, P);
    detail::MapM<S> A(probs.data() + static_cast<std::size_t>(n) * P * P, P, P);  // A(p, j)
    A.noalias() = (Q.transpose() * K) * scale;
    for (int p = 0; p < P; ++p) {
      const S mx = A.row(p).maxCoeff();
      A.row(p) = (A.row(p).array() - mx).exp();
      A.row(p) /= A.row(p).sum();
    }
    detail::MapM<S> O(out.data() + off, c, P);
    O.noalias() = V * A.transpose();
  }
  return detail::make_result<S>(s, std::move(out), {q, k, v}, [q, k, v, s, c, P, scale,
                                                              probs = std::move(probs)](Node<S>& o) {
    detail::Mat<S> dA(P, P);
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = static_cast<std::size_t>(n) * c * P;
      detail::CMapM<S> Q(q->value.data() + off, c, P), K(k->value.data() + off, c, P), V(v->value.data() + off, c, P);
      detail::CMapM<S> A(probs.data() + static_cast<std::size_t>(n) * P * P, P, P);
      detail::CMapM<S> G(o.grad.data() + off, c, P);
      if (v->requires_grad) detail::MapM<S>(v->grad.data() + off, c, P).noalias() += G * A;
      dA.noalias() = G.transpose() * V;  // dA(p, j) = sum_c G(c, p) V(c, j)
      for (int p = 0; p < P; ++p) {
        const S dot = (dA.row(p).array() * A.row(p).array()).sum();
        dA.row(p) = (A.row(p).array() * (dA.row(p).array() - dot)) * scale;
      }
      if (q->requires_grad) detail::MapM<S>(q->grad.data() + off, c, P).noalias() += K * dA.transpose();
      if (k->requires_grad) detail::MapM<S>(k->grad.data() + off, c, P).noalias() += Q * dA;
    }
  });
}

// ---------------------------------------------------------------------------
// losses (scalar outputs)
// ---------------------------------------------------------------------------

/// Mean absolute error over all elements.
template <class S>
Var<S> l1_loss(const Var<S>& pred, const Var<S>& target) {
  if (!(pred->shape == target->shape)) throw ConfigError("l1_loss: shape mismatch");
  const std::size_t n = pred->value.size();
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(pred->value[i] - target->value[i]);
  return detail::make_result<S>(Shape{}, {acc / S(n)}, {pred, target}, [pred, target, n](Node<S>& o) {
    const S g = o.grad[0] / S(n);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = pred->value[i] - target->value[i];
      const S sg = d > 0 ? g : (d < 0 ? -g : S(0));
      if (pred->requires_grad) pred->grad[i] += sg;
      if (target->requires_grad) target->grad[i] -= sg;
    }
  });
}

/// Mean squared error over all elements.
template <class S>
Var<S> mse_loss(const Var<S>& pred, const Var<S>& target) {
  if (!(pred->shape == target->shape)) throw ConfigError("mse_loss: shape mismatch");
  const std::size_t n = pred->value.size();
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += (pred->value[i] - target->value[i]) * (pred->value[i] - target->value[i]);
  return detail::make_result<S>(Shape{}, {acc / S(n)}, {pred, target}, [pred, target, n](Node<S>& o) {
    const S g = S(2) * o.grad[0] / S(n);
    for (std::size_t i = 0; i < n; ++i) {
      const S d = g * (pred->value[i] - target->value[i]);
      if (pred->requires_grad) pred->grad[i] += d;
      if (target->requires_grad) target->grad[i] -= d;
    }
  });
}

}  // namespace pcct::nn
