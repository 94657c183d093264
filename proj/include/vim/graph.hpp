#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vim/tensor.hpp"

namespace vim {

// Reverse-mode autodiff over dense tensors. A GraphT owns one forward
// pass: nodes are appended in evaluation order (so node ids are already a
// topological order) and backward() walks them in reverse. The tape for a
// single pass is single-threaded; independent graphs may live on
// independent threads.
template <typename T>
class GraphT;

template <typename T>
struct VarT {
  GraphT<T>* graph = nullptr;
  int32_t id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
};

using Var = VarT<float>;
using Var64 = VarT<double>;

template <typename T>
class GraphT {
 public:
  using Var = VarT<T>;

  GraphT() = default;
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  // ---- leaves ----

  Var value(TensorT<T> t) { return make_leaf(std::move(t), false); }

  Var param(TensorT<T> t) { return make_leaf(std::move(t), true); }

  // ---- accessors ----

  const Shape& shape(Var v) const { return node(v).shape; }

  const std::vector<T>& val(Var v) const { return node(v).value; }

  T scalar(Var v) const {
    if (node(v).value.size() != 1)
      throw ShapeError("scalar() on non-scalar node");
    return node(v).value[0];
  }

  // Gradient of the last backward() pass; zeros if the node never
  // received one.
  const std::vector<T>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) {
      static const std::vector<T> empty;
      grad_zero_.assign(n.value.size(), T(0));
      return n.grad.empty() ? grad_zero_ : empty;
    }
    return n.grad;
  }

  size_t num_nodes() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_shapes_match(shape(a), shape(b), "add");
    const auto& av = val(a);
    const auto& bv = val(b);
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return make_node(shape(a), std::move(out), {a.id, b.id},
                     [ai = a.id, bi = b.id](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(ai, [&](std::vector<T>& da) {
                         for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                       });
                       g.accumulate(bi, [&](std::vector<T>& db) {
                         for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
                       });
                     });
  }

  Var scale(Var a, T s) {
    const auto& av = val(a);
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
    return make_node(shape(a), std::move(out), {a.id},
                     [ai = a.id, s](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(ai, [&](std::vector<T>& da) {
                         for (size_t i = 0; i < dy.size(); ++i)
                           da[i] += dy[i] * s;
                       });
                     });
  }

  // x scaled by element `index` of the 1-D var `s`. This is how ensemble
  // weights and reparameterization coefficients enter the graph.
  Var scale_by(Var x, Var s, int64_t index) {
    if (shape(s).size() != 1 || index < 0 || index >= shape(s)[0])
      throw ShapeError("scale_by: bad scalar index");
    const auto& xv = val(x);
    T sv = val(s)[static_cast<size_t>(index)];
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
    return make_node(
        shape(x), std::move(out), {x.id, s.id},
        [xi = x.id, si = s.id, index](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          const auto& xv = g.nodes_[xi].value;
          T sv = g.nodes_[si].value[static_cast<size_t>(index)];
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * sv;
          });
          g.accumulate(si, [&](std::vector<T>& ds) {
            T acc = 0;
            for (size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
            ds[static_cast<size_t>(index)] += acc;
          });
        });
  }

  // Exact GELU, x * Phi(x) with the error-function form.
  Var gelu(Var x) {
    const auto& xv = val(x);
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = gelu_fwd(xv[i]);
    return make_node(shape(x), std::move(out), {x.id},
                     [xi = x.id](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       const auto& xv = g.nodes_[xi].value;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t i = 0; i < dy.size(); ++i)
                           dx[i] += dy[i] * gelu_bwd(xv[i]);
                       });
                     });
  }

  // Generic differentiable elementwise map with caller-supplied value and
  // derivative functions.
  Var apply_elementwise(Var x, std::function<T(T)> f, std::function<T(T)> df) {
    const auto& xv = val(x);
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_node(shape(x), std::move(out), {x.id},
                     [xi = x.id, df = std::move(df)](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       const auto& xv = g.nodes_[xi].value;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t i = 0; i < dy.size(); ++i)
                           dx[i] += dy[i] * df(xv[i]);
                       });
                     });
  }

  // ---- linear algebra ----

  // a (m,k) x b (k,n) -> (m,n)
  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(sa) +
                       " vs " + shape_str(sb));
    }
    int64_t m = sa[0], k = sa[1], n = sb[1];
    const auto& av = val(a);
    const auto& bv = val(b);
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t l = 0; l < k; ++l) {
        T av_il = av[static_cast<size_t>(i * k + l)];
        const T* brow = &bv[static_cast<size_t>(l * n)];
        T* orow = &out[static_cast<size_t>(i * n)];
        for (int64_t j = 0; j < n; ++j) orow[j] += av_il * brow[j];
      }
    }
    return make_node(
        {m, n}, std::move(out), {a.id, b.id},
        [ai = a.id, bi = b.id, m, k, n](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          const auto& av = g.nodes_[ai].value;
          const auto& bv = g.nodes_[bi].value;
          g.accumulate(ai, [&](std::vector<T>& da) {
            // da = dy (m,n) x b^T (n,k)
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t l = 0; l < k; ++l) {
                const T* dyrow = &dy[static_cast<size_t>(i * n)];
                const T* brow = &bv[static_cast<size_t>(l * n)];
                T acc = 0;
                for (int64_t j = 0; j < n; ++j) acc += dyrow[j] * brow[j];
                da[static_cast<size_t>(i * k + l)] += acc;
              }
            }
          });
          g.accumulate(bi, [&](std::vector<T>& db) {
            // db = a^T (k,m) x dy (m,n)
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t l = 0; l < k; ++l) {
                T av_il = av[static_cast<size_t>(i * k + l)];
                const T* dyrow = &dy[static_cast<size_t>(i * n)];
                T* dbrow = &db[static_cast<size_t>(l * n)];
                for (int64_t j = 0; j < n; ++j) dbrow[j] += av_il * dyrow[j];
              }
            }
          });
        });
  }

  // x (r,c) + bias (c), broadcast over rows.
  Var add_bias(Var x, Var b) {
    const Shape& sx = shape(x);
    const Shape& sb = shape(b);
    if (sx.size() != 2 || sb.size() != 1 || sx[1] != sb[0]) {
      throw ShapeError("add_bias: incompatible shapes " + shape_str(sx) +
                       " vs " + shape_str(sb));
    }
    int64_t r = sx[0], c = sx[1];
    const auto& xv = val(x);
    const auto& bv = val(b);
    std::vector<T> out(xv.size());
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        out[static_cast<size_t>(i * c + j)] =
            xv[static_cast<size_t>(i * c + j)] + bv[static_cast<size_t>(j)];
    return make_node(sx, std::move(out), {x.id, b.id},
                     [xi = x.id, bi = b.id, r, c](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                       });
                       g.accumulate(bi, [&](std::vector<T>& db) {
                         for (int64_t i = 0; i < r; ++i)
                           for (int64_t j = 0; j < c; ++j)
                             db[static_cast<size_t>(j)] +=
                                 dy[static_cast<size_t>(i * c + j)];
                       });
                     });
  }

  // ---- normalization / softmax ----

  // Layer normalization over the last dimension, with affine terms.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Shape& sx = shape(x);
    int64_t d = sx.back();
    if (shape(gamma) != Shape{d} || shape(beta) != Shape{d})
      throw ShapeError("layer_norm: affine shapes must be [" +
                       std::to_string(d) + "]");
    int64_t rows = numel(sx) / d;
    const auto& xv = val(x);
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    for (int64_t rIdx = 0; rIdx < rows; ++rIdx) {
      const T* row = &xv[static_cast<size_t>(rIdx * d)];
      T mean = 0;
      for (int64_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<T>(d);
      T var = 0;
      for (int64_t j = 0; j < d; ++j) {
        T c = row[j] - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(rIdx)] = is;
      for (int64_t j = 0; j < d; ++j) {
        size_t idx = static_cast<size_t>(rIdx * d + j);
        xhat[idx] = (row[j] - mean) * is;
        out[idx] = gv[static_cast<size_t>(j)] * xhat[idx] +
                   bv[static_cast<size_t>(j)];
      }
    }
    return make_node(
        sx, std::move(out), {x.id, gamma.id, beta.id},
        [xi = x.id, gi = gamma.id, bi = beta.id, rows, d,
         xhat = std::move(xhat),
         inv_std = std::move(inv_std)](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          const auto& gv = g.nodes_[gi].value;
          g.accumulate(bi, [&](std::vector<T>& db) {
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j)
                db[static_cast<size_t>(j)] += dy[static_cast<size_t>(r * d + j)];
          });
          g.accumulate(gi, [&](std::vector<T>& dg) {
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j) {
                size_t idx = static_cast<size_t>(r * d + j);
                dg[static_cast<size_t>(j)] += dy[idx] * xhat[idx];
              }
          });
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t r = 0; r < rows; ++r) {
              T mean_dxhat = 0, mean_dxhat_xhat = 0;
              for (int64_t j = 0; j < d; ++j) {
                size_t idx = static_cast<size_t>(r * d + j);
                T dxh = dy[idx] * gv[static_cast<size_t>(j)];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat[idx];
              }
              mean_dxhat /= static_cast<T>(d);
              mean_dxhat_xhat /= static_cast<T>(d);
              T is = inv_std[static_cast<size_t>(r)];
              for (int64_t j = 0; j < d; ++j) {
                size_t idx = static_cast<size_t>(r * d + j);
                T dxh = dy[idx] * gv[static_cast<size_t>(j)];
                dx[idx] +=
                    is * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
              }
            }
          });
        });
  }

  // Row-wise softmax over the last dimension.
  Var softmax(Var x) {
    const Shape& sx = shape(x);
    int64_t d = sx.back();
    int64_t rows = numel(sx) / d;
    const auto& xv = val(x);
    std::vector<T> out(xv.size());
    softmax_rows(xv.data(), out.data(), rows, d);
    std::vector<T> saved = out;
    return make_node(
        sx, std::move(out), {x.id},
        [xi = x.id, rows, d, y = std::move(saved)](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t r = 0; r < rows; ++r) {
              T dot = 0;
              for (int64_t j = 0; j < d; ++j) {
                size_t idx = static_cast<size_t>(r * d + j);
                dot += dy[idx] * y[idx];
              }
              for (int64_t j = 0; j < d; ++j) {
                size_t idx = static_cast<size_t>(r * d + j);
                dx[idx] += y[idx] * (dy[idx] - dot);
              }
            }
          });
        });
  }

  // Scaled dot-product attention over already-projected q/k/v laid out as
  // (batch*tokens, dim), with `heads` independent head slices.
  Var attention(Var q, Var k, Var v, int64_t batch, int64_t tokens,
                int64_t heads) {
    const Shape& sq = shape(q);
    check_shapes_match(sq, shape(k), "attention(q,k)");
    check_shapes_match(sq, shape(v), "attention(q,v)");
    if (sq.size() != 2 || sq[0] != batch * tokens || sq[1] % heads != 0)
      throw ShapeError("attention: bad q/k/v layout " + shape_str(sq));
    int64_t dim = sq[1];
    int64_t hd = dim / heads;
    T alpha = T(1) / std::sqrt(static_cast<T>(hd));
    const auto& qv = val(q);
    const auto& kv = val(k);
    const auto& vv = val(v);
    std::vector<T> out(qv.size(), T(0));
    // probs: (batch, heads, tokens, tokens), saved for backward
    std::vector<T> probs(
        static_cast<size_t>(batch * heads * tokens * tokens));
    std::vector<T> scores(static_cast<size_t>(tokens * tokens));
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t h = 0; h < heads; ++h) {
        int64_t off = h * hd;
        for (int64_t t = 0; t < tokens; ++t) {
          const T* qrow = &qv[static_cast<size_t>((b * tokens + t) * dim + off)];
          for (int64_t u = 0; u < tokens; ++u) {
            const T* krow =
                &kv[static_cast<size_t>((b * tokens + u) * dim + off)];
            T acc = 0;
            for (int64_t c = 0; c < hd; ++c) acc += qrow[c] * krow[c];
            scores[static_cast<size_t>(t * tokens + u)] = acc * alpha;
          }
        }
        T* p = &probs[static_cast<size_t>(((b * heads) + h) * tokens * tokens)];
        softmax_rows(scores.data(), p, tokens, tokens);
        for (int64_t t = 0; t < tokens; ++t) {
          T* orow = &out[static_cast<size_t>((b * tokens + t) * dim + off)];
          for (int64_t u = 0; u < tokens; ++u) {
            T pw = p[static_cast<size_t>(t * tokens + u)];
            const T* vrow =
                &vv[static_cast<size_t>((b * tokens + u) * dim + off)];
            for (int64_t c = 0; c < hd; ++c) orow[c] += pw * vrow[c];
          }
        }
      }
    }
    return make_node(
        sq, std::move(out), {q.id, k.id, v.id},
        [qi = q.id, ki = k.id, vi = v.id, batch, tokens, heads, dim, hd, alpha,
         probs = std::move(probs)](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          const auto& qv = g.nodes_[qi].value;
          const auto& kv = g.nodes_[ki].value;
          const auto& vv = g.nodes_[vi].value;
          std::vector<T> dq(qv.size(), T(0)), dk(kv.size(), T(0)),
              dv(vv.size(), T(0));
          std::vector<T> dp(static_cast<size_t>(tokens * tokens));
          std::vector<T> ds(static_cast<size_t>(tokens * tokens));
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
              int64_t off = h * hd;
              const T* p =
                  &probs[static_cast<size_t>(((b * heads) + h) * tokens * tokens)];
              // dv += P^T dO ; dp = dO V^T
              for (int64_t t = 0; t < tokens; ++t) {
                const T* dyrow =
                    &dy[static_cast<size_t>((b * tokens + t) * dim + off)];
                for (int64_t u = 0; u < tokens; ++u) {
                  T pw = p[static_cast<size_t>(t * tokens + u)];
                  T* dvrow =
                      &dv[static_cast<size_t>((b * tokens + u) * dim + off)];
                  const T* vrow =
                      &vv[static_cast<size_t>((b * tokens + u) * dim + off)];
                  T acc = 0;
                  for (int64_t c = 0; c < hd; ++c) {
                    dvrow[c] += pw * dyrow[c];
                    acc += dyrow[c] * vrow[c];
                  }
                  dp[static_cast<size_t>(t * tokens + u)] = acc;
                }
              }
              // softmax backward rows: ds = p * (dp - rowdot)
              for (int64_t t = 0; t < tokens; ++t) {
                T dot = 0;
                for (int64_t u = 0; u < tokens; ++u) {
                  size_t idx = static_cast<size_t>(t * tokens + u);
                  dot += dp[idx] * p[idx];
                }
                for (int64_t u = 0; u < tokens; ++u) {
                  size_t idx = static_cast<size_t>(t * tokens + u);
                  ds[idx] = p[idx] * (dp[idx] - dot) * alpha;
                }
              }
              // dq += ds K ; dk += ds^T Q
              for (int64_t t = 0; t < tokens; ++t) {
                T* dqrow =
                    &dq[static_cast<size_t>((b * tokens + t) * dim + off)];
                const T* qrow =
                    &qv[static_cast<size_t>((b * tokens + t) * dim + off)];
                for (int64_t u = 0; u < tokens; ++u) {
                  T dsv = ds[static_cast<size_t>(t * tokens + u)];
                  const T* krow =
                      &kv[static_cast<size_t>((b * tokens + u) * dim + off)];
                  T* dkrow =
                      &dk[static_cast<size_t>((b * tokens + u) * dim + off)];
                  for (int64_t c = 0; c < hd; ++c) {
                    dqrow[c] += dsv * krow[c];
                    dkrow[c] += dsv * qrow[c];
                  }
                }
              }
            }
          }
          g.accumulate(qi, [&](std::vector<T>& acc) {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += dq[i];
          });
          g.accumulate(ki, [&](std::vector<T>& acc) {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += dk[i];
          });
          g.accumulate(vi, [&](std::vector<T>& acc) {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += dv[i];
          });
        });
  }

  // ---- convolution ----

  // x (B,C,H,W) * w (O,C,kh,kw) + b (O), zero padding.
  Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
      throw ShapeError("conv2d: incompatible shapes " + shape_str(sx) +
                       " vs " + shape_str(sw));
    int64_t B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    int64_t O = sw[0], kh = sw[2], kw = sw[3];
    if (shape(b) != Shape{O}) throw ShapeError("conv2d: bias must be [O]");
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output");
    const auto& xv = val(x);
    const auto& wv = val(w);
    const auto& bv = val(b);
    std::vector<T> out(static_cast<size_t>(B * O * Ho * Wo));
    for (int64_t bb = 0; bb < B; ++bb) {
      for (int64_t o = 0; o < O; ++o) {
        for (int64_t ho = 0; ho < Ho; ++ho) {
          for (int64_t wo = 0; wo < Wo; ++wo) {
            T acc = bv[static_cast<size_t>(o)];
            for (int64_t c = 0; c < C; ++c) {
              for (int64_t i = 0; i < kh; ++i) {
                int64_t hi = ho * stride - pad + i;
                if (hi < 0 || hi >= H) continue;
                for (int64_t j = 0; j < kw; ++j) {
                  int64_t wi = wo * stride - pad + j;
                  if (wi < 0 || wi >= W) continue;
                  acc += xv[static_cast<size_t>(((bb * C + c) * H + hi) * W +
                                                wi)] *
                         wv[static_cast<size_t>(((o * C + c) * kh + i) * kw +
                                                j)];
                }
              }
            }
            out[static_cast<size_t>(((bb * O + o) * Ho + ho) * Wo + wo)] = acc;
          }
        }
      }
    }
    return make_node(
        {B, O, Ho, Wo}, std::move(out), {x.id, w.id, b.id},
        [xi = x.id, wi = w.id, bi = b.id, B, C, H, W, O, kh, kw, Ho, Wo,
         stride, pad](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          const auto& xv = g.nodes_[xi].value;
          const auto& wv = g.nodes_[wi].value;
          g.accumulate(bi, [&](std::vector<T>& db) {
            for (int64_t bb = 0; bb < B; ++bb)
              for (int64_t o = 0; o < O; ++o) {
                T acc = 0;
                const T* d =
                    &dy[static_cast<size_t>((bb * O + o) * Ho * Wo)];
                for (int64_t p = 0; p < Ho * Wo; ++p) acc += d[p];
                db[static_cast<size_t>(o)] += acc;
              }
          });
          g.accumulate(wi, [&](std::vector<T>& dw) {
            for (int64_t bb = 0; bb < B; ++bb)
              for (int64_t o = 0; o < O; ++o)
                for (int64_t ho = 0; ho < Ho; ++ho)
                  for (int64_t wo = 0; wo < Wo; ++wo) {
                    T d = dy[static_cast<size_t>(((bb * O + o) * Ho + ho) * Wo +
                                                 wo)];
                    for (int64_t c = 0; c < C; ++c)
                      for (int64_t i = 0; i < kh; ++i) {
                        int64_t hi = ho * stride - pad + i;
                        if (hi < 0 || hi >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                          int64_t wi2 = wo * stride - pad + j;
                          if (wi2 < 0 || wi2 >= W) continue;
                          dw[static_cast<size_t>(((o * C + c) * kh + i) * kw +
                                                 j)] +=
                              d * xv[static_cast<size_t>(
                                      ((bb * C + c) * H + hi) * W + wi2)];
                        }
                      }
                  }
          });
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t bb = 0; bb < B; ++bb)
              for (int64_t o = 0; o < O; ++o)
                for (int64_t ho = 0; ho < Ho; ++ho)
                  for (int64_t wo = 0; wo < Wo; ++wo) {
                    T d = dy[static_cast<size_t>(((bb * O + o) * Ho + ho) * Wo +
                                                 wo)];
                    for (int64_t c = 0; c < C; ++c)
                      for (int64_t i = 0; i < kh; ++i) {
                        int64_t hi = ho * stride - pad + i;
                        if (hi < 0 || hi >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                          int64_t wi2 = wo * stride - pad + j;
                          if (wi2 < 0 || wi2 >= W) continue;
                          dx[static_cast<size_t>(((bb * C + c) * H + hi) * W +
                                                 wi2)] +=
                              d * wv[static_cast<size_t>(
                                      ((o * C + c) * kh + i) * kw + j)];
                        }
                      }
                  }
          });
        });
  }

  // ---- losses ----

  // Mean cross entropy; logits (rows, classes), integer labels per row.
  Var cross_entropy(Var logits, const std::vector<int>& labels) {
    const Shape& s = shape(logits);
    if (s.size() != 2 || static_cast<size_t>(s[0]) != labels.size())
      throw ShapeError("cross_entropy: logits " + shape_str(s) + " vs " +
                       std::to_string(labels.size()) + " labels");
    int64_t rows = s[0], classes = s[1];
    const auto& lv = val(logits);
    std::vector<T> probs(lv.size());
    softmax_rows(lv.data(), probs.data(), rows, classes);
    T loss = 0;
    for (int64_t r = 0; r < rows; ++r) {
      int y = labels[static_cast<size_t>(r)];
      if (y < 0 || y >= classes)
        throw ShapeError("cross_entropy: label out of range");
      T p = probs[static_cast<size_t>(r * classes + y)];
      loss -= std::log(std::max(p, std::numeric_limits<T>::min()));
    }
    loss /= static_cast<T>(rows);
    return make_node(
        {1}, {loss}, {logits.id},
        [li = logits.id, labels, rows, classes,
         probs = std::move(probs)](GraphT& g, int self) {
          T d = g.nodes_[self].grad[0] / static_cast<T>(rows);
          g.accumulate(li, [&](std::vector<T>& dl) {
            for (int64_t r = 0; r < rows; ++r) {
              int y = labels[static_cast<size_t>(r)];
              for (int64_t c = 0; c < classes; ++c) {
                size_t idx = static_cast<size_t>(r * classes + c);
                dl[idx] += d * (probs[idx] - (c == y ? T(1) : T(0)));
              }
            }
          });
        });
  }

  // Mean squared error against a constant target.
  Var mse(Var pred, const TensorT<T>& target) {
    check_shapes_match(shape(pred), target.shape, "mse");
    const auto& pv = val(pred);
    T n = static_cast<T>(pv.size());
    T loss = 0;
    for (size_t i = 0; i < pv.size(); ++i) {
      T diff = pv[i] - target.data[i];
      loss += diff * diff;
    }
    loss /= n;
    return make_node({1}, {loss}, {pred.id},
                     [pi = pred.id, target, n](GraphT& g, int self) {
                       T d = g.nodes_[self].grad[0];
                       const auto& pv = g.nodes_[pi].value;
                       g.accumulate(pi, [&](std::vector<T>& dp) {
                         for (size_t i = 0; i < pv.size(); ++i)
                           dp[i] += d * T(2) * (pv[i] - target.data[i]) / n;
                       });
                     });
  }

  // ---- data movement ----

  Var reshape(Var x, Shape new_shape) {
    if (numel(new_shape) != numel(shape(x)))
      throw ShapeError("reshape: numel mismatch " + shape_str(shape(x)) +
                       " -> " + shape_str(new_shape));
    std::vector<T> out = val(x);
    return make_node(std::move(new_shape), std::move(out), {x.id},
                     [xi = x.id](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                       });
                     });
  }

  // Gather elements of a 1-D tensor; gradient scatters back.
  Var gather(Var x, std::vector<int64_t> indices) {
    const Shape& s = shape(x);
    if (s.size() != 1) throw ShapeError("gather: 1-D input required");
    const auto& xv = val(x);
    std::vector<T> out(indices.size());
    for (size_t j = 0; j < indices.size(); ++j) {
      int64_t i = indices[j];
      if (i < 0 || i >= s[0]) throw ShapeError("gather: index out of range");
      out[j] = xv[static_cast<size_t>(i)];
    }
    return make_node({static_cast<int64_t>(indices.size())}, std::move(out),
                     {x.id},
                     [xi = x.id, indices = std::move(indices)](GraphT& g,
                                                               int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t j = 0; j < indices.size(); ++j)
                           dx[static_cast<size_t>(indices[j])] += dy[j];
                       });
                     });
  }

  // Column slice of a 2-D tensor: x (r,c) -> (r,len) starting at `start`.
  Var slice_cols(Var x, int64_t start, int64_t len) {
    const Shape& s = shape(x);
    if (s.size() != 2 || start < 0 || start + len > s[1])
      throw ShapeError("slice_cols: bad range");
    int64_t r = s[0], c = s[1];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(r * len));
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < len; ++j)
        out[static_cast<size_t>(i * len + j)] =
            xv[static_cast<size_t>(i * c + start + j)];
    return make_node({r, len}, std::move(out), {x.id},
                     [xi = x.id, start, len, r, c](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (int64_t i = 0; i < r; ++i)
                           for (int64_t j = 0; j < len; ++j)
                             dx[static_cast<size_t>(i * c + start + j)] +=
                                 dy[static_cast<size_t>(i * len + j)];
                       });
                     });
  }

  // Token-range slice: x (B,N,d) -> (B,len,d).
  Var slice_tokens(Var x, int64_t start, int64_t len) {
    const Shape& s = shape(x);
    if (s.size() != 3 || start < 0 || start + len > s[1])
      throw ShapeError("slice_tokens: bad range");
    int64_t B = s[0], N = s[1], d = s[2];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(B * len * d));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < len; ++t)
        for (int64_t j = 0; j < d; ++j)
          out[static_cast<size_t>((b * len + t) * d + j)] =
              xv[static_cast<size_t>((b * N + start + t) * d + j)];
    return make_node(
        {B, len, d}, std::move(out), {x.id},
        [xi = x.id, start, len, B, N, d](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t b = 0; b < B; ++b)
              for (int64_t t = 0; t < len; ++t)
                for (int64_t j = 0; j < d; ++j)
                  dx[static_cast<size_t>((b * N + start + t) * d + j)] +=
                      dy[static_cast<size_t>((b * len + t) * d + j)];
          });
        });
  }

  // Concatenate along the token axis: (B,n1,d) + (B,n2,d) -> (B,n1+n2,d).
  Var concat_tokens(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
      throw ShapeError("concat_tokens: incompatible shapes " + shape_str(sa) +
                       " vs " + shape_str(sb));
    int64_t B = sa[0], n1 = sa[1], n2 = sb[1], d = sa[2];
    const auto& av = val(a);
    const auto& bv = val(b);
    std::vector<T> out(static_cast<size_t>(B * (n1 + n2) * d));
    for (int64_t bb = 0; bb < B; ++bb) {
      for (int64_t t = 0; t < n1; ++t)
        for (int64_t j = 0; j < d; ++j)
          out[static_cast<size_t>((bb * (n1 + n2) + t) * d + j)] =
              av[static_cast<size_t>((bb * n1 + t) * d + j)];
      for (int64_t t = 0; t < n2; ++t)
        for (int64_t j = 0; j < d; ++j)
          out[static_cast<size_t>((bb * (n1 + n2) + n1 + t) * d + j)] =
              bv[static_cast<size_t>((bb * n2 + t) * d + j)];
    }
    return make_node(
        {B, n1 + n2, d}, std::move(out), {a.id, b.id},
        [ai = a.id, bi = b.id, B, n1, n2, d](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          g.accumulate(ai, [&](std::vector<T>& da) {
            for (int64_t bb = 0; bb < B; ++bb)
              for (int64_t t = 0; t < n1; ++t)
                for (int64_t j = 0; j < d; ++j)
                  da[static_cast<size_t>((bb * n1 + t) * d + j)] +=
                      dy[static_cast<size_t>((bb * (n1 + n2) + t) * d + j)];
          });
          g.accumulate(bi, [&](std::vector<T>& db) {
            for (int64_t bb = 0; bb < B; ++bb)
              for (int64_t t = 0; t < n2; ++t)
                for (int64_t j = 0; j < d; ++j)
                  db[static_cast<size_t>((bb * n2 + t) * d + j)] +=
                      dy[static_cast<size_t>((bb * (n1 + n2) + n1 + t) * d +
                                             j)];
          });
        });
  }

  // (B,HW,d) tokens -> (B,d,H,W) grid.
  Var tokens_to_grid(Var x, int64_t H, int64_t W) {
    const Shape& s = shape(x);
    if (s.size() != 3 || s[1] != H * W)
      throw ShapeError("tokens_to_grid: " + shape_str(s) + " vs grid " +
                       std::to_string(H) + "x" + std::to_string(W));
    int64_t B = s[0], d = s[2];
    const auto& xv = val(x);
    std::vector<T> out(xv.size());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < H * W; ++t)
        for (int64_t c = 0; c < d; ++c)
          out[static_cast<size_t>((b * d + c) * H * W + t)] =
              xv[static_cast<size_t>((b * H * W + t) * d + c)];
    return make_node(
        {B, d, H, W}, std::move(out), {x.id},
        [xi = x.id, B, d, HW = H * W](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t b = 0; b < B; ++b)
              for (int64_t t = 0; t < HW; ++t)
                for (int64_t c = 0; c < d; ++c)
                  dx[static_cast<size_t>((b * HW + t) * d + c)] +=
                      dy[static_cast<size_t>((b * d + c) * HW + t)];
          });
        });
  }

  // (B,d,H,W) grid -> (B,HW,d) tokens.
  Var grid_to_tokens(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 4) throw ShapeError("grid_to_tokens: 4-D input required");
    int64_t B = s[0], d = s[1], HW = s[2] * s[3];
    const auto& xv = val(x);
    std::vector<T> out(xv.size());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < d; ++c)
        for (int64_t t = 0; t < HW; ++t)
          out[static_cast<size_t>((b * HW + t) * d + c)] =
              xv[static_cast<size_t>((b * d + c) * HW + t)];
    return make_node(
        {B, HW, d}, std::move(out), {x.id},
        [xi = x.id, B, d, HW](GraphT& g, int self) {
          const auto& dy = g.nodes_[self].grad;
          g.accumulate(xi, [&](std::vector<T>& dx) {
            for (int64_t b = 0; b < B; ++b)
              for (int64_t c = 0; c < d; ++c)
                for (int64_t t = 0; t < HW; ++t)
                  dx[static_cast<size_t>((b * d + c) * HW + t)] +=
                      dy[static_cast<size_t>((b * HW + t) * d + c)];
          });
        });
  }

  // Single token: x (B,N,d) -> (B,d).
  Var select_token(Var x, int64_t index) {
    const Shape& s = shape(x);
    if (s.size() != 3 || index < 0 || index >= s[1])
      throw ShapeError("select_token: bad index");
    int64_t B = s[0], N = s[1], d = s[2];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(B * d));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(b * d + j)] =
            xv[static_cast<size_t>((b * N + index) * d + j)];
    return make_node({B, d}, std::move(out), {x.id},
                     [xi = x.id, index, B, N, d](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (int64_t b = 0; b < B; ++b)
                           for (int64_t j = 0; j < d; ++j)
                             dx[static_cast<size_t>((b * N + index) * d + j)] +=
                                 dy[static_cast<size_t>(b * d + j)];
                       });
                     });
  }

  // Mean over the token axis: x (B,N,d) -> (B,d).
  Var mean_tokens(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 3) throw ShapeError("mean_tokens: 3-D input required");
    int64_t B = s[0], N = s[1], d = s[2];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(B * d), T(0));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < N; ++t)
        for (int64_t j = 0; j < d; ++j)
          out[static_cast<size_t>(b * d + j)] +=
              xv[static_cast<size_t>((b * N + t) * d + j)];
    for (T& v : out) v /= static_cast<T>(N);
    return make_node({B, d}, std::move(out), {x.id},
                     [xi = x.id, B, N, d](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       T inv = T(1) / static_cast<T>(N);
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (int64_t b = 0; b < B; ++b)
                           for (int64_t t = 0; t < N; ++t)
                             for (int64_t j = 0; j < d; ++j)
                               dx[static_cast<size_t>((b * N + t) * d + j)] +=
                                   dy[static_cast<size_t>(b * d + j)] * inv;
                       });
                     });
  }

  // Mean over rows: x (R,C) -> (C).
  Var mean_rows(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 2) throw ShapeError("mean_rows: 2-D input required");
    int64_t R = s[0], C = s[1];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(C), T(0));
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c)
        out[static_cast<size_t>(c)] += xv[static_cast<size_t>(r * C + c)];
    for (T& v : out) v /= static_cast<T>(R);
    return make_node({C}, std::move(out), {x.id},
                     [xi = x.id, R, C](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       T inv = T(1) / static_cast<T>(R);
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (int64_t r = 0; r < R; ++r)
                           for (int64_t c = 0; c < C; ++c)
                             dx[static_cast<size_t>(r * C + c)] +=
                                 dy[static_cast<size_t>(c)] * inv;
                       });
                     });
  }

  // Broadcast a (d) vector to (B,1,d) tokens; gradient sums over batch.
  Var broadcast_token(Var x, int64_t batch) {
    const Shape& s = shape(x);
    if (s.size() != 1) throw ShapeError("broadcast_token: 1-D input required");
    int64_t d = s[0];
    const auto& xv = val(x);
    std::vector<T> out(static_cast<size_t>(batch * d));
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(b * d + j)] = xv[static_cast<size_t>(j)];
    return make_node({batch, 1, d}, std::move(out), {x.id},
                     [xi = x.id, batch, d](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (int64_t b = 0; b < batch; ++b)
                           for (int64_t j = 0; j < d; ++j)
                             dx[static_cast<size_t>(j)] +=
                                 dy[static_cast<size_t>(b * d + j)];
                       });
                     });
  }

  // x (B,N,d) + t (N,d) broadcast over batch (positional embeddings).
  Var add_tokens(Var x, Var t) {
    const Shape& sx = shape(x);
    const Shape& st = shape(t);
    if (sx.size() != 3 || st.size() != 2 || sx[1] != st[0] || sx[2] != st[1])
      throw ShapeError("add_tokens: incompatible shapes " + shape_str(sx) +
                       " vs " + shape_str(st));
    int64_t B = sx[0], N = sx[1], d = sx[2];
    const auto& xv = val(x);
    const auto& tv = val(t);
    std::vector<T> out(xv.size());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t j = 0; j < d; ++j)
          out[static_cast<size_t>((b * N + n) * d + j)] =
              xv[static_cast<size_t>((b * N + n) * d + j)] +
              tv[static_cast<size_t>(n * d + j)];
    return make_node(sx, std::move(out), {x.id, t.id},
                     [xi = x.id, ti = t.id, B, N, d](GraphT& g, int self) {
                       const auto& dy = g.nodes_[self].grad;
                       g.accumulate(xi, [&](std::vector<T>& dx) {
                         for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                       });
                       g.accumulate(ti, [&](std::vector<T>& dt) {
                         for (int64_t b = 0; b < B; ++b)
                           for (int64_t n = 0; n < N; ++n)
                             for (int64_t j = 0; j < d; ++j)
                               dt[static_cast<size_t>(n * d + j)] +=
                                   dy[static_cast<size_t>((b * N + n) * d + j)];
                       });
                     });
  }

  // ---- backward ----

  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.size() != 1)
      throw ShapeError("backward: loss must be scalar");
    for (Node& n : nodes_) {
      if (n.requires_grad)
        n.grad.assign(n.value.size(), T(0));
      else
        n.grad.clear();
    }
    if (!ln.requires_grad) return;  // nothing trainable feeds the loss
    ln.grad[0] = T(1);
    for (int32_t i = static_cast<int32_t>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || !n.backward_fn) continue;
      if (static_cast<size_t>(i) > static_cast<size_t>(loss.id)) continue;
      n.backward_fn(*this, i);
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void(GraphT&, int)> backward_fn;
  };

  Var make_leaf(TensorT<T> t, bool requires_grad) {
    t.validate();
    Node n;
    n.shape = std::move(t.shape);
    n.value = std::move(t.data);
    n.requires_grad = requires_grad || t.requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var make_node(Shape shape, std::vector<T> value,
                std::initializer_list<int32_t> parents,
                std::function<void(GraphT&, int)> backward_fn) {
    for (T v : value) {
      if (!std::isfinite(v))
        throw std::runtime_error("non-finite value produced by a primitive");
    }
    bool rg = false;
    for (int32_t p : parents) rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (v.graph != this) throw std::logic_error("var from another graph");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.graph != this) throw std::logic_error("var from another graph");
    return nodes_[static_cast<size_t>(v.id)];
  }

  template <typename F>
  void accumulate(int32_t id, F&& f) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    f(n.grad);
  }

  static void softmax_rows(const T* in, T* out, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = in + r * cols;
      T* y = out + r * cols;
      T mx = x[0];
      for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
      T sum = 0;
      for (int64_t j = 0; j < cols; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (int64_t j = 0; j < cols; ++j) y[j] /= sum;
    }
  }

  static T gelu_fwd(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
  }

  static T gelu_bwd(T x) {
    T phi_cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    T phi_pdf = std::exp(-x * x / T(2)) /
                std::sqrt(T(2) * T(3.14159265358979323846));
    return phi_cdf + x * phi_pdf;
  }

  std::vector<Node> nodes_;
  mutable std::vector<T> grad_zero_;

  friend struct VarT<T>;
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

}  // namespace vim
