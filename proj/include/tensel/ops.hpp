#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tensel/tape.hpp"

// Taped primitives. Each op computes its forward value, then pushes a node
// whose closure captures plain node indices (the index of the node being
// pushed equals tape.size() at call time). Backward closures accumulate with
// += so shared inputs collect contributions from every consumer.

namespace tensel {

template <typename S>
inline S sigmoid_stable(S x) {
  S y;
  if (x >= S(0)) {
    y = S(1) / (S(1) + std::exp(-x));
  } else {
    const S e = std::exp(x);
    y = e / (S(1) + e);
  }
  // keep the open-interval contract where rounding saturates; the ordered
  // comparisons let NaN pass through instead of being repaired
  if (y >= S(1)) y = std::nextafter(S(1), S(0));
  if (y <= S(0)) y = std::numeric_limits<S>::min();
  return y;
}

/// Numerically stable softmax of a plain vector (max-logit subtraction).
inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) throw ShapeError("softmax of empty vector");
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  Tensor<S> out(xv.dims());
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_stable(xv[i]);
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi](Tape<S>& tp) {
    const auto& y = tp.value(Var<S>{&tp, oi});
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    dx.array() += g.array() * y.array() * (S(1) - y.array());
  });
}

/// x * sigmoid(x); smooth nonlinearity used throughout the network heads.
template <typename S>
Var<S> silu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  Tensor<S> out(xv.dims());
  for (std::int64_t i = 0; i < xv.size(); ++i)
    out[i] = xv[i] * sigmoid_stable(xv[i]);
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi](Tape<S>& tp) {
    const auto& xval = tp.value(Var<S>{&tp, xi});
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (std::int64_t i = 0; i < xval.size(); ++i) {
      const S s = sigmoid_stable(xval[i]);
      dx[i] += g[i] * s * (S(1) + xval[i] * (S(1) - s));
    }
  });
}

template <typename S>
Var<S> clamp(Var<S> x, S lo, S hi) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  Tensor<S> out(xv.dims());
  // NaN propagates (both comparisons fail) instead of snapping to a bound
  for (std::int64_t i = 0; i < xv.size(); ++i)
    out[i] = xv[i] < lo ? lo : (xv[i] > hi ? hi : xv[i]);
  const int xi = x.idx, oi = static_cast<int>(t.size());
  // subgradient passes on the closed interval [lo,hi]
  return t.push(std::move(out), [xi, oi, lo, hi](Tape<S>& tp) {
    const auto& xval = tp.value(Var<S>{&tp, xi});
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (std::int64_t i = 0; i < xval.size(); ++i)
      if (xval[i] >= lo && xval[i] <= hi) dx[i] += g[i];
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(t.value(a).dims() == t.value(b).dims(),
          "add: dims mismatch " + t.value(a).dims().str() + " vs " +
              t.value(b).dims().str());
  Tensor<S> out(t.value(a).dims());
  out.array() = t.value(a).array() + t.value(b).array();
  const int ai = a.idx, bi = b.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [ai, bi, oi](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    tp.grad(Var<S>{&tp, ai}).array() += g.array();
    tp.grad(Var<S>{&tp, bi}).array() += g.array();
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(t.value(a).dims() == t.value(b).dims(),
          "sub: dims mismatch " + t.value(a).dims().str() + " vs " +
              t.value(b).dims().str());
  Tensor<S> out(t.value(a).dims());
  out.array() = t.value(a).array() - t.value(b).array();
  const int ai = a.idx, bi = b.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [ai, bi, oi](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    tp.grad(Var<S>{&tp, ai}).array() += g.array();
    tp.grad(Var<S>{&tp, bi}).array() -= g.array();
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(t.value(a).dims() == t.value(b).dims(),
          "mul: dims mismatch " + t.value(a).dims().str() + " vs " +
              t.value(b).dims().str());
  Tensor<S> out(t.value(a).dims());
  out.array() = t.value(a).array() * t.value(b).array();
  const int ai = a.idx, bi = b.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [ai, bi, oi](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    tp.grad(Var<S>{&tp, ai}).array() +=
        g.array() * tp.value(Var<S>{&tp, bi}).array();
    tp.grad(Var<S>{&tp, bi}).array() +=
        g.array() * tp.value(Var<S>{&tp, ai}).array();
  });
}

template <typename S>
Var<S> add_scalar(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(t.value(x).dims());
  out.array() = t.value(x).array() + c;
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi](Tape<S>& tp) {
    tp.grad(Var<S>{&tp, xi}).array() += tp.grad(Var<S>{&tp, oi}).array();
  });
}

template <typename S>
Var<S> mul_scalar(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(t.value(x).dims());
  out.array() = t.value(x).array() * c;
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, c](Tape<S>& tp) {
    tp.grad(Var<S>{&tp, xi}).array() += tp.grad(Var<S>{&tp, oi}).array() * c;
  });
}

/// out = x * s where s is a (1,1,1,1) tape scalar; gradients flow to both.
template <typename S>
Var<S> scale(Var<S> x, Var<S> s) {
  Tape<S>& t = *x.tape;
  require(t.value(s).size() == 1,
          "scale: scalar operand must be (1,1,1,1), got " +
              t.value(s).dims().str());
  const S sv = t.value(s).item();
  Tensor<S> out(t.value(x).dims());
  out.array() = t.value(x).array() * sv;
  const int xi = x.idx, si = s.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, si, oi, sv](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    tp.grad(Var<S>{&tp, xi}).array() += g.array() * sv;
    tp.grad(Var<S>{&tp, si})[0] +=
        (g.array() * tp.value(Var<S>{&tp, xi}).array()).sum();
  });
}

/// out = x / s for a (1,1,1,1) tape scalar s.
template <typename S>
Var<S> div_by(Var<S> x, Var<S> s) {
  Tape<S>& t = *x.tape;
  require(t.value(s).size() == 1,
          "div_by: scalar operand must be (1,1,1,1), got " +
              t.value(s).dims().str());
  const S sv = t.value(s).item();
  Tensor<S> out(t.value(x).dims());
  out.array() = t.value(x).array() / sv;
  const int xi = x.idx, si = s.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, si, oi, sv](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    const auto& y = tp.value(Var<S>{&tp, oi});
    tp.grad(Var<S>{&tp, xi}).array() += g.array() / sv;
    tp.grad(Var<S>{&tp, si})[0] -= (g.array() * y.array()).sum() / sv;
  });
}

/// Broadcast-multiply a (N,C,H,W) tensor by a (N,1,H,W) map.
template <typename S>
Var<S> scale_by_map(Var<S> x, Var<S> m) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims(), md = t.value(m).dims();
  require(md.c == 1 && md.n == xd.n && md.h == xd.h && md.w == xd.w,
          "scale_by_map: map must be (N,1,H,W) matching " + xd.str() +
              ", got " + md.str());
  Tensor<S> out(xd);
  {
    const auto& xv = t.value(x);
    const auto& mv = t.value(m);
    for (int n = 0; n < xd.n; ++n)
      for (int c = 0; c < xd.c; ++c)
        for (int h = 0; h < xd.h; ++h)
          for (int w = 0; w < xd.w; ++w)
            out.at(n, c, h, w) = xv.at(n, c, h, w) * mv.at(n, 0, h, w);
  }
  const int xi = x.idx, mi = m.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, mi, oi, xd](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    const auto& xv = tp.value(Var<S>{&tp, xi});
    const auto& mv = tp.value(Var<S>{&tp, mi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    auto& dm = tp.grad(Var<S>{&tp, mi});
    for (int n = 0; n < xd.n; ++n)
      for (int c = 0; c < xd.c; ++c)
        for (int h = 0; h < xd.h; ++h)
          for (int w = 0; w < xd.w; ++w) {
            const S gv = g.at(n, c, h, w);
            dx.at(n, c, h, w) += gv * mv.at(n, 0, h, w);
            dm.at(n, 0, h, w) += gv * xv.at(n, c, h, w);
          }
  });
}

// ---------------------------------------------------------------------------
// structure: concat / slice / batch select
// ---------------------------------------------------------------------------

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Dims ad = t.value(a).dims(), bd = t.value(b).dims();
  require(ad.n == bd.n && ad.same_spatial(bd),
          "concat_channels: batch/spatial mismatch " + ad.str() + " vs " +
              bd.str());
  Tensor<S> out(Dims{ad.n, ad.c + bd.c, ad.h, ad.w});
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const std::int64_t plane = static_cast<std::int64_t>(ad.h) * ad.w;
  for (int n = 0; n < ad.n; ++n) {
    std::copy_n(av.data() + n * ad.c * plane, ad.c * plane,
                out.data() + static_cast<std::int64_t>(n) * (ad.c + bd.c) * plane);
    std::copy_n(bv.data() + n * bd.c * plane, bd.c * plane,
                out.data() + (static_cast<std::int64_t>(n) * (ad.c + bd.c) + ad.c) * plane);
  }
  const int ai = a.idx, bi = b.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [ai, bi, oi, ad, bd, plane](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& da = tp.grad(Var<S>{&tp, ai});
    auto& db = tp.grad(Var<S>{&tp, bi});
    const int cc = ad.c + bd.c;
    for (int n = 0; n < ad.n; ++n) {
      const S* gn = g.data() + static_cast<std::int64_t>(n) * cc * plane;
      S* dan = da.data() + static_cast<std::int64_t>(n) * ad.c * plane;
      S* dbn = db.data() + static_cast<std::int64_t>(n) * bd.c * plane;
      for (std::int64_t i = 0; i < ad.c * plane; ++i) dan[i] += gn[i];
      for (std::int64_t i = 0; i < bd.c * plane; ++i)
        dbn[i] += gn[ad.c * plane + i];
    }
  });
}

template <typename S>
Var<S> slice_channels(Var<S> x, int c0, int c1) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  require(0 <= c0 && c0 < c1 && c1 <= xd.c,
          "slice_channels: range [" + std::to_string(c0) + "," +
              std::to_string(c1) + ") out of " + xd.str());
  Tensor<S> out(Dims{xd.n, c1 - c0, xd.h, xd.w});
  const auto& xv = t.value(x);
  const std::int64_t plane = static_cast<std::int64_t>(xd.h) * xd.w;
  for (int n = 0; n < xd.n; ++n)
    std::copy_n(xv.data() + (static_cast<std::int64_t>(n) * xd.c + c0) * plane,
                (c1 - c0) * plane,
                out.data() + static_cast<std::int64_t>(n) * (c1 - c0) * plane);
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, xd, c0, c1, plane](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (int n = 0; n < xd.n; ++n) {
      const S* gn = g.data() + static_cast<std::int64_t>(n) * (c1 - c0) * plane;
      S* dxn = dx.data() + (static_cast<std::int64_t>(n) * xd.c + c0) * plane;
      for (std::int64_t i = 0; i < (c1 - c0) * plane; ++i) dxn[i] += gn[i];
    }
  });
}

template <typename S>
Var<S> select_batch(Var<S> x, int n) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  require(0 <= n && n < xd.n,
          "select_batch: index " + std::to_string(n) + " out of " + xd.str());
  Tensor<S> out(Dims{1, xd.c, xd.h, xd.w});
  const std::int64_t sz = out.size();
  std::copy_n(t.value(x).data() + n * sz, sz, out.data());
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, n, sz](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    S* dx = tp.grad(Var<S>{&tp, xi}).data() + n * sz;
    for (std::int64_t i = 0; i < sz; ++i) dx[i] += g[i];
  });
}

template <typename S>
Var<S> concat_batch(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_batch: empty part list");
  Tape<S>& t = *parts.front().tape;
  const Dims pd = t.value(parts.front()).dims();
  int total_n = 0;
  for (const auto& p : parts) {
    const Dims d = t.value(p).dims();
    require(d.c == pd.c && d.same_spatial(pd),
            "concat_batch: part dims mismatch " + d.str() + " vs " + pd.str());
    total_n += d.n;
  }
  Tensor<S> out(Dims{total_n, pd.c, pd.h, pd.w});
  std::vector<int> idx;
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = t.value(p);
    std::copy_n(pv.data(), pv.size(), out.data() + off);
    idx.push_back(p.idx);
    offsets.push_back(off);
    off += pv.size();
  }
  const int oi = static_cast<int>(t.size());
  return t.push(std::move(out),
                [idx = std::move(idx), offsets = std::move(offsets),
                 oi](Tape<S>& tp) {
                  const auto& g = tp.grad(Var<S>{&tp, oi});
                  for (std::size_t j = 0; j < idx.size(); ++j) {
                    auto& dp = tp.grad(Var<S>{&tp, idx[j]});
                    const S* gj = g.data() + offsets[j];
                    for (std::int64_t i = 0; i < dp.size(); ++i) dp[i] += gj[i];
                  }
                });
}

/// Gather channel entries of a (N,C,1,1) tensor into (N,k,1,1).
template <typename S>
Var<S> gather_channels(Var<S> x, const std::vector<int>& channels) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  require(xd.h == 1 && xd.w == 1,
          "gather_channels: expects (N,C,1,1), got " + xd.str());
  require(!channels.empty(), "gather_channels: empty index list");
  for (int c : channels)
    require(0 <= c && c < xd.c, "gather_channels: channel " +
                                    std::to_string(c) + " out of " + xd.str());
  const int k = static_cast<int>(channels.size());
  Tensor<S> out(Dims{xd.n, k, 1, 1});
  for (int n = 0; n < xd.n; ++n)
    for (int j = 0; j < k; ++j)
      out.at(n, j, 0, 0) = t.value(x).at(n, channels[j], 0, 0);
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, xd, channels](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (int n = 0; n < xd.n; ++n)
      for (std::size_t j = 0; j < channels.size(); ++j)
        dx.at(n, channels[j], 0, 0) += g.at(n, static_cast<int>(j), 0, 0);
  });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// 2D convolution, stride 1, zero "same" padding, square kernel of 1 or 3.
/// weights dims are (C_out, C_in, k, k); bias dims are (1, C_out, 1, 1).
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> weights, Var<S> bias) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  const Dims wd = t.value(weights).dims();
  const Dims bd = t.value(bias).dims();
  require(wd.h == wd.w && (wd.h == 1 || wd.h == 3),
          "conv2d: kernel must be 1x1 or 3x3, got " + wd.str());
  require(wd.c == xd.c, "conv2d: input channels " + xd.str() +
                            " do not match weights " + wd.str());
  require(bd.n == 1 && bd.c == wd.n && bd.h == 1 && bd.w == 1,
          "conv2d: bias must be (1," + std::to_string(wd.n) + ",1,1), got " +
              bd.str());
  const int N = xd.n, Ci = xd.c, H = xd.h, W = xd.w;
  const int Co = wd.n, K = wd.h, P = K / 2;

  Tensor<S> out(Dims{N, Co, H, W});
  {
    const auto& xv = t.value(x);
    const auto& wv = t.value(weights);
    const auto& bv = t.value(bias);
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        S* op = out.data() + out.index(n, co, 0, 0);
        const S b = bv[co];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
          op[i] = b;
        for (int ci = 0; ci < Ci; ++ci) {
          const S* xp = xv.data() + xv.index(n, ci, 0, 0);
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              const S wgt = wv.at(co, ci, ky, kx);
              const int dy = ky - P, dx = kx - P;
              const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              for (int y = y0; y < y1; ++y) {
                S* orow = op + static_cast<std::int64_t>(y) * W;
                const S* xrow = xp + static_cast<std::int64_t>(y + dy) * W + dx;
                for (int xc = x0; xc < x1; ++xc) orow[xc] += wgt * xrow[xc];
              }
            }
        }
      }
  }

  const int xi = x.idx, wi = weights.idx, bi = bias.idx;
  const int oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, wi, bi, oi, N, Ci, Co, H, W, K,
                                 P](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    const auto& xv = tp.value(Var<S>{&tp, xi});
    const auto& wv = tp.value(Var<S>{&tp, wi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    auto& dw = tp.grad(Var<S>{&tp, wi});
    auto& db = tp.grad(Var<S>{&tp, bi});
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const S* gp = g.data() + g.index(n, co, 0, 0);
        S acc = S(0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
          acc += gp[i];
        db[co] += acc;
        for (int ci = 0; ci < Ci; ++ci) {
          const S* xp = xv.data() + xv.index(n, ci, 0, 0);
          S* dxp = dx.data() + dx.index(n, ci, 0, 0);
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              const S wgt = wv.at(co, ci, ky, kx);
              S wacc = S(0);
              const int dy = ky - P, dxo = kx - P;
              const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              const int x0 = std::max(0, -dxo), x1 = std::min(W, W - dxo);
              for (int y = y0; y < y1; ++y) {
                const S* grow = gp + static_cast<std::int64_t>(y) * W;
                const S* xrow = xp + static_cast<std::int64_t>(y + dy) * W + dxo;
                S* dxrow = dxp + static_cast<std::int64_t>(y + dy) * W + dxo;
                for (int xc = x0; xc < x1; ++xc) {
                  wacc += grow[xc] * xrow[xc];
                  dxrow[xc] += grow[xc] * wgt;
                }
              }
              dw.at(co, ci, ky, kx) += wacc;
            }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// reductions and pooling
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(Dims{1, 1, 1, 1});
  out[0] = t.value(x).array().sum();
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi](Tape<S>& tp) {
    tp.grad(Var<S>{&tp, xi}).array() += tp.grad(Var<S>{&tp, oi})[0];
  });
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  const S inv = S(1) / static_cast<S>(t.value(x).size());
  Tensor<S> out(Dims{1, 1, 1, 1});
  out[0] = t.value(x).array().sum() * inv;
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, inv](Tape<S>& tp) {
    tp.grad(Var<S>{&tp, xi}).array() += tp.grad(Var<S>{&tp, oi})[0] * inv;
  });
}

/// Spatial mean per (n,c): (N,C,H,W) -> (N,C,1,1).
template <typename S>
Var<S> global_avg_pool(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  const std::int64_t plane = static_cast<std::int64_t>(xd.h) * xd.w;
  const S inv = S(1) / static_cast<S>(plane);
  Tensor<S> out(Dims{xd.n, xd.c, 1, 1});
  for (int n = 0; n < xd.n; ++n)
    for (int c = 0; c < xd.c; ++c) {
      const S* xp = t.value(x).data() + t.value(x).index(n, c, 0, 0);
      S acc = S(0);
      for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
      out.at(n, c, 0, 0) = acc * inv;
    }
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, xd, plane, inv](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (int n = 0; n < xd.n; ++n)
      for (int c = 0; c < xd.c; ++c) {
        const S gv = g.at(n, c, 0, 0) * inv;
        S* dxp = dx.data() + dx.index(n, c, 0, 0);
        for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gv;
      }
  });
}

/// Non-overlapping average pooling with kernel == stride == k.
template <typename S>
Var<S> avg_pool(Var<S> x, int k) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  require(k >= 1 && xd.h % k == 0 && xd.w % k == 0,
          "avg_pool: spatial dims " + xd.str() + " not divisible by " +
              std::to_string(k));
  const int Ho = xd.h / k, Wo = xd.w / k;
  const S inv = S(1) / static_cast<S>(k * k);
  Tensor<S> out(Dims{xd.n, xd.c, Ho, Wo});
  const auto& xv = t.value(x);
  for (int n = 0; n < xd.n; ++n)
    for (int c = 0; c < xd.c; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xo = 0; xo < Wo; ++xo) {
          S acc = S(0);
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              acc += xv.at(n, c, y * k + dy, xo * k + dx);
          out.at(n, c, y, xo) = acc * inv;
        }
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, xd, k, Ho, Wo, inv](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (int n = 0; n < xd.n; ++n)
      for (int c = 0; c < xd.c; ++c)
        for (int y = 0; y < Ho; ++y)
          for (int xo = 0; xo < Wo; ++xo) {
            const S gv = g.at(n, c, y, xo) * inv;
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx)
                dx.at(n, c, y * k + ky, xo * k + kx) += gv;
          }
  });
}

/// Channelwise L1 residual per spatial location: (N,C,H,W)^2 -> (N,1,H,W).
template <typename S>
Var<S> l1_distance(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Dims ad = t.value(a).dims();
  require(ad == t.value(b).dims(), "l1_distance: dims mismatch " + ad.str() +
                                       " vs " + t.value(b).dims().str());
  Tensor<S> out(Dims{ad.n, 1, ad.h, ad.w});
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  for (int n = 0; n < ad.n; ++n)
    for (int c = 0; c < ad.c; ++c)
      for (int h = 0; h < ad.h; ++h)
        for (int w = 0; w < ad.w; ++w)
          out.at(n, 0, h, w) += std::abs(av.at(n, c, h, w) - bv.at(n, c, h, w));
  const int ai = a.idx, bi = b.idx, oi = static_cast<int>(t.size());
  // sign(0) treated as 0
  return t.push(std::move(out), [ai, bi, oi, ad](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, oi});
    const auto& av = tp.value(Var<S>{&tp, ai});
    const auto& bv = tp.value(Var<S>{&tp, bi});
    auto& da = tp.grad(Var<S>{&tp, ai});
    auto& db = tp.grad(Var<S>{&tp, bi});
    for (int n = 0; n < ad.n; ++n)
      for (int c = 0; c < ad.c; ++c)
        for (int h = 0; h < ad.h; ++h)
          for (int w = 0; w < ad.w; ++w) {
            const S diff = av.at(n, c, h, w) - bv.at(n, c, h, w);
            const S s = diff > S(0) ? S(1) : (diff < S(0) ? S(-1) : S(0));
            const S gv = g.at(n, 0, h, w) * s;
            da.at(n, c, h, w) += gv;
            db.at(n, c, h, w) -= gv;
          }
  });
}

/// Per-sample softmax over channels of a (N,E,1,1) tensor.
template <typename S>
Var<S> softmax_channels(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Dims xd = t.value(x).dims();
  require(xd.h == 1 && xd.w == 1,
          "softmax_channels: expects (N,E,1,1), got " + xd.str());
  Tensor<S> out(xd);
  const auto& xv = t.value(x);
  for (int n = 0; n < xd.n; ++n) {
    S m = xv.at(n, 0, 0, 0);
    for (int c = 1; c < xd.c; ++c) m = std::max(m, xv.at(n, c, 0, 0));
    S z = S(0);
    for (int c = 0; c < xd.c; ++c) {
      const S e = std::exp(xv.at(n, c, 0, 0) - m);
      out.at(n, c, 0, 0) = e;
      z += e;
    }
    for (int c = 0; c < xd.c; ++c) out.at(n, c, 0, 0) /= z;
  }
  const int xi = x.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [xi, oi, xd](Tape<S>& tp) {
    const auto& y = tp.value(Var<S>{&tp, oi});
    const auto& g = tp.grad(Var<S>{&tp, oi});
    auto& dx = tp.grad(Var<S>{&tp, xi});
    for (int n = 0; n < xd.n; ++n) {
      S dot = S(0);
      for (int c = 0; c < xd.c; ++c) dot += g.at(n, c, 0, 0) * y.at(n, c, 0, 0);
      for (int c = 0; c < xd.c; ++c)
        dx.at(n, c, 0, 0) += y.at(n, c, 0, 0) * (g.at(n, c, 0, 0) - dot);
    }
  });
}

}  // namespace tensel
