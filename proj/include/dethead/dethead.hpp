#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "synthmbu/synthmbu.hpp"
#include "tensel/ops.hpp"

// Single-class anchor-free detection head and the training losses: a center
// heatmap with BCE against Gaussian-splatted ground truth, an L1 size branch
// at positive cells, a target-region alignment loss on the offset field, and
// the composite objective total = l_det + alpha*l_ta + beta*l_uta.

namespace dethead {

using synthmbu::Box;
using tensel::ConfigError;
using tensel::Dims;
using tensel::require;
using tensel::Tape;
using tensel::Tensor;
using tensel::Var;

/// Gaussian splat width for ground-truth center maps, feature pixels.
inline constexpr double kGtSigma = 1.0;

/// Image coordinate of a feature cell center: cell f covers stride pixels
/// starting at f*stride, so its center sits at f*stride + (stride-1)/2.
inline double cell_to_image(double f, int stride) {
  return f * stride + (stride - 1) / 2.0;
}
inline double image_to_cell(double img, int stride) {
  return (img - (stride - 1) / 2.0) / stride;
}

template <typename S>
struct DetPrediction {
  Var<S> heatmap;  // (N,1,H,W), in (0,1)
  Var<S> sizes;    // (N,2,H,W), channel 0 width, channel 1 height, clamped >= 0
};

template <typename S>
struct DetParams {
  tensel::Parameter<S> trunk_w, trunk_b;
  tensel::Parameter<S> heat_w, heat_b;
  tensel::Parameter<S> size_w, size_b;

  static DetParams init(int channels, tensel::Rng& rng,
                        bool zero_heads = true) {
    using P = tensel::Parameter<S>;
    const int c = channels;
    DetParams p;
    p.trunk_w = P::he_uniform("head.trunk.w", Dims{c, c, 3, 3}, c * 9, rng);
    p.trunk_b = P::zeros("head.trunk.b", Dims{1, c, 1, 1});
    p.heat_w = zero_heads
                   ? P::zeros("head.heat.w", Dims{1, c, 1, 1})
                   : P::he_uniform("head.heat.w", Dims{1, c, 1, 1}, c, rng);
    p.heat_b = P::zeros("head.heat.b", Dims{1, 1, 1, 1});
    p.size_w = zero_heads
                   ? P::zeros("head.size.w", Dims{2, c, 1, 1})
                   : P::he_uniform("head.size.w", Dims{2, c, 1, 1}, c, rng);
    p.size_b = P::zeros("head.size.b", Dims{1, 2, 1, 1});
    return p;
  }

  std::vector<tensel::Parameter<S>*> params() {
    return {&trunk_w, &trunk_b, &heat_w, &heat_b, &size_w, &size_b};
  }
};

/// Two small conv branches over the fused feature. Zero-initialized heads
/// give heatmap = 0.5 everywhere and sizes = 0.
template <typename S>
DetPrediction<S> detect(Var<S> fused, DetParams<S>& p, Tape<S>& t) {
  Var<S> trunk =
      tensel::silu(tensel::conv2d(fused, t.param(p.trunk_w), t.param(p.trunk_b)));
  Var<S> heat =
      tensel::sigmoid(tensel::conv2d(trunk, t.param(p.heat_w), t.param(p.heat_b)));
  Var<S> sizes =
      tensel::clamp(tensel::conv2d(trunk, t.param(p.size_w), t.param(p.size_b)),
                    S(0), std::numeric_limits<S>::infinity());
  return DetPrediction<S>{heat, sizes};
}

/// Ground truth rendered on the feature grid: a soft center map (max of
/// Gaussian splats, peak 1 at each exact center) plus the positive cells used
/// for size regression. A cell is positive for a box when that box's splat
/// value is at least 0.5 there; the rounded center cell is always positive.
struct GroundTruth {
  tensel::Tensor64 center_map;  // (1,1,H,W)
  struct Positive {
    int cx = 0, cy = 0;       // cell coordinates
    double w = 0.0, h = 0.0;  // box size in feature pixels
  };
  std::vector<Positive> positives;
};

inline GroundTruth render_ground_truth(const std::vector<Box>& boxes, int hf,
                                       int wf, int stride) {
  GroundTruth gt;
  gt.center_map = tensel::Tensor64(Dims{1, 1, hf, wf});
  for (const auto& b : boxes) {
    const double cxf = image_to_cell(b.cx, stride);
    const double cyf = image_to_cell(b.cy, stride);
    const int ccx =
        std::min(wf - 1, std::max(0, static_cast<int>(std::lround(cxf))));
    const int ccy =
        std::min(hf - 1, std::max(0, static_cast<int>(std::lround(cyf))));
    for (int y = 0; y < hf; ++y)
      for (int x = 0; x < wf; ++x) {
        const double dx = x - cxf, dy = y - cyf;
        const double v =
            std::exp(-(dx * dx + dy * dy) / (2.0 * kGtSigma * kGtSigma));
        gt.center_map.at(0, 0, y, x) = std::max(gt.center_map.at(0, 0, y, x), v);
        if (v >= 0.5 && !(x == ccx && y == ccy))
          gt.positives.push_back({x, y, b.w / static_cast<double>(stride),
                                  b.h / static_cast<double>(stride)});
      }
    gt.positives.push_back(
        {ccx, ccy, b.w / static_cast<double>(stride),
         b.h / static_cast<double>(stride)});
  }
  return gt;
}

/// Per-location weight applied to the heatmap BCE: 1 + kPosWeight * target.
/// Counters the heavy background/foreground imbalance of small-object maps
/// without moving the per-location optimum away from p = t; background-only
/// scenes are unaffected (weight 1 everywhere).
inline constexpr double kPosWeight = 4.0;

/// Mean binary cross-entropy between the predicted heatmap and a soft target
/// map, positive-weighted by (1 + kPosWeight * t). Probabilities are clamped
/// away from {0,1} inside the log only.
template <typename S>
Var<S> bce_heatmap_loss(Var<S> heatmap, const tensel::Tensor64& target) {
  Tape<S>& t = *heatmap.tape;
  const Dims hd = t.value(heatmap).dims();
  require(hd.c == 1, "bce_heatmap_loss: heatmap must be (N,1,H,W), got " +
                         hd.str());
  require(hd == target.dims(), "bce_heatmap_loss: target dims " +
                                   target.dims().str() + " do not match " +
                                   hd.str());
  const S inv = S(1) / static_cast<S>(t.value(heatmap).size());
  const S p_eps = S(1e-12);
  // clamp into the open interval for the logs; NaN passes through
  auto clip = [p_eps](S p) {
    return p < p_eps ? p_eps : (p > S(1) - p_eps ? S(1) - p_eps : p);
  };
  Tensor<S> out(Dims{1, 1, 1, 1});
  {
    const auto& pv = t.value(heatmap);
    S acc = S(0);
    for (std::int64_t i = 0; i < pv.size(); ++i) {
      const S p = clip(pv[i]);
      const S tv = static_cast<S>(target[i]);
      const S w = S(1) + static_cast<S>(kPosWeight) * tv;
      acc -= w * (tv * std::log(p) + (S(1) - tv) * std::log(S(1) - p));
    }
    out[0] = acc * inv;
  }
  const int hi = heatmap.idx, oi = static_cast<int>(t.size());
  tensel::Tensor64 tgt = target;
  return t.push(std::move(out), [hi, oi, inv, clip,
                                 tgt = std::move(tgt)](Tape<S>& tp) {
    const S g = tp.grad(Var<S>{&tp, oi})[0] * inv;
    const auto& pv = tp.value(Var<S>{&tp, hi});
    auto& dp = tp.grad(Var<S>{&tp, hi});
    for (std::int64_t i = 0; i < pv.size(); ++i) {
      const S p = clip(pv[i]);
      const S tv = static_cast<S>(tgt[i]);
      const S w = S(1) + static_cast<S>(kPosWeight) * tv;
      dp[i] += g * w * (p - tv) / (p * (S(1) - p));
    }
  });
}

/// L1 size regression at positive cells, averaged over the two channels and
/// over positives. No positives -> constant zero.
template <typename S>
Var<S> size_l1_loss(Var<S> sizes, const std::vector<GroundTruth::Positive>& pos) {
  Tape<S>& t = *sizes.tape;
  const Dims sd = t.value(sizes).dims();
  require(sd.n == 1 && sd.c == 2,
          "size_l1_loss: sizes must be (1,2,H,W), got " + sd.str());
  if (pos.empty()) return t.leaf(Tensor<S>(Dims{1, 1, 1, 1}));
  const S inv = S(1) / static_cast<S>(2 * pos.size());
  Tensor<S> out(Dims{1, 1, 1, 1});
  {
    const auto& sv = t.value(sizes);
    S acc = S(0);
    for (const auto& p : pos) {
      acc += std::abs(sv.at(0, 0, p.cy, p.cx) - static_cast<S>(p.w));
      acc += std::abs(sv.at(0, 1, p.cy, p.cx) - static_cast<S>(p.h));
    }
    out[0] = acc * inv;
  }
  const int si = sizes.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [si, oi, inv, pos](Tape<S>& tp) {
    const S g = tp.grad(Var<S>{&tp, oi})[0] * inv;
    const auto& sv = tp.value(Var<S>{&tp, si});
    auto& ds = tp.grad(Var<S>{&tp, si});
    for (const auto& p : pos) {
      const S dw = sv.at(0, 0, p.cy, p.cx) - static_cast<S>(p.w);
      const S dh = sv.at(0, 1, p.cy, p.cx) - static_cast<S>(p.h);
      ds.at(0, 0, p.cy, p.cx) += g * (dw > S(0) ? S(1) : (dw < S(0) ? S(-1) : S(0)));
      ds.at(0, 1, p.cy, p.cx) += g * (dh > S(0) ? S(1) : (dh < S(0) ? S(-1) : S(0)));
    }
  });
}

/// Surrogate detection loss: center-map BCE plus L1 size regression.
template <typename S>
Var<S> det_loss(const DetPrediction<S>& pred, const std::vector<Box>& boxes,
                int stride) {
  Tape<S>& t = *pred.heatmap.tape;
  const Dims hd = t.value(pred.heatmap).dims();
  GroundTruth gt = render_ground_truth(boxes, hd.h, hd.w, stride);
  Var<S> bce = bce_heatmap_loss(pred.heatmap, gt.center_map);
  Var<S> sz = size_l1_loss(pred.sizes, gt.positives);
  return tensel::add(bce, sz);
}

/// Feature cells supervised by the alignment loss: the union of box extents
/// on the feature grid, never smaller than the rounded center cell.
inline std::vector<std::pair<int, int>> target_cells(
    const std::vector<Box>& boxes, int hf, int wf, int stride) {
  std::vector<char> mask(static_cast<std::size_t>(hf) * wf, 0);
  for (const auto& b : boxes) {
    const double cxf = image_to_cell(b.cx, stride);
    const double cyf = image_to_cell(b.cy, stride);
    const double ex = std::max(0.5, b.w / (2.0 * stride));
    const double ey = std::max(0.5, b.h / (2.0 * stride));
    int x0 = static_cast<int>(std::ceil(cxf - ex));
    int x1 = static_cast<int>(std::floor(cxf + ex));
    int y0 = static_cast<int>(std::ceil(cyf - ey));
    int y1 = static_cast<int>(std::floor(cyf + ey));
    if (x1 < x0) x0 = x1 = static_cast<int>(std::lround(cxf));
    if (y1 < y0) y0 = y1 = static_cast<int>(std::lround(cyf));
    for (int y = std::max(0, y0); y <= std::min(hf - 1, y1); ++y)
      for (int x = std::max(0, x0); x <= std::min(wf - 1, x1); ++x)
        mask[static_cast<std::size_t>(y) * wf + x] = 1;
  }
  std::vector<std::pair<int, int>> cells;
  for (int y = 0; y < hf; ++y)
    for (int x = 0; x < wf; ++x)
      if (mask[static_cast<std::size_t>(y) * wf + x]) cells.emplace_back(y, x);
  return cells;
}

/// Target-alignment loss: mean L1 (averaged over the two offset channels)
/// between the predicted offsets and the constant true-shift field, inside
/// target boxes only. Scenes without targets return zero.
template <typename S>
Var<S> ta_loss(Var<S> offsets, double shift_x_feat, double shift_y_feat,
               const std::vector<Box>& boxes, int stride) {
  Tape<S>& t = *offsets.tape;
  const Dims od = t.value(offsets).dims();
  require(od.n == 1 && od.c == 2,
          "ta_loss: offsets must be (1,2,H,W), got " + od.str());
  std::vector<std::pair<int, int>> cells =
      target_cells(boxes, od.h, od.w, stride);
  if (cells.empty()) return t.leaf(Tensor<S>(Dims{1, 1, 1, 1}));
  const S sx = static_cast<S>(shift_x_feat), sy = static_cast<S>(shift_y_feat);
  const S inv = S(1) / static_cast<S>(2 * cells.size());
  Tensor<S> out(Dims{1, 1, 1, 1});
  {
    const auto& ov = t.value(offsets);
    S acc = S(0);
    for (const auto& [y, x] : cells) {
      acc += std::abs(ov.at(0, 0, y, x) - sx);
      acc += std::abs(ov.at(0, 1, y, x) - sy);
    }
    out[0] = acc * inv;
  }
  const int fi = offsets.idx, oi = static_cast<int>(t.size());
  return t.push(std::move(out), [fi, oi, inv, sx, sy, cells](Tape<S>& tp) {
    const S g = tp.grad(Var<S>{&tp, oi})[0] * inv;
    const auto& ov = tp.value(Var<S>{&tp, fi});
    auto& dv = tp.grad(Var<S>{&tp, fi});
    for (const auto& [y, x] : cells) {
      const S dx = ov.at(0, 0, y, x) - sx;
      const S dy = ov.at(0, 1, y, x) - sy;
      dv.at(0, 0, y, x) += g * (dx > S(0) ? S(1) : (dx < S(0) ? S(-1) : S(0)));
      dv.at(0, 1, y, x) += g * (dy > S(0) ? S(1) : (dy < S(0) ? S(-1) : S(0)));
    }
  });
}

/// Composite objective and its parts; total recomposes exactly as
/// l_det + alpha*l_ta + beta*l_uta.
template <typename S>
struct LossBreakdown {
  Var<S> total;
  double l_det = 0, l_ta = 0, l_uta = 0, total_value = 0;
  double alpha = 1.0, beta = 1.0;
};

template <typename S>
LossBreakdown<S> total_loss(Var<S> l_det, Var<S> l_ta, Var<S> l_uta,
                            double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0)
    throw ConfigError("total_loss: alpha and beta must be nonnegative");
  Tape<S>& t = *l_det.tape;
  Var<S> weighted = tensel::add(tensel::mul_scalar(l_ta, static_cast<S>(alpha)),
                                tensel::mul_scalar(l_uta, static_cast<S>(beta)));
  LossBreakdown<S> out;
  out.total = tensel::add(l_det, weighted);
  out.l_det = static_cast<double>(t.value(l_det).item());
  out.l_ta = static_cast<double>(t.value(l_ta).item());
  out.l_uta = static_cast<double>(t.value(l_uta).item());
  out.total_value = static_cast<double>(t.value(out.total).item());
  out.alpha = alpha;
  out.beta = beta;
  return out;
}

}  // namespace dethead
