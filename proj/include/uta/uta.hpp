#pragma once

#include <cmath>
#include <vector>

#include "tensel/ops.hpp"

// Uncertainty-aware target alignment: a dense offset field warps the visible
// feature onto the infrared reference grid by bilinear resampling, a parallel
// head predicts a per-location reliability map in (0,1), and a self-supervised
// loss ties reliability to the aligned residual.

namespace uta {

using tensel::ConfigError;
using tensel::Dims;
using tensel::require;
using tensel::Tape;
using tensel::Tensor;
using tensel::Var;

struct UtaConfig {
  double lambda = 1e-4;
  double epsilon = 1e-8;
  double offset_clamp = 16.0;  // feature pixels; defaults to the feature height

  void validate() const {
    if (lambda <= 0.0) throw ConfigError("uta.lambda must be positive");
    if (epsilon <= 0.0) throw ConfigError("uta.epsilon must be positive");
    if (offset_clamp <= 0.0)
      throw ConfigError("uta.offset_clamp must be positive");
  }
};

/// Per-location 2-vector displacement field on the infrared reference grid.
/// Channel 0 carries the horizontal shift, channel 1 the vertical shift,
/// both in feature pixels.
template <typename S>
struct OffsetField {
  Var<S> values;  // (N,2,H,W)
};

/// Per-location trust estimate in (0,1), produced through a sigmoid.
template <typename S>
struct ReliabilityMap {
  Var<S> values;  // (N,1,H,W)
};

template <typename S>
struct UtaOutput {
  Var<S> aligned;
  ReliabilityMap<S> reliability;
  OffsetField<S> offsets;
  Var<S> loss;  // scalar
};

/// Offset predictor and reliability subnetwork weights.
///
/// Offset predictor: concat -> 3x3 conv (2C->C) -> silu -> 3x3 conv (C->2).
/// Reliability head: concat -> 3x3 conv (2C->C) -> silu -> 1x1 conv (C->1)
/// -> sigmoid. Final layers are zero-initialized so training starts from the
/// identity warp and a maximum-entropy reliability of 0.5.
template <typename S>
struct UtaParams {
  tensel::Parameter<S> off_w1, off_b1, off_w2, off_b2;
  tensel::Parameter<S> rel_w1, rel_b1, rel_w2, rel_b2;

  static UtaParams init(int channels, tensel::Rng& rng,
                        bool zero_final = true) {
    using P = tensel::Parameter<S>;
    const int c = channels;
    UtaParams p;
    p.off_w1 = P::he_uniform("uta.off.w1", Dims{c, 2 * c, 3, 3}, 2 * c * 9, rng);
    p.off_b1 = P::zeros("uta.off.b1", Dims{1, c, 1, 1});
    p.off_w2 = zero_final
                   ? P::zeros("uta.off.w2", Dims{2, c, 3, 3})
                   : P::he_uniform("uta.off.w2", Dims{2, c, 3, 3}, c * 9, rng);
    p.off_b2 = P::zeros("uta.off.b2", Dims{1, 2, 1, 1});
    p.rel_w1 = P::he_uniform("uta.rel.w1", Dims{c, 2 * c, 3, 3}, 2 * c * 9, rng);
    p.rel_b1 = P::zeros("uta.rel.b1", Dims{1, c, 1, 1});
    p.rel_w2 = zero_final
                   ? P::zeros("uta.rel.w2", Dims{1, c, 1, 1})
                   : P::he_uniform("uta.rel.w2", Dims{1, c, 1, 1}, c, rng);
    p.rel_b2 = P::zeros("uta.rel.b2", Dims{1, 1, 1, 1});
    return p;
  }

  std::vector<tensel::Parameter<S>*> params() {
    return {&off_w1, &off_b1, &off_w2, &off_b2,
            &rel_w1, &rel_b1, &rel_w2, &rel_b2};
  }
};

template <typename S>
OffsetField<S> predict_offsets(Var<S> f_rgb, Var<S> f_ir, UtaParams<S>& p,
                               Tape<S>& t, double clamp_bound) {
  require(t.value(f_rgb).dims() == t.value(f_ir).dims(),
          "predict_offsets: feature dims mismatch " +
              t.value(f_rgb).dims().str() + " vs " + t.value(f_ir).dims().str());
  Var<S> x = tensel::concat_channels(f_rgb, f_ir);
  Var<S> h = tensel::silu(tensel::conv2d(x, t.param(p.off_w1), t.param(p.off_b1)));
  Var<S> o = tensel::conv2d(h, t.param(p.off_w2), t.param(p.off_b2));
  const S b = static_cast<S>(clamp_bound);
  return OffsetField<S>{tensel::clamp(o, -b, b)};
}

/// Warp f onto the reference grid: out(p0) = bilinear(f, p0 + offset(p0)).
///
/// Sampling outside the image reads zeros, so each output value is a convex
/// combination of input values and zero. The backward pass scatters bilinear
/// weights into df and uses the analytic weight derivatives for doffsets.
/// With all-zero offsets the forward is the bit-exact identity.
template <typename S>
Var<S> resample_bilinear(Var<S> f, Var<S> offsets) {
  Tape<S>& t = *f.tape;
  const Dims fd = t.value(f).dims();
  const Dims od = t.value(offsets).dims();
  require(od.n == fd.n && od.c == 2 && od.same_spatial(fd),
          "resample_bilinear: offsets must be (N,2,H,W) matching " + fd.str() +
              ", got " + od.str());
  const int N = fd.n, C = fd.c, H = fd.h, W = fd.w;

  auto in_bounds = [H, W](int y, int x) {
    return y >= 0 && y < H && x >= 0 && x < W;
  };

  Tensor<S> out(fd);
  {
    const auto& fv = t.value(f);
    const auto& ov = t.value(offsets);
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const S sx = static_cast<S>(x) + ov.at(n, 0, y, x);
          const S sy = static_cast<S>(y) + ov.at(n, 1, y, x);
          if (!std::isfinite(sx) || !std::isfinite(sy)) {
            for (int c = 0; c < C; ++c)
              out.at(n, c, y, x) = std::numeric_limits<S>::quiet_NaN();
            continue;
          }
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const S wx = sx - static_cast<S>(x0);
          const S wy = sy - static_cast<S>(y0);
          for (int c = 0; c < C; ++c) {
            const S f00 = in_bounds(y0, x0) ? fv.at(n, c, y0, x0) : S(0);
            const S f01 = in_bounds(y0, x0 + 1) ? fv.at(n, c, y0, x0 + 1) : S(0);
            const S f10 = in_bounds(y0 + 1, x0) ? fv.at(n, c, y0 + 1, x0) : S(0);
            const S f11 =
                in_bounds(y0 + 1, x0 + 1) ? fv.at(n, c, y0 + 1, x0 + 1) : S(0);
            out.at(n, c, y, x) = (S(1) - wy) * ((S(1) - wx) * f00 + wx * f01) +
                                 wy * ((S(1) - wx) * f10 + wx * f11);
          }
        }
  }

  const int fi = f.idx, oi = offsets.idx, ri = static_cast<int>(t.size());
  return t.push(std::move(out), [fi, oi, ri, N, C, H, W,
                                 in_bounds](Tape<S>& tp) {
    const auto& g = tp.grad(Var<S>{&tp, ri});
    const auto& fv = tp.value(Var<S>{&tp, fi});
    const auto& ov = tp.value(Var<S>{&tp, oi});
    auto& df = tp.grad(Var<S>{&tp, fi});
    auto& dof = tp.grad(Var<S>{&tp, oi});
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const S sx = static_cast<S>(x) + ov.at(n, 0, y, x);
          const S sy = static_cast<S>(y) + ov.at(n, 1, y, x);
          if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const S wx = sx - static_cast<S>(x0);
          const S wy = sy - static_cast<S>(y0);
          S acc_dx = S(0), acc_dy = S(0);
          for (int c = 0; c < C; ++c) {
            const S gv = g.at(n, c, y, x);
            const S f00 = in_bounds(y0, x0) ? fv.at(n, c, y0, x0) : S(0);
            const S f01 = in_bounds(y0, x0 + 1) ? fv.at(n, c, y0, x0 + 1) : S(0);
            const S f10 = in_bounds(y0 + 1, x0) ? fv.at(n, c, y0 + 1, x0) : S(0);
            const S f11 =
                in_bounds(y0 + 1, x0 + 1) ? fv.at(n, c, y0 + 1, x0 + 1) : S(0);
            if (in_bounds(y0, x0))
              df.at(n, c, y0, x0) += gv * (S(1) - wy) * (S(1) - wx);
            if (in_bounds(y0, x0 + 1))
              df.at(n, c, y0, x0 + 1) += gv * (S(1) - wy) * wx;
            if (in_bounds(y0 + 1, x0))
              df.at(n, c, y0 + 1, x0) += gv * wy * (S(1) - wx);
            if (in_bounds(y0 + 1, x0 + 1))
              df.at(n, c, y0 + 1, x0 + 1) += gv * wy * wx;
            acc_dx += gv * ((S(1) - wy) * (f01 - f00) + wy * (f11 - f10));
            acc_dy += gv * ((S(1) - wx) * (f10 - f00) + wx * (f11 - f01));
          }
          dof.at(n, 0, y, x) += acc_dx;
          dof.at(n, 1, y, x) += acc_dy;
        }
  });
}

template <typename S>
ReliabilityMap<S> predict_reliability(Var<S> f_ir, Var<S> aligned,
                                      UtaParams<S>& p, Tape<S>& t) {
  require(t.value(f_ir).dims() == t.value(aligned).dims(),
          "predict_reliability: dims mismatch " + t.value(f_ir).dims().str() +
              " vs " + t.value(aligned).dims().str());
  Var<S> x = tensel::concat_channels(f_ir, aligned);
  Var<S> h = tensel::silu(tensel::conv2d(x, t.param(p.rel_w1), t.param(p.rel_b1)));
  Var<S> r = tensel::sigmoid(tensel::conv2d(h, t.param(p.rel_w2), t.param(p.rel_b2)));
  return ReliabilityMap<S>{r};
}

/// Self-supervised reliability loss
///   (1/M) sum_ij ( R_ij * d_ij - lambda * log(R_ij + eps) )
/// where d_ij is the channelwise L1 residual between the infrared feature and
/// the aligned visible feature, and M is the number of spatial locations
/// (summed over the batch). Fused primitive with analytic gradients for all
/// three tensor inputs.
template <typename S>
Var<S> uta_loss(Var<S> f_ir, Var<S> aligned, Var<S> reliability, double lambda,
                double epsilon) {
  if (lambda <= 0.0) throw ConfigError("uta_loss: lambda must be positive");
  if (epsilon <= 0.0) throw ConfigError("uta_loss: epsilon must be positive");
  Tape<S>& t = *f_ir.tape;
  const Dims fd = t.value(f_ir).dims();
  const Dims rd = t.value(reliability).dims();
  require(fd == t.value(aligned).dims(),
          "uta_loss: feature dims mismatch " + fd.str() + " vs " +
              t.value(aligned).dims().str());
  require(rd.n == fd.n && rd.c == 1 && rd.same_spatial(fd),
          "uta_loss: reliability must be (N,1,H,W) matching " + fd.str() +
              ", got " + rd.str());
  const int N = fd.n, C = fd.c, H = fd.h, W = fd.w;
  const S lam = static_cast<S>(lambda), eps = static_cast<S>(epsilon);
  const S inv = S(1) / static_cast<S>(static_cast<std::int64_t>(N) * H * W);

  Tensor<S> out(Dims{1, 1, 1, 1});
  {
    const auto& av = t.value(f_ir);
    const auto& bv = t.value(aligned);
    const auto& rv = t.value(reliability);
    S acc = S(0);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          S d = S(0);
          for (int c = 0; c < C; ++c)
            d += std::abs(av.at(n, c, h, w) - bv.at(n, c, h, w));
          const S r = rv.at(n, 0, h, w);
          acc += r * d - lam * std::log(r + eps);
        }
    out[0] = acc * inv;
  }

  const int ai = f_ir.idx, bi = aligned.idx, ri = reliability.idx;
  const int li = static_cast<int>(t.size());
  return t.push(std::move(out), [ai, bi, ri, li, N, C, H, W, lam, eps,
                                 inv](Tape<S>& tp) {
    const S g = tp.grad(Var<S>{&tp, li})[0] * inv;
    const auto& av = tp.value(Var<S>{&tp, ai});
    const auto& bv = tp.value(Var<S>{&tp, bi});
    const auto& rv = tp.value(Var<S>{&tp, ri});
    auto& da = tp.grad(Var<S>{&tp, ai});
    auto& db = tp.grad(Var<S>{&tp, bi});
    auto& dr = tp.grad(Var<S>{&tp, ri});
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const S r = rv.at(n, 0, h, w);
          S d = S(0);
          for (int c = 0; c < C; ++c) {
            const S diff = av.at(n, c, h, w) - bv.at(n, c, h, w);
            d += std::abs(diff);
            const S s = diff > S(0) ? S(1) : (diff < S(0) ? S(-1) : S(0));
            da.at(n, c, h, w) += g * r * s;
            db.at(n, c, h, w) -= g * r * s;
          }
          dr.at(n, 0, h, w) += g * (d - lam / (r + eps));
        }
  });
}

/// Full U-TA pass: offsets, aligned feature, reliability map and loss.
template <typename S>
UtaOutput<S> uta_forward(Var<S> f_rgb, Var<S> f_ir, UtaParams<S>& p,
                         Tape<S>& t, const UtaConfig& cfg) {
  cfg.validate();
  OffsetField<S> off = predict_offsets(f_rgb, f_ir, p, t, cfg.offset_clamp);
  Var<S> aligned = resample_bilinear(f_rgb, off.values);
  ReliabilityMap<S> rel = predict_reliability(f_ir, aligned, p, t);
  Var<S> loss = uta_loss(f_ir, aligned, rel.values, cfg.lambda, cfg.epsilon);
  return UtaOutput<S>{aligned, rel, off, loss};
}

}  // namespace uta
