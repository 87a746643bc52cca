#include "harness/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "dethead/dethead.hpp"

namespace harness {

namespace {

/// Log-parabola sub-cell refinement along one axis; exact for Gaussian peaks.
/// Falls back to 0 at borders or when a neighbor is too small to take a log.
double subcell_offset(double left, double center, double right) {
  constexpr double kTiny = 1e-12;
  if (left < kTiny || right < kTiny || center < kTiny) return 0.0;
  const double l = std::log(left), c = std::log(center), r = std::log(right);
  const double denom = l - 2.0 * c + r;
  if (denom >= -1e-12) return 0.0;  // not a strict local max in log space
  const double off = 0.5 * (l - r) / denom;
  return std::min(0.5, std::max(-0.5, off));
}

}  // namespace

std::vector<Detection> decode(const tensel::Tensor64& heatmap,
                              const tensel::Tensor64& sizes, int stride,
                              const DecodeOptions& opts) {
  const tensel::Dims hd = heatmap.dims();
  tensel::require(hd.n == 1 && hd.c == 1,
                  "decode: heatmap must be (1,1,H,W), got " + hd.str());
  tensel::require(sizes.dims().n == 1 && sizes.dims().c == 2 &&
                      sizes.dims().same_spatial(hd),
                  "decode: sizes must be (1,2,H,W) matching " + hd.str() +
                      ", got " + sizes.dims().str());
  const int H = hd.h, W = hd.w;

  struct Peak {
    int y, x;
    double conf;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = heatmap.at(0, 0, y, x);
      if (v < opts.threshold) continue;
      bool is_peak = true;
      for (int dy = -1; dy <= 1 && is_peak; ++dy)
        for (int dx = -1; dx <= 1 && is_peak; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          const double nv = heatmap.at(0, 0, ny, nx);
          if (nv > v) is_peak = false;
          // plateau: keep only the lowest-(row,col) cell
          if (nv == v && (ny < y || (ny == y && nx < x))) is_peak = false;
        }
      if (is_peak) peaks.push_back({y, x, v});
    }

  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (static_cast<int>(peaks.size()) > opts.max_dets)
    peaks.resize(static_cast<std::size_t>(opts.max_dets));

  std::vector<Detection> out;
  out.reserve(peaks.size());
  for (const auto& p : peaks) {
    const double vl = p.x > 0 ? heatmap.at(0, 0, p.y, p.x - 1) : 0.0;
    const double vr = p.x < W - 1 ? heatmap.at(0, 0, p.y, p.x + 1) : 0.0;
    const double vu = p.y > 0 ? heatmap.at(0, 0, p.y - 1, p.x) : 0.0;
    const double vd = p.y < H - 1 ? heatmap.at(0, 0, p.y + 1, p.x) : 0.0;
    const double ox = subcell_offset(vl, p.conf, vr);
    const double oy = subcell_offset(vu, p.conf, vd);
    Detection d;
    d.cx = dethead::cell_to_image(p.x + ox, stride);
    d.cy = dethead::cell_to_image(p.y + oy, stride);
    d.w = sizes.at(0, 0, p.y, p.x) * stride;
    d.h = sizes.at(0, 1, p.y, p.x) * stride;
    d.confidence = p.conf;
    out.push_back(d);
  }
  return out;
}

double iou(const Detection& d, const synthmbu::Box& b) {
  const double ax0 = d.cx - d.w / 2, ax1 = d.cx + d.w / 2;
  const double ay0 = d.cy - d.h / 2, ay1 = d.cy + d.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  const double uni = d.w * d.h + b.w * b.h - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

ApResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<synthmbu::Box>>& gts,
                           double iou_threshold) {
  tensel::require(dets.size() == gts.size(),
                  "average_precision: image count mismatch");
  if (iou_threshold <= 0.0 || iou_threshold >= 1.0)
    throw tensel::ConfigError("average_precision: IoU threshold must be in (0,1)");

  std::size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  std::size_t total_det = 0;
  for (const auto& d : dets) total_det += d.size();

  if (total_gt == 0) return ApResult{total_det == 0 ? 1.0 : 0.0, true};
  if (total_det == 0) return ApResult{0.0, false};

  struct Entry {
    double conf;
    std::size_t image;
    std::size_t det;
  };
  std::vector<Entry> order;
  order.reserve(total_det);
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j)
      order.push_back({dets[i][j].confidence, i, j});
  std::stable_sort(order.begin(), order.end(),
                   [](const Entry& a, const Entry& b) { return a.conf > b.conf; });

  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    used[i].assign(gts[i].size(), 0);

  std::vector<double> precision, recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  std::size_t tp = 0, fp = 0;
  for (const auto& e : order) {
    const Detection& d = dets[e.image][e.det];
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts[e.image].size(); ++g) {
      if (used[e.image][g]) continue;
      const double v = iou(d, gts[e.image][g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      used[e.image][static_cast<std::size_t>(best_gt)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  // all-point interpolation: running max of precision from the right,
  // integrated over recall increments
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)],
                 precision[static_cast<std::size_t>(i) + 1]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ApResult{ap, false};
}

double ap_range_50_95(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<synthmbu::Box>>& gts) {
  double acc = 0.0;
  for (int t = 50; t <= 95; t += 5)
    acc += average_precision(dets, gts, t / 100.0).ap;
  return acc / 10.0;
}

}  // namespace harness
