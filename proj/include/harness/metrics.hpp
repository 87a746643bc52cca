#pragma once

#include <vector>

#include "synthmbu/synthmbu.hpp"
#include "tensel/tensor.hpp"

namespace harness {

/// One decoded detection in image pixels.
struct Detection {
  double cx = 0, cy = 0, w = 0, h = 0;
  double confidence = 0;
};

struct DecodeOptions {
  double threshold = 0.3;
  int max_dets = 10;
};

/// Extracts detections from a heatmap/size pair on the feature grid.
///
/// A cell is a peak when strictly greater than its 3x3 neighbors; equal
/// plateau values keep only the lowest-(row,col) cell. Sub-cell refinement
/// fits a log-parabola per axis (exact for Gaussian peaks). Output is sorted
/// by confidence descending, ties by (row,col), truncated to max_dets.
std::vector<Detection> decode(const tensel::Tensor64& heatmap,
                              const tensel::Tensor64& sizes, int stride,
                              const DecodeOptions& opts = {});

double iou(const Detection& d, const synthmbu::Box& b);

struct ApResult {
  double ap = 0.0;
  /// True when the split has no ground truth at all (AP pinned to 1 with no
  /// detections, 0 otherwise).
  bool degenerate = false;
};

/// Greedy confidence-descending matching, each ground truth used at most
/// once, all-point interpolated area under the precision-recall curve.
ApResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<synthmbu::Box>>& gts,
                           double iou_threshold);

/// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
double ap_range_50_95(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<synthmbu::Box>>& gts);

}  // namespace harness
