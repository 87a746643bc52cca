#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dethead/train.hpp"
#include "harness/metrics.hpp"
#include "rmoe/rmoe.hpp"

// Evaluation protocols: plain split evaluation, the synthetic-shift
// robustness sweep (four directions averaged per magnitude), the top-k
// sensitivity sweep, and scene-wise routing statistics.

namespace harness {

using Model = dethead::FusionModel<double>;

struct EvalOptions {
  DecodeOptions decode;
};

/// Everything the protocols need from one evaluated scene.
struct SceneEval {
  std::vector<Detection> dets;
  std::vector<synthmbu::Box> gts;
  rmoe::GateVector gate;
  tensel::Tensor64 reliability;  // (1,1,H,W)
  tensel::Tensor64 offsets;      // (1,2,H,W)
  std::string tag;
  std::array<float, 2> true_shift{0.f, 0.f};
};

SceneEval eval_scene(Model& model, const synthmbu::SynthScene& scene,
                     const EvalOptions& opts);

struct SplitMetrics {
  double ap50 = 0, ap75 = 0, ap5095 = 0;
};

SplitMetrics evaluate(Model& model,
                      const std::vector<synthmbu::SynthScene>& scenes,
                      const EvalOptions& opts);

// ---------------------------------------------------------------------------
// synthetic-shift robustness protocol
// ---------------------------------------------------------------------------

struct ShiftRow {
  int magnitude = 0;       // requested shift, image pixels
  int effective = 0;       // applied shift after the generator cap
  bool clipped = false;    // requested > cap
  std::string direction;   // "+x", "-x", "+y", "-y" or "mean"
  std::uint64_t seed = 0;  // training seed of the evaluated checkpoint
  double ap50 = 0, ap5095 = 0;
};

struct ShiftAggregate {
  int magnitude = 0;
  int effective = 0;
  bool clipped = false;
  double ap50_mean = 0, ap50_std = 0;
  double ap5095_mean = 0, ap5095_std = 0;
};

struct ShiftReport {
  std::vector<ShiftRow> rows;            // direction rows and per-seed means
  std::vector<ShiftAggregate> aggregate;  // mean +/- std over seeds
  int image_size = 0;

  std::string csv() const;            // shift,direction,seed,ap50,ap5095
  std::string aggregate_csv() const;  // per-magnitude mean/std
  std::string table() const;          // human-readable, annotates clipping
};

/// Evaluates each checkpoint on the test split under RGB-only test-time
/// shifts. Magnitude 0 is a single plain evaluation; nonzero magnitudes run
/// the four axis directions and a mean row. Shifts beyond a quarter of the
/// image width are clipped to the cap and annotated.
ShiftReport eval_shift(std::vector<Model*>& models,
                       const std::vector<std::uint64_t>& seeds,
                       const std::vector<synthmbu::SynthScene>& test_scenes,
                       const std::vector<int>& magnitudes,
                       const EvalOptions& opts);

// ---------------------------------------------------------------------------
// top-k sensitivity protocol
// ---------------------------------------------------------------------------

struct TopkRow {
  int k = 0;
  std::uint64_t seed = 0;
  double ap50 = 0, ap75 = 0, ap5095 = 0;
  std::int64_t active_params = 0;
};

struct TopkReport {
  std::vector<TopkRow> rows;
  std::string csv() const;  // k,seed,ap50,ap75,ap5095,active_params
  std::string table() const;
};

/// Trains one model per (k, seed) with the base configuration and reports
/// test metrics plus the inference-active parameter count for that k
/// (non-expert parameters plus the k largest experts).
TopkReport sweep_topk(const dethead::ModelHyper& base_hyper,
                      const dethead::TrainConfig& base_train,
                      const std::vector<synthmbu::SynthScene>& train_scenes,
                      const std::vector<synthmbu::SynthScene>& test_scenes,
                      const std::vector<int>& k_values,
                      const std::vector<std::uint64_t>& seeds,
                      const EvalOptions& opts);

std::int64_t active_param_count(Model& model, int k);

// ---------------------------------------------------------------------------
// routing statistics protocol
// ---------------------------------------------------------------------------

struct RoutingReport {
  std::vector<rmoe::RoutingGroup> groups;
  bool dark_prefers_ir = false;  // reported tendency, not an assertion
  bool has_dark = false;

  std::string csv() const;  // scene,N,R_target,w_rgb,w_ir,w_inter
  std::string table() const;
};

/// Runs the model over the given scenes, groups gate weights by scene tag and
/// averages reliability inside ground-truth boxes dilated by one feature
/// pixel.
RoutingReport report_routing(Model& model,
                             const std::vector<synthmbu::SynthScene>& scenes,
                             const EvalOptions& opts);

/// Binary target mask on the feature grid: box extents dilated by one cell.
tensel::Tensor64 target_mask(const std::vector<synthmbu::Box>& boxes, int hf,
                             int wf, int stride);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace harness
