#include "harness/gradcheck_suite.hpp"

#include <cstdio>

#include "dethead/train.hpp"
#include "uta/uta.hpp"

namespace harness {

namespace {

using tensel::Dims;
using tensel::Param64;
using tensel::Tape64;
using tensel::Tensor64;
using tensel::Var64;

Tensor64 random_tensor(Dims d, tensel::Rng& rng, double scale = 1.0) {
  Tensor64 t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

/// Random projection turns a tensor output into a scalar with informative
/// gradients everywhere.
Var64 project(Var64 x, const Tensor64& weights, Tape64& t) {
  return tensel::mean_all(tensel::mul(x, t.leaf(weights)));
}

ModuleCheck check_resampler(std::uint64_t seed) {
  tensel::Rng rng(seed);
  Param64 feature("resampler.feature", random_tensor(Dims{1, 2, 16, 16}, rng));
  Tensor64 off(Dims{1, 2, 16, 16});
  for (std::int64_t i = 0; i < off.size(); ++i) off[i] = rng.uniform(-2.0, 2.0);
  Param64 offsets("resampler.offsets", off);
  const Tensor64 proj = random_tensor(Dims{1, 2, 16, 16}, rng);
  auto build = [&](Tape64& t, std::vector<int>*) {
    Var64 warped =
        uta::resample_bilinear(t.param(feature), t.param(offsets));
    return project(warped, proj, t);
  };
  return {"uta.resample_bilinear", tensel::grad_check({&feature, &offsets}, build)};
}

ModuleCheck check_reliability_head(std::uint64_t seed) {
  tensel::Rng rng(seed);
  auto params = uta::UtaParams<double>::init(2, rng, /*zero_final=*/false);
  Param64 f_ir("input.f_ir", random_tensor(Dims{1, 2, 16, 16}, rng));
  Param64 aligned("input.aligned", random_tensor(Dims{1, 2, 16, 16}, rng));
  const Tensor64 proj = random_tensor(Dims{1, 1, 16, 16}, rng);
  std::vector<Param64*> checked = {&params.rel_w1, &params.rel_b1,
                                   &params.rel_w2, &params.rel_b2, &f_ir,
                                   &aligned};
  auto build = [&](Tape64& t, std::vector<int>*) {
    auto rel = uta::predict_reliability(t.param(f_ir), t.param(aligned),
                                        params, t);
    return project(rel.values, proj, t);
  };
  return {"uta.predict_reliability", tensel::grad_check(checked, build)};
}

ModuleCheck check_offset_predictor(std::uint64_t seed) {
  tensel::Rng rng(seed);
  auto params = uta::UtaParams<double>::init(2, rng, /*zero_final=*/false);
  Param64 f_rgb("input.f_rgb", random_tensor(Dims{1, 2, 16, 16}, rng));
  Param64 f_ir("input.f_ir", random_tensor(Dims{1, 2, 16, 16}, rng));
  const Tensor64 proj = random_tensor(Dims{1, 2, 16, 16}, rng);
  std::vector<Param64*> checked = {&params.off_w1, &params.off_b1,
                                   &params.off_w2, &params.off_b2, &f_rgb,
                                   &f_ir};
  auto build = [&](Tape64& t, std::vector<int>*) {
    auto off = uta::predict_offsets(t.param(f_rgb), t.param(f_ir), params, t,
                                    16.0);
    return project(off.values, proj, t);
  };
  return {"uta.predict_offsets", tensel::grad_check(checked, build)};
}

ModuleCheck check_router(std::uint64_t seed) {
  tensel::Rng rng(seed);
  auto router = rmoe::RouterParams<double>::init(2, 3);
  router.w = Param64("rmoe.router.w", random_tensor(Dims{3, 4, 1, 1}, rng, 0.5));
  router.b = Param64("rmoe.router.b", random_tensor(Dims{1, 3, 1, 1}, rng, 0.2));
  Param64 f_in("input.f_in", random_tensor(Dims{1, 4, 16, 16}, rng));
  const Tensor64 proj = random_tensor(Dims{1, 3, 1, 1}, rng);
  std::vector<Param64*> checked = {&router.w, &router.b, &f_in};
  auto build = [&](Tape64& t, std::vector<int>*) {
    auto g = rmoe::gate(t.param(f_in), router, t);
    return project(g.probs, proj, t);
  };
  return {"rmoe.gate", tensel::grad_check(checked, build)};
}

ModuleCheck check_expert(int expert, std::uint64_t seed) {
  tensel::Rng rng(seed + static_cast<std::uint64_t>(expert));
  auto pool = rmoe::ExpertPool<double>::init(2, rng);
  Param64 f_in("input.f_in", random_tensor(Dims{1, 4, 16, 16}, rng));
  const Tensor64 proj = random_tensor(Dims{1, 2, 16, 16}, rng);
  std::vector<Param64*> checked = pool.expert_params(expert);
  checked.push_back(&f_in);
  auto build = [&](Tape64& t, std::vector<int>*) {
    return project(pool.run(expert, t.param(f_in), t), proj, t);
  };
  return {std::string("rmoe.expert.") + rmoe::expert_name(expert),
          tensel::grad_check(checked, build)};
}

ModuleCheck check_det_head(std::uint64_t seed) {
  tensel::Rng rng(seed);
  auto head = dethead::DetParams<double>::init(2, rng, /*zero_heads=*/false);
  Param64 fused("input.fused", random_tensor(Dims{1, 2, 16, 16}, rng));
  const Tensor64 ph = random_tensor(Dims{1, 1, 16, 16}, rng);
  const Tensor64 ps = random_tensor(Dims{1, 2, 16, 16}, rng);
  std::vector<Param64*> checked = head.params();
  checked.push_back(&fused);
  auto build = [&](Tape64& t, std::vector<int>*) {
    auto pred = dethead::detect(t.param(fused), head, t);
    return tensel::add(project(pred.heatmap, ph, t), project(pred.sizes, ps, t));
  };
  return {"dethead.detect", tensel::grad_check(checked, build)};
}

ModuleCheck check_uta_loss(std::uint64_t seed) {
  tensel::Rng rng(seed);
  Param64 f_ir("input.f_ir", random_tensor(Dims{1, 2, 16, 16}, rng));
  Param64 aligned("input.aligned", random_tensor(Dims{1, 2, 16, 16}, rng));
  Tensor64 r(Dims{1, 1, 16, 16});
  for (std::int64_t i = 0; i < r.size(); ++i) r[i] = rng.uniform(0.2, 0.8);
  Param64 rel("input.reliability", r);
  std::vector<Param64*> checked = {&f_ir, &aligned, &rel};
  auto build = [&](Tape64& t, std::vector<int>*) {
    return uta::uta_loss(t.param(f_ir), t.param(aligned), t.param(rel), 1e-4,
                         1e-8);
  };
  return {"uta.uta_loss", tensel::grad_check(checked, build)};
}

ModuleCheck check_det_loss(std::uint64_t seed) {
  tensel::Rng rng(seed);
  Param64 logits("input.heat_logits", random_tensor(Dims{1, 1, 16, 16}, rng));
  Param64 size_raw("input.size_raw", random_tensor(Dims{1, 2, 16, 16}, rng));
  const std::vector<synthmbu::Box> boxes = {{22.0, 30.0, 6.0, 8.0},
                                            {44.5, 17.5, 9.0, 5.0}};
  std::vector<Param64*> checked = {&logits, &size_raw};
  auto build = [&](Tape64& t, std::vector<int>*) {
    dethead::DetPrediction<double> pred;
    pred.heatmap = tensel::sigmoid(t.param(logits));
    pred.sizes = tensel::clamp(t.param(size_raw), 0.0,
                               std::numeric_limits<double>::infinity());
    return dethead::det_loss(pred, boxes, 4);
  };
  return {"dethead.det_loss", tensel::grad_check(checked, build)};
}

ModuleCheck check_ta_loss(std::uint64_t seed) {
  tensel::Rng rng(seed);
  Param64 offsets("input.offsets", random_tensor(Dims{1, 2, 16, 16}, rng));
  const std::vector<synthmbu::Box> boxes = {{24.0, 24.0, 8.0, 8.0},
                                            {40.0, 44.0, 5.0, 7.0}};
  std::vector<Param64*> checked = {&offsets};
  auto build = [&](Tape64& t, std::vector<int>*) {
    return dethead::ta_loss(t.param(offsets), 0.7, -0.45, boxes, 4);
  };
  return {"dethead.ta_loss", tensel::grad_check(checked, build)};
}

/// Full pipeline on a 2-channel 16x16 feature scale. Zero-initialized layers
/// are re-randomized so offsets sit away from the bilinear kernel's integer
/// kinks and the gate is nonuniform (a real top-k decision for k < E).
ModuleCheck check_pipeline(int top_k, std::uint64_t seed) {
  tensel::Rng rng(seed);
  dethead::ModelHyper hyper;
  hyper.image_size = 64;
  hyper.image_channels = 1;
  hyper.channels = 2;
  hyper.stride = 4;
  hyper.rmoe.top_k = top_k;
  hyper.uta.offset_clamp = 16.0;
  auto model = dethead::FusionModel<double>::init(hyper, seed);
  for (auto* p : model.params()) {
    bool all_zero = true;
    for (std::int64_t i = 0; i < p->size() && all_zero; ++i)
      if (p->value[i] != 0.0) all_zero = false;
    if (all_zero)
      for (std::int64_t i = 0; i < p->size(); ++i)
        p->value[i] = rng.normal(0.0, 0.3);
  }
  const Tensor64 rgb = random_tensor(Dims{1, 1, 64, 64}, rng, 0.5);
  const Tensor64 ir = random_tensor(Dims{1, 1, 64, 64}, rng, 0.5);
  const std::vector<synthmbu::Box> boxes = {{26.0, 34.0, 7.0, 6.0}};
  auto build = [&, rgb, ir](Tape64& t, std::vector<int>* sig) {
    auto fr = model.forward(t, rgb, ir, sig);
    Var64 l_det = dethead::det_loss(fr.det, boxes, hyper.stride);
    Var64 l_ta =
        dethead::ta_loss(fr.uta.offsets.values, 0.6, -0.4, boxes, hyper.stride);
    auto parts = dethead::total_loss(l_det, l_ta, fr.uta.loss, 1.0, 1.0);
    return parts.total;
  };
  return {"pipeline.top_k=" + std::to_string(top_k),
          tensel::grad_check(model.params(), build)};
}

}  // namespace

GradSuiteResult run_gradcheck_suite(std::uint64_t seed) {
  GradSuiteResult result;
  result.checks.push_back(check_resampler(seed + 1));
  result.checks.push_back(check_offset_predictor(seed + 2));
  result.checks.push_back(check_reliability_head(seed + 3));
  result.checks.push_back(check_router(seed + 4));
  for (int e = 0; e < 3; ++e)
    result.checks.push_back(check_expert(e, seed + 5));
  result.checks.push_back(check_det_head(seed + 8));
  result.checks.push_back(check_uta_loss(seed + 9));
  result.checks.push_back(check_det_loss(seed + 10));
  result.checks.push_back(check_ta_loss(seed + 11));
  result.checks.push_back(check_pipeline(3, seed + 12));
  result.checks.push_back(check_pipeline(2, seed + 13));
  for (const auto& c : result.checks) {
    result.max_rel_err = std::max(result.max_rel_err, c.report.max_rel_err);
    result.skipped += c.report.skipped;
  }
  return result;
}

std::string gradcheck_table(const GradSuiteResult& result) {
  std::string out =
      "module                        parameter              max rel err   skipped\n";
  char buf[240];
  for (const auto& c : result.checks) {
    for (const auto& row : c.report.rows) {
      std::snprintf(buf, sizeof(buf), "%-28s  %-20s  %.3e   %lld\n",
                    c.module.c_str(), row.param.c_str(), row.max_rel_err,
                    static_cast<long long>(row.skipped));
      out += buf;
    }
  }
  std::snprintf(buf, sizeof(buf),
                "overall max rel err: %.3e  (tolerance 1e-4), skipped: %lld\n",
                result.max_rel_err, static_cast<long long>(result.skipped));
  out += buf;
  return out;
}

}  // namespace harness
