#include "harness/protocols.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace harness {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace

void write_text_file(const std::filesystem::path& path,
                     const std::string& text) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path);
  if (!f) throw tensel::IoError("cannot write: " + path.string());
  f << text;
  if (!f) throw tensel::IoError("short write: " + path.string());
}

tensel::Tensor64 target_mask(const std::vector<synthmbu::Box>& boxes, int hf,
                             int wf, int stride) {
  tensel::Tensor64 mask(tensel::Dims{1, 1, hf, wf});
  for (const auto& [y, x] : dethead::target_cells(boxes, hf, wf, stride))
    mask.at(0, 0, y, x) = 1.0;
  // dilate by one feature pixel (8-neighborhood)
  tensel::Tensor64 dilated = mask;
  for (int y = 0; y < hf; ++y)
    for (int x = 0; x < wf; ++x) {
      if (mask.at(0, 0, y, x) == 0.0) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < hf && nx >= 0 && nx < wf)
            dilated.at(0, 0, ny, nx) = 1.0;
        }
    }
  return dilated;
}

SceneEval eval_scene(Model& model, const synthmbu::SynthScene& scene,
                     const EvalOptions& opts) {
  tensel::Tape<double> tape;
  const tensel::Tensor64 rgb = scene.rgb.cast<double>();
  const tensel::Tensor64 ir = scene.ir.cast<double>();
  auto fr = model.forward(tape, rgb, ir);

  SceneEval out;
  out.dets = decode(tape.value(fr.det.heatmap), tape.value(fr.det.sizes),
                    model.hyper.stride, opts.decode);
  out.gts = scene.boxes;
  out.gate = rmoe::extract_gates(fr.gate).front();
  out.reliability = tape.value(fr.uta.reliability.values);
  out.offsets = tape.value(fr.uta.offsets.values);
  out.tag = synthmbu::tag_name(scene.tag);
  out.true_shift = scene.true_shift;
  return out;
}

SplitMetrics evaluate(Model& model,
                      const std::vector<synthmbu::SynthScene>& scenes,
                      const EvalOptions& opts) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<synthmbu::Box>> gts;
  dets.reserve(scenes.size());
  gts.reserve(scenes.size());
  for (const auto& s : scenes) {
    SceneEval ev = eval_scene(model, s, opts);
    dets.push_back(std::move(ev.dets));
    gts.push_back(std::move(ev.gts));
  }
  SplitMetrics m;
  m.ap50 = average_precision(dets, gts, 0.50).ap;
  m.ap75 = average_precision(dets, gts, 0.75).ap;
  m.ap5095 = ap_range_50_95(dets, gts);
  return m;
}

// ---------------------------------------------------------------------------
// synthetic-shift robustness
// ---------------------------------------------------------------------------

ShiftReport eval_shift(std::vector<Model*>& models,
                       const std::vector<std::uint64_t>& seeds,
                       const std::vector<synthmbu::SynthScene>& test_scenes,
                       const std::vector<int>& magnitudes,
                       const EvalOptions& opts) {
  tensel::require(models.size() == seeds.size(),
                  "eval_shift: one seed per checkpoint required");
  if (models.empty() || test_scenes.empty())
    throw tensel::ConfigError("eval_shift: needs at least one model and scene");
  for (int m : magnitudes)
    if (m < 0) throw tensel::ConfigError("eval_shift: negative magnitude");

  ShiftReport report;
  report.image_size = test_scenes.front().rgb.dims().w;
  const int cap = report.image_size / 4;

  auto eval_shifted = [&](Model& model, int dx, int dy) {
    std::vector<synthmbu::SynthScene> shifted;
    shifted.reserve(test_scenes.size());
    for (const auto& s : test_scenes)
      shifted.push_back(synthmbu::apply_test_shift(s, dx, dy));
    return evaluate(model, shifted, opts);
  };

  for (int mag : magnitudes) {
    const int eff = std::min(mag, cap);
    const bool clipped = mag > cap;
    std::vector<double> seed_ap50, seed_ap5095;
    for (std::size_t si = 0; si < models.size(); ++si) {
      Model& model = *models[si];
      const std::uint64_t seed = seeds[si];
      if (mag == 0) {
        const SplitMetrics m = evaluate(model, test_scenes, opts);
        report.rows.push_back(
            {mag, eff, clipped, "mean", seed, m.ap50, m.ap5095});
        seed_ap50.push_back(m.ap50);
        seed_ap5095.push_back(m.ap5095);
        continue;
      }
      const std::array<std::pair<std::string, std::array<int, 2>>, 4> dirs{{
          {"+x", {eff, 0}},
          {"-x", {-eff, 0}},
          {"+y", {0, eff}},
          {"-y", {0, -eff}},
      }};
      double sum50 = 0.0, sum5095 = 0.0;
      for (const auto& [name, d] : dirs) {
        const SplitMetrics m = eval_shifted(model, d[0], d[1]);
        report.rows.push_back({mag, eff, clipped, name, seed, m.ap50, m.ap5095});
        sum50 += m.ap50;
        sum5095 += m.ap5095;
      }
      const double mean50 = sum50 / 4.0, mean5095 = sum5095 / 4.0;
      report.rows.push_back({mag, eff, clipped, "mean", seed, mean50, mean5095});
      seed_ap50.push_back(mean50);
      seed_ap5095.push_back(mean5095);
    }
    ShiftAggregate agg;
    agg.magnitude = mag;
    agg.effective = eff;
    agg.clipped = clipped;
    agg.ap50_mean = 0.0;
    for (double v : seed_ap50) agg.ap50_mean += v;
    agg.ap50_mean /= static_cast<double>(seed_ap50.size());
    agg.ap5095_mean = 0.0;
    for (double v : seed_ap5095) agg.ap5095_mean += v;
    agg.ap5095_mean /= static_cast<double>(seed_ap5095.size());
    agg.ap50_std = sample_std(seed_ap50, agg.ap50_mean);
    agg.ap5095_std = sample_std(seed_ap5095, agg.ap5095_mean);
    report.aggregate.push_back(agg);
  }
  return report;
}

std::string ShiftReport::csv() const {
  std::string out = "shift,direction,seed,ap50,ap5095\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%llu,%.6f,%.6f\n", r.magnitude,
                  r.direction.c_str(),
                  static_cast<unsigned long long>(r.seed), r.ap50, r.ap5095);
    out += buf;
  }
  return out;
}

std::string ShiftReport::aggregate_csv() const {
  std::string out =
      "shift,effective,clipped,ap50_mean,ap50_std,ap5095_mean,ap5095_std\n";
  char buf[200];
  for (const auto& a : aggregate) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n",
                  a.magnitude, a.effective, a.clipped ? 1 : 0, a.ap50_mean,
                  a.ap50_std, a.ap5095_mean, a.ap5095_std);
    out += buf;
  }
  return out;
}

std::string ShiftReport::table() const {
  std::string out =
      "shift  effective  width-frac  ap50 (mean+/-std)   ap5095 (mean+/-std)\n";
  char buf[200];
  for (const auto& a : aggregate) {
    std::snprintf(buf, sizeof(buf), "%4d px %6d px  %8.4f   %.4f +/- %.4f   %.4f +/- %.4f%s\n",
                  a.magnitude, a.effective,
                  static_cast<double>(a.effective) / image_size, a.ap50_mean,
                  a.ap50_std, a.ap5095_mean, a.ap5095_std,
                  a.clipped ? "   [clipped to cap]" : "");
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// top-k sensitivity
// ---------------------------------------------------------------------------

std::int64_t active_param_count(Model& model, int k) {
  std::int64_t shared = model.param_count();
  std::vector<std::int64_t> experts;
  for (int i = 0; i < model.hyper.rmoe.num_experts; ++i) {
    const std::int64_t n = model.pool.expert_param_count(i);
    shared -= n;
    experts.push_back(n);
  }
  std::sort(experts.rbegin(), experts.rend());
  std::int64_t active = shared;
  for (int i = 0; i < k && i < static_cast<int>(experts.size()); ++i)
    active += experts[static_cast<std::size_t>(i)];
  return active;
}

TopkReport sweep_topk(const dethead::ModelHyper& base_hyper,
                      const dethead::TrainConfig& base_train,
                      const std::vector<synthmbu::SynthScene>& train_scenes,
                      const std::vector<synthmbu::SynthScene>& test_scenes,
                      const std::vector<int>& k_values,
                      const std::vector<std::uint64_t>& seeds,
                      const EvalOptions& opts) {
  TopkReport report;
  for (int k : k_values) {
    for (std::uint64_t seed : seeds) {
      dethead::ModelHyper hyper = base_hyper;
      hyper.rmoe.top_k = k;
      dethead::TrainConfig cfg = base_train;
      cfg.seed = seed;
      Model model = Model::init(hyper, seed);
      dethead::train(model, train_scenes, cfg);
      const SplitMetrics m = evaluate(model, test_scenes, opts);
      report.rows.push_back(
          {k, seed, m.ap50, m.ap75, m.ap5095, active_param_count(model, k)});
    }
  }
  return report;
}

std::string TopkReport::csv() const {
  std::string out = "k,seed,ap50,ap75,ap5095,active_params\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%llu,%.6f,%.6f,%.6f,%lld\n", r.k,
                  static_cast<unsigned long long>(r.seed), r.ap50, r.ap75,
                  r.ap5095, static_cast<long long>(r.active_params));
    out += buf;
  }
  return out;
}

std::string TopkReport::table() const {
  std::map<int, std::vector<const TopkRow*>> by_k;
  for (const auto& r : rows) by_k[r.k].push_back(&r);
  std::string out =
      "k    ap50 (mean+/-std)   ap75 (mean+/-std)   ap5095 (mean+/-std)  active params\n";
  char buf[240];
  for (const auto& [k, group] : by_k) {
    std::vector<double> a50, a75, a5095;
    for (const auto* r : group) {
      a50.push_back(r->ap50);
      a75.push_back(r->ap75);
      a5095.push_back(r->ap5095);
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    const double m50 = mean(a50), m75 = mean(a75), m5095 = mean(a5095);
    std::snprintf(buf, sizeof(buf),
                  "%d    %.4f +/- %.4f   %.4f +/- %.4f   %.4f +/- %.4f   %lld\n",
                  k, m50, sample_std(a50, m50), m75, sample_std(a75, m75),
                  m5095, sample_std(a5095, m5095),
                  static_cast<long long>(group.front()->active_params));
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// routing statistics
// ---------------------------------------------------------------------------

RoutingReport report_routing(Model& model,
                             const std::vector<synthmbu::SynthScene>& scenes,
                             const EvalOptions& opts) {
  const int hf = model.hyper.feature_size();
  std::vector<rmoe::RoutingSample> samples;
  samples.reserve(scenes.size());
  for (const auto& s : scenes) {
    SceneEval ev = eval_scene(model, s, opts);
    rmoe::RoutingSample rs;
    rs.tag = ev.tag;
    rs.gate = ev.gate.probs;
    rs.reliability = std::move(ev.reliability);
    rs.mask = target_mask(s.boxes, hf, hf, model.hyper.stride);
    samples.push_back(std::move(rs));
  }

  RoutingReport report;
  report.groups = rmoe::routing_stats(samples);
  for (const auto& g : report.groups) {
    if (g.scene == "dark" && g.n > 0) {
      report.has_dark = true;
      report.dark_prefers_ir = g.w[1] >= g.w[0];
    }
  }
  return report;
}

std::string RoutingReport::csv() const {
  std::string out = "scene,N,R_target,w_rgb,w_ir,w_inter\n";
  for (const auto& g : groups) {
    out += g.scene + "," + std::to_string(g.n) + ",";
    if (g.n == 0) {
      out += ",,,\n";
      continue;
    }
    out += fmt("%.4f", g.r_target) + "," + fmt("%.4f", g.w[0]) + "," +
           fmt("%.4f", g.w[1]) + "," + fmt("%.4f", g.w[2]) + "\n";
  }
  return out;
}

std::string RoutingReport::table() const {
  std::string out = "scene       N      R_target  w_rgb   w_ir    w_inter\n";
  char buf[200];
  for (const auto& g : groups) {
    if (g.n == 0) {
      std::snprintf(buf, sizeof(buf), "%-10s %6lld  (empty group)\n",
                    g.scene.c_str(), static_cast<long long>(g.n));
    } else {
      std::snprintf(buf, sizeof(buf), "%-10s %6lld  %.4f    %.4f  %.4f  %.4f\n",
                    g.scene.c_str(), static_cast<long long>(g.n), g.r_target,
                    g.w[0], g.w[1], g.w[2]);
    }
    out += buf;
  }
  if (has_dark)
    out += std::string("dark-scene w_ir >= w_rgb: ") +
           (dark_prefers_ir ? "pass" : "fail") + " (reported tendency)\n";
  return out;
}

}  // namespace harness
