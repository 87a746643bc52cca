#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "harness/cli.hpp"
#include "harness/config.hpp"
#include "harness/protocols.hpp"

using namespace harness;
using synthmbu::Box;
using tensel::Dims;
using tensel::Tensor64;
namespace fs = std::filesystem;

namespace {

/// Exhaustive PR oracle: re-matches the top-k prefix from scratch for every
/// cut point, then integrates the interpolated envelope directly.
double ap_oracle(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<Box>>& gts, double thr) {
  struct Entry {
    double conf;
    std::size_t image, det;
  };
  std::vector<Entry> order;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j)
      order.push_back({dets[i][j].confidence, i, j});
  for (const auto& g : gts) total_gt += g.size();
  std::stable_sort(order.begin(), order.end(),
                   [](const Entry& a, const Entry& b) { return a.conf > b.conf; });
  if (total_gt == 0) return order.empty() ? 1.0 : 0.0;

  std::vector<double> precisions, recalls;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    // greedy matching of the k highest-confidence detections, from scratch
    std::vector<std::vector<char>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
    std::size_t tp = 0;
    for (std::size_t e = 0; e < k; ++e) {
      const Detection& d = dets[order[e].image][order[e].det];
      double best = 0.0;
      int best_g = -1;
      for (std::size_t g = 0; g < gts[order[e].image].size(); ++g) {
        if (used[order[e].image][g]) continue;
        const double v = iou(d, gts[order[e].image][g]);
        if (v >= thr && v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0) {
        used[order[e].image][static_cast<std::size_t>(best_g)] = 1;
        ++tp;
      }
    }
    precisions.push_back(static_cast<double>(tp) / static_cast<double>(k));
    recalls.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  double ap = 0.0, prev_r = 0.0;
  for (std::size_t k = 0; k < recalls.size(); ++k) {
    if (recalls[k] <= prev_r) continue;
    double envelope = 0.0;
    for (std::size_t j = k; j < precisions.size(); ++j)
      envelope = std::max(envelope, precisions[j]);
    ap += (recalls[k] - prev_r) * envelope;
    prev_r = recalls[k];
  }
  return ap;
}

Detection det(double cx, double cy, double w, double h, double conf) {
  return Detection{cx, cy, w, h, conf};
}

}  // namespace

TEST_CASE("config parser handles comments, trimming and typed getters") {
  const auto cfg = Config::from_string(
      "# top comment\n"
      "train.alpha = 1.5\n"
      "rmoe.top_k=2   # trailing comment\n"
      "eval.magnitudes = 0, 5, 10\n"
      "name = hello\n"
      "\n");
  CHECK(cfg.get_double("train.alpha", 0.0) == 1.5);
  CHECK(cfg.get_int("rmoe.top_k", 3) == 2);
  CHECK(cfg.get_int("absent", 7) == 7);
  CHECK(cfg.get_string("name", "") == "hello");
  CHECK(cfg.get_int_list("eval.magnitudes", {}) == std::vector<int>{0, 5, 10});
  CHECK(cfg.get_u64("absent.u64", 9) == 9);

  CHECK_THROWS_AS(Config::from_string("not a key value line\n"),
                  tensel::ConfigError);
  CHECK_THROWS_AS(Config::from_string("k = v\n= empty\n"),
                  tensel::ConfigError);
  const auto bad = Config::from_string("train.alpha = abc\n");
  CHECK_THROWS_AS(bad.get_double("train.alpha", 0.0), tensel::ConfigError);
  CHECK_THROWS_AS(Config::from_file("/no/such/config.cfg"), tensel::IoError);
}

TEST_CASE("decode finds a single delta peak at its cell") {
  Tensor64 heat(Dims{1, 1, 8, 8});
  heat.at(0, 0, 3, 5) = 0.9;
  Tensor64 sizes(Dims{1, 2, 8, 8});
  sizes.at(0, 0, 3, 5) = 1.5;
  sizes.at(0, 1, 3, 5) = 2.0;
  auto dets = decode(heat, sizes, 4);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].confidence == 0.9);
  CHECK(dets[0].cx == doctest::Approx(5 * 4 + 1.5));
  CHECK(dets[0].cy == doctest::Approx(3 * 4 + 1.5));
  CHECK(dets[0].w == doctest::Approx(6.0));
  CHECK(dets[0].h == doctest::Approx(8.0));
}

TEST_CASE("decode returns nothing for a uniform sub-threshold heatmap") {
  Tensor64 heat = Tensor64::full(Dims{1, 1, 8, 8}, 0.25);
  Tensor64 sizes(Dims{1, 2, 8, 8});
  CHECK(decode(heat, sizes, 4).empty());
}

TEST_CASE("decode orders equal peaks deterministically by (row, col)") {
  Tensor64 heat(Dims{1, 1, 8, 8});
  heat.at(0, 0, 5, 2) = 0.7;
  heat.at(0, 0, 1, 6) = 0.7;
  Tensor64 sizes(Dims{1, 2, 8, 8});
  auto dets = decode(heat, sizes, 4);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].cy == doctest::Approx(1 * 4 + 1.5));  // lower row first
  CHECK(dets[1].cy == doctest::Approx(5 * 4 + 1.5));
}

TEST_CASE("decode respects max_dets and keeps the strongest peaks") {
  Tensor64 heat(Dims{1, 1, 8, 8});
  heat.at(0, 0, 1, 1) = 0.9;
  heat.at(0, 0, 1, 5) = 0.8;
  heat.at(0, 0, 5, 1) = 0.7;
  heat.at(0, 0, 5, 5) = 0.6;
  Tensor64 sizes(Dims{1, 2, 8, 8});
  DecodeOptions opts;
  opts.max_dets = 2;
  auto dets = decode(heat, sizes, 4, opts);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].confidence == 0.9);
  CHECK(dets[1].confidence == 0.8);
}

TEST_CASE("decode log-parabola refinement recovers sub-cell peaks") {
  // Gaussian peak at cell x = 4.3
  Tensor64 heat(Dims{1, 1, 1, 9});
  for (int x = 0; x < 9; ++x)
    heat.at(0, 0, 0, x) = 0.9 * std::exp(-0.5 * (x - 4.3) * (x - 4.3));
  Tensor64 sizes(Dims{1, 2, 1, 9});
  auto dets = decode(heat, sizes, 4);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].cx == doctest::Approx(4.3 * 4 + 1.5).epsilon(1e-9));
}

TEST_CASE("iou hand cases") {
  CHECK(iou(det(10, 10, 4, 4, 1), Box{10, 10, 4, 4}) == doctest::Approx(1.0));
  CHECK(iou(det(0, 0, 4, 4, 1), Box{100, 100, 4, 4}) == 0.0);
  // half-overlapping unit-height boxes
  CHECK(iou(det(1, 0, 2, 1, 1), Box{2, 0, 2, 1}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("average precision ideal and degenerate cases") {
  std::vector<std::vector<Box>> gts = {{{10, 10, 4, 4}}, {{20, 20, 6, 6}}};
  std::vector<std::vector<Detection>> perfect = {
      {det(10, 10, 4, 4, 1.0)}, {det(20, 20, 6, 6, 0.9)}};
  CHECK(average_precision(perfect, gts, 0.5).ap == doctest::Approx(1.0));

  std::vector<std::vector<Detection>> off = {{det(40, 40, 4, 4, 1.0)},
                                             {det(50, 50, 6, 6, 0.9)}};
  CHECK(average_precision(off, gts, 0.5).ap == doctest::Approx(0.0));

  std::vector<std::vector<Box>> no_gt = {{}, {}};
  std::vector<std::vector<Detection>> no_det = {{}, {}};
  auto degenerate = average_precision(no_det, no_gt, 0.5);
  CHECK(degenerate.ap == 1.0);
  CHECK(degenerate.degenerate);
  auto spurious = average_precision(off, no_gt, 0.5);
  CHECK(spurious.ap == 0.0);
  CHECK(spurious.degenerate);

  CHECK_THROWS_AS(average_precision(perfect, gts, 0.0), tensel::ConfigError);
  CHECK_THROWS_AS(average_precision(perfect, gts, 1.0), tensel::ConfigError);
}

TEST_CASE("average precision matches the exhaustive oracle on a micro-corpus") {
  // three images with overlaps, duplicates, a miss and a false positive
  std::vector<std::vector<Box>> gts = {
      {{10, 10, 6, 6}, {30, 12, 8, 6}},
      {{16, 40, 5, 5}},
      {{40, 40, 10, 8}, {12, 44, 6, 6}, {52, 20, 4, 4}}};
  std::vector<std::vector<Detection>> dets = {
      {det(11, 10.5, 6, 6, 0.95), det(30.5, 12, 7, 6, 0.6),
       det(11, 10, 6, 6, 0.55)},
      {det(17, 41, 5, 5, 0.8), det(50, 50, 5, 5, 0.75)},
      {det(40, 41, 9, 8, 0.9), det(12.5, 44, 6, 6, 0.3),
       det(52, 20.5, 4.5, 4, 0.25), det(33, 33, 4, 4, 0.2)}};

  for (double thr : {0.5, 0.6, 0.75, 0.9}) {
    const double mine = average_precision(dets, gts, thr).ap;
    const double oracle = ap_oracle(dets, gts, thr);
    CHECK(std::abs(mine - oracle) < 1e-9);
  }
}

TEST_CASE("average precision is invariant to confidence-preserving reorder") {
  std::vector<std::vector<Box>> gts = {{{10, 10, 6, 6}, {30, 12, 8, 6}},
                                       {{16, 40, 5, 5}}};
  std::vector<std::vector<Detection>> dets = {
      {det(11, 10.5, 6, 6, 0.95), det(30.5, 12, 7, 6, 0.6)},
      {det(17, 41, 5, 5, 0.8), det(50, 50, 5, 5, 0.75)}};
  const double base = average_precision(dets, gts, 0.5).ap;
  std::reverse(dets[0].begin(), dets[0].end());
  std::reverse(dets[1].begin(), dets[1].end());
  CHECK(average_precision(dets, gts, 0.5).ap == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("average precision is non-increasing in the IoU threshold") {
  std::vector<std::vector<Box>> gts = {{{10, 10, 6, 6}, {30, 12, 8, 6}},
                                       {{16, 40, 5, 5}}};
  std::vector<std::vector<Detection>> dets = {
      {det(11, 11, 6, 5.5, 0.95), det(31, 12, 7, 6, 0.6)},
      {det(17, 41, 5, 5, 0.8)}};
  double prev = 1.1;
  for (int t = 50; t <= 95; t += 5) {
    const double ap = average_precision(dets, gts, t / 100.0).ap;
    CHECK(ap <= prev + 1e-12);
    prev = ap;
  }
}

TEST_CASE("target_mask dilates box cells by one feature pixel") {
  auto mask = target_mask({{24.0, 24.0, 4.0, 4.0}}, 16, 16, 4);
  // center cell (5.625 -> rounds within extent) plus an 8-neighborhood ring
  double count = 0;
  for (std::int64_t i = 0; i < mask.size(); ++i) count += mask[i];
  CHECK(count > 1);
  CHECK(mask.at(0, 0, 6, 6) == 1.0);
  CHECK(mask.at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("active parameter counts follow the k largest experts") {
  dethead::ModelHyper hyper;
  hyper.image_size = 32;
  hyper.channels = 4;
  hyper.uta.offset_clamp = 8;
  auto model = Model::init(hyper, 0);
  const std::int64_t total = model.param_count();
  const std::int64_t rgb = 4 * 4 + 4, ir = rgb, inter = 4 * 8 * 9 + 4;
  const std::int64_t shared = total - rgb - ir - inter;
  CHECK(active_param_count(model, 1) == shared + inter);
  CHECK(active_param_count(model, 2) == shared + inter + rgb);
  CHECK(active_param_count(model, 3) == total);
  CHECK(active_param_count(model, 3) > active_param_count(model, 1));
}

TEST_CASE("eval_shift recomposes means exactly and emits pinned schemas") {
  synthmbu::GeneratorConfig gen;
  gen.image_size = 32;
  gen.shift_range = 6.0;
  std::vector<synthmbu::SynthScene> scenes;
  for (int i = 0; i < 4; ++i)
    scenes.push_back(synthmbu::generate_scene(static_cast<std::uint64_t>(i), gen));

  dethead::ModelHyper hyper;
  hyper.image_size = 32;
  hyper.channels = 4;
  hyper.uta.offset_clamp = 8;
  auto model = Model::init(hyper, 0);
  std::vector<Model*> models = {&model};
  std::vector<std::uint64_t> seeds = {0};

  EvalOptions opts;
  opts.decode.threshold = 0.1;  // untrained model: keep some detections
  auto report = eval_shift(models, seeds, scenes, {0, 5, 40}, opts);

  // magnitude 0: one row; magnitude 5: four directions + mean; 40 clipped to 8
  REQUIRE(report.rows.size() == 1 + 5 + 5);
  const auto& agg40 = report.aggregate.back();
  CHECK(agg40.magnitude == 40);
  CHECK(agg40.effective == 8);
  CHECK(agg40.clipped);

  for (int mag : {5, 40}) {
    std::vector<const ShiftRow*> dirs;
    const ShiftRow* mean_row = nullptr;
    for (const auto& r : report.rows) {
      if (r.magnitude != mag) continue;
      if (r.direction == "mean") {
        mean_row = &r;
      } else {
        dirs.push_back(&r);
      }
    }
    REQUIRE(dirs.size() == 4);
    REQUIRE(mean_row != nullptr);
    double sum50 = 0, sum5095 = 0;
    for (const auto* d : dirs) {
      sum50 += d->ap50;
      sum5095 += d->ap5095;
    }
    CHECK(mean_row->ap50 == doctest::Approx(sum50 / 4.0).epsilon(1e-12));
    CHECK(mean_row->ap5095 == doctest::Approx(sum5095 / 4.0).epsilon(1e-12));
  }

  CHECK(report.csv().rfind("shift,direction,seed,ap50,ap5095\n", 0) == 0);
  CHECK(report.aggregate_csv().rfind(
            "shift,effective,clipped,ap50_mean,ap50_std,", 0) == 0);
  CHECK(report.table().find("[clipped to cap]") != std::string::npos);

  // byte-identical reruns
  auto report2 = eval_shift(models, seeds, scenes, {0, 5, 40}, opts);
  CHECK(report.csv() == report2.csv());
  CHECK(report.aggregate_csv() == report2.aggregate_csv());
}

TEST_CASE("report_routing emits the scene-statistics schema") {
  synthmbu::GeneratorConfig gen;
  gen.image_size = 32;
  gen.shift_range = 6.0;
  gen.p_daytime = 0.0;
  gen.p_dark = 1.0;
  gen.p_backlight = 0.0;
  std::vector<synthmbu::SynthScene> scenes = {synthmbu::generate_scene(0, gen)};

  dethead::ModelHyper hyper;
  hyper.image_size = 32;
  hyper.channels = 4;
  hyper.uta.offset_clamp = 8;
  auto model = Model::init(hyper, 0);
  auto report = report_routing(model, scenes, EvalOptions{});

  REQUIRE(report.groups.size() == 3);
  CHECK(report.csv().rfind("scene,N,R_target,w_rgb,w_ir,w_inter\n", 0) == 0);
  CHECK(report.csv().find("daytime,0,,,,") != std::string::npos);
  for (const auto& g : report.groups) {
    if (g.n == 0) continue;
    CHECK(g.scene == "dark");
    CHECK(g.n == 1);
    CHECK(std::abs(g.w.sum() - 1.0) < 1e-6);
  }
  CHECK(report.has_dark);
}

TEST_CASE("cli subcommands, exit codes and artifacts") {
  const fs::path work = fs::temp_directory_path() / "relfuse_cli_test";
  fs::remove_all(work);
  fs::create_directories(work);

  const fs::path cfg_path = work / "tiny.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "gen.image_size = 32\n"
           "gen.shift_range = 6\n"
           "gen.train_scenes = 8\n"
           "gen.val_scenes = 2\n"
           "gen.test_scenes = 4\n"
           "model.channels = 4\n"
           "train.epochs = 2\n"
           "train.batch = 4\n"
           "eval.magnitudes = 0,5\n"
           "eval.threshold = 0.1\n"
           "harness.seeds = 0\n"
           "rmoe.sweep_k = 1,3\n";
  }
  const std::string cfg_s = cfg_path.string();
  const fs::path data = work / "ds";
  const fs::path out = work / "out";
  const std::string data_s = data.string();
  const std::string out_s = out.string();

  auto run = [](std::vector<std::string> args) {
    std::vector<const char*> argv = {"relfuse"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
  };

  SUBCASE("unknown subcommands and flags exit 1 with usage") {
    CHECK(run({"frobnicate"}) == 1);
    CHECK(run({"--bogus-flag", "train"}) == 1);
    CHECK(run({}) == 1);
  }

  SUBCASE("missing dataset path exits 2") {
    CHECK(run({"train", "--data", (work / "nope").string()}) == 2);
  }

  SUBCASE("invalid config value exits 1") {
    const fs::path bad = work / "bad.cfg";
    {
      std::ofstream f(bad);
      f << "rmoe.top_k = 9\n";
    }
    CHECK(run({"--config", bad.string(), "generate", "--out", data_s}) == 0);
    CHECK(run({"--config", bad.string(), "train", "--data", data_s}) == 1);
  }

  SUBCASE("full pipeline: generate, train, eval-shift, routing, sweep") {
    REQUIRE(run({"--config", cfg_s, "generate", "--out", data_s}) == 0);
    CHECK(fs::exists(data / "metadata.jsonl"));
    CHECK(fs::exists(data / "train" / "0.rgb.rft"));

    REQUIRE(run({"--config", cfg_s, "--out", out_s, "train", "--data",
                 data_s}) == 0);
    CHECK(fs::exists(out / "checkpoint" / "config.json"));
    CHECK(fs::exists(out / "loss_log.csv"));
    {
      std::ifstream log(out / "loss_log.csv");
      std::string header;
      std::getline(log, header);
      CHECK(header == "epoch,l_det,l_ta,l_uta,total");
    }

    REQUIRE(run({"--config", cfg_s, "--out", out_s, "eval-shift", "--data",
                 data_s, "--checkpoint", (out / "checkpoint").string()}) == 0);
    CHECK(fs::exists(out / "shift_report.csv"));
    CHECK(fs::exists(out / "shift_aggregate.csv"));

    REQUIRE(run({"--config", cfg_s, "--out", out_s, "routing-stats", "--data",
                 data_s, "--checkpoint", (out / "checkpoint").string()}) == 0);
    CHECK(fs::exists(out / "routing_stats.csv"));

    REQUIRE(run({"--config", cfg_s, "--out", out_s, "sweep-topk", "--data",
                 data_s}) == 0);
    CHECK(fs::exists(out / "topk_report.csv"));
    {
      std::ifstream rep(out / "topk_report.csv");
      std::string header;
      std::getline(rep, header);
      CHECK(header == "k,seed,ap50,ap75,ap5095,active_params");
      int rows = 0;
      std::string line;
      while (std::getline(rep, line))
        if (!line.empty()) ++rows;
      CHECK(rows == 2);  // k in {1,3} x one seed
    }
  }

  fs::remove_all(work);
}
