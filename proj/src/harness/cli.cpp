#include "harness/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "harness/config.hpp"
#include "harness/gradcheck_suite.hpp"
#include "harness/protocols.hpp"

namespace harness {

namespace {

namespace fs = std::filesystem;

dethead::ModelHyper hyper_from(const Config& cfg,
                               const synthmbu::DatasetManifest& manifest) {
  dethead::ModelHyper h;
  h.image_size = manifest.gen.image_size;
  h.image_channels = manifest.gen.channels;
  h.channels = cfg.get_int("model.channels", 8);
  h.stride = cfg.get_int("model.stride", 4);
  h.rmoe.top_k = cfg.get_int("rmoe.top_k", 3);
  h.rmoe.num_experts = cfg.get_int("rmoe.num_experts", 3);
  h.uta.lambda = cfg.get_double("uta.lambda", 1e-4);
  h.uta.epsilon = cfg.get_double("uta.epsilon", 1e-8);
  h.uta.offset_clamp =
      cfg.get_double("uta.offset_clamp", static_cast<double>(h.feature_size()));
  h.validate();
  return h;
}

dethead::TrainConfig train_from(const Config& cfg,
                                std::optional<std::uint64_t> seed_override) {
  dethead::TrainConfig t;
  t.alpha = cfg.get_double("train.alpha", 1.0);
  t.beta = cfg.get_double("train.beta", 1.0);
  t.lr = cfg.get_double("train.lr", 1e-3);
  t.epochs = cfg.get_int("train.epochs", 80);
  t.batch = cfg.get_int("train.batch", 16);
  t.seed = seed_override.value_or(cfg.get_u64("train.seed", 0));
  t.validate();
  return t;
}

synthmbu::DatasetManifest manifest_from(
    const Config& cfg, std::optional<std::uint64_t> seed_override) {
  synthmbu::DatasetManifest m;
  m.base_seed = seed_override.value_or(cfg.get_u64("gen.base_seed", 0));
  m.train_scenes = cfg.get_int("gen.train_scenes", 500);
  m.val_scenes = cfg.get_int("gen.val_scenes", 200);
  m.test_scenes = cfg.get_int("gen.test_scenes", 300);
  m.gen.image_size = cfg.get_int("gen.image_size", 64);
  m.gen.channels = cfg.get_int("gen.channels", 3);
  m.gen.min_targets = cfg.get_int("gen.min_targets", 1);
  m.gen.max_targets = cfg.get_int("gen.max_targets", 3);
  m.gen.shift_range = cfg.get_double("gen.shift_range", 8.0);
  m.gen.p_daytime = cfg.get_double("gen.tag_daytime", 0.85);
  m.gen.p_dark = cfg.get_double("gen.tag_dark", 0.12);
  m.gen.p_backlight = cfg.get_double("gen.tag_backlight", 0.03);
  m.validate();
  return m;
}

EvalOptions eval_from(const Config& cfg) {
  EvalOptions e;
  e.decode.threshold = cfg.get_double("eval.threshold", 0.3);
  e.decode.max_dets = cfg.get_int("eval.max_dets", 10);
  if (e.decode.max_dets < 1)
    throw tensel::ConfigError("eval.max_dets must be >= 1");
  return e;
}

std::vector<std::uint64_t> seeds_from(const Config& cfg) {
  std::vector<std::uint64_t> out;
  for (int s : cfg.get_int_list("harness.seeds", {0, 1, 2})) {
    if (s < 0) throw tensel::ConfigError("harness.seeds must be nonnegative");
    out.push_back(static_cast<std::uint64_t>(s));
  }
  return out;
}

int run_generate(const Config& cfg, std::optional<std::uint64_t> seed,
                 const fs::path& out) {
  const auto manifest = manifest_from(cfg, seed);
  synthmbu::build_dataset(manifest, out);
  std::printf("dataset written to %s (%d train / %d val / %d test scenes)\n",
              out.string().c_str(), manifest.train_scenes, manifest.val_scenes,
              manifest.test_scenes);
  return 0;
}

int run_train(const Config& cfg, std::optional<std::uint64_t> seed,
              const fs::path& out, const fs::path& data) {
  const auto manifest = synthmbu::read_manifest(data);
  const auto hyper = hyper_from(cfg, manifest);
  auto train_cfg = train_from(cfg, seed);
  auto scenes = synthmbu::load_split(data, "train");
  auto model = Model::init(hyper, train_cfg.seed);
  const auto result = dethead::train(model, scenes, train_cfg);
  dethead::save_checkpoint(out / "checkpoint", model, train_cfg);
  write_text_file(out / "loss_log.csv", dethead::loss_log_csv(result.log));
  std::printf("checkpoint written to %s\n",
              (out / "checkpoint").string().c_str());
  if (!result.log.empty())
    std::printf("total loss: initial %.6f -> final %.6f over %d epochs\n",
                result.initial_total, result.final_total,
                static_cast<int>(result.log.size()));
  return 0;
}

int run_eval_shift(const Config& cfg, const fs::path& out, const fs::path& data,
                   const std::vector<std::string>& checkpoints) {
  std::vector<dethead::Checkpoint<double>> cks;
  std::vector<Model*> models;
  std::vector<std::uint64_t> seeds;
  for (const auto& c : checkpoints)
    cks.push_back(dethead::load_checkpoint<double>(c));
  for (auto& ck : cks) {
    models.push_back(&ck.model);
    seeds.push_back(ck.train.seed);
  }
  auto test_scenes = synthmbu::load_split(data, "test");
  const auto magnitudes = cfg.get_int_list("eval.magnitudes", {0, 5, 10, 20, 40});
  const auto report =
      eval_shift(models, seeds, test_scenes, magnitudes, eval_from(cfg));
  write_text_file(out / "shift_report.csv", report.csv());
  write_text_file(out / "shift_aggregate.csv", report.aggregate_csv());
  std::fputs(report.table().c_str(), stdout);
  return 0;
}

int run_sweep_topk(const Config& cfg, std::optional<std::uint64_t> seed,
                   const fs::path& out, const fs::path& data) {
  const auto manifest = synthmbu::read_manifest(data);
  const auto hyper = hyper_from(cfg, manifest);
  const auto train_cfg = train_from(cfg, seed);
  auto train_scenes = synthmbu::load_split(data, "train");
  auto test_scenes = synthmbu::load_split(data, "test");
  const auto ks = cfg.get_int_list("rmoe.sweep_k", {1, 2, 3});
  const auto report = sweep_topk(hyper, train_cfg, train_scenes, test_scenes,
                                 ks, seeds_from(cfg), eval_from(cfg));
  write_text_file(out / "topk_report.csv", report.csv());
  std::fputs(report.table().c_str(), stdout);
  return 0;
}

int run_routing_stats(const Config& cfg, const fs::path& out,
                      const fs::path& data, const std::string& checkpoint) {
  auto ck = dethead::load_checkpoint<double>(checkpoint);
  auto test_scenes = synthmbu::load_split(data, "test");
  const auto report = report_routing(ck.model, test_scenes, eval_from(cfg));
  write_text_file(out / "routing_stats.csv", report.csv());
  std::fputs(report.table().c_str(), stdout);
  return 0;
}

int run_gradcheck(std::optional<std::uint64_t> seed) {
  const auto result = run_gradcheck_suite(seed.value_or(7));
  std::fputs(gradcheck_table(result).c_str(), stdout);
  if (!result.passed(1e-4)) {
    std::fprintf(stderr, "gradient check failed\n");
    return 3;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"reliability-gated bimodal fusion detector"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed_value = 0;
  auto* seed_opt =
      app.add_option("--seed", seed_value, "seed override (u64)");
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_option("--out", out_dir, "output directory");

  auto* cmd_generate =
      app.add_subcommand("generate", "generate the synthetic dataset");
  auto* cmd_train = app.add_subcommand("train", "train the detector");
  auto* cmd_eval_shift = app.add_subcommand(
      "eval-shift", "synthetic RGB-shift robustness evaluation");
  auto* cmd_sweep =
      app.add_subcommand("sweep-topk", "top-k sensitivity sweep (trains per k)");
  auto* cmd_routing =
      app.add_subcommand("routing-stats", "scene-wise routing statistics");
  auto* cmd_gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient checks");

  std::string train_data, shift_data, sweep_data, routing_data;
  std::vector<std::string> shift_checkpoints;
  std::string routing_checkpoint;
  cmd_train->add_option("--data", train_data, "dataset directory")->required();
  cmd_eval_shift->add_option("--data", shift_data, "dataset directory")
      ->required();
  cmd_eval_shift
      ->add_option("--checkpoint", shift_checkpoints,
                   "checkpoint directory (repeat per training seed)")
      ->required();
  cmd_sweep->add_option("--data", sweep_data, "dataset directory")->required();
  cmd_routing->add_option("--data", routing_data, "dataset directory")
      ->required();
  cmd_routing->add_option("--checkpoint", routing_checkpoint,
                          "checkpoint directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  try {
    Config cfg;
    if (!config_path.empty()) cfg = Config::from_file(config_path);
    std::optional<std::uint64_t> seed;
    if (seed_opt->count() > 0) seed = seed_value;
    const fs::path out(out_dir);

    if (cmd_generate->parsed()) return run_generate(cfg, seed, out);
    if (cmd_train->parsed()) return run_train(cfg, seed, out, train_data);
    if (cmd_eval_shift->parsed())
      return run_eval_shift(cfg, out, shift_data, shift_checkpoints);
    if (cmd_sweep->parsed()) return run_sweep_topk(cfg, seed, out, sweep_data);
    if (cmd_routing->parsed())
      return run_routing_stats(cfg, out, routing_data, routing_checkpoint);
    if (cmd_gradcheck->parsed()) return run_gradcheck(seed);
    std::cerr << app.help() << "\n";
    return 1;
  } catch (const tensel::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const tensel::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const tensel::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace harness
