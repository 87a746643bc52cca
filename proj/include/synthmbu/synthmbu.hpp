#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tensel/io.hpp"
#include "tensel/rng.hpp"
#include "tensel/tensor.hpp"

// Deterministic generator of misaligned bimodal scenes. The infrared image
// carries small bright Gaussian blobs on structured clutter; the visible image
// carries the same targets as textured patches displaced by a known shift,
// degraded per scene tag. Everything is a pure function of (seed, config).

namespace synthmbu {

using tensel::ConfigError;
using tensel::IoError;

enum class SceneTag { kDaytime, kDark, kBacklight };

inline std::string tag_name(SceneTag t) {
  switch (t) {
    case SceneTag::kDaytime: return "daytime";
    case SceneTag::kDark: return "dark";
    default: return "backlight";
  }
}

inline SceneTag tag_from_name(const std::string& s) {
  if (s == "daytime") return SceneTag::kDaytime;
  if (s == "dark") return SceneTag::kDark;
  if (s == "backlight") return SceneTag::kBacklight;
  throw ConfigError("unknown scene tag: " + s);
}

/// Axis-aligned box, center/size form, image-pixel units on the IR frame.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct GeneratorConfig {
  int image_size = 64;
  int channels = 3;
  int min_targets = 1;
  int max_targets = 3;
  double shift_range = 8.0;  // max |true shift| per axis, image pixels
  double p_daytime = 0.85;
  double p_dark = 0.12;
  double p_backlight = 0.03;

  // rendering constants; dark_contrast_scale keeps the infrared/visible
  // contrast ratio in dark scenes at 1/0.15 > 3, which the tests assert
  static constexpr double kIrTargetAmp = 0.55;
  static constexpr double kRgbTargetContrast = 0.55;
  static constexpr double kDarkContrastScale = 0.15;

  void validate() const {
    if (image_size < 32) throw ConfigError("gen.image_size must be >= 32");
    if (channels < 1) throw ConfigError("gen.channels must be >= 1");
    if (min_targets < 1 || max_targets > 3 || min_targets > max_targets)
      throw ConfigError("gen: target count must satisfy 1 <= min <= max <= 3");
    if (shift_range < 0.0 || shift_range > image_size / 4.0)
      throw ConfigError(
          "gen.shift_range must lie within +/- a quarter image width");
    if (p_daytime < 0 || p_dark < 0 || p_backlight < 0 ||
        std::abs(p_daytime + p_dark + p_backlight - 1.0) > 1e-9)
      throw ConfigError("gen: tag probabilities must be a distribution");
  }
};

/// A generated bimodal pair. The RGB target centers equal the IR centers plus
/// true_shift; boxes live on the IR reference frame.
struct SynthScene {
  tensel::Tensor32 rgb;
  tensel::Tensor32 ir;
  std::array<float, 2> true_shift{0.f, 0.f};  // (dx, dy) image pixels
  std::vector<Box> boxes;
  SceneTag tag = SceneTag::kDaytime;
  std::uint64_t seed = 0;
};

namespace detail {

inline double gauss2(double dx, double dy, double sx, double sy) {
  return std::exp(-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy)));
}

}  // namespace detail

inline SynthScene generate_scene(std::uint64_t seed,
                                 const GeneratorConfig& cfg) {
  cfg.validate();
  tensel::Rng rng(seed ^ 0x53796e74684d4255ull);
  const int sz = cfg.image_size;
  const int ch = cfg.channels;

  SynthScene scene;
  scene.seed = seed;

  const double tag_u = rng.uniform01();
  scene.tag = tag_u < cfg.p_daytime
                  ? SceneTag::kDaytime
                  : (tag_u < cfg.p_daytime + cfg.p_dark ? SceneTag::kDark
                                                        : SceneTag::kBacklight);

  const int want_targets = rng.uniform_int(cfg.min_targets, cfg.max_targets);
  scene.true_shift[0] =
      static_cast<float>(rng.uniform(-cfg.shift_range, cfg.shift_range));
  scene.true_shift[1] =
      static_cast<float>(rng.uniform(-cfg.shift_range, cfg.shift_range));

  // keep both the IR box and the shifted RGB patch clear of the border
  const double margin = cfg.shift_range + 8.0;
  for (int tgt = 0; tgt < want_targets; ++tgt) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Box b;
      b.w = rng.uniform(4.0, 10.0);
      b.h = rng.uniform(4.0, 10.0);
      b.cx = rng.uniform(margin, sz - margin);
      b.cy = rng.uniform(margin, sz - margin);
      bool clear = true;
      for (const auto& other : scene.boxes) {
        const double d = std::hypot(b.cx - other.cx, b.cy - other.cy);
        if (d < 14.0) clear = false;
      }
      if (clear) {
        scene.boxes.push_back(b);
        placed = true;
      }
    }
  }

  // --- infrared: clutter + bright blobs, identical across channels ---
  std::vector<double> ir_plane(static_cast<std::size_t>(sz) * sz, 0.12);
  for (int blob = 0; blob < 4; ++blob) {
    const double bx = rng.uniform(0.0, sz);
    const double by = rng.uniform(0.0, sz);
    const double bs = rng.uniform(8.0, 20.0);
    const double amp = rng.uniform(0.02, 0.05);
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x)
        ir_plane[static_cast<std::size_t>(y) * sz + x] +=
            amp * detail::gauss2(x - bx, y - by, bs, bs);
  }
  {
    const double fx = rng.uniform(0.02, 0.06), fy = rng.uniform(0.02, 0.06);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x)
        ir_plane[static_cast<std::size_t>(y) * sz + x] +=
            0.02 * std::sin(6.283185307179586 * (fx * x + fy * y) + phase);
  }
  for (auto& v : ir_plane) v += rng.normal(0.0, 0.005);
  for (const auto& b : scene.boxes) {
    // anisotropic blob so the thermal response carries the box aspect
    const double sx = b.w / 4.0, sy = b.h / 4.0;
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x)
        ir_plane[static_cast<std::size_t>(y) * sz + x] +=
            GeneratorConfig::kIrTargetAmp *
            detail::gauss2(x - b.cx, y - b.cy, sx, sy);
  }

  // --- visible: gradient background, textured target patches, degradation ---
  std::vector<double> rgb_planes(static_cast<std::size_t>(ch) * sz * sz, 0.0);
  const double g0 = rng.uniform(0.25, 0.45);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  std::vector<double> tint(ch);
  for (int c = 0; c < ch; ++c) tint[c] = rng.uniform(-0.03, 0.03);
  for (int blob = 0; blob < 3; ++blob) {
    const double bx = rng.uniform(0.0, sz);
    const double by = rng.uniform(0.0, sz);
    const double bs = rng.uniform(10.0, 24.0);
    const double amp = rng.uniform(0.02, 0.06);
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x) {
        const double v = amp * detail::gauss2(x - bx, y - by, bs, bs);
        for (int c = 0; c < ch; ++c)
          rgb_planes[(static_cast<std::size_t>(c) * sz + y) * sz + x] += v;
      }
  }
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x)
        rgb_planes[(static_cast<std::size_t>(c) * sz + y) * sz + x] +=
            g0 + tint[c] + gx * (double(x) / sz) + gy * (double(y) / sz);

  double contrast = GeneratorConfig::kRgbTargetContrast;
  if (scene.tag == SceneTag::kDark)
    contrast *= GeneratorConfig::kDarkContrastScale;

  std::vector<std::array<double, 3>> texture_params;  // per-target kx, ky, phase
  for (const auto& b : scene.boxes) {
    (void)b;
    texture_params.push_back({rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.5),
                              rng.uniform(0.0, 6.283185307179586)});
  }
  for (std::size_t tix = 0; tix < scene.boxes.size(); ++tix) {
    const Box& b = scene.boxes[tix];
    const double tx = b.cx + scene.true_shift[0];
    const double ty = b.cy + scene.true_shift[1];
    const double sx = b.w / 3.0, sy = b.h / 3.0;
    for (int c = 0; c < ch; ++c) {
      const double phase = texture_params[tix][2] + 2.1 * c;
      for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x) {
          const double win = detail::gauss2(x - tx, y - ty, sx, sy);
          if (win < 1e-6) continue;
          const double tex =
              0.6 + 0.4 * std::sin(6.283185307179586 *
                                       (texture_params[tix][0] * (x - tx) +
                                        texture_params[tix][1] * (y - ty)) +
                                   phase);
          rgb_planes[(static_cast<std::size_t>(c) * sz + y) * sz + x] +=
              contrast * win * tex;
        }
    }
  }

  if (scene.tag == SceneTag::kDark) {
    for (auto& v : rgb_planes) v += rng.normal(0.0, 0.05);
  } else {
    for (auto& v : rgb_planes) v += rng.normal(0.0, 0.01);
  }
  if (scene.tag == SceneTag::kBacklight && !scene.boxes.empty()) {
    const Box& b = scene.boxes.front();
    const double bx = b.cx + scene.true_shift[0] + rng.uniform(-2.0, 2.0);
    const double by = b.cy + scene.true_shift[1] + rng.uniform(-2.0, 2.0);
    const double bs = rng.uniform(5.0, 9.0);
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x)
          rgb_planes[(static_cast<std::size_t>(c) * sz + y) * sz + x] +=
              0.9 * detail::gauss2(x - bx, y - by, bs, bs);
  }

  scene.ir = tensel::Tensor32(tensel::Dims{1, ch, sz, sz});
  scene.rgb = tensel::Tensor32(tensel::Dims{1, ch, sz, sz});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x) {
        const double iv =
            std::min(1.0, std::max(0.0, ir_plane[static_cast<std::size_t>(y) * sz + x]));
        const double rv = std::min(
            1.0, std::max(0.0, rgb_planes[(static_cast<std::size_t>(c) * sz + y) * sz + x]));
        scene.ir.at(0, c, y, x) = static_cast<float>(iv);
        scene.rgb.at(0, c, y, x) = static_cast<float>(rv);
      }
  return scene;
}

/// Test-time perturbation: translate the RGB image by whole pixels with zero
/// fill; infrared, boxes and tag stay untouched; true_shift gains +shift.
inline SynthScene apply_test_shift(const SynthScene& in, int dx, int dy) {
  const tensel::Dims d = in.rgb.dims();
  if (std::abs(dx) > d.w || std::abs(dy) > d.h)
    throw ConfigError("apply_test_shift: shift exceeds image size");
  SynthScene out = in;
  out.rgb.set_zero();
  for (int c = 0; c < d.c; ++c)
    for (int y = 0; y < d.h; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= d.h) continue;
      for (int x = 0; x < d.w; ++x) {
        const int sx = x - dx;
        if (sx < 0 || sx >= d.w) continue;
        out.rgb.at(0, c, y, x) = in.rgb.at(0, c, sy, sx);
      }
    }
  out.true_shift[0] = in.true_shift[0] + static_cast<float>(dx);
  out.true_shift[1] = in.true_shift[1] + static_cast<float>(dy);
  return out;
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

struct DatasetManifest {
  int version = 1;
  std::uint64_t base_seed = 0;
  int train_scenes = 500;
  int val_scenes = 200;
  int test_scenes = 300;
  GeneratorConfig gen;

  void validate() const {
    gen.validate();
    if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0)
      throw ConfigError("manifest: negative scene count");
  }

  /// Seed ranges per split are consecutive and disjoint.
  std::vector<std::uint64_t> seeds_for(const std::string& split) const {
    std::uint64_t start = base_seed;
    int count = train_scenes;
    if (split == "val") {
      start += train_scenes;
      count = val_scenes;
    } else if (split == "test") {
      start += static_cast<std::uint64_t>(train_scenes) + val_scenes;
      count = test_scenes;
    } else if (split != "train") {
      throw ConfigError("unknown split: " + split);
    }
    std::vector<std::uint64_t> out(count);
    for (int i = 0; i < count; ++i) out[i] = start + i;
    return out;
  }

  nlohmann::json to_json() const {
    return {{"version", version},
            {"base_seed", base_seed},
            {"train_scenes", train_scenes},
            {"val_scenes", val_scenes},
            {"test_scenes", test_scenes},
            {"image_size", gen.image_size},
            {"channels", gen.channels},
            {"min_targets", gen.min_targets},
            {"max_targets", gen.max_targets},
            {"shift_range", gen.shift_range},
            {"p_daytime", gen.p_daytime},
            {"p_dark", gen.p_dark},
            {"p_backlight", gen.p_backlight}};
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.base_seed = j.at("base_seed").get<std::uint64_t>();
    m.train_scenes = j.at("train_scenes").get<int>();
    m.val_scenes = j.at("val_scenes").get<int>();
    m.test_scenes = j.at("test_scenes").get<int>();
    m.gen.image_size = j.at("image_size").get<int>();
    m.gen.channels = j.at("channels").get<int>();
    m.gen.min_targets = j.at("min_targets").get<int>();
    m.gen.max_targets = j.at("max_targets").get<int>();
    m.gen.shift_range = j.at("shift_range").get<double>();
    m.gen.p_daytime = j.at("p_daytime").get<double>();
    m.gen.p_dark = j.at("p_dark").get<double>();
    m.gen.p_backlight = j.at("p_backlight").get<double>();
    return m;
  }
};

/// One metadata.jsonl record.
struct SceneRecord {
  std::uint64_t seed = 0;
  std::string tag;
  std::array<float, 2> shift{0.f, 0.f};
  std::vector<Box> boxes;
  std::string split;
};

inline nlohmann::json record_to_json(const SceneRecord& r) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : r.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
  return {{"seed", r.seed},
          {"tag", r.tag},
          {"shift", {r.shift[0], r.shift[1]}},
          {"boxes", boxes},
          {"split", r.split}};
}

inline SceneRecord record_from_json(const nlohmann::json& j) {
  SceneRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.tag = j.at("tag").get<std::string>();
  r.shift[0] = j.at("shift")[0].get<float>();
  r.shift[1] = j.at("shift")[1].get<float>();
  for (const auto& b : j.at("boxes"))
    r.boxes.push_back(Box{b[0].get<double>(), b[1].get<double>(),
                          b[2].get<double>(), b[3].get<double>()});
  r.split = j.at("split").get<std::string>();
  return r;
}

inline std::filesystem::path scene_path(const std::filesystem::path& dir,
                                        const std::string& split,
                                        std::uint64_t seed,
                                        const std::string& modality) {
  return dir / split / (std::to_string(seed) + "." + modality + ".rft");
}

/// Generates and persists the whole dataset: RFT1 image pairs per scene under
/// <dir>/<split>/, one metadata.jsonl and the manifest itself.
inline void build_dataset(const DatasetManifest& manifest,
                          const std::filesystem::path& dir) {
  manifest.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset dir: " + dir.string());

  std::ofstream meta(dir / "metadata.jsonl");
  if (!meta) throw IoError("cannot write " + (dir / "metadata.jsonl").string());
  for (const std::string split : {"train", "val", "test"}) {
    std::filesystem::create_directories(dir / split, ec);
    if (ec) throw IoError("cannot create split dir: " + (dir / split).string());
    for (std::uint64_t seed : manifest.seeds_for(split)) {
      SynthScene s = generate_scene(seed, manifest.gen);
      tensel::write_rft(scene_path(dir, split, seed, "rgb"), s.rgb);
      tensel::write_rft(scene_path(dir, split, seed, "ir"), s.ir);
      SceneRecord r;
      r.seed = seed;
      r.tag = tag_name(s.tag);
      r.shift = s.true_shift;
      r.boxes = s.boxes;
      r.split = split;
      meta << record_to_json(r).dump() << "\n";
    }
  }
  if (!meta) throw IoError("short write: " + (dir / "metadata.jsonl").string());
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
  mf << manifest.to_json().dump(2) << "\n";
}

inline std::vector<SceneRecord> read_metadata(const std::filesystem::path& dir,
                                              const std::string& split = "") {
  std::ifstream meta(dir / "metadata.jsonl");
  if (!meta)
    throw IoError("cannot read " + (dir / "metadata.jsonl").string());
  std::vector<SceneRecord> out;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    SceneRecord r = record_from_json(nlohmann::json::parse(line));
    if (split.empty() || r.split == split) out.push_back(std::move(r));
  }
  return out;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json j;
  mf >> j;
  return DatasetManifest::from_json(j);
}

/// Loads the persisted image pair for a metadata record.
inline SynthScene load_scene(const std::filesystem::path& dir,
                             const SceneRecord& r) {
  SynthScene s;
  s.seed = r.seed;
  s.tag = tag_from_name(r.tag);
  s.true_shift = r.shift;
  s.boxes = r.boxes;
  s.rgb = tensel::read_rft<float>(scene_path(dir, r.split, r.seed, "rgb"));
  s.ir = tensel::read_rft<float>(scene_path(dir, r.split, r.seed, "ir"));
  return s;
}

inline std::vector<SynthScene> load_split(const std::filesystem::path& dir,
                                          const std::string& split) {
  std::vector<SynthScene> out;
  for (const auto& r : read_metadata(dir, split))
    out.push_back(load_scene(dir, r));
  return out;
}

}  // namespace synthmbu
