#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dethead/dethead.hpp"
#include "rmoe/rmoe.hpp"
#include "tensel/io.hpp"
#include "uta/uta.hpp"

// Full bimodal detector: two non-shared stems extract one feature scale per
// modality, the visible feature is aligned and scored by U-TA, the sparse MoE
// block fuses, and the detection head predicts center heatmap and sizes.

namespace dethead {

struct ModelHyper {
  int image_size = 64;
  int image_channels = 3;
  int channels = 8;  // per-modality feature channels C
  int stride = 4;    // one feature scale: image_size/stride per side
  rmoe::RmoeConfig rmoe;
  uta::UtaConfig uta;

  int feature_size() const { return image_size / stride; }

  void validate() const {
    if (image_size < 32 || image_size % stride != 0)
      throw tensel::ConfigError("model: image_size must be >= 32 and divisible by stride");
    if (channels < 1) throw tensel::ConfigError("model.channels must be >= 1");
    rmoe.validate();
    uta.validate();
  }

  nlohmann::json to_json() const {
    return {{"image_size", image_size},
            {"image_channels", image_channels},
            {"channels", channels},
            {"stride", stride},
            {"num_experts", rmoe.num_experts},
            {"top_k", rmoe.top_k},
            {"uta_lambda", uta.lambda},
            {"uta_epsilon", uta.epsilon},
            {"offset_clamp", uta.offset_clamp}};
  }

  static ModelHyper from_json(const nlohmann::json& j) {
    ModelHyper h;
    h.image_size = j.at("image_size").get<int>();
    h.image_channels = j.at("image_channels").get<int>();
    h.channels = j.at("channels").get<int>();
    h.stride = j.at("stride").get<int>();
    h.rmoe.num_experts = j.at("num_experts").get<int>();
    h.rmoe.top_k = j.at("top_k").get<int>();
    h.uta.lambda = j.at("uta_lambda").get<double>();
    h.uta.epsilon = j.at("uta_epsilon").get<double>();
    h.uta.offset_clamp = j.at("offset_clamp").get<double>();
    return h;
  }
};

/// Per-modality feature stem: stride-4 average pooling followed by two 3x3
/// convs with silu at feature resolution.
template <typename S>
struct StemParams {
  tensel::Parameter<S> w1, b1, w2, b2;

  static StemParams init(const std::string& prefix, int in_ch, int channels,
                         tensel::Rng& rng) {
    using P = tensel::Parameter<S>;
    StemParams p;
    p.w1 = P::he_uniform(prefix + ".w1", tensel::Dims{channels, in_ch, 3, 3},
                         in_ch * 9, rng);
    p.b1 = P::zeros(prefix + ".b1", tensel::Dims{1, channels, 1, 1});
    p.w2 = P::he_uniform(prefix + ".w2", tensel::Dims{channels, channels, 3, 3},
                         channels * 9, rng);
    p.b2 = P::zeros(prefix + ".b2", tensel::Dims{1, channels, 1, 1});
    return p;
  }

  std::vector<tensel::Parameter<S>*> params() { return {&w1, &b1, &w2, &b2}; }
};

template <typename S>
Var<S> stem_forward(Var<S> image, StemParams<S>& p, Tape<S>& t, int stride) {
  Var<S> x = tensel::avg_pool(image, stride);
  Var<S> h = tensel::silu(tensel::conv2d(x, t.param(p.w1), t.param(p.b1)));
  return tensel::silu(tensel::conv2d(h, t.param(p.w2), t.param(p.b2)));
}

template <typename S>
struct ForwardResult {
  Var<S> f_rgb, f_ir;
  uta::UtaOutput<S> uta;
  Var<S> f_in;
  rmoe::GateOutput<S> gate;
  Var<S> fused;
  DetPrediction<S> det;
};

template <typename S>
struct FusionModel {
  ModelHyper hyper;
  StemParams<S> stem_rgb, stem_ir;
  uta::UtaParams<S> uta_p;
  rmoe::RouterParams<S> router;
  rmoe::ExpertPool<S> pool;
  DetParams<S> head;

  static FusionModel init(const ModelHyper& hyper, std::uint64_t seed) {
    hyper.validate();
    tensel::Rng rng(seed ^ 0x46757365496e6974ull);
    FusionModel m;
    m.hyper = hyper;
    m.stem_rgb = StemParams<S>::init("stem_rgb", hyper.image_channels,
                                     hyper.channels, rng);
    m.stem_ir = StemParams<S>::init("stem_ir", hyper.image_channels,
                                    hyper.channels, rng);
    m.uta_p = uta::UtaParams<S>::init(hyper.channels, rng);
    m.router = rmoe::RouterParams<S>::init(hyper.channels,
                                           hyper.rmoe.num_experts);
    m.pool = rmoe::ExpertPool<S>::init(hyper.channels, rng);
    m.head = DetParams<S>::init(hyper.channels, rng);
    return m;
  }

  std::vector<tensel::Parameter<S>*> params() {
    std::vector<tensel::Parameter<S>*> out;
    for (auto* p : stem_rgb.params()) out.push_back(p);
    for (auto* p : stem_ir.params()) out.push_back(p);
    for (auto* p : uta_p.params()) out.push_back(p);
    for (auto* p : router.params()) out.push_back(p);
    for (auto* p : pool.params()) out.push_back(p);
    for (auto* p : head.params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  std::int64_t param_count() {
    std::int64_t total = 0;
    for (auto* p : params()) total += p->size();
    return total;
  }

  /// Full pipeline on one tape. Top-k selections are appended to *signature
  /// when non-null (used by the gradient checker for set-stability skips).
  ForwardResult<S> forward(Tape<S>& t, const tensel::Tensor<S>& rgb,
                           const tensel::Tensor<S>& ir,
                           std::vector<int>* signature = nullptr) {
    require(rgb.dims() == ir.dims(), "forward: modality dims mismatch " +
                                         rgb.dims().str() + " vs " +
                                         ir.dims().str());
    ForwardResult<S> r;
    r.f_rgb = stem_forward(t.leaf(rgb), stem_rgb, t, hyper.stride);
    r.f_ir = stem_forward(t.leaf(ir), stem_ir, t, hyper.stride);
    r.uta = uta::uta_forward(r.f_rgb, r.f_ir, uta_p, t, hyper.uta);
    r.f_in = rmoe::router_input(r.f_ir, r.uta.aligned, r.uta.reliability.values);
    r.gate = rmoe::gate(r.f_in, router, t);
    r.fused = rmoe::fuse(r.f_in, r.gate, hyper.rmoe.top_k, pool, t, signature);
    r.det = detect(r.fused, head, t);
    return r;
  }
};

// ---------------------------------------------------------------------------
// checkpointing: a directory of RFT1 parameter files plus config.json
// ---------------------------------------------------------------------------

struct TrainConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double lr = 1e-3;
  int epochs = 80;
  int batch = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha < 0 || beta < 0)
      throw tensel::ConfigError("train.alpha/train.beta must be nonnegative");
    if (lr <= 0) throw tensel::ConfigError("train.lr must be positive");
    if (epochs < 0) throw tensel::ConfigError("train.epochs must be >= 0");
    if (batch < 1) throw tensel::ConfigError("train.batch must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"alpha", alpha}, {"beta", beta},   {"lr", lr},
            {"epochs", epochs}, {"batch", batch}, {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.lr = j.at("lr").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.batch = j.at("batch").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

template <typename S>
void save_checkpoint(const std::filesystem::path& dir, FusionModel<S>& model,
                     const TrainConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw tensel::IoError("cannot create checkpoint dir: " + dir.string());
  for (auto* p : model.params())
    tensel::write_rft(dir / (p->name + ".rft"), p->value);
  nlohmann::json j = {{"format", 1},
                      {"model", model.hyper.to_json()},
                      {"train", cfg.to_json()}};
  std::ofstream f(dir / "config.json");
  if (!f) throw tensel::IoError("cannot write " + (dir / "config.json").string());
  f << j.dump(2) << "\n";
}

template <typename S>
struct Checkpoint {
  FusionModel<S> model;
  TrainConfig train;
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "config.json");
  if (!f)
    throw tensel::IoError("cannot read checkpoint config: " +
                          (dir / "config.json").string());
  nlohmann::json j;
  f >> j;
  Checkpoint<S> ck;
  ck.train = TrainConfig::from_json(j.at("train"));
  ck.model = FusionModel<S>::init(ModelHyper::from_json(j.at("model")),
                                  ck.train.seed);
  for (auto* p : ck.model.params()) {
    const auto path = dir / (p->name + ".rft");
    tensel::Tensor<S> v = tensel::read_rft<S>(path);
    if (!(v.dims() == p->value.dims()))
      throw tensel::IoError("checkpoint tensor " + path.string() +
                            " has dims " + v.dims().str() + ", expected " +
                            p->value.dims().str());
    p->value = std::move(v);
  }
  return ck;
}

}  // namespace dethead
