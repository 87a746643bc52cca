#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "dethead/train.hpp"

using namespace tensel;
using dethead::Box;
namespace fs = std::filesystem;

namespace {

Tensor64 random_tensor(Dims d, Rng& rng, double scale = 1.0) {
  Tensor64 t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

/// Weighted-BCE value replicated independently of the implementation.
double bce_floor(const Tensor64& target) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    const double p = std::min(1.0 - 1e-12, std::max(1e-12, t));
    const double w = 1.0 + dethead::kPosWeight * t;
    acc -= w * (t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  return acc / static_cast<double>(target.size());
}

std::vector<synthmbu::SynthScene> tiny_dataset(int n, int image_size) {
  synthmbu::GeneratorConfig gen;
  gen.image_size = image_size;
  gen.shift_range = std::min(8.0, image_size / 4.0);
  std::vector<synthmbu::SynthScene> out;
  for (int i = 0; i < n; ++i)
    out.push_back(synthmbu::generate_scene(static_cast<std::uint64_t>(i), gen));
  return out;
}

dethead::ModelHyper tiny_hyper(int image_size) {
  dethead::ModelHyper h;
  h.image_size = image_size;
  h.image_channels = 3;
  h.channels = 4;
  h.uta.offset_clamp = h.feature_size();
  return h;
}

bool params_equal(dethead::FusionModel<double>& a,
                  dethead::FusionModel<double>& b) {
  auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name) return false;
    if (!(pa[i]->value.dims() == pb[i]->value.dims())) return false;
    if (std::memcmp(pa[i]->value.data(), pb[i]->value.data(),
                    pa[i]->value.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero-initialized head gives heatmap 0.5 and zero sizes") {
  Rng rng(1);
  auto head = dethead::DetParams<double>::init(4, rng);
  Tensor64 fused = random_tensor(Dims{1, 4, 8, 8}, rng);
  Tape64 t;
  auto pred = dethead::detect(t.leaf(fused), head, t);
  for (std::int64_t i = 0; i < t.value(pred.heatmap).size(); ++i)
    CHECK(t.value(pred.heatmap)[i] == 0.5);
  for (std::int64_t i = 0; i < t.value(pred.sizes).size(); ++i)
    CHECK(t.value(pred.sizes)[i] == 0.0);
}

TEST_CASE("detect is batch-equivariant") {
  Rng rng(2);
  auto head = dethead::DetParams<double>::init(4, rng, /*zero_heads=*/false);
  Tensor64 batch = random_tensor(Dims{3, 4, 8, 8}, rng);

  // permutation (2,0,1) of the batch
  Tensor64 permuted(batch.dims());
  const std::int64_t sample = 4 * 8 * 8;
  const int perm[3] = {2, 0, 1};
  for (int n = 0; n < 3; ++n)
    std::copy_n(batch.data() + perm[n] * sample, sample,
                permuted.data() + n * sample);

  Tape64 t1, t2;
  auto p1 = dethead::detect(t1.leaf(batch), head, t1);
  auto p2 = dethead::detect(t2.leaf(permuted), head, t2);
  for (int n = 0; n < 3; ++n)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(t2.value(p2.heatmap).at(n, 0, y, x) ==
              t1.value(p1.heatmap).at(perm[n], 0, y, x));
}

TEST_CASE("det_loss on an empty scene at heatmap 0.5 is ln 2 per location") {
  Tape64 t;
  dethead::DetPrediction<double> pred;
  pred.heatmap = t.leaf(Tensor64::full(Dims{1, 1, 8, 8}, 0.5));
  pred.sizes = t.leaf(Tensor64(Dims{1, 2, 8, 8}));
  auto loss = dethead::det_loss(pred, {}, 4);
  CHECK(t.value(loss).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("det_loss at the exact ground truth reduces to the BCE floor") {
  const std::vector<Box> boxes = {{14.0, 18.0, 6.0, 8.0}};
  auto gt = dethead::render_ground_truth(boxes, 8, 8, 4);
  Tape64 t;
  dethead::DetPrediction<double> pred;
  pred.heatmap = t.leaf(gt.center_map);
  Tensor64 sizes(Dims{1, 2, 8, 8});
  for (const auto& p : gt.positives) {
    sizes.at(0, 0, p.cy, p.cx) = p.w;
    sizes.at(0, 1, p.cy, p.cx) = p.h;
  }
  pred.sizes = t.leaf(sizes);
  auto loss = dethead::det_loss(pred, boxes, 4);
  CHECK(t.value(loss).item() ==
        doctest::Approx(bce_floor(gt.center_map)).epsilon(1e-12));
}

TEST_CASE("doubling a positive-location size error doubles the size term") {
  const std::vector<Box> boxes = {{14.0, 18.0, 6.0, 8.0}};
  auto gt = dethead::render_ground_truth(boxes, 8, 8, 4);
  auto loss_with_delta = [&](double delta) {
    Tape64 t;
    dethead::DetPrediction<double> pred;
    pred.heatmap = t.leaf(gt.center_map);
    Tensor64 sizes(Dims{1, 2, 8, 8});
    for (const auto& p : gt.positives) {
      sizes.at(0, 0, p.cy, p.cx) = p.w + delta;
      sizes.at(0, 1, p.cy, p.cx) = p.h;
    }
    pred.sizes = t.leaf(sizes);
    return t.value(dethead::det_loss(pred, boxes, 4)).item();
  };
  const double floor = loss_with_delta(0.0);
  const double e1 = loss_with_delta(0.3) - floor;
  const double e2 = loss_with_delta(0.6) - floor;
  CHECK(e1 > 0.0);
  CHECK(e2 == doctest::Approx(2.0 * e1).epsilon(1e-12));
}

TEST_CASE("ta_loss closed forms") {
  const std::vector<Box> boxes = {{24.0, 24.0, 8.0, 8.0}};

  SUBCASE("offsets equal to the true shift give zero") {
    Tape64 t;
    Tensor64 off(Dims{1, 2, 16, 16});
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        off.at(0, 0, y, x) = 1.25;
        off.at(0, 1, y, x) = -0.75;
      }
    auto loss = dethead::ta_loss(t.leaf(off), 1.25, -0.75, boxes, 4);
    CHECK(t.value(loss).item() == 0.0);
  }

  SUBCASE("zero offsets against shift (2,0) give exactly 1") {
    Tape64 t;
    auto loss =
        dethead::ta_loss(t.leaf(Tensor64(Dims{1, 2, 16, 16})), 2.0, 0.0,
                         boxes, 4);
    CHECK(t.value(loss).item() == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("the loss is invariant to where the box sits") {
    Tape64 t;
    Tensor64 off(Dims{1, 2, 16, 16});
    for (std::int64_t i = 0; i < off.size(); ++i) off[i] = 0.0;
    auto l1 = dethead::ta_loss(t.leaf(off), 1.5, 0.5,
                               {{20.0, 20.0, 8.0, 8.0}}, 4);
    auto l2 = dethead::ta_loss(t.leaf(off), 1.5, 0.5,
                               {{40.0, 36.0, 8.0, 8.0}}, 4);
    CHECK(t.value(l1).item() == doctest::Approx(t.value(l2).item()).epsilon(1e-12));
  }

  SUBCASE("a scene without targets contributes zero") {
    Tape64 t;
    Rng rng(3);
    auto loss = dethead::ta_loss(t.leaf(random_tensor(Dims{1, 2, 16, 16}, rng)),
                                 1.0, 1.0, {}, 4);
    CHECK(t.value(loss).item() == 0.0);
  }
}

TEST_CASE("total_loss composition and exact recomposition") {
  Tape64 t;
  auto ld = t.leaf(Tensor64::full(Dims{1, 1, 1, 1}, 1.0));
  auto lt = t.leaf(Tensor64::full(Dims{1, 1, 1, 1}, 2.0));
  auto lu = t.leaf(Tensor64::full(Dims{1, 1, 1, 1}, 3.0));

  auto parts = dethead::total_loss(ld, lt, lu, 1.0, 1.0);
  CHECK(parts.total_value == doctest::Approx(6.0).epsilon(1e-12));

  auto degenerate = dethead::total_loss(ld, lt, lu, 0.0, 0.0);
  CHECK(degenerate.total_value == 1.0);

  auto swept = dethead::total_loss(ld, lt, lu, 1.0, 0.5);
  CHECK(swept.total_value == doctest::Approx(1.0 + 2.0 + 1.5).epsilon(1e-12));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = rng.uniform(0.0, 2.0), b = rng.uniform(0.0, 2.0);
    const double vd = rng.normal(0.0, 1.0), vt = rng.normal(0.0, 1.0),
                 vu = rng.normal(0.0, 1.0);
    Tape64 t2;
    auto p = dethead::total_loss(
        t2.leaf(Tensor64::full(Dims{1, 1, 1, 1}, vd)),
        t2.leaf(Tensor64::full(Dims{1, 1, 1, 1}, vt)),
        t2.leaf(Tensor64::full(Dims{1, 1, 1, 1}, vu)), a, b);
    const double recomposed = p.l_det + (a * p.l_ta + b * p.l_uta);
    CHECK(std::abs(p.total_value - recomposed) < 1e-12);
  }

  CHECK_THROWS_AS(dethead::total_loss(ld, lt, lu, -0.1, 1.0), ConfigError);
}

TEST_CASE("one Adam step on a quadratic matches the hand-computed update") {
  Param64 theta("theta", Tensor64::full(Dims{1, 1, 1, 1}, 1.0));
  std::vector<Param64*> params = {&theta};
  const double lr = 0.1;
  dethead::Adam<double> opt(params, lr);

  // two steps of the bias-corrected update replicated by hand
  double th = 1.0, m = 0.0, v = 0.0;
  for (int step = 1; step <= 2; ++step) {
    theta.zero_grad();
    {
      Tape64 t;
      auto x = t.param(theta);
      t.backward(sum_all(mul(x, x)));
    }
    opt.step(params);

    const double g = 2.0 * th;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, step));
    const double vhat = v / (1.0 - std::pow(0.999, step));
    th -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(theta.value[0] == doctest::Approx(th).epsilon(1e-12));
  }
}

TEST_CASE("training for zero epochs leaves the initialization untouched") {
  auto scenes = tiny_dataset(4, 32);
  auto hyper = tiny_hyper(32);
  auto model = dethead::FusionModel<double>::init(hyper, 3);
  auto reference = dethead::FusionModel<double>::init(hyper, 3);
  dethead::TrainConfig cfg;
  cfg.epochs = 0;
  auto result = dethead::train(model, scenes, cfg);
  CHECK(result.log.empty());
  CHECK(params_equal(model, reference));
}

TEST_CASE("training is deterministic per seed and reduces the loss") {
  auto scenes = tiny_dataset(8, 32);
  auto hyper = tiny_hyper(32);
  dethead::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 4;
  cfg.seed = 5;

  auto m1 = dethead::FusionModel<double>::init(hyper, cfg.seed);
  auto r1 = dethead::train(m1, scenes, cfg);
  auto m2 = dethead::FusionModel<double>::init(hyper, cfg.seed);
  auto r2 = dethead::train(m2, scenes, cfg);

  CHECK(params_equal(m1, m2));
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    CHECK(r1.log[i].total == r2.log[i].total);
  CHECK(r1.final_total < r1.initial_total);

  CHECK_THROWS_AS(dethead::train(m1, {}, cfg), ConfigError);
}

TEST_CASE("non-finite losses abort with the epoch index") {
  auto scenes = tiny_dataset(2, 32);
  scenes[0].rgb.at(0, 0, 5, 5) = std::numeric_limits<float>::quiet_NaN();
  auto hyper = tiny_hyper(32);
  auto model = dethead::FusionModel<double>::init(hyper, 0);
  dethead::TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_WITH_AS(dethead::train(model, scenes, cfg),
                       doctest::Contains("epoch"), NumericError);
}

TEST_CASE("checkpoint round trip restores parameters and configs exactly") {
  const fs::path dir = fs::temp_directory_path() / "relfuse_ckpt_test";
  fs::remove_all(dir);

  auto scenes = tiny_dataset(4, 32);
  auto hyper = tiny_hyper(32);
  hyper.rmoe.top_k = 2;
  auto model = dethead::FusionModel<double>::init(hyper, 9);
  dethead::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 2;
  cfg.seed = 9;
  dethead::train(model, scenes, cfg);
  dethead::save_checkpoint(dir, model, cfg);

  auto ck = dethead::load_checkpoint<double>(dir);
  CHECK(params_equal(model, ck.model));
  CHECK(ck.model.hyper.rmoe.top_k == 2);
  CHECK(ck.model.hyper.image_size == 32);
  CHECK(ck.train.seed == 9);
  CHECK(ck.train.epochs == 2);

  CHECK_THROWS_AS(dethead::load_checkpoint<double>(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("loss log CSV carries the documented schema") {
  std::vector<dethead::EpochLog> log = {{0, 0.5, 0.25, 0.125, 0.875}};
  const std::string csv = dethead::loss_log_csv(log);
  CHECK(csv.rfind("epoch,l_det,l_ta,l_uta,total\n", 0) == 0);
  CHECK(csv.find("0,0.500000000,0.250000000,0.125000000,0.875000000\n") !=
        std::string::npos);
}
