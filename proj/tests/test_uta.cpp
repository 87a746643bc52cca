#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dethead/adam.hpp"
#include "tensel/gradcheck.hpp"
#include "uta/uta.hpp"

using namespace tensel;

namespace {

Tensor64 random_tensor(Dims d, Rng& rng, double scale = 1.0) {
  Tensor64 t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

/// Independent per-pixel bilinear oracle: explicit corner-weight products,
/// zero outside the image.
Tensor64 bilinear_oracle(const Tensor64& f, const Tensor64& off) {
  const Dims d = f.dims();
  Tensor64 out(d);
  for (int n = 0; n < d.n; ++n)
    for (int c = 0; c < d.c; ++c)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          const double sx = x + off.at(n, 0, y, x);
          const double sy = y + off.at(n, 1, y, x);
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const double vx = sx - x0, vy = sy - y0;
          double acc = 0.0;
          for (int ky = 0; ky <= 1; ++ky)
            for (int kx = 0; kx <= 1; ++kx) {
              const int yy = y0 + ky, xx = x0 + kx;
              if (yy < 0 || yy >= d.h || xx < 0 || xx >= d.w) continue;
              const double w = (ky ? vy : 1.0 - vy) * (kx ? vx : 1.0 - vx);
              acc += w * f.at(n, c, yy, xx);
            }
          out.at(n, c, y, x) = acc;
        }
  return out;
}

Tensor64 constant_offsets(Dims spatial, double dx, double dy) {
  Tensor64 off(Dims{spatial.n, 2, spatial.h, spatial.w});
  for (int n = 0; n < spatial.n; ++n)
    for (int y = 0; y < spatial.h; ++y)
      for (int x = 0; x < spatial.w; ++x) {
        off.at(n, 0, y, x) = dx;
        off.at(n, 1, y, x) = dy;
      }
  return off;
}

}  // namespace

TEST_CASE("resample with zero offsets is the bit-exact identity") {
  Rng rng(1);
  Tensor64 f = random_tensor(Dims{2, 3, 8, 8}, rng);
  Tensor64 off(Dims{2, 2, 8, 8});
  Tape64 t;
  auto y = uta::resample_bilinear(t.leaf(f), t.leaf(off));
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(t.value(y)[i] == f[i]);
}

TEST_CASE("resample with an integer shift indexes directly, zero past border") {
  Rng rng(2);
  Tensor64 f = random_tensor(Dims{1, 1, 8, 8}, rng);
  Tensor64 off = constant_offsets(f.dims(), 3.0, 0.0);
  Tape64 t;
  auto y = uta::resample_bilinear(t.leaf(f), t.leaf(off));
  for (int yy = 0; yy < 8; ++yy)
    for (int x = 0; x < 8; ++x) {
      if (x <= 4) {
        CHECK(t.value(y).at(0, 0, yy, x) == doctest::Approx(f.at(0, 0, yy, x + 3)));
      } else {
        CHECK(t.value(y).at(0, 0, yy, x) == 0.0);
      }
    }
}

TEST_CASE("resample of a linear ramp by half a pixel is exact in the interior") {
  Tensor64 f(Dims{1, 1, 6, 8});
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) f.at(0, 0, y, x) = static_cast<double>(x);
  Tensor64 off = constant_offsets(f.dims(), 0.5, 0.0);
  Tape64 t;
  auto out = uta::resample_bilinear(t.leaf(f), t.leaf(off));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x + 1 < 8; ++x)
      CHECK(t.value(out).at(0, 0, y, x) ==
            doctest::Approx(x + 0.5).epsilon(1e-12));
}

TEST_CASE("resample matches the brute-force oracle on 100 random 8x8 pairs") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = rng.uniform_int(1, 3);
    Tensor64 f = random_tensor(Dims{1, c, 8, 8}, rng);
    Tensor64 off(Dims{1, 2, 8, 8});
    for (std::int64_t i = 0; i < off.size(); ++i)
      off[i] = rng.uniform(-4.0, 4.0);
    Tape64 t;
    auto y = uta::resample_bilinear(t.leaf(f), t.leaf(off));
    Tensor64 expect = bilinear_oracle(f, off);
    for (std::int64_t i = 0; i < expect.size(); ++i)
      CHECK(std::abs(t.value(y)[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("resample output is a convex combination of inputs and zero") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor64 f = random_tensor(Dims{1, 2, 8, 8}, rng);
    Tensor64 off(Dims{1, 2, 8, 8});
    for (std::int64_t i = 0; i < off.size(); ++i)
      off[i] = rng.uniform(-10.0, 10.0);
    Tape64 t;
    auto y = uta::resample_bilinear(t.leaf(f), t.leaf(off));
    const double lo = std::min(0.0, f.array().minCoeff());
    const double hi = std::max(0.0, f.array().maxCoeff());
    for (std::int64_t i = 0; i < t.value(y).size(); ++i) {
      CHECK(t.value(y)[i] >= lo - 1e-12);
      CHECK(t.value(y)[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("resample rejects malformed offset shapes") {
  Rng rng(5);
  Tensor64 f = random_tensor(Dims{1, 2, 8, 8}, rng);
  Tensor64 bad = random_tensor(Dims{1, 3, 8, 8}, rng);
  Tape64 t;
  CHECK_THROWS_AS(uta::resample_bilinear(t.leaf(f), t.leaf(bad)), ShapeError);
}

TEST_CASE("zero-initialized offset predictor emits the zero field") {
  Rng rng(6);
  auto params = uta::UtaParams<double>::init(3, rng);  // zero final layer
  Tensor64 f_rgb = random_tensor(Dims{1, 3, 8, 8}, rng);
  Tensor64 f_ir = random_tensor(Dims{1, 3, 8, 8}, rng);
  Tape64 t;
  auto off = uta::predict_offsets(t.leaf(f_rgb), t.leaf(f_ir), params, t, 8.0);
  CHECK(t.value(off.values).dims() == Dims{1, 2, 8, 8});
  for (std::int64_t i = 0; i < t.value(off.values).size(); ++i)
    CHECK(t.value(off.values)[i] == 0.0);

  Tensor64 mismatched = random_tensor(Dims{1, 3, 6, 8}, rng);
  CHECK_THROWS_AS(
      uta::predict_offsets(t.leaf(f_rgb), t.leaf(mismatched), params, t, 8.0),
      ShapeError);
}

TEST_CASE("zero-initialized reliability head emits 0.5 everywhere") {
  Rng rng(7);
  auto params = uta::UtaParams<double>::init(2, rng);
  Tensor64 f_ir = random_tensor(Dims{1, 2, 6, 6}, rng);
  Tensor64 aligned = random_tensor(Dims{1, 2, 6, 6}, rng);
  Tape64 t;
  auto rel = uta::predict_reliability(t.leaf(f_ir), t.leaf(aligned), params, t);
  CHECK(t.value(rel.values).dims() == Dims{1, 1, 6, 6});
  for (std::int64_t i = 0; i < t.value(rel.values).size(); ++i)
    CHECK(t.value(rel.values)[i] == 0.5);
}

TEST_CASE("uta_loss closed form with zero residual and R = 0.5") {
  Tensor64 f = Tensor64::full(Dims{1, 2, 4, 4}, 0.7);
  Tensor64 r = Tensor64::full(Dims{1, 1, 4, 4}, 0.5);
  Tape64 t;
  auto loss = uta::uta_loss(t.leaf(f), t.leaf(f), t.leaf(r), 1e-4, 1e-8);
  const double expect = -1e-4 * std::log(0.5 + 1e-8);
  CHECK(t.value(loss).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(t.value(loss).item() == doctest::Approx(6.931e-5).epsilon(1e-3));
}

TEST_CASE("uta_loss penalizes the all-zero-reliability solution") {
  Tensor64 f = Tensor64::full(Dims{1, 1, 3, 3}, 0.2);
  Tensor64 r = Tensor64::full(Dims{1, 1, 3, 3}, 1e-300);
  Tape64 t;
  auto loss = uta::uta_loss(t.leaf(f), t.leaf(f), t.leaf(r), 1e-4, 1e-8);
  // with d = 0 the loss is -lambda log(eps) = 1e-4 * ln(1e8) per location
  CHECK(t.value(loss).item() == doctest::Approx(1.8420681e-3).epsilon(1e-5));
  CHECK(t.value(loss).item() > 0.0);
}

TEST_CASE("uta_loss validates lambda, epsilon and shapes") {
  Tensor64 f = Tensor64::full(Dims{1, 1, 2, 2}, 0.1);
  Tensor64 r = Tensor64::full(Dims{1, 1, 2, 2}, 0.5);
  Tape64 t;
  auto fv = t.leaf(f);
  auto rv = t.leaf(r);
  CHECK_THROWS_AS(uta::uta_loss(fv, fv, rv, 0.0, 1e-8), ConfigError);
  CHECK_THROWS_AS(uta::uta_loss(fv, fv, rv, 1e-4, -1.0), ConfigError);
  Tensor64 bad_r = Tensor64::full(Dims{1, 2, 2, 2}, 0.5);
  CHECK_THROWS_AS(uta::uta_loss(fv, fv, t.leaf(bad_r), 1e-4, 1e-8), ShapeError);
}

TEST_CASE("uta_loss is monotonically non-decreasing in each residual") {
  Rng rng(8);
  Tensor64 f_ir = random_tensor(Dims{1, 2, 4, 4}, rng);
  Tensor64 r(Dims{1, 1, 4, 4});
  for (std::int64_t i = 0; i < r.size(); ++i) r[i] = rng.uniform(0.05, 0.95);
  Tensor64 aligned = f_ir;
  double prev = -1.0;
  for (double bump : {0.0, 0.01, 0.1, 0.5, 2.0}) {
    Tensor64 a = aligned;
    a.at(0, 1, 2, 3) += bump;  // grow d at one location only
    Tape64 t;
    auto loss = uta::uta_loss(t.leaf(f_ir), t.leaf(a), t.leaf(r), 1e-4, 1e-8);
    CHECK(t.value(loss).item() >= prev);
    prev = t.value(loss).item();
  }
}

TEST_CASE("gradient descent on R alone reaches clamp(lambda/d - eps) per d") {
  const double lambda = 1e-4, eps = 1e-8;
  std::vector<double> minimizers;
  for (double d : {0.001, 0.01, 0.1, 1.0}) {
    Param64 r("r", Tensor64::full(Dims{1, 1, 1, 1}, 0.5));
    std::vector<Param64*> params = {&r};
    dethead::Adam<double> opt(params, 1e-3);
    for (int step = 0; step < 20000; ++step) {
      r.zero_grad();
      Tape64 t;
      Tensor64 zero(Dims{1, 1, 1, 1});
      Tensor64 dval = Tensor64::full(Dims{1, 1, 1, 1}, d);
      auto loss =
          uta::uta_loss(t.leaf(zero), t.leaf(dval), t.param(r), lambda, eps);
      t.backward(loss);
      opt.step(params);
      r.value[0] = std::min(1.0 - 1e-9, std::max(1e-9, r.value[0]));
    }
    const double expect = std::min(1.0, std::max(0.0, lambda / d - eps));
    CHECK(std::abs(r.value[0] - expect) < 1e-3);
    minimizers.push_back(r.value[0]);
  }
  for (std::size_t i = 1; i < minimizers.size(); ++i)
    CHECK(minimizers[i] < minimizers[i - 1]);
}

TEST_CASE("full U-TA loss on a 2-channel 6x6 pair passes grad_check") {
  Rng rng(9);
  auto params = uta::UtaParams<double>::init(2, rng, /*zero_final=*/false);
  Param64 f_rgb("f_rgb", random_tensor(Dims{1, 2, 6, 6}, rng));
  Param64 f_ir("f_ir", random_tensor(Dims{1, 2, 6, 6}, rng));
  uta::UtaConfig cfg;
  cfg.offset_clamp = 6.0;
  std::vector<Param64*> checked = params.params();
  checked.push_back(&f_rgb);
  checked.push_back(&f_ir);
  auto build = [&](Tape64& t, std::vector<int>*) {
    auto out = uta::uta_forward(t.param(f_rgb), t.param(f_ir), params, t, cfg);
    return out.loss;
  };
  auto report = grad_check(checked, build, 1e-5);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("uta_forward bundles offsets, aligned feature, reliability, loss") {
  Rng rng(10);
  auto params = uta::UtaParams<double>::init(2, rng);
  Tensor64 f_rgb = random_tensor(Dims{1, 2, 8, 8}, rng);
  Tensor64 f_ir = random_tensor(Dims{1, 2, 8, 8}, rng);
  Tape64 t;
  uta::UtaConfig cfg;
  cfg.offset_clamp = 8.0;
  auto out = uta::uta_forward(t.leaf(f_rgb), t.leaf(f_ir), params, t, cfg);
  CHECK(t.value(out.aligned).dims() == f_ir.dims());
  CHECK(t.value(out.reliability.values).dims() == Dims{1, 1, 8, 8});
  CHECK(t.value(out.offsets.values).dims() == Dims{1, 2, 8, 8});
  CHECK(t.value(out.loss).size() == 1);
  // zero-init predictor: aligned == f_rgb (identity warp), R == 0.5
  for (std::int64_t i = 0; i < f_rgb.size(); ++i)
    CHECK(t.value(out.aligned)[i] == f_rgb[i]);
}
