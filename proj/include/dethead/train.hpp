#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dethead/adam.hpp"
#include "dethead/model.hpp"

namespace dethead {

struct EpochLog {
  int epoch = 0;
  double l_det = 0, l_ta = 0, l_uta = 0, total = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double initial_total = std::numeric_limits<double>::quiet_NaN();
  double final_total = std::numeric_limits<double>::quiet_NaN();
};

/// One scene's contribution to a batch: forward, composite loss, backward.
template <typename S>
LossBreakdown<S> scene_loss(FusionModel<S>& model,
                            const synthmbu::SynthScene& scene,
                            const TrainConfig& cfg, Tape<S>& tape) {
  const tensel::Tensor<S> rgb = scene.rgb.template cast<S>();
  const tensel::Tensor<S> ir = scene.ir.template cast<S>();
  ForwardResult<S> fr = model.forward(tape, rgb, ir);
  Var<S> l_det = det_loss(fr.det, scene.boxes, model.hyper.stride);
  Var<S> l_ta = ta_loss(fr.uta.offsets.values,
                        scene.true_shift[0] / model.hyper.stride,
                        scene.true_shift[1] / model.hyper.stride, scene.boxes,
                        model.hyper.stride);
  return total_loss(l_det, l_ta, fr.uta.loss, cfg.alpha, cfg.beta);
}

/// Deterministic training loop: fixed per-epoch shuffle derived from the
/// seed, single-threaded gradient accumulation in scene order, one Adam step
/// per batch on batch-averaged gradients. Divergence (non-finite total loss)
/// aborts with the epoch index.
template <typename S>
TrainResult train(FusionModel<S>& model,
                  const std::vector<synthmbu::SynthScene>& scenes,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw tensel::ConfigError("train: dataset is empty");

  auto params = model.params();
  Adam<S> opt(params, cfg.lr);
  TrainResult result;

  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    tensel::Rng shuffle_rng(cfg.seed * 6364136223846793005ull +
                            static_cast<std::uint64_t>(epoch) + 1ull);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const int j = shuffle_rng.uniform_int(0, i);
      std::swap(order[i], order[j]);
    }

    EpochLog log;
    log.epoch = epoch;
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      const std::size_t batch_end =
          std::min(order.size(), cursor + static_cast<std::size_t>(cfg.batch));
      const int batch_count = static_cast<int>(batch_end - cursor);
      model.zero_grad();
      for (std::size_t b = cursor; b < batch_end; ++b) {
        Tape<S> tape;
        LossBreakdown<S> loss =
            scene_loss(model, scenes[order[b]], cfg, tape);
        if (!std::isfinite(loss.total_value))
          throw tensel::NumericError("training diverged at epoch " +
                                     std::to_string(epoch));
        tape.backward(loss.total);
        log.l_det += loss.l_det;
        log.l_ta += loss.l_ta;
        log.l_uta += loss.l_uta;
        log.total += loss.total_value;
      }
      const S inv = S(1) / static_cast<S>(batch_count);
      for (auto* p : params) p->grad.array() *= inv;
      opt.step(params);
      cursor = batch_end;
    }
    const double inv_n = 1.0 / static_cast<double>(scenes.size());
    log.l_det *= inv_n;
    log.l_ta *= inv_n;
    log.l_uta *= inv_n;
    log.total *= inv_n;
    result.log.push_back(log);
  }

  if (!result.log.empty()) {
    result.initial_total = result.log.front().total;
    result.final_total = result.log.back().total;
  }
  return result;
}

inline std::string loss_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,l_det,l_ta,l_uta,total\n";
  char buf[160];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9f,%.9f,%.9f,%.9f\n", row.epoch,
                  row.l_det, row.l_ta, row.l_uta, row.total);
    out += buf;
  }
  return out;
}

}  // namespace dethead
