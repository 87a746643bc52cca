#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "tensel/ops.hpp"

// Reliability-guided sparse mixture-of-experts fusion. The router input
// concatenates the infrared feature with the reliability-modulated aligned
// visible feature; a per-sample gate distributes probability over three
// heterogeneous experts; only the top-k experts execute and their weights are
// renormalized before aggregation.

namespace rmoe {

using tensel::ConfigError;
using tensel::Dims;
using tensel::require;
using tensel::Tape;
using tensel::Tensor;
using tensel::Var;

struct RmoeConfig {
  int top_k = 3;
  int num_experts = 3;

  void validate() const {
    if (num_experts != 3)
      throw ConfigError("rmoe.num_experts: only the 3-expert pool is defined");
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("rmoe.top_k must be in [1," +
                        std::to_string(num_experts) + "], got " +
                        std::to_string(top_k));
  }
};

/// Router output for one sample: softmax probabilities and raw logits.
struct GateVector {
  Eigen::VectorXd probs;
  Eigen::VectorXd logits;
};

/// Top-k routing decision: selected expert indices (ascending) and their
/// renormalized weights.
struct ExpertSelection {
  std::vector<int> indices;
  Eigen::VectorXd weights;
};

/// Selects the k largest probabilities (ties broken toward the lowest index)
/// and renormalizes them to sum to one. With k == size the weights are the
/// input probabilities unchanged, bit for bit.
inline ExpertSelection select_topk(const Eigen::VectorXd& g, int k) {
  const int e = static_cast<int>(g.size());
  if (k < 1 || k > e)
    throw ConfigError("select_topk: k must be in [1," + std::to_string(e) +
                      "], got " + std::to_string(k));
  std::vector<int> order(e);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return g[a] > g[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());

  ExpertSelection sel;
  sel.indices = order;
  sel.weights.resize(k);
  if (k == e) {
    sel.weights = g;  // renormalization divides by 1; keep it exact
    return sel;
  }
  double z = 0.0;
  for (int i : sel.indices) z += g[i];
  for (int j = 0; j < k; ++j) sel.weights[j] = g[sel.indices[j]] / z;
  return sel;
}

enum class ExpertKind { kRgb = 0, kIr = 1, kInter = 2 };

/// Copyable atomic counter so parameter structs stay value types.
struct ExecCounter {
  std::atomic<std::uint64_t> v{0};
  ExecCounter() = default;
  ExecCounter(const ExecCounter& o) : v(o.v.load()) {}
  ExecCounter& operator=(const ExecCounter& o) {
    v.store(o.v.load());
    return *this;
  }
  std::uint64_t load() const { return v.load(); }
  void bump() { v.fetch_add(1); }
  void reset() { v.store(0); }
};

inline const char* expert_name(int i) {
  switch (i) {
    case 0: return "rgb";
    case 1: return "ir";
    case 2: return "inter";
    default: return "?";
  }
}

/// Three heterogeneous experts over the 2C-channel router input.
///
/// The RGB-dominant expert reads only the modulated visible half [C,2C), the
/// infrared-dominant expert only the infrared half [0,C), and the interactive
/// expert convolves all 2C channels with a 3x3 kernel. Execution counters are
/// atomic so concurrent evaluation across samples stays well-defined.
template <typename S>
struct ExpertPool {
  int channels = 0;  // C: per-modality feature channels
  tensel::Parameter<S> rgb_w, rgb_b;
  tensel::Parameter<S> ir_w, ir_b;
  tensel::Parameter<S> inter_w, inter_b;
  mutable std::array<ExecCounter, 3> exec_count{};

  static ExpertPool init(int channels, tensel::Rng& rng) {
    using P = tensel::Parameter<S>;
    const int c = channels;
    ExpertPool pool;
    pool.channels = c;
    pool.rgb_w = P::he_uniform("rmoe.expert.rgb.w", Dims{c, c, 1, 1}, c, rng);
    pool.rgb_b = P::zeros("rmoe.expert.rgb.b", Dims{1, c, 1, 1});
    pool.ir_w = P::he_uniform("rmoe.expert.ir.w", Dims{c, c, 1, 1}, c, rng);
    pool.ir_b = P::zeros("rmoe.expert.ir.b", Dims{1, c, 1, 1});
    pool.inter_w = P::he_uniform("rmoe.expert.inter.w", Dims{c, 2 * c, 3, 3},
                                 2 * c * 9, rng);
    pool.inter_b = P::zeros("rmoe.expert.inter.b", Dims{1, c, 1, 1});
    return pool;
  }

  std::vector<tensel::Parameter<S>*> params() {
    return {&rgb_w, &rgb_b, &ir_w, &ir_b, &inter_w, &inter_b};
  }

  std::vector<tensel::Parameter<S>*> expert_params(int i) {
    switch (i) {
      case 0: return {&rgb_w, &rgb_b};
      case 1: return {&ir_w, &ir_b};
      default: return {&inter_w, &inter_b};
    }
  }

  std::int64_t expert_param_count(int i) {
    std::int64_t total = 0;
    for (auto* p : expert_params(i)) total += p->size();
    return total;
  }

  void reset_counters() const {
    for (auto& c : exec_count) c.reset();
  }

  /// Runs expert i on the router input (N,2C,H,W) -> (N,C,H,W) and bumps its
  /// execution counter.
  Var<S> run(int i, Var<S> f_in, Tape<S>& t) {
    const Dims d = t.value(f_in).dims();
    require(d.c == 2 * channels, "expert: router input must have " +
                                     std::to_string(2 * channels) +
                                     " channels, got " + d.str());
    exec_count[static_cast<std::size_t>(i)].bump();
    switch (i) {
      case 0: {
        Var<S> x = tensel::slice_channels(f_in, channels, 2 * channels);
        return tensel::conv2d(x, t.param(rgb_w), t.param(rgb_b));
      }
      case 1: {
        Var<S> x = tensel::slice_channels(f_in, 0, channels);
        return tensel::conv2d(x, t.param(ir_w), t.param(ir_b));
      }
      case 2:
        return tensel::conv2d(f_in, t.param(inter_w), t.param(inter_b));
      default:
        throw ConfigError("expert index out of range: " + std::to_string(i));
    }
  }
};

/// Gating network weights: global average pool followed by a 1x1 projection
/// to one logit per expert. Zero init gives the uniform gate.
template <typename S>
struct RouterParams {
  tensel::Parameter<S> w, b;

  static RouterParams init(int channels, int experts) {
    using P = tensel::Parameter<S>;
    RouterParams r;
    r.w = P::zeros("rmoe.router.w", Dims{experts, 2 * channels, 1, 1});
    r.b = P::zeros("rmoe.router.b", Dims{1, experts, 1, 1});
    return r;
  }

  std::vector<tensel::Parameter<S>*> params() { return {&w, &b}; }
};

/// F_in = concat(F_ir, aligned * R), reliability broadcast over channels.
template <typename S>
Var<S> router_input(Var<S> f_ir, Var<S> aligned, Var<S> reliability) {
  return tensel::concat_channels(f_ir,
                                 tensel::scale_by_map(aligned, reliability));
}

template <typename S>
struct GateOutput {
  Var<S> probs;   // (N,E,1,1)
  Var<S> logits;  // (N,E,1,1)
};

template <typename S>
GateOutput<S> gate(Var<S> f_in, RouterParams<S>& router, Tape<S>& t) {
  Var<S> pooled = tensel::global_avg_pool(f_in);
  Var<S> logits = tensel::conv2d(pooled, t.param(router.w), t.param(router.b));
  return GateOutput<S>{tensel::softmax_channels(logits), logits};
}

/// Plain per-sample copies of the gate for selection and reporting.
template <typename S>
std::vector<GateVector> extract_gates(const GateOutput<S>& g) {
  const Tape<S>& t = *g.probs.tape;
  const auto& pv = t.value(g.probs);
  const auto& lv = t.value(g.logits);
  const Dims d = pv.dims();
  std::vector<GateVector> out(d.n);
  for (int n = 0; n < d.n; ++n) {
    out[n].probs.resize(d.c);
    out[n].logits.resize(d.c);
    for (int c = 0; c < d.c; ++c) {
      out[n].probs[c] = static_cast<double>(pv.at(n, c, 0, 0));
      out[n].logits[c] = static_cast<double>(lv.at(n, c, 0, 0));
    }
  }
  return out;
}

/// Sparse aggregation for a single sample: F_out = sum_{i in S} g_hat_i E_i(F_in).
///
/// Only the selected experts execute. The selection set is a constant for the
/// backward pass; gradients flow through the renormalized weights and through
/// the executed experts only. gate_probs must be the (1,E,1,1) gate for this
/// sample so the weight arithmetic stays on the tape.
template <typename S>
Var<S> fuse_sample(Var<S> f_in, const ExpertSelection& sel, Var<S> gate_probs,
                   ExpertPool<S>& pool, Tape<S>& t) {
  const Dims gd = t.value(gate_probs).dims();
  require(gd.n == 1 && gd.h == 1 && gd.w == 1,
          "fuse_sample: gate must be (1,E,1,1), got " + gd.str());
  const int e = gd.c;
  const int k = static_cast<int>(sel.indices.size());
  require(k >= 1 && k <= e, "fuse_sample: selection size out of range");

  std::vector<Var<S>> weights;
  if (k == e) {
    for (int j = 0; j < k; ++j)
      weights.push_back(tensel::slice_channels(gate_probs, sel.indices[j],
                                               sel.indices[j] + 1));
  } else {
    Var<S> gathered = tensel::gather_channels(gate_probs, sel.indices);
    Var<S> z = tensel::sum_all(gathered);
    for (int j = 0; j < k; ++j)
      weights.push_back(
          tensel::div_by(tensel::slice_channels(gathered, j, j + 1), z));
  }

  Var<S> out{};
  for (int j = 0; j < k; ++j) {
    Var<S> term = tensel::scale(pool.run(sel.indices[j], f_in, t), weights[j]);
    out = (j == 0) ? term : tensel::add(out, term);
  }
  return out;
}

/// Batched fusion: per-sample top-k selection over the gate, sparse expert
/// execution, and reassembly in batch order. Selected indices are appended to
/// *signature (sample-major) when non-null.
template <typename S>
Var<S> fuse(Var<S> f_in, const GateOutput<S>& g, int k, ExpertPool<S>& pool,
            Tape<S>& t, std::vector<int>* signature = nullptr) {
  const Dims d = t.value(f_in).dims();
  std::vector<GateVector> gates = extract_gates(g);
  std::vector<Var<S>> fused;
  fused.reserve(d.n);
  for (int n = 0; n < d.n; ++n) {
    ExpertSelection sel = select_topk(gates[n].probs, k);
    if (signature)
      signature->insert(signature->end(), sel.indices.begin(),
                        sel.indices.end());
    Var<S> f_n = d.n == 1 ? f_in : tensel::select_batch(f_in, n);
    Var<S> g_n = d.n == 1 ? g.probs : tensel::select_batch(g.probs, n);
    fused.push_back(fuse_sample(f_n, sel, g_n, pool, t));
  }
  return d.n == 1 ? fused.front() : tensel::concat_batch(fused);
}

// ---------------------------------------------------------------------------
// scene-wise routing statistics
// ---------------------------------------------------------------------------

/// One evaluated scene: tag, gate probabilities, reliability map and a binary
/// target-region mask on the feature grid.
struct RoutingSample {
  std::string tag;
  Eigen::VectorXd gate;
  tensel::Tensor64 reliability;  // (1,1,H,W)
  tensel::Tensor64 mask;         // (1,1,H,W), entries 0 or 1
};

struct RoutingGroup {
  std::string scene;
  std::int64_t n = 0;
  double r_target = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd w;  // mean gate weight per expert; empty when n == 0
};

/// Groups samples by scene tag and reports per-group sample count, mean gate
/// weight per expert and mean reliability inside the target masks (pooled
/// over mask pixels). Requested groups with no samples are reported with
/// n = 0 and null statistics.
inline std::vector<RoutingGroup> routing_stats(
    const std::vector<RoutingSample>& samples,
    const std::vector<std::string>& groups = {"daytime", "dark", "backlight"}) {
  std::map<std::string, std::vector<const RoutingSample*>> by_tag;
  for (const auto& s : samples) by_tag[s.tag].push_back(&s);

  std::vector<std::string> order = groups;
  for (const auto& [tag, _] : by_tag)
    if (std::find(order.begin(), order.end(), tag) == order.end())
      order.push_back(tag);

  std::vector<RoutingGroup> out;
  for (const auto& tag : order) {
    RoutingGroup grp;
    grp.scene = tag;
    auto it = by_tag.find(tag);
    if (it == by_tag.end() || it->second.empty()) {
      out.push_back(std::move(grp));
      continue;
    }
    const auto& members = it->second;
    grp.n = static_cast<std::int64_t>(members.size());
    grp.w = Eigen::VectorXd::Zero(members.front()->gate.size());
    double mask_sum = 0.0, rel_sum = 0.0;
    for (const auto* s : members) {
      grp.w += s->gate;
      for (std::int64_t i = 0; i < s->mask.size(); ++i)
        if (s->mask[i] != 0.0) {
          mask_sum += 1.0;
          rel_sum += s->reliability[i];
        }
    }
    grp.w /= static_cast<double>(grp.n);
    if (mask_sum > 0.0) grp.r_target = rel_sum / mask_sum;
    out.push_back(std::move(grp));
  }
  return out;
}

}  // namespace rmoe
