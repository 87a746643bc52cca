#pragma once

#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "tensel/tape.hpp"

namespace tensel {

/// A scalar computation to be checked: builds the graph on the given tape and
/// returns the loss Var. Data-dependent branch decisions (e.g. top-k expert
/// sets) must be appended to *signature when it is non-null, so the checker
/// can detect selection flips under perturbation and skip those elements.
using GradProblemFn =
    std::function<Var<double>(Tape<double>&, std::vector<int>* signature)>;

struct GradCheckRow {
  std::string param;
  double max_rel_err = 0.0;
  std::int64_t worst_elem = -1;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_rel_err = 0.0;
  std::int64_t skipped = 0;

  bool passes(double tol) const { return max_rel_err < tol; }
};

/// Central-difference check of analytic parameter gradients.
///
/// Evaluates the computation twice at the base point and fails hard if the
/// two values differ bitwise (nondeterminism guard), then perturbs every
/// parameter element by +/-eps. Relative error uses max(|fd|,|analytic|,1e-8)
/// as the denominator. Elements whose branch signature changes at either
/// perturbed point are skipped and counted.
inline GradCheckReport grad_check(const std::vector<Parameter<double>*>& params,
                                  const GradProblemFn& build,
                                  double eps = 1e-5) {
  if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");

  auto eval = [&](std::vector<int>* sig) {
    Tape<double> tape;
    Var<double> root = build(tape, sig);
    return tape.value(root).item();
  };

  std::vector<int> base_sig;
  const double v1 = eval(&base_sig);
  const double v2 = eval(nullptr);
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0)
    throw NumericError("grad_check: computation is nondeterministic (" +
                       std::to_string(v1) + " vs " + std::to_string(v2) + ")");

  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> root = build(tape, nullptr);
    tape.backward(root);
  }

  GradCheckReport report;
  for (auto* p : params) {
    GradCheckRow row;
    row.param = p->name;
    for (std::int64_t i = 0; i < p->size(); ++i) {
      const double saved = p->value[i];
      std::vector<int> sig_p, sig_m;
      p->value[i] = saved + eps;
      const double fp = eval(&sig_p);
      p->value[i] = saved - eps;
      const double fm = eval(&sig_m);
      p->value[i] = saved;
      if (sig_p != base_sig || sig_m != base_sig) {
        ++row.skipped;
        ++report.skipped;
        continue;
      }
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = p->grad[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      const double rel = std::abs(fd - an) / denom;
      ++row.checked;
      if (rel > row.max_rel_err) {
        row.max_rel_err = rel;
        row.worst_elem = i;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, row.max_rel_err);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tensel
