#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hidssm/model.hpp"

namespace hidssm {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Arrays whose analytic and numeric gradient norms are both below this are compared absolutely.
  double abs_floor = 1e-9;
};

struct GradCheckEntry {
  std::string name;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double diff_norm = 0.0;
  double rel_error = 0.0;
  bool passed = false;
};

/// Central finite differences of the training objective against backward(),
/// one entry per parameter array. The partition is held fixed.
inline std::vector<GradCheckEntry> check_gradients(const HidSsmModel& model, const Mat& u,
                                                   const SupervisionTargets& targets, double alpha,
                                                   const SegmentPartition& partition,
                                                   const GradCheckOptions& opt = {}) {
  const auto analytic = backward(model, u, targets, alpha, &partition);
  HidSsmModel probe = model;
  auto probe_params = param_list(probe.params);
  auto grads = const_param_list(analytic.grads);

  std::vector<GradCheckEntry> out;
  for (std::size_t k = 0; k < probe_params.size(); ++k) {
    GradCheckEntry e{probe_params[k].name};
    double an = 0.0, nn = 0.0, dn = 0.0;
    auto values = probe_params[k].values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.step;
      const double plus = objective(probe, u, targets, alpha, &partition);
      values[i] = saved - opt.step;
      const double minus = objective(probe, u, targets, alpha, &partition);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opt.step);
      const double a = grads[k].values[i];
      an += a * a;
      nn += numeric * numeric;
      dn += (a - numeric) * (a - numeric);
    }
    e.analytic_norm = std::sqrt(an);
    e.numeric_norm = std::sqrt(nn);
    e.diff_norm = std::sqrt(dn);
    const double scale = std::max(e.analytic_norm, e.numeric_norm);
    if (scale < opt.abs_floor) {
      e.rel_error = 0.0;
      e.passed = e.diff_norm < opt.abs_floor;
    } else {
      e.rel_error = e.diff_norm / scale;
      e.passed = e.rel_error <= opt.tolerance;
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace hidssm
