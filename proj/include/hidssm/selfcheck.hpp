#pragma once

// Numerical self-test suite behind the `check` command. Each check compares
// two independent routes to the same quantity on seeded random instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "hidssm/blocks.hpp"
#include "hidssm/gradcheck.hpp"
#include "hidssm/metrics.hpp"
#include "hidssm/model.hpp"
#include "hidssm/ssm_core.hpp"

namespace hidssm {

struct CheckOptions {
  std::size_t trials = 20;
  std::uint64_t seed = 7;
  // Test hook: the named check has its measured error inflated so that it fails.
  std::string inject_fault;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t trials = 0;
};

/// Random coefficients from random projections of a random input, a < 0.
inline DiscretizedCoefficients random_coefficients(std::mt19937_64& rng, std::size_t T, std::size_t D, std::size_t N) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> decay(0.05, 2.0);
  SelectiveInputs in{Mat(T, 1), Mat(T, N), Mat(T, N)};
  for (double& x : in.s_delta.flat()) x = normal(rng) - 1.0;
  for (double& x : in.s_b.flat()) x = normal(rng);
  for (double& x : in.s_c.flat()) x = normal(rng);
  std::vector<double> a(D);
  for (double& x : a) x = -decay(rng);
  return discretize(in, a);
}

inline Mat random_mat(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat m(rows, cols);
  for (double& x : m.flat()) x = normal(rng);
  return m;
}

inline SegmentPartition random_partition(std::mt19937_64& rng, std::size_t T) {
  std::bernoulli_distribution cut(0.25);
  SegmentPartition p;
  std::size_t begin = 0;
  for (std::size_t t = 1; t < T; ++t)
    if (cut(rng)) {
      p.segments.push_back({begin, t});
      begin = t;
    }
  p.segments.push_back({begin, T});
  return p;
}

namespace detail {

inline double mixer_times(const Mat& m, const Mat& u, std::size_t t, std::size_t d) {
  double acc = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) acc += m(t, j) * u(j, d);
  return acc;
}

}  // namespace detail

inline CheckResult check_scan_mixer(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> tl(1, 64), dl(1, 8), nl(1, 16);
  CheckResult r{"scan_mixer", false, 0.0, 1e-10, opt.trials};
  for (std::size_t k = 0; k < opt.trials; ++k) {
    const std::size_t T = tl(rng), D = dl(rng), N = nl(rng);
    const auto co = random_coefficients(rng, T, D, N);
    const Mat u = random_mat(rng, T, D);
    const Mat y = recurrent_scan(co, u);
    for (std::size_t d = 0; d < D; ++d) {
      const auto m = materialize_mixer_causal(co, d);
      for (std::size_t t = 0; t < T; ++t)
        r.max_error = std::max(r.max_error, std::abs(y(t, d) - detail::mixer_times(m.m, u, t, d)));
    }
  }
  return r;
}

inline CheckResult check_contextual_mixer(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 1);
  std::uniform_int_distribution<std::size_t> tl(1, 32), dl(1, 6), nl(1, 8);
  CheckResult r{"contextual_mixer", false, 0.0, 1e-10, opt.trials};
  for (std::size_t k = 0; k < opt.trials; ++k) {
    const std::size_t T = tl(rng), D = dl(rng), N = nl(rng);
    const auto fwd = random_coefficients(rng, T, D, N);
    const auto bwd = random_coefficients(rng, T, D, N);
    const Mat u = random_mat(rng, T, D);
    const Mat y = contextual_scan(fwd, bwd, u);
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t t = 0; t < T; ++t) {
        const auto row = contextual_mixer_row(fwd, bwd, d, t);
        double acc = 0.0;
        for (std::size_t j = 0; j < T; ++j) acc += row[j] * u(j, d);
        r.max_error = std::max(r.max_error, std::abs(y(t, d) - acc));
      }
  }
  return r;
}

/// Pre-fusion LA-SSM output against the block-diagonal mixer applied to the
/// layer's normalized input; alternates causal and contextual layers.
inline CheckResult check_block_diagonal(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 2);
  std::uniform_int_distribution<std::size_t> tl(1, 48), dl(1, 6), nl(1, 8);
  CheckResult r{"block_diagonal", false, 0.0, 1e-10, opt.trials};
  for (std::size_t k = 0; k < opt.trials; ++k) {
    LayerStackConfig cfg;
    cfg.d_model = dl(rng);
    cfg.state_dim = nl(rng);
    cfg.n_global = 1;
    cfg.n_ppn = 1;
    cfg.causal = k % 2 == 0;
    InitOptions init;
    init.randomize_all = true;
    const auto model = HidSsmModel::create(cfg, rng(), init);
    const auto& layer = model.params.local.front().ssm;
    const std::size_t T = tl(rng);
    const auto part = random_partition(rng, T);
    const Mat u = random_mat(rng, T, cfg.d_model);
    IdSsmLayerCache c;
    const Mat y = la_pre_fusion(u, part, layer, cfg.causal, &c);
    for (std::size_t d = 0; d < cfg.d_model; ++d) {
      const auto m = materialize_mixer_block_diagonal(c.fwd.coeffs, cfg.causal ? nullptr : &c.bwd.coeffs, d, part);
      for (std::size_t t = 0; t < T; ++t)
        r.max_error = std::max(r.max_error, std::abs(y(t, d) - detail::mixer_times(m.m, c.normalized, t, d)));
    }
  }
  return r;
}

/// N = 1, a = -1, S_B = 1, C = 1: the scan must follow x_t = e^{-D} x + (1 - e^{-D}) u.
inline CheckResult check_selective_activation(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t T = 1000;
  SelectiveInputs in{Mat(T, 1), Mat(T, 1, 1.0), Mat(T, 1, 1.0)};
  for (double& x : in.s_delta.flat()) x = 2.0 * normal(rng);
  const std::vector<double> a{-1.0};
  const auto co = discretize(in, a);
  const Mat u = random_mat(rng, T, 1);
  const Mat y = recurrent_scan(co, u);
  CheckResult r{"selective_activation", false, 0.0, 1e-12, 1};
  double x = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double delta = co.delta(t, 0);
    x = std::exp(-delta) * x + (1.0 - std::exp(-delta)) * u(t, 0);
    r.max_error = std::max(r.max_error, std::abs(y(t, 0) - x));
  }
  return r;
}

inline CheckResult check_zoh_closed_form(const CheckOptions&) {
  CheckResult r{"zoh_closed_form", false, 0.0, 1e-12, 1};
  const Mat delta(1, 1, std::log(2.0));
  const Mat s_b(1, 1, 1.0);
  const std::vector<double> a{-1.0};
  const auto z = discretize_zoh(delta, a, s_b);
  r.max_error = std::max(std::abs(z.a_bar(0, 0) - 0.5), std::abs(z.b_bar(0, 0, 0) - 0.5));
  // two-sided continuity of the input gain across the series switch
  double jump = 0.0;
  for (double sign : {-1.0, 1.0}) {
    const double below = sign * std::nextafter(kZohSeriesThreshold, 0.0);
    const double above = sign * kZohSeriesThreshold;
    jump = std::max(jump, std::abs(zoh_gain(below) - zoh_gain(above)));
  }
  // continuity has its own, looser bound
  if (jump > 1e-9) r.max_error = std::max(r.max_error, jump);
  return r;
}

inline CheckResult check_gradient(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 4);
  std::uniform_int_distribution<std::size_t> tl(2, 8), dl(1, 4), nl(1, 4), pl(2, 4);
  const std::size_t trials = std::min<std::size_t>(opt.trials, 20);
  CheckResult r{"gradient", false, 0.0, 1e-4, trials};
  for (std::size_t k = 0; k < trials; ++k) {
    LayerStackConfig cfg;
    cfg.d_model = dl(rng);
    cfg.state_dim = nl(rng);
    cfg.n_phases = pl(rng);
    cfg.n_global = 1 + k % 2;
    cfg.n_ppn = 1;
    cfg.n_local = 1;
    cfg.causal = k % 2 == 0;
    InitOptions init;
    init.randomize_all = true;
    const auto model = HidSsmModel::create(cfg, rng(), init);
    const std::size_t T = tl(rng);
    const Mat u = random_mat(rng, T, cfg.d_model);
    std::vector<int> phases(T);
    std::uniform_int_distribution<int> ph(0, static_cast<int>(cfg.n_phases) - 1);
    for (int& p : phases) p = ph(rng);
    const auto targets = SupervisionTargets::from_phases(phases);
    const auto part = random_partition(rng, T);
    for (const auto& e : check_gradients(model, u, targets, kDefaultAlpha, part))
      r.max_error = std::max(r.max_error, e.passed ? e.rel_error : std::max(e.rel_error, 1.0));
  }
  return r;
}

/// Causal models ignore the future bit-exactly; contextual ones react to it.
inline CheckResult check_causality(const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 5);
  CheckResult r{"causality", true, 0.0, 0.0, opt.trials};
  std::size_t violations = 0;
  for (std::size_t k = 0; k < opt.trials; ++k) {
    for (bool causal : {true, false}) {
      LayerStackConfig cfg;
      cfg.d_model = 4;
      cfg.state_dim = 3;
      cfg.n_phases = 3;
      cfg.n_global = 2;
      cfg.n_ppn = 1;
      cfg.causal = causal;
      cfg.min_segment = 2;
      InitOptions init;
      init.randomize_all = true;
      const auto model = HidSsmModel::create(cfg, rng(), init);
      const std::size_t T = 12;
      const Mat u = random_mat(rng, T, cfg.d_model);
      const std::size_t probe = 1 + rng() % (T - 1);
      Mat v = u;
      for (std::size_t d = 0; d < cfg.d_model; ++d) v(probe, d) += 0.5 + d;
      const auto a = forward(model, u);
      const auto b = forward(model, v);
      bool past_identical = true;
      for (std::size_t t = 0; t < probe; ++t) {
        for (std::size_t c = 0; c < cfg.n_phases; ++c) past_identical &= a.logits(t, c) == b.logits(t, c);
        past_identical &= a.progress[t] == b.progress[t];
      }
      if (causal != past_identical) ++violations;
    }
  }
  r.max_error = static_cast<double>(violations);
  return r;
}

inline CheckResult check_metrics(const CheckOptions& opt) {
  CheckResult r{"metrics", false, 0.0, 1e-12, opt.trials};
  std::vector<int> gt(40, 0), pred(40, 0);
  std::fill(gt.begin() + 20, gt.end(), 1);
  std::fill(pred.begin() + 25, pred.end(), 1);
  const auto m = relaxed_metrics(pred, gt, 10);
  r.max_error = std::max({std::abs(m.accuracy - 1.0), std::abs(m.unrelaxed_accuracy - 0.875)});
  std::mt19937_64 rng(opt.seed + 6);
  std::uniform_int_distribution<int> ph(0, 6);
  for (std::size_t k = 0; k < opt.trials; ++k) {
    std::vector<int> p(50), g(50);
    for (auto& x : p) x = ph(rng);
    for (auto& x : g) x = ph(rng);
    r.max_error = std::max(r.max_error, std::abs(micro_f1(p, g) - frame_accuracy(p, g)));
  }
  return r;
}

inline std::vector<CheckResult> run_checks(const CheckOptions& opt) {
  std::vector<CheckResult> out{check_scan_mixer(opt),      check_contextual_mixer(opt), check_block_diagonal(opt),
                               check_selective_activation(opt), check_zoh_closed_form(opt), check_gradient(opt),
                               check_causality(opt),       check_metrics(opt)};
  for (auto& r : out) {
    if (r.name == opt.inject_fault) r.max_error = r.max_error + 1.0 + 10.0 * r.tolerance;
    r.passed = std::isfinite(r.max_error) && r.max_error <= r.tolerance;
  }
  return out;
}

inline nlohmann::ordered_json to_json(const std::vector<CheckResult>& results) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : results)
    arr.push_back({{"name", r.name},
                   {"passed", r.passed},
                   {"max_error", r.max_error},
                   {"tolerance", r.tolerance},
                   {"trials", r.trials}});
  return arr;
}

}  // namespace hidssm
