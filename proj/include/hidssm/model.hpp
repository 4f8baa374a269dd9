#pragma once

// Full model assembly: PPN -> LA-SSM -> GR-SSM -> classification and
// progress heads, the discrete-continuous loss and its reverse-mode gradient.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hidssm/blocks.hpp"
#include "hidssm/errors.hpp"
#include "hidssm/ssm_core.hpp"
#include "hidssm/targets.hpp"
#include "hidssm/tensor.hpp"

namespace hidssm {

inline constexpr double kDefaultAlpha = 0.7;
inline constexpr double kPpnLossWeight = 1.0;

struct ModelParams {
  PpnParams ppn;
  std::vector<LaSsmLayerParams> local;
  std::vector<IdSsmLayerParams> global;
  Affine cls_head;  // D -> N_p
  Affine prs_head;  // D -> 1, squashed by the logistic function
};

// ---- parameter enumeration ---------------------------------------------------

namespace detail {

template <class P, class Fn>
void visit_affine(P& a, const std::string& prefix, Fn& fn) {
  fn(prefix + ".weight", a.weight.flat());
  fn(prefix + ".bias", std::span(a.bias));
}

template <class P, class Fn>
void visit_projections(P& p, const std::string& prefix, Fn& fn) {
  visit_affine(p.delta, prefix + ".delta", fn);
  visit_affine(p.b, prefix + ".b", fn);
  visit_affine(p.c, prefix + ".c", fn);
  fn(prefix + ".a", std::span(p.a));
}

template <class P, class Fn>
void visit_layer(P& l, const std::string& prefix, Fn& fn) {
  visit_projections(l.forward, prefix + ".fwd", fn);
  visit_projections(l.backward, prefix + ".bwd", fn);
  fn(prefix + ".norm_scale", std::span(l.norm_scale));
}

}  // namespace detail

/// Calls fn(name, span) for every parameter array in a fixed order.
template <class P, class Fn>
void for_each_param(P& params, Fn&& fn) {
  for (std::size_t i = 0; i < params.ppn.layers.size(); ++i)
    detail::visit_layer(params.ppn.layers[i], "ppn.layer" + std::to_string(i), fn);
  detail::visit_affine(params.ppn.head, "ppn.head", fn);
  for (std::size_t i = 0; i < params.local.size(); ++i) {
    const std::string prefix = "la" + std::to_string(i);
    detail::visit_layer(params.local[i].ssm, prefix + ".ssm", fn);
    detail::visit_affine(params.local[i].ffn.up, prefix + ".ffn.up", fn);
    detail::visit_affine(params.local[i].ffn.down, prefix + ".ffn.down", fn);
  }
  for (std::size_t i = 0; i < params.global.size(); ++i)
    detail::visit_layer(params.global[i], "gr" + std::to_string(i), fn);
  detail::visit_affine(params.cls_head, "cls_head", fn);
  detail::visit_affine(params.prs_head, "prs_head", fn);
}

struct ParamRef {
  std::string name;
  std::span<double> values;
};

inline std::vector<ParamRef> param_list(ModelParams& params) {
  std::vector<ParamRef> out;
  for_each_param(params, [&](const std::string& name, std::span<double> v) { out.push_back({name, v}); });
  return out;
}

struct ConstParamRef {
  std::string name;
  std::span<const double> values;
};

inline std::vector<ConstParamRef> const_param_list(const ModelParams& params) {
  std::vector<ConstParamRef> out;
  for_each_param(params, [&](const std::string& name, std::span<const double> v) { out.push_back({name, v}); });
  return out;
}

inline std::size_t param_count(const ModelParams& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const std::string&, std::span<const double> v) { n += v.size(); });
  return n;
}

/// Structural shell: every array sized for `cfg`, a = -1, norm scales 1, all else 0.
inline ModelParams make_params(const LayerStackConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.d_model, N = cfg.state_dim;
  ModelParams p;
  p.ppn = PpnParams(cfg.n_ppn, D, N, cfg.n_phases);
  p.local.assign(cfg.n_local, LaSsmLayerParams(D, N));
  p.global.assign(cfg.n_global, IdSsmLayerParams(D, N));
  p.cls_head = Affine(D, cfg.n_phases);
  p.prs_head = Affine(D, 1);
  return p;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for_each_param(z, [](const std::string&, std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); });
  return z;
}

struct InitOptions {
  // Target timescale softplus(bias_delta) at initialization.
  double initial_delta = 0.1;
  // Leaves S_C projections and FFN output maps at zero so every block starts as identity.
  bool identity_start = true;
  // Scale of the random head weights (0 keeps heads at zero).
  double head_scale = 0.0;
  // Fills every array (including S_C, FFN output, heads, a offsets) with random values; for gradient checks.
  bool randomize_all = false;
};

inline void init_params(ModelParams& p, const LayerStackConfig& cfg, std::uint64_t seed, const InitOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double fan = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  auto fill = [&](std::span<double> v, double scale) {
    // + 0.0 folds the -0.0 that a zero scale would leave behind
    for (double& x : v) x = scale * normal(rng) + 0.0;
  };
  const double delta_bias = std::log(std::expm1(opt.initial_delta));

  auto init_proj = [&](SsmProjections& s) {
    fill(s.delta.weight.flat(), fan);
    std::fill(s.delta.bias.begin(), s.delta.bias.end(), delta_bias);
    fill(s.b.weight.flat(), fan);
    std::fill(s.b.bias.begin(), s.b.bias.end(), 0.0);
    if (opt.identity_start && !opt.randomize_all) {
      std::fill(s.c.weight.flat().begin(), s.c.weight.flat().end(), 0.0);
    } else {
      fill(s.c.weight.flat(), fan);
    }
    std::fill(s.c.bias.begin(), s.c.bias.end(), 0.0);
    std::fill(s.a.begin(), s.a.end(), -1.0);
    if (opt.randomize_all) {
      fill(s.delta.bias, 0.5);
      fill(s.b.bias, 0.3);
      fill(s.c.bias, 0.3);
      for (double& a : s.a) a = -1.0 + 0.3 * normal(rng);
    }
  };
  auto init_layer = [&](IdSsmLayerParams& l) {
    init_proj(l.forward);
    init_proj(l.backward);
    std::fill(l.norm_scale.begin(), l.norm_scale.end(), 1.0);
    if (opt.randomize_all)
      for (double& g : l.norm_scale) g = 1.0 + 0.2 * normal(rng);
  };
  auto init_head = [&](Affine& h) {
    const double s = opt.randomize_all ? fan : opt.head_scale * fan;
    fill(h.weight.flat(), s);
    fill(h.bias, opt.randomize_all ? 0.1 : 0.0);
  };

  for (auto& l : p.ppn.layers) init_layer(l);
  init_head(p.ppn.head);
  for (auto& l : p.local) {
    init_layer(l.ssm);
    fill(l.ffn.up.weight.flat(), fan);
    std::fill(l.ffn.up.bias.begin(), l.ffn.up.bias.end(), 0.0);
    const double down = (opt.identity_start && !opt.randomize_all) ? 0.0 : 1.0 / std::sqrt(2.0 * cfg.d_model);
    fill(l.ffn.down.weight.flat(), down);
    std::fill(l.ffn.down.bias.begin(), l.ffn.down.bias.end(), 0.0);
    if (opt.randomize_all) {
      fill(l.ffn.up.bias, 0.1);
      fill(l.ffn.down.bias, 0.1);
    }
  }
  for (auto& l : p.global) init_layer(l);
  init_head(p.cls_head);
  init_head(p.prs_head);
}

struct HidSsmModel {
  LayerStackConfig cfg;
  ModelParams params;

  static HidSsmModel create(const LayerStackConfig& cfg, std::uint64_t seed, const InitOptions& opt = {}) {
    HidSsmModel m{cfg, make_params(cfg)};
    init_params(m.params, cfg, seed, opt);
    return m;
  }

  static HidSsmModel zero(const LayerStackConfig& cfg) {
    HidSsmModel m{cfg, make_params(cfg)};
    m.params = zeros_like(m.params);
    return m;
  }
};

// ---- forward ----------------------------------------------------------------

/// Delta_t recorded from a layer's forward-direction projections.
struct DeltaTrace {
  std::string layer;
  bool local = false;
  std::vector<double> values;
};

struct ModelOutput {
  Mat logits;                     // T x N_p
  std::vector<double> progress;   // T, in (0, 1)
  std::vector<DeltaTrace> delta_traces;
  SegmentPartition partition;
  Mat ppn_logits;                 // T x N_p
};

struct ForwardCache {
  PpnCache ppn;
  std::vector<LaSsmLayerCache> local;
  std::vector<IdSsmLayerCache> global;
  Mat features;  // GR-SSM output fed to both heads
  Mat prs_pre;   // progress head pre-activation
};

inline SegmentPartition partition_from_proposals(const Mat& ppn_logits, const LayerStackConfig& cfg) {
  return cfg.causal ? ppn_segments_online(ppn_logits, cfg.min_segment) : ppn_segments(ppn_logits, cfg.min_segment);
}

inline std::vector<double> delta_row(const DiscretizedCoefficients& co) {
  std::vector<double> v(co.delta.rows());
  for (std::size_t t = 0; t < v.size(); ++t) v[t] = co.delta(t, 0);
  return v;
}

/// When `partition` is null the partition is proposed by the PPN on `u`.
inline ModelOutput forward(const HidSsmModel& model, const Mat& u, const SegmentPartition* partition = nullptr,
                           ForwardCache* cache = nullptr) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  if (u.rows() < 1 || u.cols() != cfg.d_model)
    throw ConfigError("forward: expected T x " + std::to_string(cfg.d_model) + " features, got " +
                      std::to_string(u.rows()) + " x " + std::to_string(u.cols()));
  if (p.local.size() != cfg.n_local || p.global.size() != cfg.n_global || p.ppn.layers.size() != cfg.n_ppn)
    throw ConfigError("forward: parameter layout does not match config");
  ForwardCache local_cache;
  ForwardCache& c = cache ? *cache : local_cache;

  ModelOutput out;
  out.ppn_logits = ppn_forward(u, p.ppn, &c.ppn);
  out.partition = partition ? *partition : partition_from_proposals(out.ppn_logits, cfg);
  out.partition.validate(u.rows());

  Mat h = u;
  c.local.assign(cfg.n_local, {});
  for (std::size_t l = 0; l < cfg.n_local; ++l) {
    try {
      h = la_ssm_layer(h, out.partition, p.local[l], cfg.causal, &c.local[l]);
    } catch (const NumericalError& e) {
      throw NumericalError("la layer " + std::to_string(l) + ": " + e.what(), e.timestep());
    }
    out.delta_traces.push_back({"la" + std::to_string(l), true, delta_row(c.local[l].ssm.fwd.coeffs)});
  }
  h = gr_ssm_stack(h, cfg, p.global, &c.global);
  for (std::size_t l = 0; l < cfg.n_global; ++l)
    out.delta_traces.push_back({"gr" + std::to_string(l), false, delta_row(c.global[l].fwd.coeffs)});

  out.logits = p.cls_head.apply(h);
  c.prs_pre = p.prs_head.apply(h);
  out.progress.resize(h.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) out.progress[t] = sigmoid(c.prs_pre(t, 0));
  c.features = std::move(h);
  return out;
}

inline std::vector<int> predict_phases(const HidSsmModel& model, const Mat& u) {
  return argmax_rows(forward(model, u).logits);
}

// ---- losses -----------------------------------------------------------------

inline std::vector<double> log_softmax_row(std::span<const double> z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] - lse;
  return out;
}

/// Mean over frames of -log softmax(logits_t)[label_t].
inline double cross_entropy(const Mat& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw InputError("cross_entropy: label count mismatch");
  double acc = 0.0;
  for (std::size_t t = 0; t < logits.rows(); ++t) acc -= log_softmax_row(logits.row(t))[labels[t]];
  return acc / static_cast<double>(logits.rows());
}

inline double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw InputError("mean_squared_error: length mismatch");
  double acc = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) acc += (pred[t] - target[t]) * (pred[t] - target[t]);
  return acc / static_cast<double>(pred.size());
}

/// alpha * CE(logits, phases) + (1 - alpha) * MSE(progress, progress targets).
inline double total_loss(const Mat& logits, std::span<const double> progress, const SupervisionTargets& targets,
                         double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("total_loss: alpha must lie in [0, 1]");
  const double loss = alpha * cross_entropy(logits, targets.phases) +
                      (1.0 - alpha) * mean_squared_error(progress, targets.progress);
  if (!std::isfinite(loss)) throw NumericalError("total_loss: non-finite loss");
  return loss;
}

struct LossBreakdown {
  double ce = 0.0;
  double mse = 0.0;
  double total = 0.0;   // alpha * ce + (1 - alpha) * mse
  double ppn_ce = 0.0;  // proposal network's own cross-entropy

  double objective() const { return total + kPpnLossWeight * ppn_ce; }
};

inline LossBreakdown evaluate_loss(const ModelOutput& out, const SupervisionTargets& targets, double alpha) {
  LossBreakdown l;
  l.ce = cross_entropy(out.logits, targets.phases);
  l.mse = mean_squared_error(out.progress, targets.progress);
  l.total = total_loss(out.logits, out.progress, targets, alpha);
  l.ppn_ce = cross_entropy(out.ppn_logits, targets.phases);
  if (!std::isfinite(l.objective())) throw NumericalError("loss: non-finite objective");
  return l;
}

// ---- backward ---------------------------------------------------------------

struct GradientBundle {
  ModelParams grads;
  LossBreakdown loss;
  SegmentPartition partition;
};

namespace detail {

// d/dlogits of weight * mean-over-frames cross-entropy
inline Mat cross_entropy_grad(const Mat& logits, std::span<const int> labels, double weight) {
  Mat g(logits.rows(), logits.cols());
  const double scale = weight / static_cast<double>(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto ls = log_softmax_row(logits.row(t));
    for (std::size_t k = 0; k < logits.cols(); ++k) g(t, k) = scale * std::exp(ls[k]);
    g(t, static_cast<std::size_t>(labels[t])) -= scale;
  }
  return g;
}

}  // namespace detail

/// Reverse-mode gradient of total_loss + kPpnLossWeight * PPN cross-entropy.
/// The partition is a discrete decision and is not differentiated.
inline GradientBundle backward(const HidSsmModel& model, const Mat& u, const SupervisionTargets& targets, double alpha,
                               const SegmentPartition* partition = nullptr) {
  const auto& cfg = model.cfg;
  const auto& p = model.params;
  targets.validate(u.rows(), cfg.n_phases);
  ForwardCache c;
  ModelOutput out = forward(model, u, partition, &c);

  GradientBundle g{zeros_like(p), evaluate_loss(out, targets, alpha), out.partition};
  const std::size_t T = u.rows();

  Mat dlogits = detail::cross_entropy_grad(out.logits, targets.phases, alpha);
  Mat dprs(T, 1);
  for (std::size_t t = 0; t < T; ++t) {
    const double y = out.progress[t];
    dprs(t, 0) = (1.0 - alpha) * 2.0 * (y - targets.progress[t]) / static_cast<double>(T) * y * (1.0 - y);
  }
  Mat dh = p.cls_head.backward(c.features, dlogits, g.grads.cls_head);
  Mat dh_prs = p.prs_head.backward(c.features, dprs, g.grads.prs_head);
  for (std::size_t i = 0; i < dh.size(); ++i) dh.flat()[i] += dh_prs.flat()[i];

  for (std::size_t l = cfg.n_global; l-- > 0;)
    dh = id_ssm_layer_backward(p.global[l], c.global[l], dh, g.grads.global[l]);
  for (std::size_t l = cfg.n_local; l-- > 0;)
    dh = la_ssm_layer_backward(p.local[l], c.local[l], dh, g.grads.local[l]);

  Mat dppn = detail::cross_entropy_grad(out.ppn_logits, targets.phases, kPpnLossWeight);
  ppn_backward(p.ppn, c.ppn, dppn, g.grads.ppn);

  for_each_param(g.grads, [](const std::string& name, std::span<const double> v) {
    if (!all_finite(v)) throw NumericalError("backward: non-finite gradient for " + name);
  });
  return g;
}

/// Scalar objective used for finite-difference checks (same partition handling as backward).
inline double objective(const HidSsmModel& model, const Mat& u, const SupervisionTargets& targets, double alpha,
                        const SegmentPartition* partition = nullptr) {
  return evaluate_loss(forward(model, u, partition), targets, alpha).objective();
}

}  // namespace hidssm
