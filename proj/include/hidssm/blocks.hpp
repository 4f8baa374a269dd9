#pragma once

// Composed layers: the ID-SSM layer wrapper, the local-aggregation layer
// (block-diagonal mixer + feed-forward fusion), the global stack, and the
// phase proposal network with its logits -> partition conversion.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hidssm/errors.hpp"
#include "hidssm/ssm_core.hpp"
#include "hidssm/tensor.hpp"

namespace hidssm {

struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive

  std::size_t length() const { return end - begin; }
  auto operator<=>(const Segment&) const = default;
};

/// Ordered, contiguous, non-overlapping windows covering [0, T).
struct SegmentPartition {
  std::vector<Segment> segments;

  static SegmentPartition whole(std::size_t seq_len) { return {{{0, seq_len}}}; }

  std::size_t seq_len() const { return segments.empty() ? 0 : segments.back().end; }

  void validate(std::size_t seq_len) const {
    if (segments.empty()) throw PartitionError("partition has no segments");
    std::size_t cursor = 0;
    for (const auto& s : segments) {
      if (s.begin != cursor)
        throw PartitionError("partition gap or overlap at index " + std::to_string(cursor));
      if (s.end <= s.begin) throw PartitionError("empty segment at index " + std::to_string(s.begin));
      cursor = s.end;
    }
    if (cursor != seq_len)
      throw PartitionError("partition covers [0," + std::to_string(cursor) + ") but T=" + std::to_string(seq_len));
  }

  // 1 at the first frame of each segment.
  std::vector<std::uint8_t> start_mask() const {
    std::vector<std::uint8_t> mask(seq_len(), 0);
    for (const auto& s : segments) mask[s.begin] = 1;
    return mask;
  }

  // 1 at the last frame of each segment (where the reversed scan starts).
  std::vector<std::uint8_t> end_mask() const {
    std::vector<std::uint8_t> mask(seq_len(), 0);
    for (const auto& s : segments) mask[s.end - 1] = 1;
    return mask;
  }

  bool operator==(const SegmentPartition&) const = default;
};

struct LayerStackConfig {
  std::size_t n_global = 4;
  std::size_t n_local = 1;
  std::size_t n_ppn = 3;
  std::size_t d_model = 16;
  std::size_t state_dim = 8;
  std::size_t n_phases = 7;
  bool causal = true;
  std::size_t min_segment = 3;

  void validate() const {
    if (n_global < 1 || n_local < 1 || n_ppn < 1 || d_model < 1 || state_dim < 1 || n_phases < 1 ||
        min_segment < 1)
      throw ConfigError("LayerStackConfig: all counts must be >= 1");
    if (n_phases > 255) throw ConfigError("LayerStackConfig: at most 255 phases are supported");
  }

  bool operator==(const LayerStackConfig&) const = default;
};

// ---- normalization ------------------------------------------------------

inline constexpr double kRmsEpsilon = 1e-6;

inline Mat rms_normalize(const Mat& u, std::span<const double> scale, std::vector<double>* inv_rms = nullptr) {
  const std::size_t T = u.rows(), D = u.cols();
  if (scale.size() != D) throw ConfigError("rms_normalize: scale length mismatch");
  Mat v(T, D);
  if (inv_rms) inv_rms->assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double ms = 0.0;
    for (std::size_t d = 0; d < D; ++d) ms += u(t, d) * u(t, d);
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(D) + kRmsEpsilon);
    for (std::size_t d = 0; d < D; ++d) v(t, d) = u(t, d) * r * scale[d];
    if (inv_rms) (*inv_rms)[t] = r;
  }
  return v;
}

inline Mat rms_normalize_backward(const Mat& u, std::span<const double> scale, std::span<const double> inv_rms,
                                  const Mat& dv, std::span<double> dscale) {
  const std::size_t T = u.rows(), D = u.cols();
  Mat du(T, D);
  std::vector<double> dxhat(D);
  for (std::size_t t = 0; t < T; ++t) {
    const double r = inv_rms[t];
    double proj = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double xhat = u(t, d) * r;
      dxhat[d] = dv(t, d) * scale[d];
      dscale[d] += dv(t, d) * xhat;
      proj += dxhat[d] * xhat;
    }
    proj /= static_cast<double>(D);
    for (std::size_t d = 0; d < D; ++d) du(t, d) = r * (dxhat[d] - u(t, d) * r * proj);
  }
  return du;
}

// ---- ID-SSM layer ---------------------------------------------------------

/// One ID-SSM layer. Both scan directions are always allocated so that
/// causal and contextual models share a parameter layout; causal layers
/// never touch `backward`.
struct IdSsmLayerParams {
  SsmProjections forward;
  SsmProjections backward;
  std::vector<double> norm_scale;

  IdSsmLayerParams() = default;
  IdSsmLayerParams(std::size_t channels, std::size_t state_dim)
      : forward(channels, state_dim), backward(channels, state_dim), norm_scale(channels, 1.0) {}

  std::size_t channels() const { return norm_scale.size(); }
};

struct SsmBranchCache {
  SelectiveInputs inputs;
  DiscretizedCoefficients coeffs;
};

struct IdSsmLayerCache {
  bool causal = true;
  Mat input;
  Mat normalized;
  std::vector<double> inv_rms;
  SsmBranchCache fwd;
  SsmBranchCache bwd;
  ContextualTrace trace;
  std::vector<std::uint8_t> fwd_resets;
  std::vector<std::uint8_t> bwd_resets;
  Mat mixed;  // scan output before the residual add
};

namespace detail {

inline Mat ssm_mix(const Mat& u, const IdSsmLayerParams& p, bool causal, std::vector<std::uint8_t> fwd_resets,
                   std::vector<std::uint8_t> bwd_resets, IdSsmLayerCache& c) {
  if (u.cols() != p.channels())
    throw ConfigError("ID-SSM layer: input width " + std::to_string(u.cols()) + " but layer has " +
                      std::to_string(p.channels()) + " channels");
  c.causal = causal;
  c.input = u;
  c.normalized = rms_normalize(u, p.norm_scale, &c.inv_rms);
  c.fwd_resets = std::move(fwd_resets);
  c.bwd_resets = std::move(bwd_resets);
  c.fwd.inputs = project_inputs(c.normalized, p.forward);
  c.fwd.coeffs = discretize(c.fwd.inputs, p.forward.a);
  if (causal) {
    c.mixed = directional_scan(c.fwd.coeffs, c.normalized, ScanDirection::forward, c.fwd_resets,
                               &c.trace.fwd_states);
  } else {
    c.bwd.inputs = project_inputs(c.normalized, p.backward);
    c.bwd.coeffs = discretize(c.bwd.inputs, p.backward.a);
    c.mixed = contextual_scan(c.fwd.coeffs, c.bwd.coeffs, c.normalized, c.fwd_resets, c.bwd_resets, &c.trace);
  }
  return c.mixed;
}

// Gradient of the loss w.r.t. the layer input through the mixing branch only.
inline Mat ssm_mix_backward(const IdSsmLayerParams& p, const IdSsmLayerCache& c, const Mat& dmixed,
                            IdSsmLayerParams& grad) {
  const Mat& v = c.normalized;
  Mat dv;
  if (c.causal) {
    auto sg = directional_scan_backward(c.fwd.coeffs, v, ScanDirection::forward, c.fwd_resets,
                                        c.trace.fwd_states, dmixed);
    auto ig = discretize_backward(c.fwd.inputs, p.forward.a, c.fwd.coeffs, sg.da_bar, sg.db_bar, sg.dc);
    dv = project_inputs_backward(v, p.forward, ig, grad.forward);
    for (std::size_t i = 0; i < dv.size(); ++i) dv.flat()[i] += sg.du.flat()[i];
  } else {
    auto cg = contextual_scan_backward(c.fwd.coeffs, c.bwd.coeffs, v, c.fwd_resets, c.bwd_resets, c.trace, dmixed);
    auto igf = discretize_backward(c.fwd.inputs, p.forward.a, c.fwd.coeffs, cg.fwd.da_bar, cg.fwd.db_bar, cg.fwd.dc);
    auto igb =
        discretize_backward(c.bwd.inputs, p.backward.a, c.bwd.coeffs, cg.bwd.da_bar, cg.bwd.db_bar, cg.bwd.dc);
    dv = project_inputs_backward(v, p.forward, igf, grad.forward);
    Mat dvb = project_inputs_backward(v, p.backward, igb, grad.backward);
    for (std::size_t i = 0; i < dv.size(); ++i) dv.flat()[i] += dvb.flat()[i] + cg.du.flat()[i];
  }
  return rms_normalize_backward(c.input, p.norm_scale, c.inv_rms, dv, grad.norm_scale);
}

}  // namespace detail

/// y = u + scan(rms_normalize(u)); the scan is causal or contextual.
inline Mat id_ssm_layer(const Mat& u, const IdSsmLayerParams& p, bool causal, IdSsmLayerCache* cache = nullptr) {
  IdSsmLayerCache local;
  IdSsmLayerCache& c = cache ? *cache : local;
  Mat y = detail::ssm_mix(u, p, causal, {}, {}, c);
  for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] += u.flat()[i];
  return y;
}

inline Mat id_ssm_layer_backward(const IdSsmLayerParams& p, const IdSsmLayerCache& cache, const Mat& dy,
                                 IdSsmLayerParams& grad) {
  Mat du = detail::ssm_mix_backward(p, cache, dy, grad);
  for (std::size_t i = 0; i < du.size(); ++i) du.flat()[i] += dy.flat()[i];
  return du;
}

// ---- feed-forward fusion ---------------------------------------------------

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_derivative(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

/// Position-wise residual MLP: y = x + down(silu(up(x))), D -> 2D -> D.
struct FeedForward {
  Affine up;
  Affine down;

  FeedForward() = default;
  explicit FeedForward(std::size_t channels) : up(channels, 2 * channels), down(2 * channels, channels) {}
};

struct FeedForwardCache {
  Mat input;
  Mat pre;
  Mat act;
};

inline Mat feed_forward(const Mat& x, const FeedForward& ff, FeedForwardCache* cache = nullptr) {
  Mat pre = ff.up.apply(x);
  Mat act(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.size(); ++i) act.flat()[i] = silu(pre.flat()[i]);
  Mat y = ff.down.apply(act);
  for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] += x.flat()[i];
  if (cache) *cache = {x, std::move(pre), std::move(act)};
  return y;
}

inline Mat feed_forward_backward(const FeedForward& ff, const FeedForwardCache& c, const Mat& dy, FeedForward& grad) {
  Mat dact = ff.down.backward(c.act, dy, grad.down);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.flat()[i] *= silu_derivative(c.pre.flat()[i]);
  Mat dx = ff.up.backward(c.input, dact, grad.up);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.flat()[i] += dy.flat()[i];
  return dx;
}

// ---- LA-SSM layer --------------------------------------------------------

struct LaSsmLayerParams {
  IdSsmLayerParams ssm;
  FeedForward ffn;

  LaSsmLayerParams() = default;
  LaSsmLayerParams(std::size_t channels, std::size_t state_dim) : ssm(channels, state_dim), ffn(channels) {}
};

struct LaSsmLayerCache {
  IdSsmLayerCache ssm;
  FeedForwardCache ffn;
};

/// Scan output of the local-aggregation layer before fusion: every segment
/// is scanned from a zero state with the layer's shared coefficients.
inline Mat la_pre_fusion(const Mat& u, const SegmentPartition& partition, const IdSsmLayerParams& p, bool causal,
                         IdSsmLayerCache* cache = nullptr) {
  partition.validate(u.rows());
  IdSsmLayerCache local;
  IdSsmLayerCache& c = cache ? *cache : local;
  return detail::ssm_mix(u, p, causal, partition.start_mask(), causal ? std::vector<std::uint8_t>{} : partition.end_mask(),
                         c);
}

/// y = fuse(u + segmented_scan(rms_normalize(u))), fuse being the residual feed-forward map.
inline Mat la_ssm_layer(const Mat& u, const SegmentPartition& partition, const LaSsmLayerParams& p, bool causal,
                        LaSsmLayerCache* cache = nullptr) {
  LaSsmLayerCache local;
  LaSsmLayerCache& c = cache ? *cache : local;
  Mat mixed = la_pre_fusion(u, partition, p.ssm, causal, &c.ssm);
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed.flat()[i] += u.flat()[i];
  return feed_forward(mixed, p.ffn, &c.ffn);
}

inline Mat la_ssm_layer_backward(const LaSsmLayerParams& p, const LaSsmLayerCache& c, const Mat& dy,
                                 LaSsmLayerParams& grad) {
  Mat dfused = feed_forward_backward(p.ffn, c.ffn, dy, grad.ffn);
  Mat du = detail::ssm_mix_backward(p.ssm, c.ssm, dfused, grad.ssm);
  for (std::size_t i = 0; i < du.size(); ++i) du.flat()[i] += dfused.flat()[i];
  return du;
}

/// Block-diagonal mixer for channel d: each diagonal block is the causal (or
/// contextual) mixer of one segment, everything else is zero.
inline MatrixMixer materialize_mixer_block_diagonal(const DiscretizedCoefficients& fwd,
                                                    const DiscretizedCoefficients* bwd, std::size_t d,
                                                    const SegmentPartition& partition,
                                                    std::size_t cap = kMixerMaterializeCap) {
  const std::size_t T = fwd.dims().seq_len;
  if (T > cap) throw ConfigError("materialize_mixer_block_diagonal: T exceeds cap");
  partition.validate(T);
  MatrixMixer mixer{Mat(T, T), MixerStructure::block_diagonal};
  for (const auto& s : partition.segments)
    for (std::size_t t = s.begin; t < s.end; ++t) {
      const auto row = bwd ? contextual_mixer_row(fwd, *bwd, d, t, s.begin, s.end) : causal_mixer_row(fwd, d, t, s.begin);
      std::copy(row.begin(), row.end(), mixer.m.row(t).begin());
    }
  return mixer;
}

// ---- GR-SSM stack -----------------------------------------------------------

inline Mat gr_ssm_stack(const Mat& u, const LayerStackConfig& cfg, std::span<const IdSsmLayerParams> layers,
                        std::vector<IdSsmLayerCache>* caches = nullptr) {
  if (cfg.n_global < 1 || layers.size() != cfg.n_global)
    throw ConfigError("gr_ssm_stack: expected " + std::to_string(cfg.n_global) + " layers, got " +
                      std::to_string(layers.size()));
  if (caches) caches->assign(layers.size(), {});
  Mat h = u;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    try {
      h = id_ssm_layer(h, layers[l], cfg.causal, caches ? &(*caches)[l] : nullptr);
    } catch (const NumericalError& e) {
      throw NumericalError("gr layer " + std::to_string(l) + ": " + e.what(), e.timestep());
    }
  }
  return h;
}

// ---- phase proposal network --------------------------------------------------

struct PpnParams {
  std::vector<IdSsmLayerParams> layers;
  Affine head;  // D -> N_p

  PpnParams() = default;
  PpnParams(std::size_t n_layers, std::size_t channels, std::size_t state_dim, std::size_t n_phases)
      : layers(n_layers, IdSsmLayerParams(channels, state_dim)), head(channels, n_phases) {}
};

struct PpnCache {
  std::vector<IdSsmLayerCache> layers;
  Mat features;
};

/// N_q causal ID-SSM layers followed by a position-wise affine classifier.
inline Mat ppn_forward(const Mat& u, const PpnParams& ppn, PpnCache* cache = nullptr) {
  if (ppn.layers.empty()) throw ConfigError("ppn_forward: at least one layer required");
  if (cache) cache->layers.assign(ppn.layers.size(), {});
  Mat h = u;
  for (std::size_t l = 0; l < ppn.layers.size(); ++l) {
    try {
      h = id_ssm_layer(h, ppn.layers[l], true, cache ? &cache->layers[l] : nullptr);
    } catch (const NumericalError& e) {
      throw NumericalError("ppn layer " + std::to_string(l) + ": " + e.what(), e.timestep());
    }
  }
  Mat logits = ppn.head.apply(h);
  if (cache) cache->features = std::move(h);
  return logits;
}

inline Mat ppn_backward(const PpnParams& ppn, const PpnCache& cache, const Mat& dlogits, PpnParams& grad) {
  Mat dh = ppn.head.backward(cache.features, dlogits, grad.head);
  for (std::size_t l = ppn.layers.size(); l-- > 0;)
    dh = id_ssm_layer_backward(ppn.layers[l], cache.layers[l], dh, grad.layers[l]);
  return dh;
}

/// Per-row argmax; ties resolve to the lowest index.
inline std::vector<int> argmax_rows(const Mat& logits) {
  std::vector<int> out(logits.rows(), 0);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits(t, k) > logits(t, best)) best = k;
    out[t] = static_cast<int>(best);
  }
  return out;
}

struct LabeledRun {
  int label = 0;
  Segment span;
};

inline std::vector<LabeledRun> run_length_encode(std::span<const int> labels) {
  std::vector<LabeledRun> runs;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (runs.empty() || runs.back().label != labels[t])
      runs.push_back({labels[t], {t, t + 1}});
    else
      runs.back().span.end = t + 1;
  }
  return runs;
}

/// Pseudo-phase partition from per-frame proposals: maximal constant runs of
/// the argmax, runs shorter than `min_len` folded into the preceding run
/// (leading short runs into the first long one), equal neighbours coalesced.
inline SegmentPartition segments_from_labels(std::span<const int> labels, std::size_t min_len) {
  if (labels.empty()) throw PartitionError("segments_from_labels: empty label sequence");
  min_len = std::max<std::size_t>(min_len, 1);
  std::vector<LabeledRun> merged;
  std::size_t pending_begin = 0;
  bool pending = false;
  for (const auto& run : run_length_encode(labels)) {
    if (run.span.length() < min_len) {
      if (merged.empty()) {
        if (!pending) pending_begin = run.span.begin;
        pending = true;
      } else {
        merged.back().span.end = run.span.end;
      }
      continue;
    }
    if (!merged.empty() && merged.back().label == run.label) {
      merged.back().span.end = run.span.end;
    } else {
      merged.push_back(run);
      if (pending && merged.size() == 1) merged.back().span.begin = pending_begin;
    }
  }
  SegmentPartition out;
  if (merged.empty()) return SegmentPartition::whole(labels.size());
  for (const auto& r : merged) out.segments.push_back(r.span);
  return out;
}

inline SegmentPartition ppn_segments(const Mat& logits, std::size_t min_len) {
  const auto labels = argmax_rows(logits);
  return segments_from_labels(labels, min_len);
}

/// Causal variant used by causal models: a boundary is opened at frame t
/// once the trailing argmax run reaches `min_len` frames with a label
/// different from the current segment's. Membership of frame t depends on
/// proposals up to t only. Identical to plain run-length segmentation when
/// min_len == 1.
inline SegmentPartition segments_from_labels_online(std::span<const int> labels, std::size_t min_len) {
  if (labels.empty()) throw PartitionError("segments_from_labels_online: empty label sequence");
  min_len = std::max<std::size_t>(min_len, 1);
  SegmentPartition out;
  out.segments.push_back({0, 0});
  int current = -1;
  int streak_label = -1;
  std::size_t streak = 0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] == streak_label) {
      ++streak;
    } else {
      streak_label = labels[t];
      streak = 1;
    }
    if (streak == min_len) {
      if (current < 0) {
        current = streak_label;
      } else if (streak_label != current) {
        out.segments.back().end = t;
        out.segments.push_back({t, t});
        current = streak_label;
      }
    }
    out.segments.back().end = t + 1;
  }
  return out;
}

inline SegmentPartition ppn_segments_online(const Mat& logits, std::size_t min_len) {
  const auto labels = argmax_rows(logits);
  return segments_from_labels_online(labels, min_len);
}

}  // namespace hidssm
