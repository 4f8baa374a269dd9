#pragma once

// Interpretability exports: per-layer Delta_t traces and rows of the last
// GR-SSM layer's (channel-averaged) matrix mixer.
//
// delta CSV:  t,layer,value     layer in {la0.., gr0.., mean}
// mixer CSV:  t,j,weight,normalized

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "hidssm/model.hpp"

namespace hidssm {

struct DeltaRow {
  std::size_t t = 0;
  std::string layer;
  double value = 0.0;
};

/// Z-score within each segment; segments with (near) zero spread map to 0.
inline std::vector<double> zscore_by_segment(std::span<const double> values, const SegmentPartition& partition) {
  std::vector<double> out(values.size(), 0.0);
  for (const auto& s : partition.segments) {
    const double n = static_cast<double>(s.length());
    double mean = 0.0;
    for (std::size_t t = s.begin; t < s.end; ++t) mean += values[t];
    mean /= n;
    double var = 0.0;
    for (std::size_t t = s.begin; t < s.end; ++t) var += (values[t] - mean) * (values[t] - mean);
    const double sd = std::sqrt(var / n);
    for (std::size_t t = s.begin; t < s.end; ++t) out[t] = sd > 1e-12 ? (values[t] - mean) / sd : 0.0;
  }
  return out;
}

/// LA layers are Z-scored per pseudo-phase block and concatenated, GR layers
/// are raw softplus outputs; a final "mean" layer averages all of them.
/// Rows are grouped by layer, T rows each.
inline std::vector<DeltaRow> delta_export_rows(const ModelOutput& out) {
  std::vector<DeltaRow> rows;
  if (out.delta_traces.empty()) return rows;
  const std::size_t T = out.delta_traces.front().values.size();
  std::vector<double> mean(T, 0.0);
  for (const auto& trace : out.delta_traces) {
    const auto values = trace.local ? zscore_by_segment(trace.values, out.partition) : trace.values;
    for (std::size_t t = 0; t < T; ++t) {
      rows.push_back({t, trace.layer, values[t]});
      mean[t] += values[t];
    }
  }
  for (std::size_t t = 0; t < T; ++t)
    rows.push_back({t, "mean", mean[t] / static_cast<double>(out.delta_traces.size())});
  return rows;
}

inline std::string delta_csv(std::span<const DeltaRow> rows) {
  std::string out = "t,layer,value\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g\n", r.t, r.layer.c_str(), r.value);
    out += buf;
  }
  return out;
}

struct MixerExportRow {
  std::size_t t = 0;
  std::vector<double> weights;     // channel-averaged row of M
  std::vector<double> normalized;  // min-max over the row's support, 0 outside it
};

/// Row t of the channel-averaged mixer of a cached layer, streamed row by row.
inline std::vector<double> averaged_mixer_row(const IdSsmLayerCache& layer, std::size_t t) {
  const auto [T, D, N] = layer.fwd.coeffs.dims();
  std::vector<double> avg(T, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    const auto row = layer.causal ? causal_mixer_row(layer.fwd.coeffs, d, t)
                                  : contextual_mixer_row(layer.fwd.coeffs, layer.bwd.coeffs, d, t);
    for (std::size_t j = 0; j < T; ++j) avg[j] += row[j];
  }
  for (double& v : avg) v /= static_cast<double>(D);
  return avg;
}

/// Constant rows normalize to 1 on their support.
inline std::vector<double> minmax_normalize(std::span<const double> row, std::size_t support_end) {
  std::vector<double> out(row.size(), 0.0);
  const auto [lo, hi] = std::minmax_element(row.begin(), row.begin() + support_end);
  const double range = *hi - *lo;
  for (std::size_t j = 0; j < support_end; ++j) out[j] = range > 0.0 ? (row[j] - *lo) / range : 1.0;
  return out;
}

inline std::vector<MixerExportRow> mixer_export_rows(const HidSsmModel& model, const Mat& u,
                                                     std::span<const std::size_t> timesteps) {
  ForwardCache cache;
  forward(model, u, nullptr, &cache);
  const auto& last = cache.global.back();
  std::vector<MixerExportRow> rows;
  for (std::size_t t : timesteps) {
    if (t >= u.rows()) throw ConfigError("mixer export: timestep " + std::to_string(t) + " out of range");
    MixerExportRow r{t, averaged_mixer_row(last, t), {}};
    r.normalized = minmax_normalize(r.weights, last.causal ? t + 1 : u.rows());
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string mixer_csv(std::span<const MixerExportRow> rows) {
  std::string out = "t,j,weight,normalized\n";
  char buf[96];
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.weights.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", r.t, j, r.weights[j], r.normalized[j]);
      out += buf;
    }
  return out;
}

}  // namespace hidssm
