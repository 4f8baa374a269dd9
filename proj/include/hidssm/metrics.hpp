#pragma once

// Phase-recognition metrics: relaxed accuracy / precision / recall / Jaccard
// (boundary-tolerant, Cholec80 style) and unrelaxed micro-averaged F1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hidssm/errors.hpp"

namespace hidssm {

inline constexpr std::size_t kDefaultBoundaryWindow = 10;

struct PhaseStats {
  int phase = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double jaccard = 0.0;
};

struct VideoMetrics {
  double accuracy = 0.0;  // relaxed
  double precision = 0.0;
  double recall = 0.0;
  double jaccard = 0.0;
  double unrelaxed_accuracy = 0.0;
  std::vector<PhaseStats> phases;  // phases present in gt, ascending
};

namespace detail {

inline void check_lengths(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size())
    throw InputError("metrics: prediction length " + std::to_string(pred.size()) + " != ground truth length " +
                     std::to_string(gt.size()));
  if (gt.empty()) throw InputError("metrics: empty sequence");
}

inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// Predictions with boundary tolerance applied: a frame within `window`
/// frames after a ground-truth transition that predicts the phase on the
/// other side of that transition is rewritten to the ground truth.
inline std::vector<int> relax_predictions(std::span<const int> pred, std::span<const int> gt, std::size_t window) {
  detail::check_lengths(pred, gt);
  std::vector<int> out(pred.begin(), pred.end());
  for (std::size_t s = 1; s < gt.size(); ++s) {
    if (gt[s] == gt[s - 1]) continue;
    const std::size_t stop = std::min(gt.size(), s + window);
    for (std::size_t t = s; t < stop; ++t)
      if (out[t] != gt[t] && pred[t] == gt[s - 1]) out[t] = gt[t];
  }
  return out;
}

inline double frame_accuracy(std::span<const int> pred, std::span<const int> gt) {
  detail::check_lengths(pred, gt);
  std::size_t hit = 0;
  for (std::size_t t = 0; t < gt.size(); ++t) hit += pred[t] == gt[t];
  return detail::ratio(hit, gt.size());
}

/// Relaxed metrics for one video. Precision, recall and Jaccard are
/// macro-averaged over the phases that occur in `gt`.
inline VideoMetrics relaxed_metrics(std::span<const int> pred, std::span<const int> gt,
                                    std::size_t boundary_window = kDefaultBoundaryWindow) {
  const auto relaxed = relax_predictions(pred, gt, boundary_window);
  VideoMetrics m;
  m.accuracy = frame_accuracy(relaxed, gt);
  m.unrelaxed_accuracy = frame_accuracy(pred, gt);

  std::map<int, PhaseStats> stats;
  for (int g : gt) stats[g].phase = g;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (relaxed[t] == gt[t]) {
      ++stats[gt[t]].tp;
    } else {
      ++stats[gt[t]].fn;
      if (auto it = stats.find(relaxed[t]); it != stats.end()) ++it->second.fp;
    }
  }
  for (auto& [phase, s] : stats) {
    s.precision = detail::ratio(s.tp, s.tp + s.fp);
    s.recall = detail::ratio(s.tp, s.tp + s.fn);
    s.jaccard = detail::ratio(s.tp, s.tp + s.fp + s.fn);
    m.precision += s.precision;
    m.recall += s.recall;
    m.jaccard += s.jaccard;
    m.phases.push_back(s);
  }
  const double n = static_cast<double>(stats.size());
  m.precision /= n;
  m.recall /= n;
  m.jaccard /= n;
  return m;
}

/// Micro-averaged F1 over all classes: pooled TP, FP, FN.
inline double micro_f1(std::span<const int> pred, std::span<const int> gt) {
  detail::check_lengths(pred, gt);
  std::map<int, std::array<std::size_t, 3>> counts;  // tp, fp, fn
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (pred[t] == gt[t]) {
      ++counts[gt[t]][0];
    } else {
      ++counts[pred[t]][1];
      ++counts[gt[t]][2];
    }
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [k, c] : counts) {
    tp += c[0];
    fp += c[1];
    fn += c[2];
  }
  return detail::ratio(2 * tp, 2 * tp + fp + fn);
}

// ---- dataset-level report ----------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single video
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct PhaseRow {
  int phase = 0;
  std::size_t videos = 0;  // videos in which the phase occurs
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;  // means over those videos
  double recall = 0.0;
  double jaccard = 0.0;
};

struct EvalReport {
  std::size_t videos = 0;
  std::size_t frames = 0;
  std::size_t boundary_window = kDefaultBoundaryWindow;
  MeanStd accuracy;
  MeanStd precision;
  MeanStd recall;
  MeanStd jaccard;
  double frame_accuracy = 0.0;  // pooled, unrelaxed
  double micro_f1 = 0.0;        // pooled, unrelaxed
  std::vector<PhaseRow> per_phase;
};

struct LabeledPrediction {
  std::vector<int> pred;
  std::vector<int> gt;
};

inline EvalReport evaluate_predictions(std::span<const LabeledPrediction> videos,
                                       std::size_t boundary_window = kDefaultBoundaryWindow) {
  if (videos.empty()) throw InputError("evaluate_predictions: no videos");
  EvalReport r;
  r.videos = videos.size();
  r.boundary_window = boundary_window;
  std::vector<double> acc, pre, rec, jac;
  std::map<int, PhaseRow> rows;
  std::vector<int> all_pred, all_gt;
  for (const auto& v : videos) {
    const auto m = relaxed_metrics(v.pred, v.gt, boundary_window);
    acc.push_back(m.accuracy);
    pre.push_back(m.precision);
    rec.push_back(m.recall);
    jac.push_back(m.jaccard);
    for (const auto& s : m.phases) {
      auto& row = rows[s.phase];
      row.phase = s.phase;
      ++row.videos;
      row.tp += s.tp;
      row.fp += s.fp;
      row.fn += s.fn;
      row.precision += s.precision;
      row.recall += s.recall;
      row.jaccard += s.jaccard;
    }
    all_pred.insert(all_pred.end(), v.pred.begin(), v.pred.end());
    all_gt.insert(all_gt.end(), v.gt.begin(), v.gt.end());
  }
  r.frames = all_gt.size();
  r.accuracy = mean_std(acc);
  r.precision = mean_std(pre);
  r.recall = mean_std(rec);
  r.jaccard = mean_std(jac);
  r.frame_accuracy = frame_accuracy(all_pred, all_gt);
  r.micro_f1 = micro_f1(all_pred, all_gt);
  for (auto& [phase, row] : rows) {
    const double n = static_cast<double>(row.videos);
    row.precision /= n;
    row.recall /= n;
    row.jaccard /= n;
    r.per_phase.push_back(row);
  }
  return r;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  auto ms = [](const MeanStd& m) { return nlohmann::ordered_json{{"mean", m.mean}, {"std", m.std}}; };
  nlohmann::ordered_json j = {{"videos", r.videos},
                              {"frames", r.frames},
                              {"boundary_window", r.boundary_window},
                              {"accuracy", ms(r.accuracy)},
                              {"precision", ms(r.precision)},
                              {"recall", ms(r.recall)},
                              {"jaccard", ms(r.jaccard)},
                              {"frame_accuracy", r.frame_accuracy},
                              {"micro_f1", r.micro_f1}};
  auto rows = nlohmann::ordered_json::array();
  for (const auto& p : r.per_phase)
    rows.push_back({{"phase", p.phase},
                    {"videos", p.videos},
                    {"tp", p.tp},
                    {"fp", p.fp},
                    {"fn", p.fn},
                    {"precision", p.precision},
                    {"recall", p.recall},
                    {"jaccard", p.jaccard}});
  j["per_phase"] = std::move(rows);
  return j;
}

inline std::string format_table(const EvalReport& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "videos=%zu frames=%zu boundary_window=%zu\n", r.videos, r.frames,
                r.boundary_window);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-10s %8s %8s\n", "metric", "mean", "std");
  out += buf;
  auto line = [&](const char* name, const MeanStd& m) {
    std::snprintf(buf, sizeof buf, "%-10s %8.4f %8.4f\n", name, m.mean, m.std);
    out += buf;
  };
  line("accuracy", r.accuracy);
  line("precision", r.precision);
  line("recall", r.recall);
  line("jaccard", r.jaccard);
  std::snprintf(buf, sizeof buf, "%-10s %8.4f\n%-10s %8.4f\n", "frame_acc", r.frame_accuracy, "micro_f1", r.micro_f1);
  out += buf;
  std::snprintf(buf, sizeof buf, "\n%-6s %6s %7s %7s %7s %9s %9s %9s\n", "phase", "videos", "tp", "fp", "fn",
                "precision", "recall", "jaccard");
  out += buf;
  for (const auto& p : r.per_phase) {
    std::snprintf(buf, sizeof buf, "%-6d %6zu %7zu %7zu %7zu %9.4f %9.4f %9.4f\n", p.phase, p.videos, p.tp, p.fp,
                  p.fn, p.precision, p.recall, p.jaccard);
    out += buf;
  }
  return out;
}

}  // namespace hidssm
