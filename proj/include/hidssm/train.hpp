#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hidssm/data.hpp"
#include "hidssm/model.hpp"
#include "hidssm/optim.hpp"

namespace hidssm {

struct TrainingExample {
  Mat features;
  SupervisionTargets targets;

  static TrainingExample from(const FeatureSequence& seq) { return {seq.to_mat(), seq.targets()}; }
};

inline std::vector<TrainingExample> to_examples(std::span<const FeatureSequence> seqs) {
  std::vector<TrainingExample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(TrainingExample::from(s));
  return out;
}

struct TrainOptions {
  std::size_t epochs = 20;
  AdamOptions adam;
  double alpha = kDefaultAlpha;
  std::uint64_t seed = 0;  // visiting order
  double divergence_limit = 1e6;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before any update
  LossBreakdown loss;     // dataset means
  std::optional<double> validation;
};

enum class TrainStatus { completed, diverged };

struct TrainReport {
  TrainStatus status = TrainStatus::completed;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::string message;
};

using ValidationHook = std::function<std::optional<double>(const HidSsmModel&)>;
using EpochHook = std::function<void(const EpochRecord&)>;

inline std::vector<SegmentPartition> propose_partitions(const HidSsmModel& model,
                                                        std::span<const TrainingExample> data) {
  std::vector<SegmentPartition> out;
  out.reserve(data.size());
  for (const auto& ex : data)
    out.push_back(partition_from_proposals(ppn_forward(ex.features, model.params.ppn), model.cfg));
  return out;
}

inline LossBreakdown mean_loss(const HidSsmModel& model, std::span<const TrainingExample> data,
                               std::span<const SegmentPartition> partitions, double alpha) {
  LossBreakdown acc;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto l = evaluate_loss(forward(model, data[i].features, &partitions[i]), data[i].targets, alpha);
    acc.ce += l.ce;
    acc.mse += l.mse;
    acc.total += l.total;
    acc.ppn_ce += l.ppn_ce;
  }
  const double n = static_cast<double>(data.size());
  acc.ce /= n;
  acc.mse /= n;
  acc.total /= n;
  acc.ppn_ce /= n;
  return acc;
}

/// Adam, one full sequence per step. Partitions are re-proposed by the PPN
/// at the start of every epoch and held fixed within it.
inline TrainReport train(HidSsmModel& model, std::span<const TrainingExample> data, const TrainOptions& opt,
                         const ValidationHook& validate = {}, const EpochHook& on_epoch = {}) {
  if (data.empty()) throw ConfigError("train: empty dataset");
  TrainReport report;
  Adam adam(model.params, opt.adam);
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto record = [&](std::size_t epoch, std::span<const SegmentPartition> partitions) {
    EpochRecord r{epoch, mean_loss(model, data, partitions, opt.alpha), std::nullopt};
    if (validate) r.validation = validate(model);
    report.epochs.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  auto diverged = [&](const std::string& why) {
    report.status = TrainStatus::diverged;
    report.message = why;
    return report;
  };

  try {
    auto partitions = propose_partitions(model, data);
    record(0, partitions);
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
      partitions = propose_partitions(model, data);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i : order) {
        auto g = backward(model, data[i].features, data[i].targets, opt.alpha, &partitions[i]);
        const double loss = g.loss.objective();
        if (!std::isfinite(loss) || loss > opt.divergence_limit)
          return diverged("loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch));
        adam.step(model.params, g.grads);
        ++report.steps;
      }
      record(epoch, partitions);
      const double epoch_loss = report.epochs.back().loss.objective();
      if (!std::isfinite(epoch_loss) || epoch_loss > opt.divergence_limit)
        return diverged("epoch " + std::to_string(epoch) + " mean loss " + std::to_string(epoch_loss));
    }
  } catch (const NumericalError& e) {
    return diverged(e.what());
  }
  return report;
}

}  // namespace hidssm
