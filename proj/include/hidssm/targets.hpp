#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hidssm/errors.hpp"

namespace hidssm {

/// Phase progress: frame i of a constant-phase run of length L maps to (i+1)/(L+1).
inline std::vector<double> progress_targets(std::span<const int> phases) {
  std::vector<double> out(phases.size());
  std::size_t begin = 0;
  while (begin < phases.size()) {
    std::size_t end = begin + 1;
    while (end < phases.size() && phases[end] == phases[begin]) ++end;
    const double denom = static_cast<double>(end - begin + 1);
    for (std::size_t t = begin; t < end; ++t) out[t] = static_cast<double>(t - begin + 1) / denom;
    begin = end;
  }
  return out;
}

struct SupervisionTargets {
  std::vector<int> phases;
  std::vector<double> progress;

  static SupervisionTargets from_phases(std::vector<int> phases) {
    SupervisionTargets s;
    s.progress = progress_targets(phases);
    s.phases = std::move(phases);
    return s;
  }

  void validate(std::size_t seq_len, std::size_t n_phases) const {
    if (phases.size() != seq_len || progress.size() != seq_len)
      throw InputError("targets: expected " + std::to_string(seq_len) + " frames, got " +
                       std::to_string(phases.size()));
    for (int p : phases)
      if (p < 0 || static_cast<std::size_t>(p) >= n_phases)
        throw InputError("targets: phase " + std::to_string(p) + " out of range");
  }
};

}  // namespace hidssm
