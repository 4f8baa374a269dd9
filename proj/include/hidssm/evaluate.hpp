#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "hidssm/data.hpp"
#include "hidssm/metrics.hpp"
#include "hidssm/model.hpp"

namespace hidssm {

/// Worker cap from HIDSSM_THREADS (default: hardware concurrency, at least 1).
inline std::size_t thread_cap() {
  if (const char* env = std::getenv("HIDSSM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Per-video predictions; videos may be processed concurrently, results keep input order.
inline std::vector<LabeledPrediction> predict_dataset(const HidSsmModel& model, std::span<const FeatureSequence> videos,
                                                      std::size_t threads = thread_cap()) {
  std::vector<LabeledPrediction> out(videos.size());
  std::vector<std::exception_ptr> errors(videos.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < videos.size(); i += stride) {
      try {
        out[i].pred = predict_phases(model, videos[i].to_mat());
        out[i].gt = videos[i].phases;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(videos.size(), 1));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(work, k, threads);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline EvalReport evaluate_model(const HidSsmModel& model, std::span<const FeatureSequence> videos,
                                 std::size_t boundary_window = kDefaultBoundaryWindow,
                                 std::size_t threads = thread_cap()) {
  for (const auto& v : videos)
    if (!v.has_labels()) throw InputError("evaluate_model: every video needs phase labels");
  const auto preds = predict_dataset(model, videos, threads);
  return evaluate_predictions(preds, boundary_window);
}

}  // namespace hidssm
