#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hidssm/hidssm.hpp"

namespace testing_support {

using hidssm::Mat;

inline Mat randn(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (double& x : m.flat()) x = n(rng);
  return m;
}

inline hidssm::SsmProjections random_projections(std::mt19937_64& rng, std::size_t D, std::size_t N) {
  hidssm::SsmProjections p(D, N);
  p.delta.weight = randn(rng, 1, D, 0.5);
  p.delta.bias = {-1.0};
  p.b.weight = randn(rng, N, D, 0.5);
  p.c.weight = randn(rng, N, D, 0.5);
  for (double& b : p.b.bias) b = std::normal_distribution<double>(0, 0.3)(rng);
  for (double& b : p.c.bias) b = std::normal_distribution<double>(0, 0.3)(rng);
  std::uniform_real_distribution<double> dec(0.1, 1.5);
  for (double& a : p.a) a = -dec(rng);
  return p;
}

inline hidssm::IdSsmLayerParams random_layer(std::mt19937_64& rng, std::size_t D, std::size_t N) {
  hidssm::IdSsmLayerParams p(D, N);
  p.forward = random_projections(rng, D, N);
  p.backward = random_projections(rng, D, N);
  std::uniform_real_distribution<double> s(0.5, 1.5);
  for (double& x : p.norm_scale) x = s(rng);
  return p;
}

inline hidssm::DiscretizedCoefficients random_coeffs(std::mt19937_64& rng, std::size_t T, std::size_t D,
                                                     std::size_t N) {
  const auto p = random_projections(rng, D, N);
  return hidssm::discretize(hidssm::project_inputs(randn(rng, T, D), p), p.a);
}

inline hidssm::SegmentPartition random_partition(std::mt19937_64& rng, std::size_t T, double p_cut = 0.25) {
  std::bernoulli_distribution cut(p_cut);
  hidssm::SegmentPartition part;
  std::size_t begin = 0;
  for (std::size_t t = 1; t < T; ++t)
    if (cut(rng)) {
      part.segments.push_back({begin, t});
      begin = t;
    }
  part.segments.push_back({begin, T});
  return part;
}

inline hidssm::HidSsmModel random_model(std::uint64_t seed, bool causal, std::size_t D = 3, std::size_t N = 2,
                                        std::size_t P = 3, std::size_t n_global = 2) {
  hidssm::LayerStackConfig cfg;
  cfg.d_model = D;
  cfg.state_dim = N;
  cfg.n_phases = P;
  cfg.n_global = n_global;
  cfg.n_ppn = 1;
  cfg.causal = causal;
  cfg.min_segment = 2;
  hidssm::InitOptions init;
  init.randomize_all = true;
  return hidssm::HidSsmModel::create(cfg, seed, init);
}

inline std::vector<int> random_labels(std::mt19937_64& rng, std::size_t T, int P) {
  std::uniform_int_distribution<int> d(0, P - 1);
  std::vector<int> v(T);
  for (int& x : v) x = d(rng);
  return v;
}

}  // namespace testing_support
