#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "hidssm/model.hpp"

namespace hidssm {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `params` in place; `step` counts from 1.
inline void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                        std::span<double> v, std::size_t step, const AdamOptions& opt) {
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grads[i];
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    params[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

/// Adam over every array of a ModelParams, moments kept in model-shaped buffers.
class Adam {
 public:
  Adam(const ModelParams& like, AdamOptions opt) : opt_(opt), m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(ModelParams& params, const ModelParams& grads) {
    ++steps_;
    auto p = param_list(params);
    auto g = const_param_list(grads);
    auto m = param_list(m_);
    auto v = param_list(v_);
    if (p.size() != g.size()) throw ConfigError("Adam: gradient layout does not match parameters");
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (p[k].values.size() != g[k].values.size()) throw ConfigError("Adam: shape mismatch for " + p[k].name);
      adam_update(p[k].values, g[k].values, m[k].values, v[k].values, steps_, opt_);
    }
  }

  std::size_t steps() const { return steps_; }
  const AdamOptions& options() const { return opt_; }

 private:
  AdamOptions opt_;
  ModelParams m_;
  ModelParams v_;
  std::size_t steps_ = 0;
};

}  // namespace hidssm
