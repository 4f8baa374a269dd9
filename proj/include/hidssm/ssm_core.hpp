#pragma once

// Input-dependent SSM primitives: projections, ZOH discretization, selective
// scans (causal and contextual), matrix-mixer materialization, and the
// reverse-mode adjoints of each.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hidssm/errors.hpp"
#include "hidssm/tensor.hpp"

namespace hidssm {

struct SsmDims {
  std::size_t seq_len = 1;
  std::size_t channels = 1;
  std::size_t state_dim = 1;

  void validate() const {
    if (seq_len < 1 || channels < 1 || state_dim < 1)
      throw ConfigError("SsmDims: seq_len, channels and state_dim must all be >= 1");
  }
};

/// Position-wise affine map y_t = W x_t + b, applied to every row of a T x in matrix.
struct Affine {
  Mat weight;  // out x in
  std::vector<double> bias;

  Affine() = default;
  Affine(std::size_t in, std::size_t out) : weight(out, in), bias(out, 0.0) {}

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  Mat apply(const Mat& x) const {
    if (x.cols() != in_dim())
      throw ConfigError("Affine: input has " + std::to_string(x.cols()) + " columns, expected " +
                        std::to_string(in_dim()));
    Mat y(x.rows(), out_dim());
    for (std::size_t t = 0; t < x.rows(); ++t) {
      auto xt = x.row(t);
      for (std::size_t o = 0; o < out_dim(); ++o) y(t, o) = bias[o] + dot(weight.row(o), xt);
    }
    return y;
  }

  // Accumulates into `grad` and returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy, Affine& grad) const {
    Mat dx(x.rows(), in_dim());
    for (std::size_t t = 0; t < x.rows(); ++t) {
      auto xt = x.row(t);
      auto dxt = dx.row(t);
      for (std::size_t o = 0; o < out_dim(); ++o) {
        const double g = dy(t, o);
        grad.bias[o] += g;
        auto wrow = weight.row(o);
        auto grow = grad.weight.row(o);
        for (std::size_t i = 0; i < in_dim(); ++i) {
          grow[i] += g * xt[i];
          dxt[i] += g * wrow[i];
        }
      }
    }
    return dx;
  }
};

/// Learnables of one scan direction: the three input projections and the
/// per-channel diagonal of S_A.
struct SsmProjections {
  Affine delta;  // D -> 1
  Affine b;      // D -> N
  Affine c;      // D -> N
  std::vector<double> a;

  SsmProjections() = default;
  SsmProjections(std::size_t channels, std::size_t state_dim)
      : delta(channels, 1), b(channels, state_dim), c(channels, state_dim), a(channels, -1.0) {}

  std::size_t channels() const { return a.size(); }
  std::size_t state_dim() const { return b.out_dim(); }
};

/// Raw per-timestep projections S_delta (T x 1), S_B and S_C (T x N).
struct SelectiveInputs {
  Mat s_delta;
  Mat s_b;
  Mat s_c;
};

struct DiscretizedCoefficients {
  Mat delta;      // T x D, strictly positive
  Mat a_bar;      // T x D
  Tensor3 b_bar;  // T x D x N
  Mat c;          // T x N

  SsmDims dims() const { return {a_bar.rows(), a_bar.cols(), c.cols()}; }
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// |delta * a| below this uses the series form of the ZOH input gain.
inline constexpr double kZohSeriesThreshold = 1e-6;

/// phi(x) = (e^x - 1) / x, the ZOH input gain, so that B_bar = phi(delta a) delta S_B.
inline double zoh_gain(double x) {
  if (std::abs(x) < kZohSeriesThreshold) return 1.0 + 0.5 * x;
  return std::expm1(x) / x;
}

inline double zoh_gain_derivative(double x) {
  // the closed form cancels badly well beyond the forward switch point
  if (std::abs(x) < 1e-3) return 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0));
  return (x * std::exp(x) - std::expm1(x)) / (x * x);
}

inline SelectiveInputs project_inputs(const Mat& u, const SsmProjections& p) {
  if (u.cols() != p.channels() || p.delta.in_dim() != p.channels() || p.b.in_dim() != p.channels() ||
      p.c.in_dim() != p.channels() || p.delta.out_dim() != 1 || p.c.out_dim() != p.b.out_dim())
    throw ConfigError("project_inputs: input width " + std::to_string(u.cols()) +
                      " inconsistent with projections over " + std::to_string(p.channels()) + " channels");
  return {p.delta.apply(u), p.b.apply(u), p.c.apply(u)};
}

inline Mat compute_delta(const Mat& s_delta, std::size_t channels) {
  Mat delta(s_delta.rows(), channels);
  for (std::size_t t = 0; t < s_delta.rows(); ++t) {
    const double v = softplus(s_delta(t, 0));
    for (std::size_t d = 0; d < channels; ++d) delta(t, d) = v;
  }
  return delta;
}

struct ZohResult {
  Mat a_bar;
  Tensor3 b_bar;
};

inline ZohResult discretize_zoh(const Mat& delta, std::span<const double> a, const Mat& s_b) {
  const std::size_t T = delta.rows(), D = delta.cols(), N = s_b.cols();
  if (a.size() != D || s_b.rows() != T) throw ConfigError("discretize_zoh: shape mismatch");
  ZohResult out{Mat(T, D), Tensor3(T, D, N)};
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const double x = delta(t, d) * a[d];
      out.a_bar(t, d) = std::exp(x);
      const double gain = zoh_gain(x) * delta(t, d);
      auto bb = out.b_bar.fiber(t, d);
      for (std::size_t n = 0; n < N; ++n) bb[n] = gain * s_b(t, n);
    }
  }
  return out;
}

inline DiscretizedCoefficients discretize(const SelectiveInputs& in, std::span<const double> a) {
  DiscretizedCoefficients co;
  co.delta = compute_delta(in.s_delta, a.size());
  auto zoh = discretize_zoh(co.delta, a, in.s_b);
  co.a_bar = std::move(zoh.a_bar);
  co.b_bar = std::move(zoh.b_bar);
  co.c = in.s_c;
  return co;
}

enum class ScanDirection { forward, reverse };

namespace detail {

inline void check_scan_shapes(const DiscretizedCoefficients& co, const Mat& u, std::span<const std::uint8_t> resets) {
  const auto dims = co.dims();
  if (u.rows() != dims.seq_len || u.cols() != dims.channels || co.b_bar.dim0() != dims.seq_len ||
      co.b_bar.dim1() != dims.channels || co.b_bar.dim2() != dims.state_dim || co.c.rows() != dims.seq_len)
    throw ConfigError("scan: coefficient and input shapes disagree");
  if (!resets.empty() && resets.size() != dims.seq_len) throw ConfigError("scan: reset mask length mismatch");
}

inline std::size_t step_time(ScanDirection dir, std::size_t step, std::size_t T) {
  return dir == ScanDirection::forward ? step : T - 1 - step;
}

}  // namespace detail

/// Selective scan in either time direction. resets[t] != 0 zeroes the carried
/// state before step t; in the reverse direction "before" means "after t in
/// time". When `states` is given it receives x_t for every (t, d, n).
inline Mat directional_scan(const DiscretizedCoefficients& co, const Mat& u, ScanDirection dir,
                            std::span<const std::uint8_t> resets = {}, Tensor3* states = nullptr) {
  detail::check_scan_shapes(co, u, resets);
  const auto [T, D, N] = co.dims();
  Mat y(T, D);
  std::vector<double> x(D * N, 0.0);
  if (states) *states = Tensor3(T, D, N);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = detail::step_time(dir, step, T);
    if (!resets.empty() && resets[t]) std::fill(x.begin(), x.end(), 0.0);
    bool finite = true;
    for (std::size_t d = 0; d < D; ++d) {
      const double a = co.a_bar(t, d);
      const double ud = u(t, d);
      auto bb = co.b_bar.fiber(t, d);
      double* xd = x.data() + d * N;
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        xd[n] = a * xd[n] + bb[n] * ud;
        acc += co.c(t, n) * xd[n];
      }
      finite = finite && std::isfinite(acc);
      y(t, d) = acc;
    }
    if (!finite || !all_finite(x))
      throw NumericalError("scan: non-finite state at timestep " + std::to_string(t), t);
    if (states)
      for (std::size_t d = 0; d < D; ++d)
        std::copy(x.begin() + d * N, x.begin() + (d + 1) * N, states->fiber(t, d).begin());
  }
  return y;
}

/// Causal scan x_t = A_bar_t x_{t-1} + B_bar_t u_t, y_t = <C_t, x_t>, from x_{-1} = 0.
inline Mat recurrent_scan(const DiscretizedCoefficients& co, const Mat& u) {
  return directional_scan(co, u, ScanDirection::forward);
}

struct ScanGradients {
  Mat du;
  Mat da_bar;
  Tensor3 db_bar;
  Mat dc;
};

inline ScanGradients directional_scan_backward(const DiscretizedCoefficients& co, const Mat& u, ScanDirection dir,
                                               std::span<const std::uint8_t> resets, const Tensor3& states,
                                               const Mat& dy) {
  const auto [T, D, N] = co.dims();
  ScanGradients g{Mat(T, D), Mat(T, D), Tensor3(T, D, N), Mat(T, N)};
  // carry[d*N+n] = dL/dx_t contributed through x_{t+1} (in scan order)
  std::vector<double> carry(D * N, 0.0);
  for (std::size_t step = T; step-- > 0;) {
    const std::size_t t = detail::step_time(dir, step, T);
    const bool fresh = step == 0 || (!resets.empty() && resets[t]);
    const std::size_t prev = dir == ScanDirection::forward ? t - 1 : t + 1;
    for (std::size_t d = 0; d < D; ++d) {
      const double a = co.a_bar(t, d);
      const double ud = u(t, d);
      const double dyd = dy(t, d);
      auto bb = co.b_bar.fiber(t, d);
      auto dbb = g.db_bar.fiber(t, d);
      double da = 0.0, du = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double gx = co.c(t, n) * dyd + carry[d * N + n];
        if (!fresh) da += gx * states(prev, d, n);
        dbb[n] = gx * ud;
        du += gx * bb[n];
        carry[d * N + n] = fresh ? 0.0 : a * gx;
      }
      g.da_bar(t, d) = da;
      g.du(t, d) = du;
    }
    for (std::size_t n = 0; n < N; ++n) {
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += dy(t, d) * states(t, d, n);
      g.dc(t, n) = acc;
    }
  }
  return g;
}

struct ContextualTrace {
  Tensor3 fwd_states;
  Tensor3 bwd_states;
};

/// Bidirectional scan: forward scan + reversed scan with independent
/// coefficients, minus the backward pass's diagonal so each frame's own
/// contribution is counted once (from the forward coefficients).
inline Mat contextual_scan(const DiscretizedCoefficients& fwd, const DiscretizedCoefficients& bwd, const Mat& u,
                           std::span<const std::uint8_t> fwd_resets = {},
                           std::span<const std::uint8_t> bwd_resets = {}, ContextualTrace* trace = nullptr) {
  if (fwd.dims().seq_len != bwd.dims().seq_len || fwd.dims().channels != bwd.dims().channels ||
      fwd.dims().state_dim != bwd.dims().state_dim)
    throw ConfigError("contextual_scan: forward and backward coefficients differ in shape");
  Mat y = directional_scan(fwd, u, ScanDirection::forward, fwd_resets, trace ? &trace->fwd_states : nullptr);
  Mat yb = directional_scan(bwd, u, ScanDirection::reverse, bwd_resets, trace ? &trace->bwd_states : nullptr);
  const auto [T, D, N] = fwd.dims();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double diag = dot(bwd.c.row(t), bwd.b_bar.fiber(t, d)) * u(t, d);
      y(t, d) += yb(t, d) - diag;
    }
  return y;
}

struct ContextualGradients {
  ScanGradients fwd;
  ScanGradients bwd;
  Mat du;
};

inline ContextualGradients contextual_scan_backward(const DiscretizedCoefficients& fwd,
                                                    const DiscretizedCoefficients& bwd, const Mat& u,
                                                    std::span<const std::uint8_t> fwd_resets,
                                                    std::span<const std::uint8_t> bwd_resets,
                                                    const ContextualTrace& trace, const Mat& dy) {
  ContextualGradients g{
      directional_scan_backward(fwd, u, ScanDirection::forward, fwd_resets, trace.fwd_states, dy),
      directional_scan_backward(bwd, u, ScanDirection::reverse, bwd_resets, trace.bwd_states, dy), Mat()};
  const auto [T, D, N] = fwd.dims();
  g.du = g.fwd.du;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double w = dy(t, d) * u(t, d);
      auto bb = bwd.b_bar.fiber(t, d);
      auto dbb = g.bwd.db_bar.fiber(t, d);
      double diag = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        diag += bwd.c(t, n) * bb[n];
        g.bwd.dc(t, n) -= w * bb[n];
        dbb[n] -= w * bwd.c(t, n);
      }
      g.du(t, d) += g.bwd.du(t, d) - dy(t, d) * diag;
    }
  return g;
}

/// dL/d(S_delta, S_B, S_C) and dL/da from gradients on the discretized coefficients.
struct SelectiveInputGradients {
  Mat ds_delta;
  Mat ds_b;
  Mat ds_c;
  std::vector<double> da;
};

inline SelectiveInputGradients discretize_backward(const SelectiveInputs& in, std::span<const double> a,
                                                   const DiscretizedCoefficients& co, const Mat& da_bar,
                                                   const Tensor3& db_bar, const Mat& dc) {
  const auto [T, D, N] = co.dims();
  SelectiveInputGradients g{Mat(T, 1), Mat(T, N), dc, std::vector<double>(D, 0.0)};
  for (std::size_t t = 0; t < T; ++t) {
    double ddelta = 0.0;
    const double delta = co.delta(t, 0);
    for (std::size_t d = 0; d < D; ++d) {
      const double x = delta * a[d];
      const double phi = zoh_gain(x);
      const double dphi = zoh_gain_derivative(x);
      const double gain = phi * delta;
      auto dbb = db_bar.fiber(t, d);
      double dgain = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        dgain += dbb[n] * in.s_b(t, n);
        g.ds_b(t, n) += dbb[n] * gain;
      }
      const double dA = da_bar(t, d) * co.a_bar(t, d);
      ddelta += dgain * (dphi * a[d] * delta + phi) + dA * a[d];
      g.da[d] += dgain * dphi * delta * delta + dA * delta;
    }
    g.ds_delta(t, 0) = ddelta * sigmoid(in.s_delta(t, 0));
  }
  return g;
}

/// Backpropagates through project_inputs; accumulates into `grad`, returns dL/du.
inline Mat project_inputs_backward(const Mat& u, const SsmProjections& p, const SelectiveInputGradients& g,
                                   SsmProjections& grad) {
  Mat du = p.delta.backward(u, g.ds_delta, grad.delta);
  Mat du_b = p.b.backward(u, g.ds_b, grad.b);
  Mat du_c = p.c.backward(u, g.ds_c, grad.c);
  for (std::size_t i = 0; i < du.size(); ++i) du.flat()[i] += du_b.flat()[i] + du_c.flat()[i];
  for (std::size_t d = 0; d < grad.a.size(); ++d) grad.a[d] += g.da[d];
  return du;
}

// ---- matrix mixers -------------------------------------------------------

enum class MixerStructure { causal_lower_triangular, block_diagonal, quasiseparable };

struct MatrixMixer {
  Mat m;
  MixerStructure structure = MixerStructure::causal_lower_triangular;
};

inline constexpr std::size_t kMixerMaterializeCap = 4096;

/// Row t of channel d's causal mixer, restricted to columns [first, t]:
/// M[t, j] = <C_t, (prod_{k=j+1..t} A_bar_k) B_bar_j>. Entries outside are zero.
inline std::vector<double> causal_mixer_row(const DiscretizedCoefficients& co, std::size_t d, std::size_t t,
                                            std::size_t first = 0) {
  const auto [T, D, N] = co.dims();
  if (d >= D || t >= T || first > t) throw ConfigError("causal_mixer_row: index out of range");
  std::vector<double> row(T, 0.0);
  double decay = 1.0;
  for (std::size_t j = t + 1; j-- > first;) {
    row[j] = decay * dot(co.c.row(t), co.b_bar.fiber(j, d));
    decay *= co.a_bar(j, d);
  }
  return row;
}

/// Row t of the reversed-direction mixer over columns [t, last):
/// M[t, j] = <C_t, (prod_{k=t..j-1} A_bar_k) B_bar_j>.
inline std::vector<double> reverse_mixer_row(const DiscretizedCoefficients& co, std::size_t d, std::size_t t,
                                             std::size_t last) {
  const auto [T, D, N] = co.dims();
  if (d >= D || t >= T || last > T || last <= t) throw ConfigError("reverse_mixer_row: index out of range");
  std::vector<double> row(T, 0.0);
  double decay = 1.0;
  for (std::size_t j = t; j < last; ++j) {
    row[j] = decay * dot(co.c.row(t), co.b_bar.fiber(j, d));
    decay *= co.a_bar(j, d);
  }
  return row;
}

/// Row t of the contextual mixer: lower triangle and diagonal from the
/// forward coefficients, strict upper triangle from the backward ones.
inline std::vector<double> contextual_mixer_row(const DiscretizedCoefficients& fwd, const DiscretizedCoefficients& bwd,
                                                std::size_t d, std::size_t t, std::size_t first = 0,
                                                std::size_t last = 0) {
  if (last == 0) last = fwd.dims().seq_len;
  auto row = causal_mixer_row(fwd, d, t, first);
  const auto upper = reverse_mixer_row(bwd, d, t, last);
  for (std::size_t j = t + 1; j < last; ++j) row[j] = upper[j];
  return row;
}

inline MatrixMixer materialize_mixer_causal(const DiscretizedCoefficients& co, std::size_t d,
                                            std::size_t cap = kMixerMaterializeCap) {
  const std::size_t T = co.dims().seq_len;
  if (T > cap)
    throw ConfigError("materialize_mixer_causal: T=" + std::to_string(T) + " exceeds cap " + std::to_string(cap) +
                      "; use causal_mixer_row");
  MatrixMixer mixer{Mat(T, T), MixerStructure::causal_lower_triangular};
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = causal_mixer_row(co, d, t);
    std::copy(row.begin(), row.end(), mixer.m.row(t).begin());
  }
  return mixer;
}

}  // namespace hidssm
