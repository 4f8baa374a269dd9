#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <random>

#include "hidssm/ssm_core.hpp"
#include "support.hpp"

using namespace hidssm;
using testing_support::randn;
using big = boost::multiprecision::cpp_bin_float_50;

namespace {

// Term-by-term rollout y_t = C_t sum_i (prod_{j=i+1..t} A_j) B_i u_i.
Mat rollout(const DiscretizedCoefficients& co, const Mat& u) {
  const auto [T, D, N] = co.dims();
  Mat y(T, D);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t i = 0; i <= t; ++i) {
        double prod = 1.0;
        for (std::size_t j = i + 1; j <= t; ++j) prod *= co.a_bar(j, d);
        for (std::size_t n = 0; n < N; ++n) acc += co.c(t, n) * prod * co.b_bar(i, d, n) * u(i, d);
      }
      y(t, d) = acc;
    }
  return y;
}

// Quasi-separable assembly: lower+diag from fwd, strict upper from bwd.
Mat assemble_contextual(const DiscretizedCoefficients& f, const DiscretizedCoefficients& b, std::size_t d) {
  const auto [T, D, N] = f.dims();
  Mat m(T, T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < T; ++j) {
      const auto& co = j <= t ? f : b;
      double prod = 1.0;
      if (j <= t)
        for (std::size_t k = j + 1; k <= t; ++k) prod *= co.a_bar(k, d);
      else
        for (std::size_t k = t; k < j; ++k) prod *= co.a_bar(k, d);
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += co.c(t, n) * co.b_bar(j, d, n);
      m(t, j) = prod * s;
    }
  return m;
}

double matvec(const Mat& m, const Mat& u, std::size_t t, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) s += m(t, j) * u(j, d);
  return s;
}

}  // namespace

TEST(Projection, ZeroInputGivesBiasOnly) {
  SsmProjections p(4, 3);
  const auto in = project_inputs(Mat(5, 4), p);
  for (double x : in.s_delta.flat()) EXPECT_EQ(x, 0.0);
  for (double x : in.s_b.flat()) EXPECT_EQ(x, 0.0);
  for (double x : in.s_c.flat()) EXPECT_EQ(x, 0.0);
}

TEST(Projection, SingleWeightPicksChannel) {
  SsmProjections p(3, 2);
  p.delta.weight(0, 0) = 1.0;
  Mat u(2, 3);
  u(0, 0) = 3.0;
  u(1, 0) = 3.0;
  u(1, 2) = 7.0;
  const auto in = project_inputs(u, p);
  EXPECT_EQ(in.s_delta(0, 0), 3.0);
  EXPECT_EQ(in.s_delta(1, 0), 3.0);
}

TEST(Projection, MatchesDenseMatvec) {
  std::mt19937_64 rng(11);
  const auto p = testing_support::random_projections(rng, 5, 4);
  const Mat u = randn(rng, 9, 5);
  const auto in = project_inputs(u, p);
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t n = 0; n < 4; ++n) {
      double b = p.b.bias[n], c = p.c.bias[n];
      for (std::size_t i = 0; i < 5; ++i) {
        b += p.b.weight(n, i) * u(t, i);
        c += p.c.weight(n, i) * u(t, i);
      }
      EXPECT_NEAR(in.s_b(t, n), b, 1e-12 * std::max(1.0, std::abs(b)));
      EXPECT_NEAR(in.s_c(t, n), c, 1e-12 * std::max(1.0, std::abs(c)));
    }
}

TEST(Softplus, KnownPoints) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(50.0), 50.0, 1e-9);
  const big x = -2.5;
  const double ref = static_cast<double>(boost::multiprecision::log1p(boost::multiprecision::exp(x)));
  EXPECT_NEAR(softplus(-2.5), ref, 1e-12);
}

TEST(Softplus, DeltaBroadcastsAcrossChannels) {
  Mat s(2, 1);
  s(1, 0) = 1.5;
  const Mat d = compute_delta(s, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(d(0, c), softplus(0.0));
    EXPECT_EQ(d(1, c), softplus(1.5));
  }
}

TEST(Zoh, ClosedFormPoint) {
  const auto z = discretize_zoh(Mat(1, 1, std::log(2.0)), std::vector<double>{-1.0}, Mat(1, 1, 1.0));
  EXPECT_NEAR(z.a_bar(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(z.b_bar(0, 0, 0), 0.5, 1e-12);
}

TEST(Zoh, ZeroTimescaleLimit) {
  const auto z = discretize_zoh(Mat(1, 1, 1e-14), std::vector<double>{-0.7}, Mat(1, 1, 2.0));
  EXPECT_NEAR(z.a_bar(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(z.b_bar(0, 0, 0), 0.0, 1e-12);
}

TEST(Zoh, GainContinuousAcrossSeriesSwitch) {
  for (double s : {-1.0, 1.0}) {
    const double inside = s * std::nextafter(kZohSeriesThreshold, 0.0);
    const double outside = s * kZohSeriesThreshold;
    EXPECT_LE(std::abs(zoh_gain(inside) - zoh_gain(outside)), 1e-9);
  }
}

TEST(Zoh, MatchesExtendedPrecisionFormula) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dl(0.01, 3.0), al(-2.0, -0.05), bl(-2.0, 2.0);
  for (int k = 0; k < 200; ++k) {
    const double delta = dl(rng), a = al(rng), sb = bl(rng);
    const auto z = discretize_zoh(Mat(1, 1, delta), std::vector<double>{a}, Mat(1, 1, sb));
    // (delta a)^{-1} (exp(delta a) - 1) delta s_b, straight from the definition
    const big da = big(delta) * big(a);
    const double ref_b = static_cast<double>((boost::multiprecision::exp(da) - 1) / da * big(delta) * big(sb));
    const double ref_a = static_cast<double>(boost::multiprecision::exp(da));
    EXPECT_NEAR(z.a_bar(0, 0), ref_a, 1e-10 * std::abs(ref_a));
    EXPECT_NEAR(z.b_bar(0, 0, 0), ref_b, 1e-10 * std::max(std::abs(ref_b), 1e-300));
  }
}

TEST(Zoh, GainDerivativeMatchesFiniteDifference) {
  for (double x : {-3.0, -0.5, -1e-4, 0.0, 2e-4, 0.7}) {
    const double h = 1e-6;
    const double fd = (zoh_gain(x + h) - zoh_gain(x - h)) / (2 * h);
    EXPECT_NEAR(zoh_gain_derivative(x), fd, 1e-6) << x;
  }
}

TEST(Scan, SingleStep) {
  std::mt19937_64 rng(2);
  const auto co = testing_support::random_coeffs(rng, 1, 3, 4);
  const Mat u = randn(rng, 1, 3);
  const Mat y = recurrent_scan(co, u);
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(y(0, d), dot(co.c.row(0), co.b_bar.fiber(0, d)) * u(0, d), 1e-15);
}

TEST(Scan, ScalarHalfLife) {
  SelectiveInputs in{Mat(2, 1, std::log(std::expm1(std::log(2.0)))), Mat(2, 1, 1.0), Mat(2, 1, 1.0)};
  const auto co = discretize(in, std::vector<double>{-1.0});
  const Mat y = recurrent_scan(co, Mat(2, 1, 1.0));
  EXPECT_NEAR(y(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(y(1, 0), 0.75, 1e-12);
}

TEST(Scan, MatchesBruteForceRollout) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 50; ++k) {
    const std::size_t T = 1 + rng() % 8, D = 1 + rng() % 4, N = 1 + rng() % 5;
    const auto co = testing_support::random_coeffs(rng, T, D, N);
    const Mat u = randn(rng, T, D);
    EXPECT_LE(max_abs_diff(recurrent_scan(co, u), rollout(co, u)), 1e-10);
  }
}

TEST(Scan, ResetMaskStartsFreshSegment) {
  std::mt19937_64 rng(4);
  const auto co = testing_support::random_coeffs(rng, 10, 2, 3);
  const Mat u = randn(rng, 10, 2);
  std::vector<std::uint8_t> resets(10, 0);
  resets[0] = resets[6] = 1;
  const Mat y = directional_scan(co, u, ScanDirection::forward, resets);
  Mat u_tail = u;
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t d = 0; d < 2; ++d) u_tail(t, d) = 0.0;
  const Mat y_tail = recurrent_scan(co, u_tail);
  for (std::size_t t = 6; t < 10; ++t)
    for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(y(t, d), y_tail(t, d), 1e-14);
}

TEST(Mixer, SingleStepAndZeroDecay) {
  std::mt19937_64 rng(8);
  auto co = testing_support::random_coeffs(rng, 5, 2, 3);
  const auto one = testing_support::random_coeffs(rng, 1, 2, 3);
  EXPECT_NEAR(materialize_mixer_causal(one, 1).m(0, 0), dot(one.c.row(0), one.b_bar.fiber(0, 1)), 1e-15);
  for (double& a : co.a_bar.flat()) a = 0.0;
  const auto m = materialize_mixer_causal(co, 0);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 5; ++j)
      if (j != t) {
        EXPECT_EQ(m.m(t, j), 0.0);
      }
      else {
        EXPECT_NEAR(m.m(t, t), dot(co.c.row(t), co.b_bar.fiber(t, 0)), 1e-15);
      }
}

TEST(Mixer, MatchesScan) {
  std::mt19937_64 rng(9);
  const auto co = testing_support::random_coeffs(rng, 16, 3, 4);
  const Mat u = randn(rng, 16, 3);
  const Mat y = recurrent_scan(co, u);
  for (std::size_t d = 0; d < 3; ++d) {
    const auto m = materialize_mixer_causal(co, d);
    for (std::size_t t = 0; t < 16; ++t) EXPECT_NEAR(matvec(m.m, u, t, d), y(t, d), 1e-10);
  }
}

TEST(Mixer, CapRefusesLargeMaterialization) {
  std::mt19937_64 rng(1);
  const auto co = testing_support::random_coeffs(rng, 20, 1, 1);
  EXPECT_THROW(materialize_mixer_causal(co, 0, 10), ConfigError);
}

TEST(Contextual, SingleStepUsesForwardDiagonal) {
  std::mt19937_64 rng(10);
  const auto f = testing_support::random_coeffs(rng, 1, 2, 3);
  const auto b = testing_support::random_coeffs(rng, 1, 2, 3);
  const Mat u = randn(rng, 1, 2);
  const Mat y = contextual_scan(f, b, u);
  for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(y(0, d), dot(f.c.row(0), f.b_bar.fiber(0, d)) * u(0, d), 1e-15);
}

TEST(Contextual, TiedPalindrome) {
  const std::size_t T = 9;
  SelectiveInputs in{Mat(T, 1, 0.3), Mat(T, 2, 0.7), Mat(T, 2, -0.4)};
  const auto co = discretize(in, std::vector<double>{-0.8});
  Mat u(T, 1);
  for (std::size_t t = 0; t < T; ++t) u(t, 0) = 1.0 + static_cast<double>(std::min(t, T - 1 - t));
  const Mat y = contextual_scan(co, co, u);
  for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(y(t, 0), y(T - 1 - t, 0), 1e-12);
}

TEST(Contextual, MatchesQuasiSeparableAssembly) {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 10; ++k) {
    const auto f = testing_support::random_coeffs(rng, 12, 3, 4);
    const auto b = testing_support::random_coeffs(rng, 12, 3, 4);
    const Mat u = randn(rng, 12, 3);
    const Mat y = contextual_scan(f, b, u);
    for (std::size_t d = 0; d < 3; ++d) {
      const Mat m = assemble_contextual(f, b, d);
      for (std::size_t t = 0; t < 12; ++t) {
        EXPECT_NEAR(y(t, d), matvec(m, u, t, d), 1e-10);
        const auto row = contextual_mixer_row(f, b, d, t);
        for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(row[j], m(t, j), 1e-12);
      }
    }
  }
}

TEST(ScanBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (auto dir : {ScanDirection::forward, ScanDirection::reverse}) {
    auto co = testing_support::random_coeffs(rng, 6, 2, 3);
    const Mat u = randn(rng, 6, 2);
    const Mat dy = randn(rng, 6, 2);
    std::vector<std::uint8_t> resets(6, 0);
    resets[dir == ScanDirection::forward ? 3 : 2] = 1;
    Tensor3 states;
    directional_scan(co, u, dir, resets, &states);
    const auto g = directional_scan_backward(co, u, dir, resets, states, dy);
    auto loss = [&](const DiscretizedCoefficients& c, const Mat& x) {
      const Mat y = directional_scan(c, x, dir, resets);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y.flat()[i] * dy.flat()[i];
      return s;
    };
    const double h = 1e-6;
    auto probe = [&](double& slot, double analytic) {
      const double keep = slot;
      slot = keep + h;
      const double up = loss(co, u);
      slot = keep - h;
      const double down = loss(co, u);
      slot = keep;
      EXPECT_NEAR(analytic, (up - down) / (2 * h), 1e-6);
    };
    for (std::size_t i = 0; i < co.a_bar.size(); ++i) probe(co.a_bar.flat()[i], g.da_bar.flat()[i]);
    for (std::size_t i = 0; i < co.c.size(); ++i) probe(co.c.flat()[i], g.dc.flat()[i]);
    for (std::size_t i = 0; i < co.b_bar.flat().size(); ++i) probe(co.b_bar.flat()[i], g.db_bar.flat()[i]);
    Mat uu = u;
    for (std::size_t i = 0; i < uu.size(); ++i) {
      const double keep = uu.flat()[i];
      uu.flat()[i] = keep + h;
      const double up = loss(co, uu);
      uu.flat()[i] = keep - h;
      const double down = loss(co, uu);
      uu.flat()[i] = keep;
      EXPECT_NEAR(g.du.flat()[i], (up - down) / (2 * h), 1e-6);
    }
  }
}

TEST(Scan, RejectsShapeMismatch) {
  std::mt19937_64 rng(1);
  const auto co = testing_support::random_coeffs(rng, 4, 2, 2);
  EXPECT_THROW(recurrent_scan(co, Mat(3, 2)), ConfigError);
  EXPECT_THROW(directional_scan(co, Mat(4, 2), ScanDirection::forward, std::vector<std::uint8_t>(3, 0)), ConfigError);
}
