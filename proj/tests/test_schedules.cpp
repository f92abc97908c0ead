#include <gtest/gtest.h>

#include "maskdiff/schedules.hpp"
#include "oracles.hpp"

using namespace maskdiff;

namespace {

Tensor<double> scalar(double v) { return Tensor<double>(Shape{1, 1, 1, 1}, v); }

}  // namespace

TEST(Schedule, MidpointIsSymmetric) {
  Schedule s;
  EXPECT_NEAR(log_snr(s, 0.5), 0.0, 1e-12);
  const auto [a, sg] = alpha_sigma(s, 0.5);
  EXPECT_NEAR(a, std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(sg, std::sqrt(0.5), 1e-12);
}

TEST(Schedule, QuarterTimeMatchesSigmoid) {
  Schedule s;
  const double l = log_snr(s, 0.25);
  EXPECT_NEAR(l, 1.7627, 1e-4);
  const auto [a, sg] = alpha_sigma(s, 0.25);
  EXPECT_NEAR(a, std::sqrt(oracle::ref_alpha2(l)), 1e-12);
  EXPECT_NEAR(a, 0.92388, 1e-5);
  EXPECT_NEAR(sg, 0.38268, 1e-5);
}

TEST(Schedule, EndpointsAreClamped) {
  Schedule s;
  EXPECT_DOUBLE_EQ(log_snr(s, 0.0), 15.0);
  EXPECT_DOUBLE_EQ(log_snr(s, 1.0), -15.0);
  EXPECT_TRUE(std::isfinite(alpha_sigma(s, 0.0).sigma));
  EXPECT_GT(alpha_sigma(s, 0.0).alpha, 0.9999);
  EXPECT_LT(alpha_sigma(s, 1.0).alpha, 1e-3);
}

TEST(Schedule, RejectsTimeOutsideUnitInterval) {
  Schedule s;
  EXPECT_THROW(log_snr(s, -0.01), DomainError);
  EXPECT_THROW(log_snr(s, 1.5), DomainError);
  EXPECT_THROW(alpha_sigma(s, std::nan("")), DomainError);
}

TEST(Schedule, ContinuousAtClampBoundaries) {
  Schedule s;
  // tan(pi t / 2) = exp(-7.5) at the upper clamp
  const double t_hi = 2.0 / std::numbers::pi * std::atan(std::exp(-7.5));
  const double t_lo = 1.0 - t_hi;
  for (double t0 : {t_hi, t_lo}) {
    EXPECT_NEAR(log_snr(s, t0 - 1e-9), log_snr(s, t0 + 1e-9), 1e-4);
  }
}

TEST(Schedule, RandomTimesMatchReference) {
  Schedule s;
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform();
    EXPECT_NEAR(log_snr(s, t), oracle::ref_log_snr(t), 1e-9);
    const auto [a, sg] = alpha_sigma(s, t);
    EXPECT_NEAR(a * a + sg * sg, 1.0, 1e-9);
  }
}

TEST(Schedule, HandArithmetic) {
  EXPECT_NEAR(forward_marginal_at(scalar(1.0), scalar(0.5), {0.6, 0.8})[0], 1.0, 1e-12);
  EXPECT_NEAR(v_from(scalar(1.0), scalar(0.5), 0.6, 0.8)[0], -0.5, 1e-12);
  EXPECT_NEAR(x0_from_v(scalar(1.0), scalar(-0.5), 0.6, 0.8)[0], 1.0, 1e-12);
  EXPECT_NEAR(eps_from(scalar(1.0), scalar(1.0), 0.6, 0.8)[0], 0.5, 1e-12);
}

TEST(Schedule, DegenerateCases) {
  const auto zero = scalar(0.0);
  EXPECT_EQ(v_from(zero, zero, 0.6, 0.8)[0], 0.0);
  EXPECT_EQ(v_from(scalar(0.3), scalar(0.7), 1.0, 0.0)[0], 0.7);
  EXPECT_EQ(x0_from_v(scalar(0.3), zero, 1.0, 0.0)[0], 0.3);
  EXPECT_NEAR(eps_from(scalar(0.3), scalar(0.5), 0.6, 0.8)[0], 0.0, 1e-12);
  EXPECT_THROW(eps_from(scalar(1.0), scalar(1.0), 1.0, 0.0), DomainError);
  Schedule s;
  const auto z = forward_marginal(s, scalar(0.4), 0.0, scalar(1.0));
  EXPECT_NEAR(z[0], 0.4, 1e-3);
}

TEST(Schedule, ShapeMismatchThrows) {
  Tensor<double> a(Shape{1, 3, 2, 2}), b(Shape{1, 3, 2, 3});
  EXPECT_THROW(v_from(a, b, 0.6, 0.8), ShapeError);
  EXPECT_THROW(forward_marginal_at(a, b, {0.6, 0.8}), ShapeError);
}

TEST(Schedule, LossWeights) {
  Schedule s;
  EXPECT_EQ(loss_weight(s, 0.3, Weighting::uniform_eps), 1.0);
  EXPECT_NEAR(loss_weight(s, 0.5, Weighting::snr_truncated), 1.0, 1e-12);
  for (double t : {0.01, 0.2, 0.45}) {
    const double w = loss_weight(s, t, Weighting::snr_truncated);
    EXPECT_GT(w, 0.0);
    EXPECT_LE(w, 1.0);
  }
  const double l = log_snr(s, 0.8);
  EXPECT_NEAR(loss_weight(s, 0.8, Weighting::snr_truncated), std::max(std::exp(l), 1.0) / std::exp(l), 1e-9);
  EXPECT_THROW(parse_weighting("bogus"), DomainError);
}
