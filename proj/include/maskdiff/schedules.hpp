#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "maskdiff/errors.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

enum class ScheduleKind { cosine };

// Continuous-time variance-preserving schedule, parameterized by its log-SNR.
// t = 0 is (almost) clean data, t = 1 (almost) pure noise.
struct Schedule {
  ScheduleKind kind = ScheduleKind::cosine;
  double lambda_min = -15.0;  // log-SNR at t = 1
  double lambda_max = 15.0;   // log-SNR at t = 0
};

struct AlphaSigma {
  double alpha;
  double sigma;
};

enum class Weighting { uniform_eps, snr_truncated };

inline Weighting parse_weighting(const std::string& s) {
  if (s == "uniform_eps") return Weighting::uniform_eps;
  if (s == "snr_truncated") return Weighting::snr_truncated;
  throw DomainError("unknown loss weighting: " + s);
}

inline void require_unit_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time " + std::to_string(t) + " outside [0,1]");
}

// lambda(t) = -2 ln tan(pi t / 2), clamped so the endpoints stay finite.
inline double log_snr(const Schedule& schedule, double t) {
  require_unit_time(t);
  const double raw = -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0));
  if (std::isnan(raw)) return schedule.lambda_min;  // tan(pi/2) may come out negative in floating point
  return std::clamp(raw, schedule.lambda_min, schedule.lambda_max);
}

inline AlphaSigma alpha_sigma_from_log_snr(double lambda) {
  // sigmoid(+-lambda) evaluated in the numerically stable branch
  const double a2 = lambda >= 0 ? 1.0 / (1.0 + std::exp(-lambda)) : std::exp(lambda) / (1.0 + std::exp(lambda));
  const double s2 = lambda >= 0 ? std::exp(-lambda) / (1.0 + std::exp(-lambda)) : 1.0 / (1.0 + std::exp(lambda));
  return {std::sqrt(a2), std::sqrt(s2)};
}

inline AlphaSigma alpha_sigma(const Schedule& schedule, double t) {
  return alpha_sigma_from_log_snr(log_snr(schedule, t));
}

// Per-timestep weight on the squared residual.
inline double loss_weight(const Schedule& schedule, double t, Weighting weighting) {
  const double lambda = log_snr(schedule, t);
  switch (weighting) {
    case Weighting::uniform_eps:
      return 1.0;
    case Weighting::snr_truncated: {
      // max(snr, 1) / snr, written without overflowing exp for large |lambda|
      return lambda >= 0 ? 1.0 : std::exp(-lambda);
    }
  }
  throw DomainError("unknown loss weighting");
}

// z_t = alpha_t x0 + sigma_t eps
template <typename T>
Tensor<T> forward_marginal_at(const Tensor<T>& x0, const Tensor<T>& eps, AlphaSigma as) {
  require_same_shape(x0.shape(), eps.shape(), "forward_marginal");
  Tensor<T> z(x0.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<T>(as.alpha * static_cast<double>(x0[i]) + as.sigma * static_cast<double>(eps[i]));
  }
  return z;
}

template <typename T>
Tensor<T> forward_marginal(const Schedule& schedule, const Tensor<T>& x0, double t, const Tensor<T>& eps) {
  return forward_marginal_at(x0, eps, alpha_sigma(schedule, t));
}

// v = alpha eps - sigma x0
template <typename T>
Tensor<T> v_from(const Tensor<T>& x0, const Tensor<T>& eps, double alpha, double sigma) {
  require_same_shape(x0.shape(), eps.shape(), "v_from");
  Tensor<T> v(x0.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<T>(alpha * static_cast<double>(eps[i]) - sigma * static_cast<double>(x0[i]));
  }
  return v;
}

// x0_hat = alpha z_t - sigma v
template <typename T>
Tensor<T> x0_from_v(const Tensor<T>& z, const Tensor<T>& v, double alpha, double sigma) {
  require_same_shape(z.shape(), v.shape(), "x0_from_v");
  Tensor<T> x(z.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<T>(alpha * static_cast<double>(z[i]) - sigma * static_cast<double>(v[i]));
  }
  return x;
}

// eps_hat = (z_t - alpha x0_hat) / sigma
template <typename T>
Tensor<T> eps_from(const Tensor<T>& z, const Tensor<T>& x0_hat, double alpha, double sigma) {
  require_same_shape(z.shape(), x0_hat.shape(), "eps_from");
  if (!(sigma > 0.0)) throw DomainError("eps_from: sigma must be positive, got " + std::to_string(sigma));
  Tensor<T> e(z.shape());
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = static_cast<T>((static_cast<double>(z[i]) - alpha * static_cast<double>(x0_hat[i])) / sigma);
  }
  return e;
}

}  // namespace maskdiff
