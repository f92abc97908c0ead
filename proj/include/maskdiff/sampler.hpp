#pragma once

#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/denoiser.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedules.hpp"

namespace maskdiff {

// Anything that maps (z_t, log-SNR, conditioning) to an eps or v prediction.
template <class M, class T>
concept NoisePredictor = requires(const M& m, const Tensor<T>& z, std::span<const double> l,
                                  const ConditioningBundle<T>& c) {
  { m.predict(z, l, c) } -> std::same_as<Tensor<T>>;
  { m.parameterization() } -> std::same_as<Parameterization>;
  { m.config() } -> std::convertible_to<const DenoiserConfig&>;
};

// Predictors that can also build a differentiable graph.
template <class M, class T>
concept TrainablePredictor = NoisePredictor<M, T> && requires(const M& m, const Tensor<T>& z,
                                                               std::span<const double> l,
                                                               const ConditioningBundle<T>& c) {
  { m.forward(z, l, c) } -> std::same_as<nn::Var<T>>;
};

struct TrainingLossOptions {
  Weighting weighting = Weighting::uniform_eps;
  bool backward = true;  // accumulate parameter gradients
};

struct TrainingLossResult {
  double loss = 0.0;
  std::vector<double> times;  // the t drawn for each sample
};

// One stochastic evaluation of the denoising objective on a batch:
//   loss = mean_n w(lambda_tn) * mean((target_n - prediction_n)^2)
// with target eps or v per the model's parameterization. Draw order per sample
// is t, then the dropout draw u; the noise tensor is drawn after all samples.
template <typename T, TrainablePredictor<T> M>
TrainingLossResult training_loss(const M& model, const Schedule& schedule, const Tensor<T>& x0,
                                 const ConditioningBundle<T>& cond, Rng& rng, TrainingLossOptions opts = {}) {
  const int n = x0.n();
  if (cond.batch() != n) throw ShapeError("training_loss: conditioning batch does not match x0");
  TrainingLossResult result;
  std::vector<double> lambdas(n), weights(n), drops(n);
  std::vector<AlphaSigma> coeffs(n);
  for (int i = 0; i < n; ++i) {
    const double t = rng.uniform();
    drops[i] = rng.uniform();
    result.times.push_back(t);
    lambdas[i] = log_snr(schedule, t);
    coeffs[i] = alpha_sigma_from_log_snr(lambdas[i]);
    weights[i] = loss_weight(schedule, t, opts.weighting);
  }
  const Tensor<T> eps = rng.normal_tensor<T>(x0.shape());
  Tensor<T> z(x0.shape());
  Tensor<T> target(x0.shape());
  const std::size_t per = x0.size() / n;
  for (int i = 0; i < n; ++i) {
    const auto [a, s] = coeffs[i];
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
      const double xv = x0[k], ev = eps[k];
      z[k] = static_cast<T>(a * xv + s * ev);
      target[k] = static_cast<T>(model.parameterization() == Parameterization::v ? a * ev - s * xv : ev);
    }
  }
  const auto dropped = drop_conditioning<T>(cond, drops, model.config().cond_dropout_p);
  nn::Var<T> pred = model.forward(z, lambdas, dropped);
  nn::Var<T> loss = nn::weighted_mse<T>(pred, target, weights);
  result.loss = static_cast<double>(loss->value[0]);
  if (!std::isfinite(result.loss)) {
    std::string ts;
    for (double t : result.times) ts += (ts.empty() ? "" : ",") + std::to_string(t);
    throw TrainingError("non-finite diffusion loss at t = {" + ts + "}");
  }
  if (opts.backward) nn::backward(loss);
  return result;
}

// Classifier-free guidance: (1 + w) * pred(cond) - w * pred(null).
template <typename T, NoisePredictor<T> M>
Tensor<T> guided_prediction(const M& model, const Tensor<T>& z, double log_snr_value,
                            const ConditioningBundle<T>& cond, double w) {
  if (w < 0.0) throw DomainError("guidance weight must be >= 0");
  const double l[1] = {log_snr_value};
  Tensor<T> c = model.predict(z, std::span<const double>(l, 1), cond);
  const bool all_null = std::all_of(cond.is_null.begin(), cond.is_null.end(), [](auto f) { return f != 0; });
  if (w == 0.0 || all_null) return c;
  const Tensor<T> u = model.predict(z, std::span<const double>(l, 1), null_bundle(cond));
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = static_cast<T>((1.0 + w) * static_cast<double>(c[i]) - w * static_cast<double>(u[i]));
  }
  return c;
}

// Model's clean-image estimate at time t, clamped to [-1,1].
template <typename T>
Tensor<T> predicted_x0(const Schedule& schedule, const Tensor<T>& z, const Tensor<T>& prediction, double t,
                       Parameterization param) {
  require_same_shape(z.shape(), prediction.shape(), "predicted_x0");
  const auto [a, s] = alpha_sigma(schedule, t);
  Tensor<T> x0(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zv = z[i], pv = prediction[i];
    const double x = param == Parameterization::v ? a * zv - s * pv : (zv - s * pv) / a;
    x0[i] = static_cast<T>(std::clamp(x, -1.0, 1.0));
  }
  return x0;
}

// Deterministic DDIM move from time t to an earlier time s < t.
template <typename T>
Tensor<T> ddim_step(const Schedule& schedule, const Tensor<T>& z, const Tensor<T>& prediction, double t, double s,
                    Parameterization param) {
  if (!(s < t)) throw DomainError("ddim_step requires s < t, got s=" + std::to_string(s) + " t=" + std::to_string(t));
  require_unit_time(s);
  require_unit_time(t);
  const auto [at, st] = alpha_sigma(schedule, t);
  const auto [as, ss] = alpha_sigma(schedule, s);
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zv = z[i], pv = prediction[i];
    double x = param == Parameterization::v ? at * zv - st * pv : (zv - st * pv) / at;
    x = std::clamp(x, -1.0, 1.0);
    const double e = (zv - at * x) / st;
    out[i] = static_cast<T>(as * x + ss * e);
  }
  return out;
}

// 1 = t_K > ... > t_0 = 0, evenly spaced.
inline std::vector<double> uniform_grid(int steps) {
  if (steps < 1) throw DomainError("sampler needs at least one step");
  std::vector<double> g(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[i] = 1.0 - static_cast<double>(i) / steps;
  g.front() = 1.0;
  g.back() = 0.0;
  return g;
}

inline void validate_grid(std::span<const double> grid) {
  if (grid.size() < 2) throw DomainError("timestep grid needs at least two points");
  if (grid.front() != 1.0 || grid.back() != 0.0) throw DomainError("timestep grid must run from exactly 1 to exactly 0");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] < grid[i - 1])) throw DomainError("timestep grid must be strictly decreasing");
  }
}

template <typename T>
struct SamplerRun {
  std::uint64_t seed = 0;
  std::vector<double> grid = uniform_grid(64);
  bool keep_trace = false;
  std::vector<Tensor<T>> trace;  // x0 estimate after every step when keep_trace
};

// Initial noise: sample i of the batch uses its own stream derived from the seed.
template <typename T>
Tensor<T> initial_noise(std::uint64_t seed, Shape shape) {
  Tensor<T> z(shape);
  const std::size_t per = shape.size() / std::max(shape.n, 1);
  for (int i = 0; i < shape.n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    for (std::size_t k = 0; k < per; ++k) z[i * per + k] = static_cast<T>(rng.normal());
  }
  return z;
}

// Full deterministic sampling loop. The output is the model's clean estimate at
// the final step (the last x0 prediction), clamped to [-1,1].
template <typename T, NoisePredictor<T> M>
Tensor<T> sample(const M& model, const Schedule& schedule, const ConditioningBundle<T>& cond, SamplerRun<T>& run,
                 double w) {
  validate_grid(run.grid);
  const auto& cfg = model.config();
  Tensor<T> z = initial_noise<T>(run.seed, Shape{cond.batch(), cfg.in_channels, cfg.resolution, cfg.resolution});
  Tensor<T> x0;
  run.trace.clear();
  for (std::size_t k = 0; k + 1 < run.grid.size(); ++k) {
    const double t = run.grid[k], s = run.grid[k + 1];
    const Tensor<T> pred = guided_prediction<T>(model, z, log_snr(schedule, t), cond, w);
    if (!all_finite(pred)) throw SamplingError("non-finite prediction at sampling step " + std::to_string(k));
    x0 = predicted_x0(schedule, z, pred, t, model.parameterization());
    if (run.keep_trace) run.trace.push_back(x0);
    z = ddim_step(schedule, z, pred, t, s, model.parameterization());
    if (!all_finite(z)) throw SamplingError("non-finite latent at sampling step " + std::to_string(k));
  }
  clamp_inplace(x0, T(-1), T(1));
  return x0;
}

// Low-resolution conditioning for a super-resolution stage: box-downsample by
// `factor`, bilinearly upsample back, then noise to time aug_t.
template <typename T>
Tensor<T> lowres_conditioning(const Schedule& schedule, const Tensor<T>& image, int out_resolution, double aug_t,
                              Rng& rng) {
  Tensor<T> up = resize_bilinear(image, out_resolution, out_resolution);
  if (aug_t <= 0.0) return up;
  const Tensor<T> eps = rng.normal_tensor<T>(up.shape());
  return forward_marginal(schedule, up, aug_t, eps);
}

// Per-sample augmentation levels (training draws t_aug ~ U(0, max_level)).
template <typename T>
Tensor<T> lowres_conditioning_random(const Schedule& schedule, const Tensor<T>& image, int out_resolution,
                                     double max_level, Rng& rng) {
  Tensor<T> up = resize_bilinear(image, out_resolution, out_resolution);
  if (max_level <= 0.0) return up;
  const std::size_t per = up.size() / up.n();
  for (int i = 0; i < up.n(); ++i) {
    const auto [a, s] = alpha_sigma(schedule, rng.uniform(0.0, max_level));
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
      up[k] = static_cast<T>(a * static_cast<double>(up[k]) + s * rng.normal());
    }
  }
  return up;
}

// Nearest-neighbour resampling of a one-hot stack (keeps it one-hot).
template <typename T>
Tensor<T> resize_nearest_channels(const Tensor<T>& x, int out_h, int out_w) {
  if (x.h() == out_h && x.w() == out_w) return x;
  Tensor<T> y(Shape{x.n(), x.c(), out_h, out_w});
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const int sy = std::min(static_cast<int>((oy + 0.5) * x.h() / out_h), x.h() - 1);
        for (int ox = 0; ox < out_w; ++ox) {
          const int sx = std::min(static_cast<int>((ox + 0.5) * x.w() / out_w), x.w() - 1);
          y.at(n, c, oy, ox) = x.at(n, c, sy, sx);
        }
      }
  return y;
}

template <class M>
struct CascadeStage {
  const M* model = nullptr;
  int num_steps = 64;
  double guidance_weight = 1.0;
  double cond_aug_level = 0.1;
};

template <class M>
void validate_stages(std::span<const CascadeStage<M>> stages) {
  if (stages.empty()) throw ValidationError("cascade has no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    if (st.model == nullptr) throw ValidationError("cascade stage " + std::to_string(i) + " has no model");
    if (st.num_steps < 1) throw ValidationError("cascade stage " + std::to_string(i) + " needs num_steps >= 1");
    if (st.guidance_weight < 0) throw ValidationError("cascade stage " + std::to_string(i) + " has negative guidance");
    if (i == 0) continue;
    const int prev = stages[i - 1].model->config().resolution;
    const int res = st.model->config().resolution;
    if (res <= prev || res % prev) {
      throw ValidationError("cascade stage " + std::to_string(i) + " resolution " + std::to_string(res) +
                            " is not a larger multiple of " + std::to_string(prev));
    }
    if (!st.model->config().lowres_input) {
      throw ValidationError("cascade stage " + std::to_string(i) + " does not accept a low-resolution input");
    }
  }
}

// Base stage samples at its resolution; every later stage is conditioned on the
// bilinearly upsampled, noise-augmented output of the one before. The mask in
// `cond` is at (or above) the final resolution and is resampled per stage.
template <typename T, NoisePredictor<T> M>
Tensor<T> cascade_sample(std::span<const CascadeStage<M>> stages, const Schedule& schedule,
                         const ConditioningBundle<T>& cond, std::uint64_t seed,
                         std::vector<Tensor<T>>* stage_outputs = nullptr) {
  validate_stages(stages);
  Tensor<T> image;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const int res = st.model->config().resolution;
    if (cond.mask.h() < res && st.model->config().num_classes > 1) {
      throw ValidationError("conditioning mask (" + std::to_string(cond.mask.h()) +
                            " px) is smaller than cascade stage resolution " + std::to_string(res));
    }
    ConditioningBundle<T> stage_cond = cond;
    stage_cond.mask = resize_nearest_channels(cond.mask, res, res);
    if (i > 0) {
      Rng aug_rng(derive_seed(seed, 1000 + i));
      stage_cond.lowres = lowres_conditioning(schedule, image, res, st.cond_aug_level, aug_rng);
    } else {
      stage_cond.lowres = Tensor<T>();
    }
    SamplerRun<T> run;
    run.seed = derive_seed(seed, i);
    run.grid = uniform_grid(st.num_steps);
    image = sample<T>(*st.model, schedule, stage_cond, run, st.guidance_weight);
    if (stage_outputs) stage_outputs->push_back(image);
  }
  return image;
}

}  // namespace maskdiff
