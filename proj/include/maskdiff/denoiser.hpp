#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/conditioning.hpp"
#include "maskdiff/nn/layers.hpp"

namespace maskdiff {

enum class Parameterization { eps, v };

inline std::string to_string(Parameterization p) { return p == Parameterization::eps ? "eps" : "v"; }
inline Parameterization parse_parameterization(const std::string& s) {
  if (s == "eps") return Parameterization::eps;
  if (s == "v") return Parameterization::v;
  throw ValidationError("unknown parameterization: " + s);
}

struct DenoiserConfig {
  int resolution = 16;
  int in_channels = 3;
  int num_classes = 4;  // including background; the mask input has num_classes - 1 channels
  Parameterization parameterization = Parameterization::eps;
  int base_width = 16;
  int depth = 2;
  int scalar_dim = 0;
  double cond_dropout_p = 0.1;
  bool lowres_input = false;  // super-resolution stage: concatenates an upsampled image
  std::uint64_t init_seed = 0;

  void validate() const {
    if (resolution < 8 || !std::has_single_bit(static_cast<unsigned>(resolution))) {
      throw ValidationError("denoiser resolution must be a power of two >= 8, got " + std::to_string(resolution));
    }
    const int max_depth = std::bit_width(static_cast<unsigned>(resolution)) - 1 - 2;
    if (depth < 1 || depth > max_depth) {
      throw ValidationError("denoiser depth " + std::to_string(depth) + " outside [1, " + std::to_string(max_depth) +
                            "] for resolution " + std::to_string(resolution));
    }
    if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
    if (base_width < 2 || base_width % 2) throw ValidationError("base_width must be even and >= 2");
    if (!(cond_dropout_p >= 0.0 && cond_dropout_p <= 1.0)) throw ValidationError("cond_dropout_p outside [0,1]");
  }

  [[nodiscard]] int width_at(int level) const { return level == 0 ? base_width : 2 * base_width; }
  [[nodiscard]] int input_channels() const {
    return in_channels + (num_classes - 1) + (lowres_input ? in_channels : 0);
  }
};

// U-Net noise / velocity predictor. The log-SNR enters through sinusoidal
// features and an MLP whose output shifts every residual block; masks (and the
// low-resolution image for super-resolution stages) are concatenated to z_t.
template <typename T>
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const int feat = cfg_.base_width;
    const int emb = 2 * cfg_.base_width;
    emb1_ = nn::Linear<T>(params_, "emb.fc1", feat + cfg_.scalar_dim, emb, rng);
    emb2_ = nn::Linear<T>(params_, "emb.fc2", emb, emb, rng);
    conv_in_ = nn::Conv2d<T>(params_, "conv_in", cfg_.input_channels(), cfg_.base_width, 3, rng);
    for (int i = 0; i < cfg_.depth; ++i) {
      const int in = i == 0 ? cfg_.base_width : cfg_.width_at(i - 1);
      down_.emplace_back(params_, "down" + std::to_string(i), in, cfg_.width_at(i), emb, rng);
    }
    const int mid = 2 * cfg_.base_width;
    mid_ = nn::ResBlock<T>(params_, "mid", cfg_.width_at(cfg_.depth - 1), mid, emb, rng);
    up_.resize(cfg_.depth);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      const int below = i == cfg_.depth - 1 ? mid : cfg_.width_at(i + 1);
      up_[i] = nn::ResBlock<T>(params_, "up" + std::to_string(i), below + cfg_.width_at(i), cfg_.width_at(i), emb, rng);
    }
    norm_out_ = nn::GroupNorm<T>(params_, "norm_out", cfg_.base_width);
    conv_out_ = nn::Conv2d<T>(params_, "conv_out", cfg_.base_width, cfg_.in_channels, 3, rng, /*zero_init=*/true);
  }

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) noexcept = default;
  Denoiser& operator=(Denoiser&&) noexcept = default;

  [[nodiscard]] const DenoiserConfig& config() const { return cfg_; }
  [[nodiscard]] Parameterization parameterization() const { return cfg_.parameterization; }
  [[nodiscard]] nn::ParamStore<T>& params() { return params_; }
  [[nodiscard]] const nn::ParamStore<T>& params() const { return params_; }

  // Training-step counter persisted in checkpoints.
  long long step = 0;

  void copy_weights_from(const Denoiser& other) {
    for (const auto& [name, v] : other.params().entries()) {
      auto mine = params_.get(name);
      require_same_shape(mine->value.shape(), v->value.shape(), name.c_str());
      mine->value = v->value;
    }
  }

  // Differentiable forward pass. log_snr holds one value per sample, or a
  // single value shared by the batch.
  nn::Var<T> forward(const Tensor<T>& z, std::span<const double> log_snr, const ConditioningBundle<T>& cond) const {
    check_inputs(z, log_snr, cond);
    const int n = z.n();
    nn::Var<T> x = nn::constant(z);
    if (cfg_.num_classes > 1) x = nn::concat_channels(x, nn::constant(cond.mask));
    if (cfg_.lowres_input) x = nn::concat_channels(x, nn::constant(cond.lowres));

    nn::Var<T> emb = nn::constant(embedding_features(n, log_snr, cond));
    emb = emb2_(nn::silu(emb1_(emb)));
    emb = nn::silu(emb);

    nn::Var<T> h = conv_in_(x);
    std::vector<nn::Var<T>> skips;
    for (int i = 0; i < cfg_.depth; ++i) {
      h = down_[i](h, emb);
      skips.push_back(h);
      h = nn::avg_pool2(h);
    }
    h = mid_(h, emb);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      h = nn::upsample_nearest2(h);
      h = nn::concat_channels(h, skips[i]);
      h = up_[i](h, emb);
    }
    return conv_out_(nn::silu(norm_out_(h)));
  }

  // Network output (eps_hat or v_hat per the configured parameterization).
  Tensor<T> predict(const Tensor<T>& z, std::span<const double> log_snr, const ConditioningBundle<T>& cond) const {
    nn::NoGradGuard guard;
    if (!all_finite(z)) throw DomainError("denoiser input contains non-finite values");
    return forward(z, log_snr, cond)->value;
  }

  Tensor<T> predict(const Tensor<T>& z, double log_snr, const ConditioningBundle<T>& cond) const {
    const double l[1] = {log_snr};
    return predict(z, std::span<const double>(l, 1), cond);
  }

 private:
  void check_inputs(const Tensor<T>& z, std::span<const double> log_snr, const ConditioningBundle<T>& cond) const {
    const Shape expect{z.n(), cfg_.in_channels, cfg_.resolution, cfg_.resolution};
    if (z.shape() != expect) {
      throw ShapeError("denoiser expects z_t of shape " + expect.str() + ", got " + z.shape().str());
    }
    if (log_snr.size() != 1 && static_cast<int>(log_snr.size()) != z.n()) {
      throw ShapeError("denoiser: need one log-SNR per sample or a single shared value");
    }
    if (cfg_.num_classes > 1) {
      const Shape m{z.n(), cfg_.num_classes - 1, cfg_.resolution, cfg_.resolution};
      if (cond.mask.shape() != m) {
        throw ShapeError("denoiser expects mask of shape " + m.str() + ", got " + cond.mask.shape().str());
      }
    }
    if (cfg_.lowres_input && cond.lowres.shape() != expect) {
      throw ShapeError("denoiser expects lowres conditioning of shape " + expect.str() + ", got " +
                       cond.lowres.shape().str());
    }
    if (cfg_.scalar_dim > 0 && cond.scalars.shape() != Shape{z.n(), cfg_.scalar_dim, 1, 1}) {
      throw ShapeError("denoiser expects " + std::to_string(cfg_.scalar_dim) + " scalars per sample");
    }
  }

  // Sinusoidal features of a pseudo-timestep in [0, 1000] derived from the
  // log-SNR, followed by the scalar covariates.
  Tensor<T> embedding_features(int n, std::span<const double> log_snr, const ConditioningBundle<T>& cond) const {
    const int feat = cfg_.base_width;
    const int half = feat / 2;
    Tensor<T> f(Shape{n, feat + cfg_.scalar_dim, 1, 1});
    for (int b = 0; b < n; ++b) {
      const double lambda = log_snr.size() == 1 ? log_snr[0] : log_snr[b];
      const double s = 1000.0 * (15.0 - lambda) / 30.0;
      for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        f.at(b, k, 0, 0) = static_cast<T>(std::sin(s * freq));
        f.at(b, half + k, 0, 0) = static_cast<T>(std::cos(s * freq));
      }
      for (int j = 0; j < cfg_.scalar_dim; ++j) f.at(b, feat + j, 0, 0) = cond.scalars.at(b, j, 0, 0);
    }
    return f;
  }

  DenoiserConfig cfg_;
  nn::ParamStore<T> params_;
  nn::Linear<T> emb1_, emb2_;
  nn::Conv2d<T> conv_in_;
  std::vector<nn::ResBlock<T>> down_;
  nn::ResBlock<T> mid_;
  std::vector<nn::ResBlock<T>> up_;
  nn::GroupNorm<T> norm_out_;
  nn::Conv2d<T> conv_out_;
};

}  // namespace maskdiff
