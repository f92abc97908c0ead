#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/nn/layers.hpp"

namespace maskdiff {

struct SegConfig {
  int resolution = 32;
  int in_channels = 3;
  int num_classes = 4;
  int base_width = 16;
  int depth = 2;  // >= 2 so that 1/2 and 1/4 resolution taps exist
  std::uint64_t init_seed = 0;

  void validate() const {
    if (depth < 2) throw ValidationError("segmentation depth must be >= 2 for auxiliary heads");
    if (resolution % (1 << depth)) {
      throw ValidationError("segmentation resolution " + std::to_string(resolution) + " not divisible by 2^depth");
    }
    if (num_classes < 2) throw ValidationError("segmentation needs at least two classes");
    if (base_width < 2) throw ValidationError("segmentation base_width must be >= 2");
  }
  [[nodiscard]] int width_at(int level) const { return base_width * std::min(1 << level, 4); }
};

struct SegLossConfig {
  double beta = 0.5;
  std::vector<double> class_weights;  // empty: unweighted cross-entropy
  double smooth = 1e-5;
};

// Logits at full, 1/2 and 1/4 resolution.
template <typename T>
struct SegHeads {
  nn::Var<T> full;
  nn::Var<T> half;
  nn::Var<T> quarter;
};

// Per-pixel channel softmax of (N,C,H,W) logits.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> p(logits.shape());
  const int c = logits.c();
  const std::size_t hw = logits.shape().plane();
  for (int n = 0; n < logits.n(); ++n) {
    const std::size_t base = logits.index(n, 0, 0, 0);
    for (std::size_t i = 0; i < hw; ++i) {
      double m = -INFINITY;
      for (int k = 0; k < c; ++k) m = std::max(m, static_cast<double>(logits[base + k * hw + i]));
      double s = 0;
      for (int k = 0; k < c; ++k) s += std::exp(static_cast<double>(logits[base + k * hw + i]) - m);
      for (int k = 0; k < c; ++k) {
        p[base + k * hw + i] = static_cast<T>(std::exp(static_cast<double>(logits[base + k * hw + i]) - m) / s);
      }
    }
  }
  return p;
}

// Soft Dice loss over pixels and classes jointly (squared denominator),
// averaged over the batch: 1 - (2 sum g s + k) / (sum g^2 + sum s^2 + k).
template <typename T>
double dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, double smooth) {
  require_same_shape(probs.shape(), onehot.shape(), "dice_loss");
  if (!(smooth > 0)) throw DomainError("dice smoothing must be positive");
  for (T v : probs.values()) {
    if (v < T(-1e-4) || v > T(1 + 1e-4)) throw DomainError("dice_loss: probabilities outside [0,1]");
  }
  const int n = probs.n();
  const std::size_t per = probs.size() / n;
  double total = 0;
  for (int b = 0; b < n; ++b) {
    double inter = 0, den = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double s = probs[i], g = onehot[i];
      inter += g * s;
      den += g * g + s * s;
    }
    total += 1.0 - (2.0 * inter + smooth) / (den + smooth);
  }
  return total / n;
}

inline void check_labels(std::span<const LabelMap> labels, int n, int c, int h, int w) {
  if (static_cast<int>(labels.size()) != n) throw ShapeError("one label map per sample required");
  for (const auto& m : labels) {
    if (m.height != h || m.width != w) {
      throw ShapeError("label map " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " does not match logits " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (auto v : m.labels) {
      if (v >= c) throw DomainError("class index " + std::to_string(v) + " out of range for " + std::to_string(c) + " classes");
    }
  }
}

// Mean over pixels (and batch) of -log softmax(logits)[gt]; with class weights,
// the weighted mean sum(w_g nll) / sum(w_g).
template <typename T>
double ce_loss(const Tensor<T>& logits, std::span<const LabelMap> gt, std::span<const double> class_weights = {}) {
  const int n = logits.n(), c = logits.c();
  check_labels(gt, n, c, logits.h(), logits.w());
  const std::size_t hw = logits.shape().plane();
  double total = 0;
  for (int b = 0; b < n; ++b) {
    double num = 0, den = 0;
    const std::size_t base = logits.index(b, 0, 0, 0);
    for (std::size_t i = 0; i < hw; ++i) {
      double m = -INFINITY;
      for (int k = 0; k < c; ++k) m = std::max(m, static_cast<double>(logits[base + k * hw + i]));
      double s = 0;
      for (int k = 0; k < c; ++k) s += std::exp(static_cast<double>(logits[base + k * hw + i]) - m);
      const int g = gt[b].labels[i];
      const double nll = -(static_cast<double>(logits[base + g * hw + i]) - m - std::log(s));
      const double w = class_weights.empty() ? 1.0 : class_weights[g];
      num += w * nll;
      den += w;
    }
    total += den > 0 ? num / den : 0.0;
  }
  return total / n;
}

inline double ce_loss_single(const Tensor<double>& logits, const LabelMap& gt) {
  return ce_loss<double>(logits, std::span<const LabelMap>(&gt, 1));
}

template <typename T>
Tensor<T> one_hot_batch(std::span<const LabelMap> labels, int num_classes) {
  std::vector<Tensor<T>> parts;
  for (const auto& m : labels) parts.push_back(one_hot<T>(m, num_classes));
  return stack<T>(parts);
}

inline std::vector<LabelMap> downsample_labels(std::span<const LabelMap> labels, int h, int w) {
  std::vector<LabelMap> out;
  for (const auto& m : labels) out.push_back(resize_nearest(m, h, w));
  return out;
}

namespace nn {

// Differentiable softmax + Dice loss on logits.
template <typename T>
Var<T> softmax_dice(const Var<T>& logits, const Tensor<T>& onehot, double smooth) {
  const Tensor<T> probs = softmax_channels(logits->value);
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(dice_loss(probs, onehot, smooth)));
  return make_result<T>(std::move(y), {logits}, [logits, probs, onehot, smooth](Node<T>& self) {
    const int n = probs.n(), c = probs.c();
    const std::size_t hw = probs.shape().plane();
    const std::size_t per = probs.size() / n;
    const double up = static_cast<double>(self.grad[0]) / n;
    auto& g = logits->grad_buffer();
    std::vector<double> ds(per);
    for (int b = 0; b < n; ++b) {
      const std::size_t base = b * per;
      double inter = 0, den = 0;
      for (std::size_t i = 0; i < per; ++i) {
        inter += static_cast<double>(onehot[base + i]) * probs[base + i];
        den += static_cast<double>(onehot[base + i]) * onehot[base + i] + static_cast<double>(probs[base + i]) * probs[base + i];
      }
      const double num = 2 * inter + smooth, d = den + smooth;
      for (std::size_t i = 0; i < per; ++i) {
        ds[i] = -(2.0 * onehot[base + i] * d - num * 2.0 * probs[base + i]) / (d * d);
      }
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0;
        for (int k = 0; k < c; ++k) dot += probs[base + k * hw + p] * ds[k * hw + p];
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = base + k * hw + p;
          g[idx] += static_cast<T>(up * probs[idx] * (ds[k * hw + p] - dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<LabelMap> gt, std::vector<double> class_weights) {
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(ce_loss<T>(logits->value, gt, class_weights)));
  return make_result<T>(std::move(y), {logits}, [logits, gt = std::move(gt), w = std::move(class_weights)](Node<T>& self) {
    const Tensor<T> probs = softmax_channels(logits->value);
    const int n = probs.n(), c = probs.c();
    const std::size_t hw = probs.shape().plane();
    auto& g = logits->grad_buffer();
    for (int b = 0; b < n; ++b) {
      double den = 0;
      for (std::size_t p = 0; p < hw; ++p) den += w.empty() ? 1.0 : w[gt[b].labels[p]];
      if (den <= 0) continue;
      const double up = static_cast<double>(self.grad[0]) / (n * den);
      const std::size_t base = probs.index(b, 0, 0, 0);
      for (std::size_t p = 0; p < hw; ++p) {
        const int label = gt[b].labels[p];
        const double wp = w.empty() ? 1.0 : w[label];
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = base + k * hw + p;
          g[idx] += static_cast<T>(up * wp * (static_cast<double>(probs[idx]) - (k == label ? 1.0 : 0.0)));
        }
      }
    }
  });
}

}  // namespace nn

// L = Dice + CE + beta (Dice_1/2 + Dice_1/4), labels downsampled by nearest
// neighbour for the auxiliary terms.
template <typename T>
nn::Var<T> total_loss(const SegHeads<T>& heads, std::span<const LabelMap> gt, const SegLossConfig& cfg) {
  if (!heads.full) throw ShapeError("total_loss: missing full-resolution head");
  const Tensor<T>& full = heads.full->value;
  const int c = full.c();
  check_labels(gt, full.n(), c, full.h(), full.w());
  nn::Var<T> loss = nn::add(nn::softmax_dice(heads.full, one_hot_batch<T>(gt, c), cfg.smooth),
                            nn::cross_entropy(heads.full, std::vector<LabelMap>(gt.begin(), gt.end()), cfg.class_weights));
  if (cfg.beta == 0.0) return loss;
  if (!std::isfinite(cfg.beta) || cfg.beta < 0) throw DomainError("beta must be finite and >= 0");
  if (!heads.half || !heads.quarter) throw ShapeError("total_loss: auxiliary heads required when beta > 0");
  nn::Var<T> aux;
  for (const auto& head : {heads.half, heads.quarter}) {
    const auto small = downsample_labels(gt, head->value.h(), head->value.w());
    nn::Var<T> d = nn::softmax_dice(head, one_hot_batch<T>(small, c), cfg.smooth);
    aux = aux ? nn::add(aux, d) : d;
  }
  return nn::add(loss, nn::scale(aux, cfg.beta));
}

// Per-pixel argmax; the lowest class index wins ties.
template <typename T>
std::vector<LabelMap> argmax_labels(const Tensor<T>& logits) {
  std::vector<LabelMap> out;
  for (int n = 0; n < logits.n(); ++n) {
    LabelMap m(logits.h(), logits.w());
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        int best = 0;
        for (int k = 1; k < logits.c(); ++k) {
          if (logits.at(n, k, y, x) > logits.at(n, best, y, x)) best = k;
        }
        m.at(y, x) = static_cast<std::uint8_t>(best);
      }
    out.push_back(std::move(m));
  }
  return out;
}

// Fixed U-Net with two conv blocks per level and 1x1 heads at full, 1/2 and
// 1/4 resolution.
template <typename T>
class SegModel {
 public:
  explicit SegModel(SegConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    for (int i = 0; i < cfg_.depth; ++i) {
      const int in = i == 0 ? cfg_.in_channels : cfg_.width_at(i - 1);
      enc_.emplace_back(params_, "enc" + std::to_string(i), in, cfg_.width_at(i), rng);
    }
    mid_ = nn::ConvBlock<T>(params_, "mid", cfg_.width_at(cfg_.depth - 1), cfg_.width_at(cfg_.depth), rng);
    dec_.resize(cfg_.depth);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      dec_[i] = nn::ConvBlock<T>(params_, "dec" + std::to_string(i), cfg_.width_at(i + 1) + cfg_.width_at(i),
                                 cfg_.width_at(i), rng);
    }
    head_ = nn::Conv2d<T>(params_, "head", cfg_.width_at(0), cfg_.num_classes, 1, rng);
    head_half_ = nn::Conv2d<T>(params_, "head_half", cfg_.width_at(1), cfg_.num_classes, 1, rng);
    head_quarter_ = nn::Conv2d<T>(params_, "head_quarter", cfg_.width_at(2), cfg_.num_classes, 1, rng);
  }

  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) noexcept = default;
  SegModel& operator=(SegModel&&) noexcept = default;

  [[nodiscard]] const SegConfig& config() const { return cfg_; }
  [[nodiscard]] nn::ParamStore<T>& params() { return params_; }
  [[nodiscard]] const nn::ParamStore<T>& params() const { return params_; }

  nn::Adam<T> optimizer;
  int epoch = 0;

  void copy_weights_from(const SegModel& other) {
    for (const auto& [name, v] : other.params().entries()) {
      auto mine = params_.get(name);
      require_same_shape(mine->value.shape(), v->value.shape(), name.c_str());
      mine->value = v->value;
    }
  }

  SegHeads<T> forward(const Tensor<T>& images) const {
    const Shape expect{images.n(), cfg_.in_channels, cfg_.resolution, cfg_.resolution};
    if (images.shape() != expect) {
      throw ShapeError("segmenter expects input " + expect.str() + ", got " + images.shape().str());
    }
    nn::Var<T> h = nn::constant(images);
    std::vector<nn::Var<T>> skips;
    for (int i = 0; i < cfg_.depth; ++i) {
      h = enc_[i](h);
      skips.push_back(h);
      h = nn::avg_pool2(h);
    }
    h = mid_(h);
    std::vector<nn::Var<T>> by_level(cfg_.depth + 1);
    by_level[cfg_.depth] = h;
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      h = nn::upsample_nearest2(h);
      h = dec_[i](nn::concat_channels(h, skips[i]));
      by_level[i] = h;
    }
    return {head_(by_level[0]), head_half_(by_level[1]), head_quarter_(by_level[2])};
  }

  Tensor<T> logits(const Tensor<T>& images) const {
    nn::NoGradGuard guard;
    return forward(images).full->value;
  }

 private:
  SegConfig cfg_;
  nn::ParamStore<T> params_;
  std::vector<nn::ConvBlock<T>> enc_;
  nn::ConvBlock<T> mid_;
  std::vector<nn::ConvBlock<T>> dec_;
  nn::Conv2d<T> head_, head_half_, head_quarter_;
};

}  // namespace maskdiff
