#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Batched conditioning input of the denoiser.
//   mask:    (N, C-1, H, W) foreground one-hot; all zeros = empty mask
//   scalars: (N, S, 1, 1) covariates in [-1,1], or empty when S = 0
//   lowres:  (N, 3, H, W) upsampled lower-resolution image for super-resolution
//            stages, or empty
//   is_null: per-sample unconditional-token flag
template <typename T>
struct ConditioningBundle {
  Tensor<T> mask;
  Tensor<T> scalars;
  Tensor<T> lowres;
  std::vector<std::uint8_t> is_null;

  [[nodiscard]] int batch() const { return static_cast<int>(is_null.size()); }
};

// Unconditional bundle for a batch of n at the given geometry.
template <typename T>
ConditioningBundle<T> empty_bundle(int n, int num_classes, int resolution, int scalar_dim) {
  ConditioningBundle<T> b;
  b.mask = Tensor<T>(Shape{n, num_classes - 1, resolution, resolution});
  if (scalar_dim > 0) b.scalars = Tensor<T>(Shape{n, scalar_dim, 1, 1});
  b.is_null.assign(static_cast<std::size_t>(n), 1);
  return b;
}

template <typename T>
ConditioningBundle<T> mask_bundle(std::span<const LabelMap> masks, int num_classes, int scalar_dim) {
  std::vector<Tensor<T>> parts;
  parts.reserve(masks.size());
  for (const auto& m : masks) parts.push_back(one_hot_foreground<T>(m, num_classes));
  ConditioningBundle<T> b;
  b.mask = stack<T>(parts);
  if (scalar_dim > 0) b.scalars = Tensor<T>(Shape{static_cast<int>(masks.size()), scalar_dim, 1, 1});
  b.is_null.assign(masks.size(), 0);
  return b;
}

// Null token: mask and scalars zeroed, lowres kept.
template <typename T>
ConditioningBundle<T> null_bundle(const ConditioningBundle<T>& cond) {
  ConditioningBundle<T> out = cond;
  out.mask.fill(T(0));
  out.scalars.fill(T(0));
  std::fill(out.is_null.begin(), out.is_null.end(), std::uint8_t{1});
  return out;
}

// Classifier-free-guidance dropout: the whole bundle becomes the null token when u < p.
template <typename T>
ConditioningBundle<T> drop_conditioning(const ConditioningBundle<T>& cond, double u, double p) {
  return u < p ? null_bundle(cond) : cond;
}

// Same rule applied independently per sample, u[i] for sample i.
template <typename T>
ConditioningBundle<T> drop_conditioning(const ConditioningBundle<T>& cond, std::span<const double> u, double p) {
  if (static_cast<int>(u.size()) != cond.batch()) throw ShapeError("drop_conditioning: one draw per sample");
  ConditioningBundle<T> out = cond;
  for (int i = 0; i < cond.batch(); ++i) {
    if (!(u[i] < p)) continue;
    out.is_null[i] = 1;
    if (!out.mask.empty()) {
      const std::size_t per = out.mask.size() / out.mask.n();
      std::fill_n(out.mask.data() + i * per, per, T(0));
    }
    if (!out.scalars.empty()) {
      const std::size_t per = out.scalars.size() / out.scalars.n();
      std::fill_n(out.scalars.data() + i * per, per, T(0));
    }
  }
  return out;
}

// Covariate range used to map a raw value into [-1,1].
struct CovariateRange {
  std::string key;
  double lo = 0.0;
  double hi = 1.0;
};

// Encodes covariates as (value, presence) pairs: missing keys become (0, -1),
// present keys (normalized value, +1). Output length is 2 * ranges.size().
inline std::vector<double> encode_covariates(const std::map<std::string, double>& metadata,
                                             std::span<const CovariateRange> ranges) {
  std::vector<double> out;
  out.reserve(ranges.size() * 2);
  for (const auto& r : ranges) {
    auto it = metadata.find(r.key);
    if (it == metadata.end() || r.hi <= r.lo) {
      out.push_back(0.0);
      out.push_back(-1.0);
      continue;
    }
    out.push_back(std::clamp(2.0 * (it->second - r.lo) / (r.hi - r.lo) - 1.0, -1.0, 1.0));
    out.push_back(1.0);
  }
  return out;
}

}  // namespace maskdiff
