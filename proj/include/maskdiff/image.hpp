#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Integer class-index map, row-major, 0 is background.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] std::set<int> classes() const { return {labels.begin(), labels.end()}; }
  [[nodiscard]] int max_label() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Bilinear resampling with half-pixel centres. Input (N,C,H,W).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw DomainError("resize: target must be >= 1");
  if (x.h() == out_h && x.w() == out_w) return x;
  Tensor<T> y(Shape{x.n(), x.c(), out_h, out_w});
  const double sy = static_cast<double>(x.h()) / out_h;
  const double sx = static_cast<double>(x.w()) / out_w;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.h() - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, x.h() - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
          const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.w() - 1));
          const int x0 = static_cast<int>(std::floor(fx));
          const int x1 = std::min(x0 + 1, x.w() - 1);
          const double wx = fx - x0;
          const double v = (1 - wy) * ((1 - wx) * x.at(n, c, y0, x0) + wx * x.at(n, c, y0, x1)) +
                           wy * ((1 - wx) * x.at(n, c, y1, x0) + wx * x.at(n, c, y1, x1));
          y.at(n, c, oy, ox) = static_cast<T>(v);
        }
      }
  return y;
}

// Box-filter downsampling by an integer factor.
template <typename T>
Tensor<T> downsample_area(const Tensor<T>& x, int factor) {
  if (factor == 1) return x;
  if (factor < 1 || x.h() % factor || x.w() % factor) {
    throw ShapeError("downsample_area: factor " + std::to_string(factor) + " does not divide " + x.shape().str());
  }
  const int oh = x.h() / factor, ow = x.w() / factor;
  Tensor<T> y(Shape{x.n(), x.c(), oh, ow});
  const double inv = 1.0 / (factor * factor);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double s = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) s += x.at(n, c, oy * factor + dy, ox * factor + dx);
          y.at(n, c, oy, ox) = static_cast<T>(s * inv);
        }
  return y;
}

inline LabelMap resize_nearest(const LabelMap& m, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw DomainError("resize: target must be >= 1");
  if (m.height == out_h && m.width == out_w) return m;
  LabelMap out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * m.height / out_h), m.height - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * m.width / out_w), m.width - 1);
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

// All-class one-hot, (1, C, H, W).
template <typename T>
Tensor<T> one_hot(const LabelMap& m, int num_classes) {
  Tensor<T> t(Shape{1, num_classes, m.height, m.width});
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const int c = m.at(y, x);
      if (c >= num_classes) throw DomainError("label " + std::to_string(c) + " >= class count");
      t.at(0, c, y, x) = T(1);
    }
  return t;
}

// Foreground-only one-hot, (1, C-1, H, W); background pixels are all-zero, so
// an all-background map encodes the empty mask.
template <typename T>
Tensor<T> one_hot_foreground(const LabelMap& m, int num_classes) {
  Tensor<T> t(Shape{1, num_classes - 1, m.height, m.width});
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const int c = m.at(y, x);
      if (c >= num_classes) throw DomainError("label " + std::to_string(c) + " >= class count");
      if (c > 0) t.at(0, c - 1, y, x) = T(1);
    }
  return t;
}

}  // namespace maskdiff
