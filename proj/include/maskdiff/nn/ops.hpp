#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <vector>

#include "maskdiff/nn/graph.hpp"

namespace maskdiff::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

// Lowers a batch to a (Ci*k*k) x (N*H*W) patch matrix for a stride-1 convolution
// with symmetric zero padding and "same" output size (k odd, pad = k/2).
template <typename T>
void im2col(const Tensor<T>& x, int k, int pad, RowMatrix<T>& cols) {
  const int n = x.n(), ci = x.c(), h = x.h(), w = x.w();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  cols.resize(static_cast<Eigen::Index>(ci) * k * k, static_cast<Eigen::Index>(n * hw));
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.row((c * k + ky) * k + kx).data();
        for (int b = 0; b < n; ++b) {
          const T* src = x.data() + x.index(b, c, 0, 0);
          T* dst = row + b * hw;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            T* drow = dst + static_cast<std::size_t>(y) * w;
            if (sy < 0 || sy >= h) {
              std::fill(drow, drow + w, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(sy) * w;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + kx - pad;
              drow[xx] = (sx >= 0 && sx < w) ? srow[sx] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMatrix<T>& cols, int k, int pad, Tensor<T>& dx) {
  const int n = dx.n(), ci = dx.c(), h = dx.h(), w = dx.w();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols.row((c * k + ky) * k + kx).data();
        for (int b = 0; b < n; ++b) {
          T* dst = dx.data() + dx.index(b, c, 0, 0);
          const T* src = row + b * hw;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            const T* srow = src + static_cast<std::size_t>(y) * w;
            T* drow = dst + static_cast<std::size_t>(sy) * w;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + kx - pad;
              if (sx >= 0 && sx < w) drow[sx] += srow[xx];
            }
          }
        }
      }
    }
  }
}

// (N, C, HW) <-> (C, N*HW)
template <typename T>
void batch_to_channel_major(const Tensor<T>& x, RowMatrix<T>& out) {
  const int n = x.n(), c = x.c();
  const std::size_t hw = x.shape().plane();
  out.resize(c, static_cast<Eigen::Index>(n * hw));
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(x.data() + x.index(b, ch, 0, 0), hw, out.row(ch).data() + b * hw);
}

template <typename T>
void channel_major_to_batch(const RowMatrix<T>& m, Tensor<T>& x, bool accumulate) {
  const int n = x.n(), c = x.c();
  const std::size_t hw = x.shape().plane();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* src = m.row(ch).data() + b * hw;
      T* dst = x.data() + x.index(b, ch, 0, 0);
      if (accumulate) {
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      } else {
        std::copy_n(src, hw, dst);
      }
    }
  }
}

}  // namespace detail

// Stride-1 "same" convolution. weight: (Co, Ci, k, k); bias: (1, Co, 1, 1) or null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape ws = weight->value.shape();
  const int k = ws.h;
  const int pad = k / 2;
  if (ws.w != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
  if (x->value.c() != ws.c) {
    throw ShapeError("conv2d: input has " + std::to_string(x->value.c()) + " channels, weight expects " +
                     std::to_string(ws.c));
  }
  const Shape xs = x->value.shape();
  const int co = ws.n;
  const Eigen::Index kdim = static_cast<Eigen::Index>(ws.c) * k * k;

  RowMatrix<T> cols;
  if (k == 1) {
    detail::batch_to_channel_major(x->value, cols);
  } else {
    detail::im2col(x->value, k, pad, cols);
  }
  ConstMatrixMap<T> wmat(weight->value.data(), co, kdim);
  RowMatrix<T> out(co, cols.cols());
  out.noalias() = wmat * cols;
  if (bias) {
    for (int c = 0; c < co; ++c) out.row(c).array() += bias->value[c];
  }
  Tensor<T> y(Shape{xs.n, co, xs.h, xs.w});
  detail::channel_major_to_batch(out, y, false);

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [x, weight, bias, k, pad, co, kdim](Node<T>& self) {
    RowMatrix<T> g;
    detail::batch_to_channel_major(self.grad, g);
    ConstMatrixMap<T> wmat(weight->value.data(), co, kdim);
    RowMatrix<T> cols;
    if (weight->requires_grad || x->requires_grad) {
      if (k == 1) {
        detail::batch_to_channel_major(x->value, cols);
      } else {
        detail::im2col(x->value, k, pad, cols);
      }
    }
    if (weight->requires_grad) {
      MatrixMap<T> dw(weight->grad_buffer().data(), co, kdim);
      dw.noalias() += g * cols.transpose();
    }
    if (bias && bias->requires_grad) {
      auto& db = bias->grad_buffer();
      for (int c = 0; c < co; ++c) db[c] += g.row(c).sum();
    }
    if (x->requires_grad) {
      RowMatrix<T> dcols(kdim, g.cols());
      dcols.noalias() = wmat.transpose() * g;
      if (k == 1) {
        detail::channel_major_to_batch(dcols, x->grad_buffer(), true);
      } else {
        detail::col2im_add(dcols, k, pad, x->grad_buffer());
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value.shape(), b->value.shape(), "add");
  Tensor<T> y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    for (const auto& in : {a, b}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// x: (N,C,H,W) plus a per-sample per-channel offset e: (N,C,1,1).
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& e) {
  const Shape xs = x->value.shape();
  const Shape es = e->value.shape();
  if (es.n != xs.n || es.c != xs.c || es.h != 1 || es.w != 1) {
    throw ShapeError("add_channel: offset " + es.str() + " incompatible with " + xs.str());
  }
  const std::size_t hw = xs.plane();
  Tensor<T> y = x->value;
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    T* p = y.data() + nc * hw;
    const T v = e->value[nc];
    for (std::size_t i = 0; i < hw; ++i) p[i] += v;
  }
  return make_result<T>(std::move(y), {x, e}, [x, e, hw](Node<T>& self) {
    if (x->requires_grad) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (e->requires_grad) {
      auto& g = e->grad_buffer();
      for (std::size_t nc = 0; nc < g.size(); ++nc) {
        const T* p = self.grad.data() + nc * hw;
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
        g[nc] += s;
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape as = a->value.shape();
  const Shape bs = b->value.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: " + as.str() + " vs " + bs.str());
  }
  const std::size_t hw = as.plane();
  const std::size_t sa = as.c * hw, sb = bs.c * hw;
  Tensor<T> y(Shape{as.n, as.c + bs.c, as.h, as.w});
  for (int n = 0; n < as.n; ++n) {
    std::copy_n(a->value.data() + n * sa, sa, y.data() + n * (sa + sb));
    std::copy_n(b->value.data() + n * sb, sb, y.data() + n * (sa + sb) + sa);
  }
  return make_result<T>(std::move(y), {a, b}, [a, b, sa, sb](Node<T>& self) {
    const int n = self.value.n();
    if (a->requires_grad) {
      auto& g = a->grad_buffer();
      for (int i = 0; i < n; ++i) {
        const T* src = self.grad.data() + i * (sa + sb);
        T* dst = g.data() + i * sa;
        for (std::size_t j = 0; j < sa; ++j) dst[j] += src[j];
      }
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer();
      for (int i = 0; i < n; ++i) {
        const T* src = self.grad.data() + i * (sa + sb) + sa;
        T* dst = g.data() + i * sb;
        for (std::size_t j = 0; j < sb; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape xs = x->value.shape();
  if (xs.h % 2 || xs.w % 2) throw ShapeError("avg_pool2: odd spatial extent " + xs.str());
  Tensor<T> y(Shape{xs.n, xs.c, xs.h / 2, xs.w / 2});
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const T* src = x->value.data() + nc * xs.plane();
    T* dst = y.data() + nc * y.shape().plane();
    for (int yy = 0; yy < xs.h / 2; ++yy)
      for (int xx = 0; xx < xs.w / 2; ++xx) {
        const T* p = src + 2 * yy * xs.w + 2 * xx;
        dst[yy * (xs.w / 2) + xx] = T(0.25) * (p[0] + p[1] + p[xs.w] + p[xs.w + 1]);
      }
  }
  return make_result<T>(std::move(y), {x}, [x, xs](Node<T>& self) {
    auto& g = x->grad_buffer();
    const int oh = xs.h / 2, ow = xs.w / 2;
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      const T* src = self.grad.data() + nc * oh * ow;
      T* dst = g.data() + nc * xs.plane();
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          const T v = T(0.25) * src[yy * ow + xx];
          T* p = dst + 2 * yy * xs.w + 2 * xx;
          p[0] += v;
          p[1] += v;
          p[xs.w] += v;
          p[xs.w + 1] += v;
        }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const Shape xs = x->value.shape();
  const int oh = xs.h * 2, ow = xs.w * 2;
  Tensor<T> y(Shape{xs.n, xs.c, oh, ow});
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const T* src = x->value.data() + nc * xs.plane();
    T* dst = y.data() + static_cast<std::size_t>(nc) * oh * ow;
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx) dst[yy * ow + xx] = src[(yy / 2) * xs.w + xx / 2];
  }
  return make_result<T>(std::move(y), {x}, [x, xs, oh, ow](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      const T* src = self.grad.data() + static_cast<std::size_t>(nc) * oh * ow;
      T* dst = g.data() + nc * xs.plane();
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) dst[(yy / 2) * xs.w + xx / 2] += src[yy * ow + xx];
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> y = x->value;
  for (auto& v : y.values()) v = v / (T(1) + std::exp(-v));
  return make_result<T>(std::move(y), {x}, [x](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x->value[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      g[i] += self.grad[i] * (s + v * s * (T(1) - s));
    }
  });
}

// Group normalization with per-channel affine. gamma, beta: (1, C, 1, 1).
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  const Shape xs = x->value.shape();
  if (groups <= 0 || xs.c % groups) {
    throw ShapeError("group_norm: " + std::to_string(xs.c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  const int cpg = xs.c / groups;
  const std::size_t hw = xs.plane();
  const std::size_t gsize = cpg * hw;
  Tensor<T> xhat(xs);
  std::vector<T> inv_std(static_cast<std::size_t>(xs.n) * groups);
  Tensor<T> y(xs);
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = x->value.index(n, g * cpg, 0, 0);
      const T* p = x->value.data() + off;
      double mean = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) mean += p[i];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<double>(gsize);
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      inv_std[n * groups + g] = is;
      for (std::size_t i = 0; i < gsize; ++i) {
        const int c = g * cpg + static_cast<int>(i / hw);
        const T xh = static_cast<T>(p[i] - mean) * is;
        xhat[off + i] = xh;
        y[off + i] = xh * gamma->value[c] + beta->value[c];
      }
    }
  }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [x, gamma, beta, groups, cpg, hw, gsize, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](Node<T>& self) {
    const Shape xs = x->value.shape();
    if (gamma->requires_grad || beta->requires_grad) {
      auto& gg = gamma->grad_buffer();
      auto& gb = beta->grad_buffer();
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t off = x->value.index(n, c, 0, 0);
          T sg = 0, sb = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            sg += self.grad[off + i] * xhat[off + i];
            sb += self.grad[off + i];
          }
          gg[c] += sg;
          gb[c] += sb;
        }
    }
    if (!x->requires_grad) return;
    auto& gx = x->grad_buffer();
    std::vector<T> dxh(gsize);
    for (int n = 0; n < xs.n; ++n) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = x->value.index(n, g * cpg, 0, 0);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t i = 0; i < gsize; ++i) {
          const int c = g * cpg + static_cast<int>(i / hw);
          dxh[i] = self.grad[off + i] * gamma->value[c];
          mean_d += dxh[i];
          mean_dx += dxh[i] * xhat[off + i];
        }
        mean_d /= static_cast<double>(gsize);
        mean_dx /= static_cast<double>(gsize);
        const T is = inv_std[n * groups + g];
        for (std::size_t i = 0; i < gsize; ++i) {
          gx[off + i] += is * static_cast<T>(dxh[i] - mean_d - xhat[off + i] * mean_dx);
        }
      }
    }
  });
}

// x: (N, Ci, 1, 1); weight: (Co, Ci, 1, 1); bias: (1, Co, 1, 1).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape xs = x->value.shape();
  const Shape ws = weight->value.shape();
  if (xs.h != 1 || xs.w != 1 || xs.c != ws.c) {
    throw ShapeError("linear: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  ConstMatrixMap<T> xm(x->value.data(), xs.n, xs.c);
  ConstMatrixMap<T> wm(weight->value.data(), ws.n, ws.c);
  Tensor<T> y(Shape{xs.n, ws.n, 1, 1});
  MatrixMap<T> ym(y.data(), xs.n, ws.n);
  ym.noalias() = xm * wm.transpose();
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o) ym(n, o) += bias->value[o];
  return make_result<T>(std::move(y), {x, weight, bias}, [x, weight, bias](Node<T>& self) {
    const Shape xs = x->value.shape();
    const Shape ws = weight->value.shape();
    ConstMatrixMap<T> g(self.grad.data(), xs.n, ws.n);
    ConstMatrixMap<T> xm(x->value.data(), xs.n, xs.c);
    ConstMatrixMap<T> wm(weight->value.data(), ws.n, ws.c);
    if (weight->requires_grad) {
      MatrixMap<T> dw(weight->grad_buffer().data(), ws.n, ws.c);
      dw.noalias() += g.transpose() * xm;
    }
    if (bias->requires_grad) {
      auto& db = bias->grad_buffer();
      for (int o = 0; o < ws.n; ++o) db[o] += g.col(o).sum();
    }
    if (x->requires_grad) {
      MatrixMap<T> dx(x->grad_buffer().data(), xs.n, xs.c);
      dx.noalias() += g * wm;
    }
  });
}

// sum_n weights[n] * mean((pred_n - target_n)^2) / N
template <typename T>
Var<T> weighted_mse(const Var<T>& pred, const Tensor<T>& target, std::span<const double> weights) {
  require_same_shape(pred->value.shape(), target.shape(), "weighted_mse");
  const int n = pred->value.n();
  if (static_cast<int>(weights.size()) != n) throw ShapeError("weighted_mse: one weight per sample required");
  const std::size_t per = pred->value.size() / std::max(n, 1);
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = static_cast<double>(pred->value[b * per + i]) - static_cast<double>(target[b * per + i]);
      s += d * d;
    }
    total += weights[b] * s / static_cast<double>(per);
  }
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(total / n));
  std::vector<double> w(weights.begin(), weights.end());
  return make_result<T>(std::move(y), {pred}, [pred, target, w = std::move(w), per, n](Node<T>& self) {
    auto& g = pred->grad_buffer();
    const double up = static_cast<double>(self.grad[0]);
    for (int b = 0; b < n; ++b) {
      const double scale = up * w[b] * 2.0 / (static_cast<double>(per) * n);
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t k = b * per + i;
        g[k] += static_cast<T>(scale * (static_cast<double>(pred->value[k]) - static_cast<double>(target[k])));
      }
    }
  });
}

}  // namespace maskdiff::nn

namespace maskdiff::nn {

template <typename T>
Var<T> scale(const Var<T>& x, double factor) {
  Tensor<T> y = x->value;
  for (auto& v : y.values()) v = static_cast<T>(factor * static_cast<double>(v));
  return make_result<T>(std::move(y), {x}, [x, factor](Node<T>& self) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(factor * static_cast<double>(self.grad[i]));
  });
}

}  // namespace maskdiff::nn
