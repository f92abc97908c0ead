#pragma once

#include <optional>
#include <string>

#include "maskdiff/nn/ops.hpp"
#include "maskdiff/nn/params.hpp"

namespace maskdiff::nn {

// Largest group count in {8,4,2,1} leaving at least two channels per group.
inline int pick_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0 && channels / g >= 2) return g;
  }
  return 1;
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int in, int out, int k, Rng& rng, bool zero_init = false)
      : weight(zero_init ? ps.add_zeros(name + ".w", Shape{out, in, k, k})
                         : ps.add_weight(name + ".w", Shape{out, in, k, k}, rng)),
        bias(ps.add_zeros(name + ".b", Shape{1, out, 1, 1})) {}

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias); }
};

template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng)
      : weight(ps.add_weight(name + ".w", Shape{out, in, 1, 1}, rng)),
        bias(ps.add_zeros(name + ".b", Shape{1, out, 1, 1})) {}

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& name, int channels)
      : gamma(ps.add_ones(name + ".g", Shape{1, channels, 1, 1})),
        beta(ps.add_zeros(name + ".b", Shape{1, channels, 1, 1})),
        groups(pick_groups(channels)) {}

  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

// GN -> SiLU -> conv, plus a per-channel embedding shift, twice; 1x1 skip when
// the channel count changes.
template <typename T>
struct ResBlock {
  GroupNorm<T> norm1;
  Conv2d<T> conv1;
  std::optional<Linear<T>> emb_proj;
  GroupNorm<T> norm2;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> skip;

  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, int in, int out, int emb_dim, Rng& rng)
      : norm1(ps, name + ".norm1", in),
        conv1(ps, name + ".conv1", in, out, 3, rng),
        norm2(ps, name + ".norm2", out),
        conv2(ps, name + ".conv2", out, out, 3, rng) {
    if (emb_dim > 0) emb_proj.emplace(ps, name + ".emb", emb_dim, out, rng);
    if (in != out) skip.emplace(ps, name + ".skip", in, out, 1, rng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = conv1(silu(norm1(x)));
    if (emb_proj && emb) h = add_channel(h, (*emb_proj)(emb));
    h = conv2(silu(norm2(h)));
    return add(skip ? (*skip)(x) : x, h);
  }
};

// conv -> GN -> SiLU, twice.
template <typename T>
struct ConvBlock {
  Conv2d<T> conv1;
  GroupNorm<T> norm1;
  Conv2d<T> conv2;
  GroupNorm<T> norm2;

  ConvBlock() = default;
  ConvBlock(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng)
      : conv1(ps, name + ".conv1", in, out, 3, rng),
        norm1(ps, name + ".norm1", out),
        conv2(ps, name + ".conv2", out, out, 3, rng),
        norm2(ps, name + ".norm2", out) {}

  Var<T> operator()(const Var<T>& x) const { return silu(norm2(conv2(silu(norm1(conv1(x)))))); }
};

}  // namespace maskdiff::nn
