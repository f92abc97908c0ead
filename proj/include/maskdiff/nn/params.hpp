#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "maskdiff/nn/graph.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff::nn {

// Ordered, named collection of trainable tensors. Registration order is the
// serialization order.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, parameter(std::move(init)));
    return entries_.back().second;
  }

  // Fan-in scaled uniform init for conv/linear weights of shape (Co, Ci, k, k).
  Var<T> add_weight(const std::string& name, Shape shape, Rng& rng, double gain = 1.0) {
    Tensor<T> t(shape);
    const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
    const double bound = gain * std::sqrt(3.0 / fan_in);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(t));
  }
  Var<T> add_zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>(shape)); }
  Var<T> add_ones(const std::string& name, Shape shape) { return add(name, Tensor<T>(shape, T(1))); }

  [[nodiscard]] const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.size();
    return n;
  }
  [[nodiscard]] Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) > 0; }

  void zero_grad() {
    for (auto& [name, v] : entries_) v->zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

// Adam over a ParamStore. Moments are kept per parameter name so they can be
// checkpointed alongside the weights.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  void set_lr(double lr) { opts_.lr = lr; }
  [[nodiscard]] double lr() const { return opts_.lr; }
  [[nodiscard]] long long steps() const { return step_; }

  void step(ParamStore<T>& params) {
    ++step_;
    double scale = 1.0;
    if (opts_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, p] : params.entries())
        for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > opts_.clip_norm) scale = opts_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (const auto& [name, p] : params.entries()) {
      if (p->grad.empty()) continue;
      auto& [m, v] = moments_[name];
      if (m.size() != p->value.size()) {
        m.assign(p->value.size(), 0.0);
        v.assign(p->value.size(), 0.0);
      }
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double g = scale * static_cast<double>(p->grad[i]);
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
        const double upd = opts_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opts_.eps);
        p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - upd);
      }
    }
  }

  using Moments = std::pair<std::vector<double>, std::vector<double>>;
  [[nodiscard]] const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(long long step, std::map<std::string, Moments> moments) {
    step_ = step;
    moments_ = std::move(moments);
  }

 private:
  AdamOptions opts_;
  long long step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace maskdiff::nn
