#pragma once

// Test doubles and brute-force references shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <vector>

#include "maskdiff/conditioning.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/metrics.hpp"

namespace maskdiff::oracle {

// Closed-form schedule written out independently of the library.
inline double ref_log_snr(double t) {
  const double l = -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0));
  if (std::isnan(l)) return -15.0;
  return std::clamp(l, -15.0, 15.0);
}
inline double ref_alpha2(double lambda) { return 1.0 / (1.0 + std::exp(-lambda)); }

// Predicts exactly the eps or v that would be consistent with a fixed target image.
struct OracleDenoiser {
  DenoiserConfig cfg;
  Tensor<double> target;  // (1,C,H,W), broadcast over the batch

  [[nodiscard]] const DenoiserConfig& config() const { return cfg; }
  [[nodiscard]] Parameterization parameterization() const { return cfg.parameterization; }

  Tensor<double> predict(const Tensor<double>& z, std::span<const double> l, const ConditioningBundle<double>&) const {
    Tensor<double> out(z.shape());
    const std::size_t per = target.size();
    for (int n = 0; n < z.n(); ++n) {
      const double lambda = l.size() == 1 ? l[0] : l[n];
      const double a = std::sqrt(ref_alpha2(lambda)), s = std::sqrt(ref_alpha2(-lambda));
      for (std::size_t k = 0; k < per; ++k) {
        const double zv = z[n * per + k], x = target[k];
        const double eps = (zv - a * x) / s;
        out[n * per + k] = cfg.parameterization == Parameterization::v ? a * eps - s * x : eps;
      }
    }
    return out;
  }
};

// Connected components by repeated label propagation (no stack, no union-find).
inline std::vector<int> ref_components(const LabelMap& m, int cls, int& count) {
  const int h = m.height, w = m.width;
  std::vector<int> id(static_cast<std::size_t>(h) * w, -1);
  for (int i = 0; i < h * w; ++i)
    if (m.labels[i] == cls) id[i] = i;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int i = y * w + x;
        if (id[i] < 0) continue;
        const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& p : nb) {
          if (p[0] < 0 || p[0] >= h || p[1] < 0 || p[1] >= w) continue;
          const int j = p[0] * w + p[1];
          if (id[j] >= 0 && id[j] < id[i]) {
            id[i] = id[j];
            changed = true;
          }
        }
      }
  }
  std::map<int, int> relabel;
  for (int& v : id) {
    if (v < 0) continue;
    auto it = relabel.try_emplace(v, static_cast<int>(relabel.size())).first;
    v = it->second;
  }
  count = static_cast<int>(relabel.size());
  return id;
}

inline double ref_dice(const LabelMap& p, const LabelMap& g, int cls) {
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const bool a = p.labels[i] == cls, b = g.labels[i] == cls;
    inter += a && b;
    sp += a;
    sg += b;
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * inter / (sp + sg);
}

struct RefAji {
  double inter = 0, uni = 0;
};

// Greedy AJI computed from pixel sets: every gt instance, in order, takes the
// unused overlapping prediction with the highest IoU.
inline RefAji ref_aji_terms(const LabelMap& p, const LabelMap& g, int cls) {
  int ng = 0, np = 0;
  const auto gi = ref_components(g, cls, ng);
  const auto pi = ref_components(p, cls, np);
  std::vector<std::set<int>> gs(ng), ps(np);
  for (std::size_t i = 0; i < gi.size(); ++i) {
    if (gi[i] >= 0) gs[gi[i]].insert(static_cast<int>(i));
    if (pi[i] >= 0) ps[pi[i]].insert(static_cast<int>(i));
  }
  auto inter = [](const std::set<int>& a, const std::set<int>& b) {
    std::vector<int> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return static_cast<double>(out.size());
  };
  RefAji r;
  std::vector<bool> used(np, false);
  for (int a = 0; a < ng; ++a) {
    int best = -1;
    double best_iou = 0;
    for (int b = 0; b < np; ++b) {
      if (used[b]) continue;
      const double in = inter(gs[a], ps[b]);
      if (in <= 0) continue;
      const double iou = in / (gs[a].size() + ps[b].size() - in);
      if (iou > best_iou) {
        best_iou = iou;
        best = b;
      }
    }
    if (best < 0) {
      r.uni += gs[a].size();
      continue;
    }
    used[best] = true;
    const double in = inter(gs[a], ps[best]);
    r.inter += in;
    r.uni += gs[a].size() + ps[best].size() - in;
  }
  for (int b = 0; b < np; ++b)
    if (!used[b]) r.uni += ps[b].size();
  return r;
}

}  // namespace maskdiff::oracle
