#include "maskdiff/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "maskdiff/errors.hpp"

namespace maskdiff {

namespace {

void require_same_dims(const LabelMap& a, const LabelMap& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask shapes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace

double dice_metric(const LabelMap& pred, const LabelMap& gt, int c) {
  require_same_dims(pred, gt);
  if (c < 0 || c > 255) throw DomainError("invalid class index " + std::to_string(c));
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == c, b = gt.labels[i] == c;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

InstanceMap extract_instances(const LabelMap& mask, int c) {
  InstanceMap out{mask.height, mask.width, 0, std::vector<int>(mask.labels.size(), 0)};
  std::vector<int> stack;
  const int w = mask.width, h = mask.height;
  for (int start = 0; start < h * w; ++start) {
    if (mask.labels[start] != c || out.labels[start] != 0) continue;
    const int id = ++out.count;
    out.labels[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      const int y = i / w, x = i % w;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& [ny, nx] : nb) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        if (mask.labels[j] == c && out.labels[j] == 0) {
          out.labels[j] = id;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

AjiTerms aji_terms(const InstanceMap& pred, const InstanceMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("instance map shapes differ");
  const int np = pred.count, ng = gt.count;
  std::vector<long long> area_p(np + 1, 0), area_g(ng + 1, 0);
  std::vector<long long> inter(static_cast<std::size_t>(np + 1) * (ng + 1), 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    ++area_p[p];
    ++area_g[g];
    ++inter[static_cast<std::size_t>(g) * (np + 1) + p];
  }
  std::vector<bool> used(np + 1, false);
  AjiTerms t;
  for (int g = 1; g <= ng; ++g) {
    int best = 0;
    double best_iou = 0.0;
    for (int p = 1; p <= np; ++p) {
      if (used[p]) continue;
      const long long i = inter[static_cast<std::size_t>(g) * (np + 1) + p];
      if (i == 0) continue;
      const double iou = static_cast<double>(i) / static_cast<double>(area_g[g] + area_p[p] - i);
      if (iou > best_iou) {
        best_iou = iou;
        best = p;
      }
    }
    if (best == 0) {
      t.union_ += static_cast<double>(area_g[g]);
      continue;
    }
    used[best] = true;
    const long long i = inter[static_cast<std::size_t>(g) * (np + 1) + best];
    t.intersection += static_cast<double>(i);
    t.union_ += static_cast<double>(area_g[g] + area_p[best] - i);
  }
  for (int p = 1; p <= np; ++p)
    if (!used[p]) t.union_ += static_cast<double>(area_p[p]);
  return t;
}

double aji(const InstanceMap& pred, const InstanceMap& gt) {
  const AjiTerms t = aji_terms(pred, gt);
  return t.union_ == 0.0 ? 1.0 : t.intersection / t.union_;
}

double record_aji(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  require_same_dims(pred, gt);
  AjiTerms total;
  for (int c = 1; c < num_classes; ++c) {
    const AjiTerms t = aji_terms(extract_instances(pred, c), extract_instances(gt, c));
    total.intersection += t.intersection;
    total.union_ += t.union_;
  }
  return total.union_ == 0.0 ? 1.0 : total.intersection / total.union_;
}

EvalReport evaluate(const std::string& variant, const std::string& split, std::span<const LabelMap> preds,
                    std::span<const LabelMap> gts, int num_classes) {
  if (gts.empty()) throw ValidationError("evaluation needs a non-empty test set");
  if (preds.size() != gts.size()) throw ShapeError("prediction and ground-truth counts differ");
  if (num_classes < 2) throw ValidationError("evaluation needs at least one foreground class");
  EvalReport r;
  r.variant = variant;
  r.split = split;
  r.n = static_cast<int>(gts.size());
  for (int c = 1; c < num_classes; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < gts.size(); ++i) s += dice_metric(preds[i], gts[i], c);
    r.per_class_dice[c] = s / static_cast<double>(gts.size());
    r.dice_all += r.per_class_dice[c];
  }
  r.dice_all /= static_cast<double>(num_classes - 1);
  for (std::size_t i = 0; i < gts.size(); ++i) r.aji_all += record_aji(preds[i], gts[i], num_classes);
  r.aji_all /= static_cast<double>(gts.size());
  return r;
}

std::string render_table(std::span<const EvalReport> reports, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  char buf[64];
  std::vector<int> classes;
  if (!reports.empty())
    for (const auto& [c, v] : reports.front().per_class_dice) classes.push_back(c);
  auto class_label = [&](int c) {
    return c < static_cast<int>(class_names.size()) ? class_names[c] : "class" + std::to_string(c);
  };
  std::snprintf(buf, sizeof buf, "%-8s %-8s %9s %9s %5s", "Variant", "Split", "Dice (%)", "AJI (%)", "n");
  os << buf;
  for (int c : classes) {
    std::snprintf(buf, sizeof buf, " %12s", class_label(c).substr(0, 12).c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-8s %-8s %9.1f %9.1f %5d", ("(" + r.variant + ")").c_str(), r.split.c_str(),
                  100.0 * r.dice_all, 100.0 * r.aji_all, r.n);
    os << buf;
    for (int c : classes) {
      auto it = r.per_class_dice.find(c);
      std::snprintf(buf, sizeof buf, " %12.1f", it == r.per_class_dice.end() ? 0.0 : 100.0 * it->second);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string render_csv(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os << "variant,split,dice,aji,n\n";
  char buf[128];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%d\n", r.variant.c_str(), r.split.c_str(), r.dice_all, r.aji_all,
                  r.n);
    os << buf;
  }
  return os.str();
}

}  // namespace maskdiff
