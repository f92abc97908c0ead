#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"

namespace maskdiff {

// 2|P∩G| / (|P|+|G|) for class c; 1 when both are empty.
double dice_metric(const LabelMap& pred, const LabelMap& gt, int c);

// Connected components labeled 1..count; 0 is background.
struct InstanceMap {
  int height = 0;
  int width = 0;
  int count = 0;
  std::vector<int> labels;

  [[nodiscard]] int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

// 4-connected components of (mask == c), numbered in raster-scan discovery order.
InstanceMap extract_instances(const LabelMap& mask, int c);

// Numerator and denominator of the aggregated Jaccard index, kept separate so
// several classes of one record can be pooled.
struct AjiTerms {
  double intersection = 0.0;
  double union_ = 0.0;
};

// Greedy gt-driven matching: each gt instance, in ascending label order, takes
// the unused pred instance with the highest IoU (lower label on ties). A gt
// instance without any overlapping unused pred stays unmatched.
AjiTerms aji_terms(const InstanceMap& pred, const InstanceMap& gt);

// AJI of two instance maps; 1 when both are empty.
double aji(const InstanceMap& pred, const InstanceMap& gt);

// AJI of one record with numerators and denominators summed over foreground classes.
double record_aji(const LabelMap& pred, const LabelMap& gt, int num_classes);

struct EvalReport {
  std::string variant;
  std::string split = "all";
  std::map<int, double> per_class_dice;  // foreground classes only
  double dice_all = 0.0;
  double aji_all = 0.0;
  int n = 0;
};

// dice_all: mean over foreground classes of the record-averaged dice.
// aji_all: mean over records of record_aji.
EvalReport evaluate(const std::string& variant, const std::string& split, std::span<const LabelMap> preds,
                    std::span<const LabelMap> gts, int num_classes);

// Plain-text table in the style of the variant matrix, values in percent.
std::string render_table(std::span<const EvalReport> reports, const std::vector<std::string>& class_names = {});
// CSV with header variant,split,dice,aji,n; values are fractions in [0,1].
std::string render_csv(std::span<const EvalReport> reports);

}  // namespace maskdiff
