// Evaluation metrics (Dice, Hausdorff, AUC, F1, MCC, MRE), the pluggable
// raw-to-normalized mapping, and task/category score aggregation.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

struct MaskImage {
  int w = 0, h = 0;
  std::vector<int> v;  // row-major class indices

  int at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

// Mean over foreground classes of 2|P∩G| / (|P|+|G|); both-empty class -> 1.
double dice_score(const MaskImage& pred, const MaskImage& gt, int num_classes);

// Symmetric Hausdorff distance over full foreground point sets, mean over
// foreground classes. Both empty -> 0; exactly one empty -> image diagonal.
double hausdorff(const MaskImage& pred, const MaskImage& gt, int num_classes);

// scores[i][c] = probability of class c for sample i. Binary (K==2) uses
// rank-based AUC on class-1 scores with half credit for ties; K>2 is the
// macro one-vs-rest mean over classes present in the labels.
double auc_score(const std::vector<std::vector<double>>& scores,
                 const std::vector<int>& labels, int num_classes);

// Macro F1 (empty classes contribute 0) and the multiclass Matthews
// coefficient in covariance form (zero denominator -> 0).
std::pair<double, double> f1_mcc(const std::vector<int>& pred,
                                 const std::vector<int>& gt, int num_classes);

// Mean Euclidean landmark error in pixels at the original resolution; the
// normalised coordinates are scaled by (orig_w, orig_h) per axis.
double mre_pixels(const std::vector<double>& pred_norm,
                  const std::vector<double>& gt_norm, int orig_w, int orig_h);

// ---------------------------------------------------------------------------
// Normalization and aggregation
// ---------------------------------------------------------------------------

struct MetricRange {
  bool higher_better = true;
  double lo = 0.0, hi = 1.0;
};

// Per-metric normalization: identity for metrics already in [0,1]; a clamped
// affine map otherwise. HD and MRE have no default and must be configured.
class Normalizer {
 public:
  static Normalizer defaults();
  static Normalizer from_json_text(const std::string& text);

  void set_identity(const std::string& metric);
  void set_range(const std::string& metric, bool higher_better, double lo, double hi);
  double apply(const std::string& metric, double raw) const;

 private:
  struct Rule {
    bool identity = true;
    MetricRange range;
  };
  std::map<std::string, Rule> rules_;
};

struct SubtaskMetrics {
  std::string id;
  std::string family;
  // Insertion-ordered metric names so reports serialise deterministically.
  std::vector<std::pair<std::string, double>> raw;
  std::vector<std::pair<std::string, double>> norm;
  double task_score = 0.0;
};

struct MetricReport {
  std::vector<SubtaskMetrics> subtasks;
  std::map<std::string, double> categories;
  double overall = 0.0;

  std::string to_json_text() const;
};

// Fills norm/task_score/categories/overall from the raw values.
MetricReport normalize_and_score(const std::vector<SubtaskMetrics>& raw_subtasks,
                                 const Normalizer& norm);

}  // namespace pmtl
