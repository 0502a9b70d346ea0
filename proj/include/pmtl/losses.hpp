// Training objectives: weighted CE + soft Dice for segmentation, plain CE
// for classification, SmoothL1 for regression, the grid detector's
// BCE/SmoothL1/IoU combination, and uncertainty-based reweighting.

#pragma once

#include <array>
#include <optional>

#include "pmtl/heads.hpp"
#include "pmtl/tensor.hpp"

namespace pmtl {

struct LossBreakdown {
  std::string task_id;
  double ce = 0, dice = 0, obj = 0, box = 0, iou = 0, smooth_l1 = 0;
  double total = 0;
};

struct LossResult {
  Tensor loss;  // scalar, differentiable
  LossBreakdown bd;
};

struct SegLossConfig {
  double background_weight = 0.2;
  double dice_eps = 1e-5;
};

// mask holds class indices, row-major [B,H,W]; values must lie in [0,C).
LossResult seg_loss(const Tensor& logits, const std::vector<int>& mask,
                    const SegLossConfig& cfg = {});

LossResult cls_loss(const Tensor& logits, const std::vector<int>& labels);

// target is a plain constant with the same shape as pred; SmoothL1 beta=1.
LossResult reg_loss(const Tensor& pred, const Tensor& target);

struct DetLossConfig {
  double lambda_box = 1.0;
  double lambda_iou = 1.0;
  double smooth_l1_beta = 0.05;
};

// gt boxes are normalised, ordered (x1,y1,x2,y2), one per batch entry.
LossResult det_loss(const Tensor& boxes, const Tensor& objectness,
                    const std::vector<std::array<double, 4>>& gt,
                    const DetLossConfig& cfg = {});

// Positive cells for one sample: grid centers inside the gt box; when none
// falls inside, the cell whose center is nearest the box center is promoted.
std::vector<std::pair<int, int>> det_positive_cells(
    const std::array<double, 4>& gt, int grid_h, int grid_w);

// Plain IoU of ordered boxes; union of measure zero gives 0.
double iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

struct UncertaintyState {
  Tensor s_cls, s_det;  // learnable scalars, init 0

  static UncertaintyState make(ParamRegistry& reg);
  const Tensor& scalar_for(Family f) const;
  double sigma(Family f) const;  // 1 + softplus(s)
};

// L~ = L / (2 sigma^2) + log(sigma); classification and detection only.
Tensor uncertainty_reweight(const Tensor& raw, Family family,
                            const UncertaintyState& state);

}  // namespace pmtl
