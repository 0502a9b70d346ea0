#include "pmtl/losses.hpp"

#include <cmath>

namespace pmtl {

LossResult seg_loss(const Tensor& logits, const std::vector<int>& mask,
                    const SegLossConfig& cfg) {
  const Shape& s = logits.shape();
  if (s.size() != 4) throw Error("seg_loss: logits must be [B,C,H,W]");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int64_t hw = static_cast<int64_t>(H) * W;
  if (static_cast<int64_t>(mask.size()) != B * hw)
    throw Error("seg_loss: mask size does not match logits");
  for (int v : mask)
    if (v < 0 || v >= C)
      throw Error("seg_loss: class index " + std::to_string(v) +
                  " out of range [0," + std::to_string(C) + ")");

  // One-hot target and the same with per-class CE weights folded in.
  std::vector<double> onehot(static_cast<size_t>(B) * C * hw, 0.0);
  std::vector<double> weighted(static_cast<size_t>(B) * C * hw, 0.0);
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      int c = mask[b * hw + i];
      int64_t at = (static_cast<int64_t>(b) * C + c) * hw + i;
      onehot[at] = 1.0;
      weighted[at] = c == 0 ? cfg.background_weight : 1.0;
    }
  Tensor g = Tensor::from_data(s, std::move(onehot));
  Tensor wg = Tensor::from_data(s, std::move(weighted));

  Tensor ls = log_softmax(logits, 1);
  Tensor ce = mul_scalar(sum(mul(wg, ls)), -1.0 / (static_cast<double>(B) * hw));

  Tensor p = softmax(logits, 1);
  Tensor dice_acc;
  for (int c = 1; c < C; ++c) {
    Tensor pc = slice(p, 1, c, 1);
    Tensor gc = slice(g, 1, c, 1);
    Tensor num = add_scalar(mul_scalar(sum(mul(pc, gc)), 2.0), cfg.dice_eps);
    Tensor den = add_scalar(add(sum(pc), sum(gc)), cfg.dice_eps);
    Tensor term = divide(num, den);
    dice_acc = dice_acc.defined() ? add(dice_acc, term) : term;
  }
  Tensor dice;
  if (dice_acc.defined())
    dice = sub_from(1.0, mul_scalar(dice_acc, 1.0 / std::max(1, C - 1)));
  else
    dice = Tensor::scalar(0.0);

  LossResult r;
  r.loss = add(ce, dice);
  r.bd.ce = ce.item();
  r.bd.dice = dice.item();
  r.bd.total = r.loss.item();
  return r;
}

LossResult cls_loss(const Tensor& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw Error("cls_loss: logits must be [B,K]");
  int B = s[0], K = s[1];
  if (static_cast<int>(labels.size()) != B)
    throw Error("cls_loss: label count does not match batch");
  std::vector<double> onehot(static_cast<size_t>(B) * K, 0.0);
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K)
      throw Error("cls_loss: label " + std::to_string(labels[b]) +
                  " out of range [0," + std::to_string(K) + ")");
    onehot[static_cast<size_t>(b) * K + labels[b]] = 1.0;
  }
  Tensor g = Tensor::from_data(s, std::move(onehot));
  Tensor ce = mul_scalar(sum(mul(g, log_softmax(logits, 1))), -1.0 / B);
  LossResult r;
  r.loss = ce;
  r.bd.ce = ce.item();
  r.bd.total = r.bd.ce;
  return r;
}

LossResult reg_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw Error("reg_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                shape_str(target.shape()));
  Tensor l = mean(smooth_l1(sub(pred, target), 1.0));
  LossResult r;
  r.loss = l;
  r.bd.smooth_l1 = l.item();
  r.bd.total = r.bd.smooth_l1;
  return r;
}

std::vector<std::pair<int, int>> det_positive_cells(
    const std::array<double, 4>& gt, int grid_h, int grid_w) {
  std::vector<std::pair<int, int>> pos;
  for (int u = 0; u < grid_h; ++u)
    for (int v = 0; v < grid_w; ++v) {
      double gx = (v + 0.5) / grid_w;
      double gy = (u + 0.5) / grid_h;
      if (gx >= gt[0] && gx <= gt[2] && gy >= gt[1] && gy <= gt[3])
        pos.emplace_back(u, v);
    }
  if (pos.empty()) {
    double cx = 0.5 * (gt[0] + gt[2]);
    double cy = 0.5 * (gt[1] + gt[3]);
    int best_u = 0, best_v = 0;
    double best_d = 1e300;
    for (int u = 0; u < grid_h; ++u)
      for (int v = 0; v < grid_w; ++v) {
        double dx = (v + 0.5) / grid_w - cx;
        double dy = (u + 0.5) / grid_h - cy;
        double d = dx * dx + dy * dy;
        if (d < best_d) {
          best_d = d;
          best_u = u;
          best_v = v;
        }
      }
    pos.emplace_back(best_u, best_v);
  }
  return pos;
}

double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  double inter = ix * iy;
  double ua = std::max(0.0, a[2] - a[0]) * std::max(0.0, a[3] - a[1]);
  double ub = std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
  double uni = ua + ub - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

namespace {

Tensor const_map(int h, int w, double v) {
  return Tensor::full({1, 1, h, w}, v);
}

}  // namespace

LossResult det_loss(const Tensor& boxes, const Tensor& objectness,
                    const std::vector<std::array<double, 4>>& gt,
                    const DetLossConfig& cfg) {
  const Shape& sb = boxes.shape();
  const Shape& so = objectness.shape();
  if (sb.size() != 4 || sb[1] != 4) throw Error("det_loss: boxes must be [B,4,H,W]");
  if (so.size() != 4 || so[1] != 1 || so[0] != sb[0] || so[2] != sb[2] ||
      so[3] != sb[3])
    throw Error("det_loss: objectness must be [B,1,H,W] matching boxes");
  int B = sb[0], H = sb[2], W = sb[3];
  if (static_cast<int>(gt.size()) != B)
    throw Error("det_loss: need one gt box per batch entry");

  Tensor obj_total, box_total, iou_total;
  for (int b = 0; b < B; ++b) {
    auto pos = det_positive_cells(gt[b], H, W);
    int64_t n_pos = static_cast<int64_t>(pos.size());
    int64_t n_neg = static_cast<int64_t>(H) * W - n_pos;
    double rho = std::min(std::max(static_cast<double>(n_neg) / n_pos, 1.0), 50.0);

    std::vector<double> target(static_cast<size_t>(H) * W, 0.0);
    std::vector<double> weight(static_cast<size_t>(H) * W, 1.0);
    std::vector<double> pos_mask(static_cast<size_t>(H) * W, 0.0);
    for (auto [u, v] : pos) {
      target[static_cast<size_t>(u) * W + v] = 1.0;
      weight[static_cast<size_t>(u) * W + v] = rho;
      pos_mask[static_cast<size_t>(u) * W + v] = 1.0;
    }
    Tensor t = Tensor::from_data({1, 1, H, W}, std::move(target));
    Tensor w = Tensor::from_data({1, 1, H, W}, std::move(weight));
    Tensor pm = Tensor::from_data({1, 1, H, W}, std::move(pos_mask));

    Tensor obj_b = B == 1 ? objectness : slice(objectness, 0, b, 1);
    Tensor obj_l = mean(bce_with_logits(obj_b, t, w));

    Tensor boxes_b = B == 1 ? boxes : slice(boxes, 0, b, 1);
    Tensor x1 = slice(boxes_b, 1, 0, 1), y1 = slice(boxes_b, 1, 1, 1);
    Tensor x2 = slice(boxes_b, 1, 2, 1), y2 = slice(boxes_b, 1, 3, 1);

    // SmoothL1 over the 4 coords, mean over coords and positive cells.
    Tensor resid = concat({add_scalar(x1, -gt[b][0]), add_scalar(y1, -gt[b][1]),
                           add_scalar(x2, -gt[b][2]), add_scalar(y2, -gt[b][3])},
                          1);
    std::vector<double> pm4;
    pm4.reserve(static_cast<size_t>(4) * H * W);
    for (int c = 0; c < 4; ++c)
      pm4.insert(pm4.end(), pm.data().begin(), pm.data().end());
    Tensor pos_mask4 = Tensor::from_data({1, 4, H, W}, std::move(pm4));
    Tensor box_l = mul_scalar(sum(mul(smooth_l1(resid, cfg.smooth_l1_beta), pos_mask4)),
                              1.0 / (4.0 * n_pos));

    // IoU over positive cells, fully vectorised across the grid.
    Tensor ix1 = maximum(x1, const_map(H, W, gt[b][0]));
    Tensor iy1 = maximum(y1, const_map(H, W, gt[b][1]));
    Tensor ix2 = minimum(x2, const_map(H, W, gt[b][2]));
    Tensor iy2 = minimum(y2, const_map(H, W, gt[b][3]));
    Tensor iw = clamp(sub(ix2, ix1), 0.0, 1e30);
    Tensor ih = clamp(sub(iy2, iy1), 0.0, 1e30);
    Tensor inter = mul(iw, ih);
    Tensor area_p = mul(sub(x2, x1), sub(y2, y1));
    double area_g = std::max(0.0, gt[b][2] - gt[b][0]) *
                    std::max(0.0, gt[b][3] - gt[b][1]);
    Tensor uni = add_scalar(sub(add_scalar(area_p, area_g), inter), 1e-12);
    Tensor iou_map = divide(inter, uni);
    Tensor iou_l = mul_scalar(sum(mul(sub_from(1.0, iou_map), pm)),
                              1.0 / static_cast<double>(n_pos));

    obj_total = obj_total.defined() ? add(obj_total, obj_l) : obj_l;
    box_total = box_total.defined() ? add(box_total, box_l) : box_l;
    iou_total = iou_total.defined() ? add(iou_total, iou_l) : iou_l;
  }
  if (B > 1) {
    obj_total = mul_scalar(obj_total, 1.0 / B);
    box_total = mul_scalar(box_total, 1.0 / B);
    iou_total = mul_scalar(iou_total, 1.0 / B);
  }
  Tensor total = add(obj_total,
                     add(mul_scalar(box_total, cfg.lambda_box),
                         mul_scalar(iou_total, cfg.lambda_iou)));
  LossResult r;
  r.loss = total;
  r.bd.obj = obj_total.item();
  r.bd.box = box_total.item();
  r.bd.iou = iou_total.item();
  r.bd.total = total.item();
  return r;
}

UncertaintyState UncertaintyState::make(ParamRegistry& reg) {
  UncertaintyState s;
  s.s_cls = reg.create("uncertainty.s_cls", {}, Init::Zeros, false, false);
  s.s_det = reg.create("uncertainty.s_det", {}, Init::Zeros, false, false);
  return s;
}

const Tensor& UncertaintyState::scalar_for(Family f) const {
  if (f == Family::Classification) return s_cls;
  if (f == Family::Detection) return s_det;
  throw Error("uncertainty reweighting applies to classification/detection only");
}

double UncertaintyState::sigma(Family f) const {
  double s = scalar_for(f).item();
  return 1.0 + (std::max(s, 0.0) + std::log1p(std::exp(-std::fabs(s))));
}

Tensor uncertainty_reweight(const Tensor& raw, Family family,
                            const UncertaintyState& state) {
  const Tensor& s = state.scalar_for(family);
  Tensor sigma = add_scalar(softplus(s), 1.0);
  Tensor inv = divide(raw, mul_scalar(mul(sigma, sigma), 2.0));
  return add(inv, log(sigma));
}

}  // namespace pmtl
