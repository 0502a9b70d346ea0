#include "pmtl/heads.hpp"

namespace pmtl {

const char* family_name(Family f) {
  switch (f) {
    case Family::Segmentation: return "segmentation";
    case Family::Detection: return "detection";
    case Family::Classification: return "classification";
    case Family::Regression: return "regression";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "segmentation") return Family::Segmentation;
  if (name == "detection") return Family::Detection;
  if (name == "classification") return Family::Classification;
  if (name == "regression") return Family::Regression;
  throw Error("unknown task family: " + name);
}

void TaskSpec::validate() const {
  switch (family) {
    case Family::Segmentation:
      if (num_classes < 2) throw Error("task " + id + ": segmentation needs >=2 classes");
      break;
    case Family::Classification:
      if (num_classes < 2) throw Error("task " + id + ": classification needs >=2 classes");
      break;
    case Family::Regression:
      if (num_landmarks < 1) throw Error("task " + id + ": regression needs >=1 landmark");
      break;
    case Family::Detection:
      break;
  }
}

// ---------------------------------------------------------------------------
// SegHeadV1
// ---------------------------------------------------------------------------

SegHeadV1::SegHeadV1(ParamRegistry& reg, int width_d, int max_classes,
                     double dropout_rate)
    : max_classes_(max_classes), dropout_rate_(dropout_rate) {
  p5_proj_ = Conv2d::make(reg, "seg_head.p5_proj", width_d, width_d, 1, false);
  for (int i = 0; i < 3; ++i)
    up_fuse_[i] = Conv2d::make(reg, "seg_head.up_fuse." + std::to_string(i),
                               2 * width_d, width_d, 3, false);
  classifier_ = Conv2d::make(reg, "seg_head.classifier", width_d, max_classes, 1,
                             false);
}

Tensor SegHeadV1::forward(const std::array<Tensor, 4>& v1, const TaskSpec& task,
                          int out_size, const ForwardCtx& ctx) const {
  if (task.family != Family::Segmentation)
    throw Error("seg head: wrong family for task " + task.id);
  if (task.num_classes > max_classes_)
    throw Error("seg head: task " + task.id + " needs " +
                std::to_string(task.num_classes) + " classes, head emits " +
                std::to_string(max_classes_));
  Tensor x = p5_proj_(v1[3]);
  for (int i = 0; i < 3; ++i) {
    const Tensor& skip = v1[2 - i];  // next finer level
    const Shape& s = skip.shape();
    Tensor up = bilinear_resize(x, s[2], s[3]);
    x = relu(up_fuse_[i](concat({up, skip}, 1)));
  }
  if (ctx.training && ctx.dropout_rng)
    x = dropout(x, dropout_rate_, true, *ctx.dropout_rng);
  Tensor logits = classifier_(x);
  Tensor sliced = slice(logits, 1, 0, task.num_classes);
  return bilinear_resize(sliced, out_size, out_size);
}

// ---------------------------------------------------------------------------
// DetHead
// ---------------------------------------------------------------------------

Tensor coord_channels(int batch, int grid_h, int grid_w) {
  std::vector<double> d(static_cast<size_t>(batch) * 2 * grid_h * grid_w);
  for (int b = 0; b < batch; ++b) {
    double* gx = d.data() + (static_cast<int64_t>(b) * 2) * grid_h * grid_w;
    double* gy = gx + static_cast<int64_t>(grid_h) * grid_w;
    for (int u = 0; u < grid_h; ++u)
      for (int v = 0; v < grid_w; ++v) {
        gx[u * grid_w + v] = (v + 0.5) / grid_w;
        gy[u * grid_w + v] = (u + 0.5) / grid_h;
      }
  }
  return Tensor::from_data({batch, 2, grid_h, grid_w}, std::move(d));
}

DetHead::DetHead(ParamRegistry& reg, int width_d) {
  stem_ = Conv2d::make(reg, "det_head.stem", 3 * width_d + 2, width_d, 3, false);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      blocks_[i][j] = Conv2d::make(
          reg, "det_head.block" + std::to_string(i) + ".conv" + std::to_string(j),
          width_d, width_d, 3, false);
  out_ = Conv2d::make(reg, "det_head.out", width_d, 5, 1, false);
}

DetHead::Out DetHead::forward(const FeaturePyramid& fpn) const {
  const Tensor& p2 = fpn.levels[0];
  const Shape& s = p2.shape();
  int B = s[0], H = s[2], W = s[3];
  Tensor p3 = bilinear_resize(fpn.levels[1], H, W);
  Tensor p4 = bilinear_resize(fpn.levels[2], H, W);
  Tensor x = concat({p2, p3, p4, coord_channels(B, H, W)}, 1);
  x = relu(stem_(x));
  for (int i = 0; i < 2; ++i)
    x = relu(add(x, blocks_[i][1](relu(blocks_[i][0](x)))));
  Tensor raw = out_(x);  // [B,5,H,W]

  Tensor bx = sigmoid(slice(raw, 1, 0, 4));
  Tensor a0 = slice(bx, 1, 0, 1), a1 = slice(bx, 1, 1, 1);
  Tensor a2 = slice(bx, 1, 2, 1), a3 = slice(bx, 1, 3, 1);
  Tensor x1 = minimum(a0, a2), x2 = maximum(a0, a2);
  Tensor y1 = minimum(a1, a3), y2 = maximum(a1, a3);
  Out o;
  o.boxes = concat({x1, y1, x2, y2}, 1);
  o.objectness = slice(raw, 1, 4, 1);
  return o;
}

std::array<double, 4> DetHead::infer(const Out& out, int batch_index) {
  const Shape& s = out.objectness.shape();
  int H = s[2], W = s[3];
  const auto& obj = out.objectness.data();
  int64_t base = static_cast<int64_t>(batch_index) * H * W;
  int64_t best = 0;
  for (int64_t i = 1; i < static_cast<int64_t>(H) * W; ++i)
    if (obj[base + i] > obj[base + best]) best = i;
  const auto& bx = out.boxes.data();
  int64_t plane = static_cast<int64_t>(H) * W;
  int64_t b0 = static_cast<int64_t>(batch_index) * 4 * plane;
  return {bx[b0 + best], bx[b0 + plane + best], bx[b0 + 2 * plane + best],
          bx[b0 + 3 * plane + best]};
}

// ---------------------------------------------------------------------------
// ClsHead / RegHead
// ---------------------------------------------------------------------------

GatedBlock GatedBlock::make(ParamRegistry& reg, const std::string& name, int dim) {
  GatedBlock b;
  b.fc1 = Linear::make(reg, name + ".fc1", dim, 2 * dim, false);
  b.fc2 = Linear::make(reg, name + ".fc2", 2 * dim, dim, false);
  b.gate = Linear::make(reg, name + ".gate", dim, dim, false);
  return b;
}

Tensor GatedBlock::operator()(const Tensor& x) const {
  Tensor branch = fc2(gelu(fc1(x)));
  return add(x, mul(branch, sigmoid(gate(x))));
}

ClsHead::ClsHead(ParamRegistry& reg, int hidden, int max_classes)
    : max_classes_(max_classes) {
  proj_ = LazyLinear::make(reg, "cls_head.proj", hidden, false);
  ln_ = LayerNormModule::make(reg, "cls_head.ln", hidden, false);
  blocks_[0] = GatedBlock::make(reg, "cls_head.block0", hidden);
  blocks_[1] = GatedBlock::make(reg, "cls_head.block1", hidden);
  fc_ = Linear::make(reg, "cls_head.fc", hidden, max_classes, false);
}

Tensor ClsHead::forward(const Tensor& pooled, const TaskSpec& task) const {
  if (task.family != Family::Classification)
    throw Error("cls head: wrong family for task " + task.id);
  if (task.num_classes > max_classes_)
    throw Error("cls head: task " + task.id + " needs " +
                std::to_string(task.num_classes) + " classes, head emits " +
                std::to_string(max_classes_));
  Tensor x = gelu(ln_(proj_(pooled)));
  x = blocks_[0](x);
  x = blocks_[1](x);
  Tensor logits = fc_(x);
  return slice(logits, 1, 0, task.num_classes);
}

RegHead::RegHead(ParamRegistry& reg, int hidden, int max_landmarks,
                 double dropout_rate)
    : max_landmarks_(max_landmarks), dropout_rate_(dropout_rate) {
  proj_ = LazyLinear::make(reg, "reg_head.proj", hidden, false);
  ln_ = LayerNormModule::make(reg, "reg_head.ln", hidden, false);
  fc_ = Linear::make(reg, "reg_head.fc", hidden, 2 * max_landmarks, false);
}

Tensor RegHead::forward(const Tensor& pooled, const TaskSpec& task,
                        const ForwardCtx& ctx) const {
  if (task.family != Family::Regression)
    throw Error("reg head: wrong family for task " + task.id);
  if (task.num_landmarks > max_landmarks_)
    throw Error("reg head: task " + task.id + " needs " +
                std::to_string(task.num_landmarks) + " landmarks, head emits " +
                std::to_string(max_landmarks_));
  Tensor x = gelu(ln_(proj_(pooled)));
  if (ctx.training && ctx.dropout_rng)
    x = dropout(x, dropout_rate_, true, *ctx.dropout_rng);
  Tensor out = fc_(x);
  return sigmoid(slice(out, 1, 0, 2 * task.num_landmarks));
}

}  // namespace pmtl
