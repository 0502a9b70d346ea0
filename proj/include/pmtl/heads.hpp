// The four prediction heads and their routing:
//   segmentation <- fpn_v1   detection <- fpn
//   classification <- global  regression <- global_v1
// Each head emits at its family-wide maximum arity; per-task outputs are
// sliced from the leading channels.

#pragma once

#include <array>

#include "pmtl/bridge.hpp"
#include "pmtl/nn.hpp"

namespace pmtl {

enum class Family { Segmentation, Detection, Classification, Regression };

const char* family_name(Family f);
Family family_from_name(const std::string& name);

struct TaskSpec {
  std::string id;
  Family family = Family::Classification;
  int num_classes = 0;    // Seg: classes incl. background; Cls: labels
  int num_landmarks = 0;  // Reg only
  void validate() const;
};

// P5 projection, three bilinear up-fuse blocks, dropout, 1x1 classifier.
// Consumes the unfused token pyramid (fpn_v1).
class SegHeadV1 {
 public:
  SegHeadV1(ParamRegistry& reg, int width_d, int max_classes, double dropout_rate);

  // Returns sliced logits [B, task classes, out_size, out_size].
  Tensor forward(const std::array<Tensor, 4>& v1, const TaskSpec& task,
                 int out_size, const ForwardCtx& ctx) const;

  int max_classes() const { return max_classes_; }

 private:
  int max_classes_;
  double dropout_rate_;
  Conv2d p5_proj_;
  std::array<Conv2d, 3> up_fuse_;
  Conv2d classifier_;
};

// Anchor-free grid detector on the fused pyramid. Box channels are sigmoid
// activations reordered so x1<=x2 and y1<=y2; objectness stays a raw logit.
class DetHead {
 public:
  struct Out {
    Tensor boxes;       // [B,4,Hg,Wg], channel order x1,y1,x2,y2
    Tensor objectness;  // [B,1,Hg,Wg] logits
  };

  DetHead(ParamRegistry& reg, int width_d);

  Out forward(const FeaturePyramid& fpn) const;

  // Box at the argmax-objectness cell; row-major first on ties.
  static std::array<double, 4> infer(const Out& out, int batch_index = 0);

 private:
  Conv2d stem_;
  std::array<std::array<Conv2d, 2>, 2> blocks_;
  Conv2d out_;
};

// Normalised coordinate channels for a grid: x=(v+0.5)/W, y=(u+0.5)/H.
Tensor coord_channels(int batch, int grid_h, int grid_w);

struct GatedBlock {
  Linear fc1, fc2, gate;
  static GatedBlock make(ParamRegistry& reg, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const;
};

// Lazy projection to a hidden width, layer norm, GELU, two gated-MLP
// residual blocks, linear classifier; slices per-task logits.
class ClsHead {
 public:
  ClsHead(ParamRegistry& reg, int hidden, int max_classes);

  Tensor forward(const Tensor& pooled, const TaskSpec& task) const;

  int max_classes() const { return max_classes_; }

 private:
  int max_classes_;
  mutable LazyLinear proj_;
  LayerNormModule ln_;
  std::array<GatedBlock, 2> blocks_;
  Linear fc_;
};

// Lazy projection, layer norm, GELU, dropout, linear regressor; keeps the
// first 2M outputs and applies a sigmoid.
class RegHead {
 public:
  RegHead(ParamRegistry& reg, int hidden, int max_landmarks, double dropout_rate);

  Tensor forward(const Tensor& pooled, const TaskSpec& task,
                 const ForwardCtx& ctx) const;

  int max_landmarks() const { return max_landmarks_; }

 private:
  int max_landmarks_;
  double dropout_rate_;
  mutable LazyLinear proj_;
  LayerNormModule ln_;
  Linear fc_;
};

}  // namespace pmtl
