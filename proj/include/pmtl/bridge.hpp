// Token-to-pyramid bridge: lazy 1x1 projection to a shared width, the
// four-scale token pyramid, top-down FPN fusion and pooled embeddings.

#pragma once

#include <array>

#include "pmtl/encoder.hpp"
#include "pmtl/nn.hpp"

namespace pmtl {

struct FeaturePyramid {
  std::array<Tensor, 4> levels;  // P2 (finest) .. P5 (coarsest), all width D
};

class FeatureBridge {
 public:
  FeatureBridge(ParamRegistry& reg, int width_d);

  int width() const { return d_; }

  // Per-level lazy 1x1 projection of a hooked map to width D.
  Tensor project(int level, const Tensor& map);

  // Projection + resize to relative scales {1, 1/2, 1/4, 1/8}; the shallowest
  // hook feeds the finest scale. This is the fpn_v1 pathway.
  std::array<Tensor, 4> token_pyramid(const HookedActivations& hooked);

  // Top-down fusion with lateral 1x1 convs and 3x3 smoothing on fused levels.
  FeaturePyramid fuse(const std::array<Tensor, 4>& pyramid) const;

  // e = [GAP(P2); GAP(P3); GAP(P4); GAP(P5)], length 4D.
  static Tensor pool(const std::array<Tensor, 4>& levels);

  // Extents of the four scales for a finest lattice of h x w (ceil halving).
  static std::array<std::pair<int, int>, 4> level_sizes(int h, int w);

 private:
  int d_;
  std::array<LazyConv1x1, 4> proj_;
  std::array<Conv2d, 4> lateral_;
  std::array<Conv2d, 3> smooth_;  // for P2..P4
};

}  // namespace pmtl
