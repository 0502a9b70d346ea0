#include "pmtl/bridge.hpp"

namespace pmtl {

FeatureBridge::FeatureBridge(ParamRegistry& reg, int width_d) : d_(width_d) {
  if (d_ <= 0) throw Error("bridge: width must be positive");
  for (int i = 0; i < 4; ++i)
    proj_[i] = LazyConv1x1::make(reg, "bridge.proj." + std::to_string(i), d_, false);
  for (int i = 0; i < 4; ++i)
    lateral_[i] = Conv2d::make(reg, "bridge.lateral." + std::to_string(i), d_, d_, 1,
                               false);
  for (int i = 0; i < 3; ++i)
    smooth_[i] = Conv2d::make(reg, "bridge.smooth." + std::to_string(i), d_, d_, 3,
                              false);
}

Tensor FeatureBridge::project(int level, const Tensor& map) {
  if (level < 0 || level >= 4) throw Error("bridge: level out of range");
  return proj_[level](map);
}

std::array<std::pair<int, int>, 4> FeatureBridge::level_sizes(int h, int w) {
  std::array<std::pair<int, int>, 4> sizes;
  sizes[0] = {h, w};
  for (int i = 1; i < 4; ++i)
    sizes[i] = {(sizes[i - 1].first + 1) / 2, (sizes[i - 1].second + 1) / 2};
  return sizes;
}

std::array<Tensor, 4> FeatureBridge::token_pyramid(const HookedActivations& hooked) {
  auto sizes = level_sizes(hooked.h, hooked.w);
  std::array<Tensor, 4> out;
  for (int i = 0; i < 4; ++i) {
    Tensor map = tokens_to_map(hooked.tokens[i], hooked.h, hooked.w);
    Tensor p = project(i, map);
    auto [lh, lw] = sizes[i];
    out[i] = (lh == hooked.h && lw == hooked.w) ? p : bilinear_resize(p, lh, lw);
  }
  return out;
}

FeaturePyramid FeatureBridge::fuse(const std::array<Tensor, 4>& pyramid) const {
  FeaturePyramid fp;
  // P5 is the lateral of the coarsest level; finer levels add the upsampled
  // coarser result and pass through a smoothing conv.
  Tensor top = lateral_[3](pyramid[3]);
  fp.levels[3] = top;
  Tensor carry = top;
  for (int i = 2; i >= 0; --i) {
    const Shape& s = pyramid[i].shape();
    Tensor up = bilinear_resize(carry, s[2], s[3]);
    Tensor fused = add(lateral_[i](pyramid[i]), up);
    fp.levels[i] = relu(smooth_[i](fused));
    carry = fp.levels[i];
  }
  return fp;
}

Tensor FeatureBridge::pool(const std::array<Tensor, 4>& levels) {
  std::vector<Tensor> parts;
  parts.reserve(4);
  for (const auto& lv : levels) parts.push_back(global_avg_pool(lv));
  return concat(parts, 1);
}

}  // namespace pmtl
