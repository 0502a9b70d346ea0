// Patch-based transformer encoder with forward hooks at four block depths.

#pragma once

#include <array>

#include "pmtl/nn.hpp"

namespace pmtl {

struct EncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int width = 64;  // token channels C
  int depth = 8;
  int heads = 4;
  std::array<int, 4> hook_depths = {1, 3, 5, 7};

  int lattice() const { return image_size / patch_size; }
  int tokens() const { return lattice() * lattice(); }
  void validate() const;
};

struct HookedActivations {
  std::array<Tensor, 4> tokens;  // each [B,N,C], shallow to deep
  int h = 0, w = 0;
};

class ToyEncoder {
 public:
  ToyEncoder(ParamRegistry& reg, const EncoderConfig& cfg);

  // image must be [B,3,S,S] with S == cfg.image_size; no silent resizing.
  HookedActivations encode(const Tensor& image) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Block {
    LayerNormModule ln1, ln2;
    Linear qkv, proj;
    Linear fc1, fc2;
  };
  Tensor run_block(const Block& blk, const Tensor& x) const;

  EncoderConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;  // [1,N,C]
  std::vector<Block> blocks_;
};

}  // namespace pmtl
