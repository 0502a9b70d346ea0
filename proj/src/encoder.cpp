#include "pmtl/encoder.hpp"

#include <cmath>

namespace pmtl {

void EncoderConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw Error("encoder config: image_size must be a positive multiple of patch_size");
  if (width <= 0 || depth <= 0 || heads <= 0 || width % heads != 0)
    throw Error("encoder config: width must be a positive multiple of heads");
  for (int i = 0; i < 4; ++i) {
    if (hook_depths[i] < 0 || hook_depths[i] >= depth)
      throw Error("encoder config: hook depth out of range");
    if (i > 0 && hook_depths[i] <= hook_depths[i - 1])
      throw Error("encoder config: hook depths must be strictly increasing");
  }
}

ToyEncoder::ToyEncoder(ParamRegistry& reg, const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int C = cfg_.width;
  int patch_dim = 3 * cfg_.patch_size * cfg_.patch_size;
  patch_embed_ = Linear::make(reg, "encoder.patch_embed", patch_dim, C, true);
  pos_embed_ = reg.create("encoder.pos_embed", {1, cfg_.tokens(), C},
                          Init::Normal002, true, true);
  blocks_.reserve(cfg_.depth);
  for (int i = 0; i < cfg_.depth; ++i) {
    std::string p = "encoder.blocks." + std::to_string(i);
    Block blk{
        LayerNormModule::make(reg, p + ".ln1", C, true),
        LayerNormModule::make(reg, p + ".ln2", C, true),
        Linear::make(reg, p + ".attn.qkv", C, 3 * C, true),
        Linear::make(reg, p + ".attn.proj", C, C, true),
        Linear::make(reg, p + ".mlp.fc1", C, 4 * C, true),
        Linear::make(reg, p + ".mlp.fc2", 4 * C, C, true),
    };
    blocks_.push_back(std::move(blk));
  }
}

Tensor ToyEncoder::run_block(const Block& blk, const Tensor& x) const {
  int B = x.shape()[0], N = x.shape()[1], C = x.shape()[2];
  int H = cfg_.heads, d = C / H;
  double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor qkv = blk.qkv(blk.ln1(x));  // [B,N,3C]
  Tensor q = slice(qkv, 2, 0, C);
  Tensor k = slice(qkv, 2, C, C);
  Tensor v = slice(qkv, 2, 2 * C, C);
  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {B, N, H, d}), {0, 2, 1, 3});  // [B,H,N,d]
  };
  q = split_heads(q);
  k = split_heads(k);
  v = split_heads(v);
  Tensor scores = mul_scalar(matmul(q, permute(k, {0, 1, 3, 2})), scale);
  Tensor attn = softmax(scores, -1);
  Tensor ctx = matmul(attn, v);                        // [B,H,N,d]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, N, C});  // merge heads
  Tensor y = add(x, blk.proj(ctx));

  Tensor m = blk.fc2(gelu(blk.fc1(blk.ln2(y))));
  return add(y, m);
}

HookedActivations ToyEncoder::encode(const Tensor& image) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 3)
    throw Error("encode: expected [B,3,S,S], got " + shape_str(s));
  if (s[2] != cfg_.image_size || s[3] != cfg_.image_size)
    throw Error("encode: spatial size " + std::to_string(s[2]) + "x" +
                std::to_string(s[3]) + " does not match configured " +
                std::to_string(cfg_.image_size));
  int B = s[0], ps = cfg_.patch_size, g = cfg_.lattice();
  int N = cfg_.tokens(), C = cfg_.width;

  // [B,3,S,S] -> [B,N, 3*ps*ps] patch rows
  Tensor p = reshape(image, {B, 3, g, ps, g, ps});
  p = permute(p, {0, 2, 4, 1, 3, 5});  // [B,g,g,3,ps,ps]
  p = reshape(p, {B, N, 3 * ps * ps});

  Tensor x = add(patch_embed_(p), pos_embed_);  // pos broadcast over batch
  HookedActivations out;
  out.h = g;
  out.w = g;
  int next_hook = 0;
  for (int i = 0; i < cfg_.depth; ++i) {
    x = run_block(blocks_[i], x);
    if (next_hook < 4 && cfg_.hook_depths[next_hook] == i) {
      out.tokens[next_hook] = x;
      ++next_hook;
    }
  }
  if (next_hook != 4) throw Error("encode: internal hook bookkeeping error");
  (void)C;
  return out;
}

}  // namespace pmtl
