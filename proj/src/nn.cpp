#include "pmtl/nn.hpp"

#include <cmath>

#include "pmtl/checkpoint.hpp"

namespace pmtl {

double ParamRegistry::draw_normal() {
  // Box-Muller, hand-rolled so the draw sequence is pinned by this code alone.
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double u1 = 0.0;
  do {
    u1 = uni(rng_);
  } while (u1 <= 1e-300);
  double u2 = uni(rng_);
  double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * M_PI * u2);
  have_spare_ = true;
  return r * std::cos(2.0 * M_PI * u2);
}

Tensor ParamRegistry::create(const std::string& name, const Shape& shape, Init init,
                             bool decay, bool backbone) {
  if (find(name)) throw Error("param registry: duplicate name " + name);
  int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<size_t>(n));
  switch (init) {
    case Init::Normal002:
      for (auto& v : values) v = 0.02 * draw_normal();
      break;
    case Init::Zeros:
      break;
    case Init::Ones:
      for (auto& v : values) v = 1.0;
      break;
  }
  Tensor t = Tensor::param(shape, std::move(values));
  params_.push_back({name, t, decay, backbone});
  return t;
}

const ParamInfo* ParamRegistry::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamRegistry::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

void ParamRegistry::save(const std::string& path) const {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params_.size());
  for (const auto& p : params_)
    entries.push_back({p.name, p.value.shape(), p.value.data()});
  save_checkpoint(path, entries);
}

void ParamRegistry::load(const std::string& path) {
  auto entries = load_checkpoint(path);
  for (auto& p : params_) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : entries)
      if (e.name == p.name) {
        found = &e;
        break;
      }
    if (!found) throw Error("checkpoint: missing parameter " + p.name);
    if (found->shape != p.value.shape())
      throw Error("checkpoint: shape mismatch for " + p.name + ": have " +
                  shape_str(p.value.shape()) + ", file has " + shape_str(found->shape));
    p.value.mutable_data() = found->values;
  }
}

Linear Linear::make(ParamRegistry& reg, const std::string& name, int in, int out,
                    bool backbone, bool bias) {
  Linear m;
  m.w = reg.create(name + ".weight", {out, in}, Init::Normal002, true, backbone);
  if (bias) m.b = reg.create(name + ".bias", {out}, Init::Zeros, false, backbone);
  return m;
}

LazyLinear LazyLinear::make(ParamRegistry& reg, const std::string& name, int out,
                            bool backbone) {
  LazyLinear m;
  m.reg = &reg;
  m.name = name;
  m.out = out;
  m.backbone = backbone;
  return m;
}

Tensor LazyLinear::operator()(const Tensor& x) {
  int in = x.shape().back();
  if (seen_in < 0) {
    inner = Linear::make(*reg, name, in, out, backbone);
    seen_in = in;
  } else if (in != seen_in) {
    throw Error("lazy linear " + name + ": input width " + std::to_string(in) +
                " does not match materialized width " + std::to_string(seen_in));
  }
  return inner(x);
}

Conv2d Conv2d::make(ParamRegistry& reg, const std::string& name, int in, int out,
                    int k, bool backbone, bool bias) {
  Conv2d m;
  m.w = reg.create(name + ".weight", {out, in, k, k}, Init::Normal002, true, backbone);
  if (bias) m.b = reg.create(name + ".bias", {out}, Init::Zeros, false, backbone);
  return m;
}

LazyConv1x1 LazyConv1x1::make(ParamRegistry& reg, const std::string& name, int out,
                              bool backbone) {
  LazyConv1x1 m;
  m.reg = &reg;
  m.name = name;
  m.out = out;
  m.backbone = backbone;
  return m;
}

Tensor LazyConv1x1::operator()(const Tensor& x) {
  if (x.rank() != 4)
    throw Error("lazy conv " + name + ": need [B,C,H,W], got " + shape_str(x.shape()));
  int in = x.shape()[1];
  if (seen_in < 0) {
    inner = Conv2d::make(*reg, name, in, out, 1, backbone);
    seen_in = in;
  } else if (in != seen_in) {
    throw Error("lazy conv " + name + ": input width " + std::to_string(in) +
                " does not match materialized width " + std::to_string(seen_in));
  }
  return inner(x);
}

LayerNormModule LayerNormModule::make(ParamRegistry& reg, const std::string& name,
                                      int dim, bool backbone) {
  LayerNormModule m;
  m.gain = reg.create(name + ".gain", {dim}, Init::Ones, false, backbone);
  m.bias = reg.create(name + ".bias", {dim}, Init::Zeros, false, backbone);
  return m;
}

}  // namespace pmtl
