// Parameter registry and the small module zoo the model is assembled from.
// Registration order is the checkpoint/optimizer order, so lazily created
// modules must be materialised in a fixed forward order.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

enum class Init { Normal002, Zeros, Ones };

struct ParamInfo {
  std::string name;
  Tensor value;
  bool decay = false;     // weight decay applies
  bool backbone = false;  // encoder learning-rate group
};

class ParamRegistry {
 public:
  explicit ParamRegistry(uint64_t seed) : rng_(seed ^ 0x9e3779b97f4a7c15ull) {}

  Tensor create(const std::string& name, const Shape& shape, Init init,
                bool decay, bool backbone);

  const std::vector<ParamInfo>& params() const { return params_; }
  std::vector<ParamInfo>& params() { return params_; }
  const ParamInfo* find(const std::string& name) const;

  void zero_grads();
  void save(const std::string& path) const;
  // Loads by name; every registered parameter must be present with a
  // matching shape.
  void load(const std::string& path);

 private:
  double draw_normal();
  std::vector<ParamInfo> params_;
  std::mt19937_64 rng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

struct ForwardCtx {
  bool training = false;
  std::mt19937_64* dropout_rng = nullptr;
};

struct Linear {
  Tensor w, b;
  static Linear make(ParamRegistry& reg, const std::string& name, int in, int out,
                     bool backbone, bool bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

// Materialises on first call, recording the input width it saw; later calls
// must match it.
struct LazyLinear {
  ParamRegistry* reg = nullptr;
  std::string name;
  int out = 0;
  bool backbone = false;
  Linear inner;
  int seen_in = -1;

  static LazyLinear make(ParamRegistry& reg, const std::string& name, int out,
                         bool backbone);
  Tensor operator()(const Tensor& x);
  bool materialized() const { return seen_in >= 0; }
};

struct Conv2d {
  Tensor w, b;
  static Conv2d make(ParamRegistry& reg, const std::string& name, int in, int out,
                     int k, bool backbone, bool bias = true);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b); }
};

struct LazyConv1x1 {
  ParamRegistry* reg = nullptr;
  std::string name;
  int out = 0;
  bool backbone = false;
  Conv2d inner;
  int seen_in = -1;

  static LazyConv1x1 make(ParamRegistry& reg, const std::string& name, int out,
                          bool backbone);
  Tensor operator()(const Tensor& x);
  bool materialized() const { return seen_in >= 0; }
};

struct LayerNormModule {
  Tensor gain, bias;
  static LayerNormModule make(ParamRegistry& reg, const std::string& name, int dim,
                              bool backbone);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

}  // namespace pmtl
