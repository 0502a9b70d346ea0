// Dense double-precision tensors with reverse-mode autodiff.
//
// A Tensor is a shared handle to a Node holding row-major data, an optional
// gradient buffer and, for op outputs, a backward closure plus links to the
// tracked inputs. backward() materialises the tape (reverse topological
// order) and runs each closure exactly once. Leaf gradients accumulate
// across backward() calls; interior gradients are reset per call.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmtl {

using Shape = std::vector<int>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;  // set on leaf parameters only
  std::vector<double> grad;    // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents
  const char* op = "leaf";

  bool tracked() const { return requires_grad || static_cast<bool>(backward_fn); }
  std::vector<double>& grad_buf();  // allocates zeros on demand
};

// Thread-local switch; when off, ops run forward-only (no tape is built).
struct GradMode {
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);
  static Tensor from_data(const Shape& s, std::vector<double> d);
  static Tensor scalar(double v);
  // Leaf with requires_grad set; the unit every optimizer state attaches to.
  static Tensor param(const Shape& s, std::vector<double> d);
  static Tensor wrap(std::shared_ptr<Node> n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;
  double item() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();  // in-place update of leaf values
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& grad_buf();
  void zero_grad();

  // Reverse pass from a scalar. Repeated calls accumulate into leaf grads.
  void backward() const;

  Node* node() const { return node_.get(); }
  std::shared_ptr<Node> node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of the executed ops reachable from a root: every entry
// appears after all entries producing its inputs.
struct GradTape {
  struct Entry {
    const Node* out;
    const char* op;
    std::vector<const Node*> inputs;
  };
  std::vector<Entry> entries;
};
GradTape trace(const Tensor& root);

// ---------------------------------------------------------------------------
// Forward op suite. Binary elementwise ops require identical shapes, except
// that the right operand may carry extent 1 on the leading axis (the batch
// broadcast used by positional embeddings).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor sub_from(double s, const Tensor& a);  // s - a

// A [..., M, K] x B [..., K, N]; leading dims must match, or B may be rank-2
// and is then shared across the leading dims of A.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] -> [..., out] with w [out, in]; pass an undefined bias to skip.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// x [B,Cin,H,W], w [Cout,Cin,k,k] (odd k), stride 1, zero padding (k-1)/2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
// Last-axis normalisation with learnable gain/bias vectors.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Half-pixel-center sampling, edge clamped; identity at equal size.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor global_avg_pool(const Tensor& x);  // [B,C,H,W] -> [B,C]
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor sum(const Tensor& a);   // -> rank-0 scalar
Tensor mean(const Tensor& a);  // -> rank-0 scalar
Tensor clamp(const Tensor& a, double lo, double hi);
// Elementwise SmoothL1 of a residual: |r|<beta -> r^2/(2 beta), else |r|-beta/2.
Tensor smooth_l1(const Tensor& residual, double beta);
// Elementwise stable BCE on logits; targets/pos_weight are plain constants
// (no gradient flows into them). Weight multiplies the positive term only.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets,
                       const Tensor& pos_weight);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor dropout(const Tensor& a, double p, bool training, std::mt19937_64& rng);
// [B,N,C] -> [B,C,h,w]; element (b,n,c) lands at (b,c,n/w,n%w).
Tensor tokens_to_map(const Tensor& tokens, int h, int w);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

// 1-D resampling plan shared by the tensor op and plain image resizing so
// both use the same half-pixel convention.
struct ResizeTap {
  int i0, i1;
  double w0, w1;
};
std::vector<ResizeTap> make_resize_plan(int in_size, int out_size);

}  // namespace pmtl
