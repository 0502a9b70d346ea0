#include "pmtl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace pmtl {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::vector<double>& Node::grad_buf() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw Error(std::string(op) + ": " + msg);
}

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(op, "undefined tensor operand");
}

// Builds an op output node. Only tracked inputs become parents; the backward
// closure is attached only when the tape is live and some input is tracked.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               const std::vector<Tensor>& inputs,
               std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool any_tracked = false;
  for (const auto& t : inputs)
    if (t.defined() && t.node()->tracked()) any_tracked = true;
  if (g_grad_enabled && any_tracked) {
    for (const auto& t : inputs)
      if (t.defined() && t.node()->tracked()) n->parents.push_back(t.node_ptr());
    Node* raw = n.get();
    n->backward_fn = [raw, fn = std::move(bw)]() { fn(*raw); };
  }
  return Tensor::wrap(n);
}

void accum(const std::shared_ptr<Node>& p, int64_t i, double v) {
  p->grad_buf()[i] += v;
}

bool is_tracked(const Tensor& t) { return t.defined() && t.node()->tracked(); }

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s) { return full(s, 0.0); }

Tensor Tensor::full(const Shape& s, double v) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data.assign(static_cast<size_t>(shape_numel(s)), v);
  return wrap(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> d) {
  if (shape_numel(s) != static_cast<int64_t>(d.size()))
    throw Error("from_data: shape " + shape_str(s) + " does not match " +
                std::to_string(d.size()) + " values");
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data = std::move(d);
  return wrap(n);
}

Tensor Tensor::scalar(double v) {
  auto n = std::make_shared<Node>();
  n->data.assign(1, v);
  return wrap(n);
}

Tensor Tensor::param(const Shape& s, std::vector<double> d) {
  Tensor t = from_data(s, std::move(d));
  t.node()->requires_grad = true;
  return t;
}

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(node_->data.size()); }

double Tensor::item() const {
  if (numel() != 1) throw Error("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

const std::vector<double>& Tensor::data() const { return node_->data; }
std::vector<double>& Tensor::mutable_data() { return node_->data; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) throw Error("grad: no gradient on this tensor");
  return node_->grad;
}
std::vector<double>& Tensor::grad_buf() { return node_->grad_buf(); }
void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

namespace {

// Iterative post-order DFS: children (parents in graph terms) first.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [nd, idx] = stack.back();
    if (done.count(nd)) {
      stack.pop_back();
      continue;
    }
    if (idx < nd->parents.size()) {
      Node* p = nd->parents[idx++].get();
      if (!done.count(p)) stack.emplace_back(p, 0);
    } else {
      done.insert(nd);
      order.push_back(nd);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void Tensor::backward() const {
  if (!defined()) throw Error("backward: undefined tensor");
  if (numel() != 1)
    throw Error("backward: loss must be scalar, got shape " + shape_str(shape()));
  std::vector<Node*> order = topo_order(node_.get());
  // Interior grads are per-pass scratch; leaf grads persist and accumulate.
  for (Node* nd : order)
    if (nd->backward_fn) nd->grad.assign(nd->data.size(), 0.0);
  node_->grad_buf()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn();
  }
}

GradTape trace(const Tensor& root) {
  GradTape tape;
  if (!root.defined()) return tape;
  for (Node* nd : topo_order(root.node())) {
    if (!nd->backward_fn) continue;
    GradTape::Entry e;
    e.out = nd;
    e.op = nd->op;
    for (const auto& p : nd->parents) e.inputs.push_back(p.get());
    tape.entries.push_back(std::move(e));
  }
  return tape;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace {

// Shapes must match, or b may have extent 1 on axis 0 with equal trailing
// extents (batch broadcast). Returns the per-batch block size of b, or -1.
int64_t broadcast_block(const char* op, const Shape& sa, const Shape& sb) {
  if (sa == sb) return -1;
  if (!sa.empty() && sa.size() == sb.size() && sb[0] == 1) {
    bool ok = true;
    for (size_t i = 1; i < sa.size(); ++i) ok = ok && sa[i] == sb[i];
    if (ok) return shape_numel(sb);
  }
  fail(op, "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
}

template <class FwdFn, class BwdFn>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, FwdFn fwd,
                 BwdFn bwd) {
  check_defined(op, a);
  check_defined(op, b);
  const auto& da = a.data();
  const auto& db = b.data();
  int64_t block = broadcast_block(op, a.shape(), b.shape());
  std::vector<double> out(da.size());
  if (block < 0) {
    for (size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i], db[i]);
  } else {
    for (size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i], db[i % block]);
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(op, a.shape(), std::move(out), {a, b}, [an, bn, block, bwd](Node& n) {
    const auto& g = n.grad;
    bool ta = an->tracked(), tb = bn->tracked();
    for (size_t i = 0; i < g.size(); ++i) {
      size_t j = block < 0 ? i : i % static_cast<size_t>(block);
      auto [ga, gb] = bwd(an->data[i], bn->data[j], g[i]);
      if (ta) accum(an, i, ga);
      if (tb) accum(bn, j, gb);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g) {
        return std::pair{g / y, -g * x / (y * y)};
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "max", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g) {
        return x >= y ? std::pair{g, 0.0} : std::pair{0.0, g};
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "min", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g) {
        return x <= y ? std::pair{g, 0.0} : std::pair{0.0, g};
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace {

template <class FwdFn, class BwdFn>
Tensor unary_ew(const char* op, const Tensor& a, FwdFn fwd, BwdFn bwd) {
  check_defined(op, a);
  const auto& da = a.data();
  std::vector<double> out(da.size());
  for (size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i]);
  auto an = a.node_ptr();
  return make_op(op, a.shape(), std::move(out), {a}, [an, bwd](Node& n) {
    auto& ga = an->grad_buf();
    for (size_t i = 0; i < n.grad.size(); ++i)
      ga[i] += bwd(an->data[i], n.data[i], n.grad[i]);
  });
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
  return unary_ew(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_ew(
      "mul_scalar", a, [s](double x) { return x * s; },
      [s](double, double, double g) { return g * s; });
}

Tensor sub_from(double s, const Tensor& a) {
  return unary_ew(
      "sub_from", a, [s](double x) { return s - x; },
      [](double, double, double g) { return -g; });
}

Tensor relu(const Tensor& a) {
  return unary_ew(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_ew(
      "sigmoid", a, [](double x) { return logistic(x); },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kRoot2OverPi = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  return unary_ew(
      "gelu", a,
      [](double x) {
        double u = kRoot2OverPi * (x + kCubic * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double, double g) {
        double u = kRoot2OverPi * (x + kCubic * x * x * x);
        double t = std::tanh(u);
        double du = kRoot2OverPi * (1.0 + 3.0 * kCubic * x * x);
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      });
}

Tensor log(const Tensor& a) {
  check_defined("log", a);
  for (double v : a.data()) {
    if (!std::isfinite(v)) fail("log", "non-finite input");
    if (v < 0) fail("log", "negative input " + std::to_string(v));
  }
  return unary_ew(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

Tensor exp(const Tensor& a) {
  return unary_ew(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Tensor softplus(const Tensor& a) {
  return unary_ew(
      "softplus", a, [](double x) { return stable_softplus(x); },
      [](double x, double, double g) { return g * logistic(x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) fail("clamp", "lo > hi");
  return unary_ew(
      "clamp", a,
      [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double, double g) { return (x >= lo && x <= hi) ? g : 0.0; });
}

Tensor smooth_l1(const Tensor& residual, double beta) {
  if (beta <= 0) fail("smooth_l1", "beta must be positive");
  return unary_ew(
      "smooth_l1", residual,
      [beta](double r) {
        double a = std::fabs(r);
        return a < beta ? 0.5 * r * r / beta : a - 0.5 * beta;
      },
      [beta](double r, double, double g) {
        double a = std::fabs(r);
        return g * (a < beta ? r / beta : (r > 0 ? 1.0 : -1.0));
      });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets,
                       const Tensor& pos_weight) {
  const char* op = "bce_with_logits";
  check_defined(op, logits);
  check_defined(op, targets);
  check_defined(op, pos_weight);
  if (logits.shape() != targets.shape() || logits.shape() != pos_weight.shape())
    fail(op, "shape mismatch " + shape_str(logits.shape()) + " vs " +
                 shape_str(targets.shape()) + " vs " + shape_str(pos_weight.shape()));
  const auto& x = logits.data();
  const auto& t = targets.data();
  const auto& w = pos_weight.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = w[i] * t[i] * stable_softplus(-x[i]) + (1.0 - t[i]) * stable_softplus(x[i]);
  auto xn = logits.node_ptr();
  auto tn = targets.node_ptr();
  auto wn = pos_weight.node_ptr();
  return make_op(op, logits.shape(), std::move(out), {logits}, [xn, tn, wn](Node& n) {
    auto& gx = xn->grad_buf();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double x = xn->data[i], t = tn->data[i], w = wn->data[i];
      gx[i] += n.grad[i] * ((1.0 - t) * logistic(x) - w * t * logistic(-x));
    }
  });
}

// ---------------------------------------------------------------------------
// matmul / linear / conv2d
// ---------------------------------------------------------------------------

namespace {

// C[M,N] += A[M,K] * B[K,N]; ikj order keeps the inner loop contiguous.
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<int64_t>(p) * m;
    const double* brow = b + static_cast<int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const char* op = "matmul";
  check_defined(op, a);
  check_defined(op, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    fail(op, "operands must be at least rank-2, got " + shape_str(sa) + " and " + shape_str(sb));
  bool shared_b = sb.size() == 2 && sa.size() > 2;
  if (!shared_b && sa.size() != sb.size())
    fail(op, "rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  int kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb)
    fail(op, "inner extent mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  int64_t batches = 1;
  for (size_t i = 0; i + 2 < sa.size(); ++i) {
    batches *= sa[i];
    if (!shared_b && sb[i] != sa[i])
      fail(op, "leading extents differ " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<size_t>(batches) * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t t = 0; t < batches; ++t) {
    gemm_acc(pa + t * m * k, shared_b ? pb : pb + t * k * n, out.data() + t * m * n,
             m, k, n);
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(op, std::move(out_shape), std::move(out), {a, b},
                 [an, bn, m, k, n, batches, shared_b](Node& nd) {
                   const double* g = nd.grad.data();
                   if (an->tracked()) {
                     auto& ga = an->grad_buf();
                     for (int64_t t = 0; t < batches; ++t)
                       gemm_bt_acc(g + t * m * n,
                                   shared_b ? bn->data.data() : bn->data.data() + t * k * n,
                                   ga.data() + t * m * k, m, n, k);
                   }
                   if (bn->tracked()) {
                     auto& gb = bn->grad_buf();
                     for (int64_t t = 0; t < batches; ++t)
                       gemm_at_acc(an->data.data() + t * m * k, g + t * m * n,
                                   shared_b ? gb.data() : gb.data() + t * k * n, k, m, n);
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const char* op = "linear";
  check_defined(op, x);
  check_defined(op, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.empty() || sw.size() != 2)
    fail(op, "need x [...,in] and w [out,in], got " + shape_str(sx) + " and " + shape_str(sw));
  int in = sx.back(), out_dim = sw[0];
  if (sw[1] != in)
    fail(op, "input width mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != out_dim))
    fail(op, "bias shape " + shape_str(b.shape()) + " does not match out=" + std::to_string(out_dim));
  int64_t rows = x.numel() / in;
  std::vector<double> out(rows * out_dim, 0.0);
  gemm_bt_acc(x.data().data(), w.data().data(), out.data(), static_cast<int>(rows),
              in, out_dim);
  if (b.defined()) {
    const auto& bias = b.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < out_dim; ++j) out[r * out_dim + j] += bias[j];
  }
  Shape out_shape(sx.begin(), sx.end() - 1);
  out_shape.push_back(out_dim);
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> ins = b.defined() ? std::vector<Tensor>{x, w, b}
                                        : std::vector<Tensor>{x, w};
  return make_op(op, std::move(out_shape), std::move(out), ins,
                 [xn, wn, bn, rows, in, out_dim](Node& nd) {
                   const double* g = nd.grad.data();
                   if (xn->tracked())
                     gemm_acc(g, wn->data.data(), xn->grad_buf().data(),
                              static_cast<int>(rows), out_dim, in);
                   if (wn->tracked())
                     gemm_at_acc(g, xn->data.data(), wn->grad_buf().data(), out_dim,
                                 static_cast<int>(rows), in);
                   if (bn && bn->tracked()) {
                     auto& gb = bn->grad_buf();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const char* op = "conv2d";
  check_defined(op, x);
  check_defined(op, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4)
    fail(op, "need x [B,C,H,W] and w [O,C,k,k], got " + shape_str(sx) + " and " + shape_str(sw));
  int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
  int O = sw[0], k = sw[2];
  if (sw[1] != C)
    fail(op, "channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  if (sw[3] != k || k % 2 == 0) fail(op, "kernel must be square with odd size");
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != O))
    fail(op, "bias shape " + shape_str(b.shape()));
  int pad = (k - 1) / 2;
  std::vector<double> out(static_cast<size_t>(B) * O * H * W, 0.0);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (int bb = 0; bb < B; ++bb)
    for (int o = 0; o < O; ++o) {
      double* orow = out.data() + (static_cast<int64_t>(bb) * O + o) * H * W;
      for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            double wv = pw[((static_cast<int64_t>(o) * C + c) * k + ky) * k + kx];
            if (wv == 0.0) continue;
            int dy = ky - pad, dx = kx - pad;
            int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            for (int y = y0; y < y1; ++y) {
              const double* xrow =
                  px + ((static_cast<int64_t>(bb) * C + c) * H + y + dy) * W + dx;
              double* dst = orow + static_cast<int64_t>(y) * W;
              for (int xx = x0; xx < x1; ++xx) dst[xx] += wv * xrow[xx];
            }
          }
      if (b.defined()) {
        double bv = b.data()[o];
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) orow[i] += bv;
      }
    }
  (void)xat;
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> ins = b.defined() ? std::vector<Tensor>{x, w, b}
                                        : std::vector<Tensor>{x, w};
  return make_op(op, {B, O, H, W}, std::move(out), ins,
                 [xn, wn, bn, B, C, H, W, O, k, pad](Node& nd) {
                   const double* g = nd.grad.data();
                   const double* px = xn->data.data();
                   const double* pw = wn->data.data();
                   if (xn->tracked()) {
                     auto& gx = xn->grad_buf();
                     for (int bb = 0; bb < B; ++bb)
                       for (int o = 0; o < O; ++o) {
                         const double* grow =
                             g + (static_cast<int64_t>(bb) * O + o) * H * W;
                         for (int c = 0; c < C; ++c)
                           for (int ky = 0; ky < k; ++ky)
                             for (int kx = 0; kx < k; ++kx) {
                               double wv =
                                   pw[((static_cast<int64_t>(o) * C + c) * k + ky) * k + kx];
                               if (wv == 0.0) continue;
                               int dy = ky - pad, dx = kx - pad;
                               int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                               int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                               for (int y = y0; y < y1; ++y) {
                                 double* xrow = gx.data() +
                                     ((static_cast<int64_t>(bb) * C + c) * H + (y + dy)) * W + dx;
                                 const double* src = grow + static_cast<int64_t>(y) * W;
                                 for (int xx = x0; xx < x1; ++xx) xrow[xx] += wv * src[xx];
                               }
                             }
                       }
                   }
                   if (wn->tracked()) {
                     auto& gw = wn->grad_buf();
                     for (int bb = 0; bb < B; ++bb)
                       for (int o = 0; o < O; ++o) {
                         const double* grow =
                             g + (static_cast<int64_t>(bb) * O + o) * H * W;
                         for (int c = 0; c < C; ++c)
                           for (int ky = 0; ky < k; ++ky)
                             for (int kx = 0; kx < k; ++kx) {
                               int dy = ky - pad, dx = kx - pad;
                               int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                               int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                               double acc = 0.0;
                               for (int y = y0; y < y1; ++y) {
                                 const double* xrow = px +
                                     ((static_cast<int64_t>(bb) * C + c) * H + (y + dy)) * W + dx;
                                 const double* src = grow + static_cast<int64_t>(y) * W;
                                 for (int xx = x0; xx < x1; ++xx) acc += xrow[xx] * src[xx];
                               }
                               gw[((static_cast<int64_t>(o) * C + c) * k + ky) * k + kx] += acc;
                             }
                       }
                   }
                   if (bn && bn->tracked()) {
                     auto& gb = bn->grad_buf();
                     for (int bb = 0; bb < B; ++bb)
                       for (int o = 0; o < O; ++o) {
                         const double* grow =
                             g + (static_cast<int64_t>(bb) * O + o) * H * W;
                         double acc = 0.0;
                         for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                           acc += grow[i];
                         gb[o] += acc;
                       }
                   }
                 });
}

// ---------------------------------------------------------------------------
// softmax family / layer norm
// ---------------------------------------------------------------------------

namespace {

// Decomposes shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  int64_t outer, extent, inner;
};

AxisView axis_view(const char* op, const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    fail(op, "axis out of range for shape " + shape_str(s));
  AxisView v{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_defined("softmax", a);
  AxisView v = axis_view("softmax", a.shape(), axis);
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in = 0; in < v.inner; ++in) {
      int64_t base = o * v.extent * v.inner + in;
      double mx = -1e300;
      for (int64_t e = 0; e < v.extent; ++e) mx = std::max(mx, x[base + e * v.inner]);
      double z = 0.0;
      for (int64_t e = 0; e < v.extent; ++e) {
        double ev = std::exp(x[base + e * v.inner] - mx);
        out[base + e * v.inner] = ev;
        z += ev;
      }
      for (int64_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= z;
    }
  auto an = a.node_ptr();
  return make_op("softmax", a.shape(), std::move(out), {a}, [an, v](Node& n) {
    auto& ga = an->grad_buf();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in = 0; in < v.inner; ++in) {
        int64_t base = o * v.extent * v.inner + in;
        double dot = 0.0;
        for (int64_t e = 0; e < v.extent; ++e) {
          int64_t i = base + e * v.inner;
          dot += n.grad[i] * n.data[i];
        }
        for (int64_t e = 0; e < v.extent; ++e) {
          int64_t i = base + e * v.inner;
          ga[i] += n.data[i] * (n.grad[i] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  check_defined("log_softmax", a);
  AxisView v = axis_view("log_softmax", a.shape(), axis);
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in = 0; in < v.inner; ++in) {
      int64_t base = o * v.extent * v.inner + in;
      double mx = -1e300;
      for (int64_t e = 0; e < v.extent; ++e) mx = std::max(mx, x[base + e * v.inner]);
      double z = 0.0;
      for (int64_t e = 0; e < v.extent; ++e) z += std::exp(x[base + e * v.inner] - mx);
      double lz = mx + std::log(z);
      for (int64_t e = 0; e < v.extent; ++e)
        out[base + e * v.inner] = x[base + e * v.inner] - lz;
    }
  auto an = a.node_ptr();
  return make_op("log_softmax", a.shape(), std::move(out), {a}, [an, v](Node& n) {
    auto& ga = an->grad_buf();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in = 0; in < v.inner; ++in) {
        int64_t base = o * v.extent * v.inner + in;
        double gsum = 0.0;
        for (int64_t e = 0; e < v.extent; ++e) gsum += n.grad[base + e * v.inner];
        for (int64_t e = 0; e < v.extent; ++e) {
          int64_t i = base + e * v.inner;
          ga[i] += n.grad[i] - std::exp(n.data[i]) * gsum;
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const char* op = "layer_norm";
  check_defined(op, x);
  check_defined(op, gain);
  check_defined(op, bias);
  const Shape& s = x.shape();
  if (s.empty()) fail(op, "rank-0 input");
  int dim = s.back();
  if (gain.rank() != 1 || gain.shape()[0] != dim || bias.rank() != 1 ||
      bias.shape()[0] != dim)
    fail(op, "gain/bias must be [" + std::to_string(dim) + "]");
  int64_t rows = x.numel() / dim;
  std::vector<double> out(x.numel());
  std::vector<double> inv_sd(rows), mu(rows);
  const auto& d = x.data();
  const auto& g = gain.data();
  const auto& b = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = d.data() + r * dim;
    double m = 0.0;
    for (int i = 0; i < dim; ++i) m += row[i];
    m /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) var += (row[i] - m) * (row[i] - m);
    var /= dim;
    double is = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_sd[r] = is;
    double* orow = out.data() + r * dim;
    for (int i = 0; i < dim; ++i) orow[i] = (row[i] - m) * is * g[i] + b[i];
  }
  auto xn = x.node_ptr();
  auto gn = gain.node_ptr();
  auto bn = bias.node_ptr();
  return make_op(op, s, std::move(out), {x, gain, bias},
                 [xn, gn, bn, rows, dim, mu, inv_sd](Node& n) {
                   const auto& d = xn->data;
                   const auto& g = gn->data;
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* row = d.data() + r * dim;
                     const double* go = n.grad.data() + r * dim;
                     double is = inv_sd[r], m = mu[r];
                     // dL/dxhat, plus its mean and xhat-weighted mean
                     double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                     for (int i = 0; i < dim; ++i) {
                       double xh = (row[i] - m) * is;
                       double dxh = go[i] * g[i];
                       mean_dxh += dxh;
                       mean_dxh_xh += dxh * xh;
                     }
                     mean_dxh /= dim;
                     mean_dxh_xh /= dim;
                     if (xn->tracked()) {
                       auto& gx = xn->grad_buf();
                       for (int i = 0; i < dim; ++i) {
                         double xh = (row[i] - m) * is;
                         double dxh = go[i] * g[i];
                         gx[r * dim + i] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
                       }
                     }
                     if (gn->tracked()) {
                       auto& gg = gn->grad_buf();
                       for (int i = 0; i < dim; ++i)
                         gg[i] += go[i] * (row[i] - m) * is;
                     }
                     if (bn->tracked()) {
                       auto& gb = bn->grad_buf();
                       for (int i = 0; i < dim; ++i) gb[i] += go[i];
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

std::vector<ResizeTap> make_resize_plan(int in_size, int out_size) {
  std::vector<ResizeTap> plan(out_size);
  double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in_size - 1));
    int i0 = static_cast<int>(std::floor(src));
    int i1 = std::min(i0 + 1, in_size - 1);
    double w1 = src - i0;
    plan[o] = {i0, i1, 1.0 - w1, w1};
  }
  return plan;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  const char* op = "bilinear_resize";
  check_defined(op, x);
  const Shape& s = x.shape();
  if (s.size() != 4) fail(op, "need [B,C,H,W], got " + shape_str(s));
  if (out_h <= 0 || out_w <= 0) fail(op, "non-positive output size");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  auto py = make_resize_plan(H, out_h);
  auto px = make_resize_plan(W, out_w);
  std::vector<double> out(static_cast<size_t>(B) * C * out_h * out_w);
  const auto& d = x.data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const double* src = d.data() + bc * H * W;
    double* dst = out.data() + bc * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ty = py[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& tx = px[ox];
        dst[oy * out_w + ox] = ty.w0 * (tx.w0 * src[ty.i0 * W + tx.i0] +
                                        tx.w1 * src[ty.i0 * W + tx.i1]) +
                               ty.w1 * (tx.w0 * src[ty.i1 * W + tx.i0] +
                                        tx.w1 * src[ty.i1 * W + tx.i1]);
      }
    }
  }
  auto xn = x.node_ptr();
  return make_op(op, {B, C, out_h, out_w}, std::move(out), {x},
                 [xn, B, C, H, W, out_h, out_w, py, px](Node& n) {
                   auto& gx = xn->grad_buf();
                   for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                     double* dst = gx.data() + bc * H * W;
                     const double* g = n.grad.data() + bc * out_h * out_w;
                     for (int oy = 0; oy < out_h; ++oy) {
                       const auto& ty = py[oy];
                       for (int ox = 0; ox < out_w; ++ox) {
                         const auto& tx = px[ox];
                         double gv = g[oy * out_w + ox];
                         dst[ty.i0 * W + tx.i0] += ty.w0 * tx.w0 * gv;
                         dst[ty.i0 * W + tx.i1] += ty.w0 * tx.w1 * gv;
                         dst[ty.i1 * W + tx.i0] += ty.w1 * tx.w0 * gv;
                         dst[ty.i1 * W + tx.i1] += ty.w1 * tx.w1 * gv;
                       }
                     }
                   }
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  const char* op = "global_avg_pool";
  check_defined(op, x);
  const Shape& s = x.shape();
  if (s.size() != 4) fail(op, "need [B,C,H,W], got " + shape_str(s));
  int B = s[0], C = s[1];
  int64_t hw = static_cast<int64_t>(s[2]) * s[3];
  std::vector<double> out(static_cast<size_t>(B) * C);
  const auto& d = x.data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    double acc = 0.0;
    const double* src = d.data() + bc * hw;
    for (int64_t i = 0; i < hw; ++i) acc += src[i];
    out[bc] = acc / hw;
  }
  auto xn = x.node_ptr();
  return make_op(op, {B, C}, std::move(out), {x}, [xn, hw](Node& n) {
    auto& gx = xn->grad_buf();
    for (size_t bc = 0; bc < n.grad.size(); ++bc) {
      double gv = n.grad[bc] / hw;
      double* dst = gx.data() + bc * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += gv;
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  const char* op = "concat";
  if (parts.empty()) fail(op, "no inputs");
  for (const auto& p : parts) check_defined(op, p);
  const Shape& s0 = parts[0].shape();
  if (axis < 0) axis += static_cast<int>(s0.size());
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    fail(op, "axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  int total = 0;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size())
      fail(op, "rank mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    for (size_t i = 0; i < sp.size(); ++i)
      if (static_cast<int>(i) != axis && sp[i] != s0[i])
        fail(op, "extent mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    total += sp[axis];
  }
  out_shape[axis] = total;
  AxisView v = axis_view(op, out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  int offset = 0;
  for (const auto& p : parts) {
    int ext = p.shape()[axis];
    const auto& d = p.data();
    for (int64_t o = 0; o < v.outer; ++o) {
      const double* src = d.data() + o * ext * v.inner;
      double* dst = out.data() + (o * total + offset) * v.inner;
      std::copy(src, src + ext * v.inner, dst);
    }
    offset += ext;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<int> extents;
  for (const auto& p : parts) {
    nodes.push_back(p.node_ptr());
    extents.push_back(p.shape()[axis]);
  }
  return make_op(op, std::move(out_shape), std::move(out), parts,
                 [nodes, extents, v, total](Node& n) {
                   int offset = 0;
                   for (size_t pi = 0; pi < nodes.size(); ++pi) {
                     int ext = extents[pi];
                     if (nodes[pi]->tracked()) {
                       auto& gp = nodes[pi]->grad_buf();
                       for (int64_t o = 0; o < v.outer; ++o) {
                         const double* src = n.grad.data() + (o * total + offset) * v.inner;
                         double* dst = gp.data() + o * ext * v.inner;
                         for (int64_t i = 0; i < ext * v.inner; ++i) dst[i] += src[i];
                       }
                     }
                     offset += ext;
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const char* op = "slice";
  check_defined(op, a);
  const Shape& s = a.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    fail(op, "axis out of range for " + shape_str(s));
  if (start < 0 || len <= 0 || start + len > s[axis])
    fail(op, "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                 ") out of bounds for extent " + std::to_string(s[axis]));
  AxisView v = axis_view(op, s, axis);
  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<double> out(shape_numel(out_shape));
  const auto& d = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    const double* src = d.data() + (o * v.extent + start) * v.inner;
    std::copy(src, src + len * v.inner, out.data() + o * len * v.inner);
  }
  auto an = a.node_ptr();
  return make_op(op, std::move(out_shape), std::move(out), {a},
                 [an, v, start, len](Node& n) {
                   auto& ga = an->grad_buf();
                   for (int64_t o = 0; o < v.outer; ++o) {
                     double* dst = ga.data() + (o * v.extent + start) * v.inner;
                     const double* src = n.grad.data() + o * len * v.inner;
                     for (int64_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor sum(const Tensor& a) {
  check_defined("sum", a);
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto an = a.node_ptr();
  return make_op("sum", {}, {acc}, {a}, [an](Node& n) {
    auto& ga = an->grad_buf();
    double g = n.grad[0];
    for (double& v : ga) v += g;
  });
}

Tensor mean(const Tensor& a) {
  check_defined("mean", a);
  int64_t n_el = a.numel();
  if (n_el == 0) fail("mean", "empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  acc /= n_el;
  auto an = a.node_ptr();
  return make_op("mean", {}, {acc}, {a}, [an, n_el](Node& n) {
    auto& ga = an->grad_buf();
    double g = n.grad[0] / n_el;
    for (double& v : ga) v += g;
  });
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& s) {
  check_defined("reshape", a);
  if (shape_numel(s) != a.numel())
    fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  auto an = a.node_ptr();
  return make_op("reshape", s, a.data(), {a}, [an](Node& n) {
    auto& ga = an->grad_buf();
    for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const char* op = "permute";
  check_defined(op, a);
  const Shape& s = a.shape();
  int r = static_cast<int>(s.size());
  if (static_cast<int>(perm.size()) != r) fail(op, "perm rank mismatch");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]) fail(op, "invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  std::vector<int64_t> in_strides(r, 1), out_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * s[i + 1];
  for (int i = r - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  // src index for each contiguous dst index
  std::vector<int64_t> src_of(a.numel());
  std::vector<int> idx(r, 0);
  for (int64_t di = 0; di < a.numel(); ++di) {
    int64_t si = 0;
    for (int i = 0; i < r; ++i) si += static_cast<int64_t>(idx[i]) * in_strides[perm[i]];
    src_of[di] = si;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(a.numel());
  const auto& d = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = d[src_of[i]];
  auto an = a.node_ptr();
  return make_op(op, std::move(out_shape), std::move(out), {a},
                 [an, src_of](Node& n) {
                   auto& ga = an->grad_buf();
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     ga[src_of[i]] += n.grad[i];
                 });
}

Tensor dropout(const Tensor& a, double p, bool training, std::mt19937_64& rng) {
  check_defined("dropout", a);
  if (p < 0 || p >= 1) fail("dropout", "rate must be in [0,1)");
  if (!training || p == 0.0) return a;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> mask(a.numel());
  double keep = 1.0 - p;
  for (auto& m : mask) m = uni(rng) < keep ? 1.0 / keep : 0.0;
  Tensor m = Tensor::from_data(a.shape(), std::move(mask));
  return mul(a, m);
}

Tensor tokens_to_map(const Tensor& tokens, int h, int w) {
  const char* op = "tokens_to_map";
  check_defined(op, tokens);
  const Shape& s = tokens.shape();
  if (s.size() != 3) fail(op, "need [B,N,C], got " + shape_str(s));
  if (s[1] != h * w)
    fail(op, "N=" + std::to_string(s[1]) + " does not equal h*w=" +
                 std::to_string(h) + "*" + std::to_string(w));
  Tensor bcn = permute(tokens, {0, 2, 1});  // [B,C,N]
  return reshape(bcn, {s[0], s[2], h, w});
}

}  // namespace pmtl
