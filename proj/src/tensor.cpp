#include "diffuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "diffuse/error.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;

// ---- dense kernels (row-major, accumulate into C) ----
// Each output element is summed over the inner index in ascending order,
// independent of which row it sits in.

// C[n,m] += A[n,k] * B[k,m]
void mm_acc(const double* A, const double* B, double* C, std::size_t n, std::size_t k,
            std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict c = C + i * m;
    const double* a = A + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      const double* __restrict b = B + kk * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
void mm_at_acc(const double* A, const double* B, double* C, std::size_t n, std::size_t k,
               std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    const double* __restrict b = B + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      double* __restrict c = C + kk * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

std::vector<double> transposed(const double* W, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = W[r * cols + c];
  return t;
}

void check_finite(const std::vector<double>& v, const char* op, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite " + what);
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Builds the result node. The backward closure is attached only when some
// input participates in differentiation.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  check_finite(data, op, "output");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  if (any_requires_grad(inputs)) {
    n->requires_grad = true;
    for (const Tensor* t : inputs)
      if (t->defined()) n->parents.push_back(t->node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

// Gradient buffer of an input, or nullptr if it does not need one.
std::vector<double>* grad_of(const NodePtr& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

[[noreturn]] void shape_error(const char* op, const std::string& msg) {
  throw ShapeError(std::string(op) + ": " + msg);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (!t.defined()) shape_error(op, std::string(name) + " is undefined");
  if (t.rank() != rank)
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                        to_string(t.shape()));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) shape_error(op, "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(numel(shape), value);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  check_finite(data, "tensor", "value");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

std::span<double> Tensor::mutable_data() {
  if (node_->backward || !node_->parents.empty())
    throw Error("usage", "mutable_data() on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  std::size_t off = 0;
  std::size_t i = 0;
  for (std::size_t v : index) {
    if (v >= node_->shape[i]) throw ShapeError("index out of range");
    off = off * node_->shape[i] + v;
    ++i;
  }
  return node_->data[off];
}

void Tensor::set_requires_grad(bool on) {
  if (node_->backward) throw Error("usage", "set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward() needs a scalar, got " + to_string(shape()));
  if (!node_->requires_grad) throw Error("usage", "backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    check_finite(n->grad, n->op, "gradient");
    n->backward(*n);
  }
  for (Node* n : order) check_finite(n->grad, n->op, "gradient");
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_error("add", to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result("add", a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    for (const NodePtr& p : {an, bn})
      if (auto* g = grad_of(p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_error("mul", to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (auto* g = grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn->data[i];
    if (auto* g = grad_of(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an->data[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  NodePtr xn = x.node();
  return make_result("sum", {}, {s}, {&x}, [xn](Node& self) {
    auto& g = xn->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  NodePtr xn = x.node();
  return make_result("relu", x.shape(), std::move(out), {&x}, [xn](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->data[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : 0.0;
    out[i] = xd[i] * (*mask)[i];
  }
  NodePtr xn = x.node();
  return make_result("dropout", x.shape(), std::move(out), {&x}, [xn, mask](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// ---- convolution / pooling / layout ----

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  require_rank(input, 3, "conv1d", "input");
  require_rank(weight, 3, "conv1d", "weight");
  require_rank(bias, 1, "conv1d", "bias");
  const std::size_t B = input.dim(0), Cin = input.dim(1), L = input.dim(2);
  const std::size_t Cout = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != Cin)
    shape_error("conv1d", "weight " + to_string(weight.shape()) + " expects " +
                              std::to_string(weight.dim(1)) + " input channels, input " +
                              to_string(input.shape()) + " has " + std::to_string(Cin));
  if (bias.dim(0) != Cout)
    shape_error("conv1d", "bias " + to_string(bias.shape()) + " vs " + std::to_string(Cout) + " output channels");
  if (L + 2 * padding < K) shape_error("conv1d", "input too short for kernel");
  const std::size_t Lp = L + 2 * padding;
  const std::size_t Lout = Lp - K + 1;

  // Zero-padded copy [B,Cin,Lp], kept for backward.
  auto padded = std::make_shared<std::vector<double>>(B * Cin * Lp, 0.0);
  auto xd = input.data();
  for (std::size_t bc = 0; bc < B * Cin; ++bc)
    std::copy_n(xd.data() + bc * L, L, padded->data() + bc * Lp + padding);

  std::vector<double> out(B * Cout * Lout);
  auto wd = weight.data(), bd = bias.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      double* __restrict o = out.data() + (b * Cout + co) * Lout;
      std::fill_n(o, Lout, bd[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* xp = padded->data() + (b * Cin + ci) * Lp;
        for (std::size_t k = 0; k < K; ++k) {
          const double w = wd[(co * Cin + ci) * K + k];
          const double* __restrict src = xp + k;
          for (std::size_t t = 0; t < Lout; ++t) o[t] += w * src[t];
        }
      }
    }

  NodePtr in = input.node(), wn = weight.node(), bn = bias.node();
  return make_result(
      "conv1d", {B, Cout, Lout}, std::move(out), {&input, &weight, &bias},
      [=](Node& self) {
        auto* gx = grad_of(in);
        auto* gw = grad_of(wn);
        auto* gb = grad_of(bn);
        std::vector<double> gpad(gx ? Lp : 0);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t ci = 0; ci < Cin && gx; ++ci) {
            std::fill(gpad.begin(), gpad.end(), 0.0);
            for (std::size_t co = 0; co < Cout; ++co) {
              const double* g = self.grad.data() + (b * Cout + co) * Lout;
              for (std::size_t k = 0; k < K; ++k) {
                const double w = wn->data[(co * Cin + ci) * K + k];
                double* __restrict dst = gpad.data() + k;
                for (std::size_t t = 0; t < Lout; ++t) dst[t] += w * g[t];
              }
            }
            double* gxrow = gx->data() + (b * Cin + ci) * L;
            for (std::size_t t = 0; t < L; ++t) gxrow[t] += gpad[t + padding];
          }
          for (std::size_t co = 0; co < Cout; ++co) {
            const double* g = self.grad.data() + (b * Cout + co) * Lout;
            if (gb) {
              double s = 0.0;
              for (std::size_t t = 0; t < Lout; ++t) s += g[t];
              (*gb)[co] += s;
            }
            if (gw) {
              for (std::size_t ci = 0; ci < Cin; ++ci) {
                const double* xp = padded->data() + (b * Cin + ci) * Lp;
                for (std::size_t k = 0; k < K; ++k) {
                  double s = 0.0;
                  for (std::size_t t = 0; t < Lout; ++t) s += g[t] * xp[t + k];
                  (*gw)[(co * Cin + ci) * K + k] += s;
                }
              }
            }
          }
        }
      });
}

Tensor maxpool1d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 3, "maxpool1d", "input");
  if (kernel == 0 || stride == 0) shape_error("maxpool1d", "kernel and stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (L < kernel)
    shape_error("maxpool1d", "length " + std::to_string(L) + " shorter than kernel " + std::to_string(kernel));
  const std::size_t Lout = (L - kernel) / stride + 1;
  std::vector<double> out(B * C * Lout);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xd = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t t = 0; t < Lout; ++t) {
      std::size_t best = bc * L + t * stride;
      for (std::size_t k = 1; k < kernel; ++k)
        if (xd[bc * L + t * stride + k] > xd[best]) best = bc * L + t * stride + k;
      out[bc * Lout + t] = xd[best];
      (*argmax)[bc * Lout + t] = best;
    }
  NodePtr xn = x.node();
  return make_result("maxpool1d", {B, C, Lout}, std::move(out), {&x}, [xn, argmax](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

Tensor swap_last_axes(const Tensor& x) {
  require_rank(x, 3, "swap_last_axes", "input");
  const std::size_t B = x.dim(0), A = x.dim(1), C = x.dim(2);
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * A + a] = xd[(b * A + a) * C + c];
  NodePtr xn = x.node();
  return make_result("swap_last_axes", {B, C, A}, std::move(out), {&x}, [=](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t c = 0; c < C; ++c) g[(b * A + a) * C + c] += self.grad[(b * C + c) * A + a];
  });
}

// ---- dense layers ----

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (!input.defined() || input.rank() < 1) shape_error("linear", "input must have rank >= 1");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const std::size_t Din = input.shape().back();
  const std::size_t Dout = weight.dim(0);
  if (weight.dim(1) != Din)
    shape_error("linear", "weight " + to_string(weight.shape()) + " vs input " + to_string(input.shape()));
  if (bias.dim(0) != Dout)
    shape_error("linear", "bias " + to_string(bias.shape()) + " vs " + std::to_string(Dout) + " outputs");
  const std::size_t N = input.size() / Din;

  std::vector<double> out(N * Dout);
  auto bd = bias.data();
  for (std::size_t n = 0; n < N; ++n) std::copy(bd.begin(), bd.end(), out.begin() + n * Dout);
  const std::vector<double> wt = transposed(weight.data().data(), Dout, Din);
  mm_acc(input.data().data(), wt.data(), out.data(), N, Din, Dout);

  Shape shape = input.shape();
  shape.back() = Dout;
  NodePtr in = input.node(), wn = weight.node(), bn = bias.node();
  return make_result("linear", std::move(shape), std::move(out), {&input, &weight, &bias},
                     [=](Node& self) {
                       const double* g = self.grad.data();
                       if (auto* gx = grad_of(in)) mm_acc(g, wn->data.data(), gx->data(), N, Dout, Din);
                       if (auto* gw = grad_of(wn)) mm_at_acc(g, in->data.data(), gw->data(), N, Dout, Din);
                       if (auto* gb = grad_of(bn))
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t o = 0; o < Dout; ++o) (*gb)[o] += g[n * Dout + o];
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!x.defined() || x.rank() < 1) shape_error("layer_norm", "input must have rank >= 1");
  require_rank(gamma, 1, "layer_norm", "gamma");
  require_rank(beta, 1, "layer_norm", "beta");
  const std::size_t D = x.shape().back();
  if (gamma.dim(0) != D || beta.dim(0) != D)
    shape_error("layer_norm", "gamma/beta must have " + std::to_string(D) + " entries");
  if (!(eps > 0.0)) throw DomainError("layer_norm eps must be positive");
  const std::size_t N = x.size() / D;

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(N);
  std::vector<double> out(x.size());
  auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = xd.data() + n * D;
    double mean = 0.0;
    for (std::size_t d = 0; d < D; ++d) mean += row[d];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
    var /= static_cast<double>(D);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[n] = inv;
    for (std::size_t d = 0; d < D; ++d) {
      const double h = (row[d] - mean) * inv;
      (*xhat)[n * D + d] = h;
      out[n * D + d] = gd[d] * h + bd[d];
    }
  }

  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta}, [=](Node& self) {
    auto* gx = grad_of(xn);
    auto* gg = grad_of(gn);
    auto* gb = grad_of(bn);
    std::vector<double> dxhat(D);
    for (std::size_t n = 0; n < N; ++n) {
      const double* g = self.grad.data() + n * D;
      const double* h = xhat->data() + n * D;
      if (gg)
        for (std::size_t d = 0; d < D; ++d) (*gg)[d] += g[d] * h[d];
      if (gb)
        for (std::size_t d = 0; d < D; ++d) (*gb)[d] += g[d];
      if (gx) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          dxhat[d] = g[d] * gn->data[d];
          s1 += dxhat[d];
          s2 += dxhat[d] * h[d];
        }
        const double inv = (*inv_std)[n];
        const double Dd = static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d)
          (*gx)[n * D + d] += inv / Dd * (Dd * dxhat[d] - s1 - h[d] * s2);
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) m = std::max(m, xd[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(xd[base + k * s.inner] - m);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= z;
    }
  NodePtr xn = x.node();
  return make_result("softmax", x.shape(), std::move(out), {&x}, [xn, s](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k)
          dot += self.grad[base + k * s.inner] * self.data[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t j = base + k * s.inner;
          g[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
  });
}

Tensor max_over_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "max_over_axis");
  if (s.len == 0) shape_error("max_over_axis", "empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.len * s.inner + i;
      for (std::size_t k = 1; k < s.len; ++k) {
        const std::size_t j = o * s.len * s.inner + k * s.inner + i;
        if (xd[j] > xd[best]) best = j;
      }
      out[o * s.inner + i] = xd[best];
      (*argmax)[o * s.inner + i] = best;
    }
  NodePtr xn = x.node();
  return make_result("max_over_axis", std::move(shape), std::move(out), {&x}, [xn, argmax](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

// ---- attention ----

Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, std::size_t heads) {
  require_rank(x, 3, "multi_head_attention", "input");
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
  for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
    require_rank(*w, 2, "multi_head_attention", "projection");
    if (w->dim(0) != D || w->dim(1) != D)
      shape_error("multi_head_attention", "projection " + to_string(w->shape()) + " must be [" +
                                              std::to_string(D) + "," + std::to_string(D) + "]");
  }
  if (heads == 0 || D % heads != 0)
    throw ConfigError("multi_head_attention: model width " + std::to_string(D) +
                      " not divisible by " + std::to_string(heads) + " heads");
  if (S == 0) shape_error("multi_head_attention", "empty sequence");
  const std::size_t dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t SD = S * D;

  struct Saved {
    std::vector<double> q, k, v, o, p;   // p: [B,H,S,S] indexed by original key position
    std::vector<std::size_t> order;      // [B,S] canonical key order
  };
  auto sv = std::make_shared<Saved>();
  sv->q.assign(B * SD, 0.0);
  sv->k.assign(B * SD, 0.0);
  sv->v.assign(B * SD, 0.0);
  sv->o.assign(B * SD, 0.0);
  // Attention weights are kept only when a backward pass may need them.
  const bool keep = any_requires_grad({&x, &wq, &wk, &wv, &wo});
  sv->p.assign(keep ? B * heads * S * S : S, 0.0);
  sv->order.resize(B * S);

  auto xd = x.data();
  std::vector<double> out(B * SD, 0.0);
  std::vector<double> e(S);
  for (std::size_t b = 0; b < B; ++b) {
    const double* X = xd.data() + b * SD;
    double* Q = sv->q.data() + b * SD;
    double* K = sv->k.data() + b * SD;
    double* V = sv->v.data() + b * SD;
    double* O = sv->o.data() + b * SD;
    mm_acc(X, wq.data().data(), Q, S, D, D);
    mm_acc(X, wk.data().data(), K, S, D, D);
    mm_acc(X, wv.data().data(), V, S, D, D);

    std::size_t* order = sv->order.data() + b * S;
    std::iota(order, order + S, std::size_t{0});
    std::sort(order, order + S, [&](std::size_t i, std::size_t j) {
      return std::lexicographical_compare(X + i * D, X + (i + 1) * D, X + j * D, X + (j + 1) * D);
    });

    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        double* P = keep ? sv->p.data() + ((b * heads + h) * S + i) * S : sv->p.data();
        const double* q = Q + i * D + c0;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          const double* kr = K + j * D + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * kr[c];
          e[j] = s * scale;
          m = std::max(m, e[j]);
        }
        double z = 0.0;
        for (std::size_t r = 0; r < S; ++r) {
          const std::size_t j = order[r];
          e[j] = std::exp(e[j] - m);
          z += e[j];
        }
        double* orow = O + i * D + c0;
        for (std::size_t r = 0; r < S; ++r) {
          const std::size_t j = order[r];
          P[j] = e[j] / z;
          const double* vr = V + j * D + c0;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += P[j] * vr[c];
        }
      }
    }
    mm_acc(O, wo.data().data(), out.data() + b * SD, S, D, D);
  }

  NodePtr xn = x.node(), qn = wq.node(), kn = wk.node(), vn = wv.node(), on = wo.node();
  return make_result(
      "multi_head_attention", {B, S, D}, std::move(out), {&x, &wq, &wk, &wv, &wo},
      [=](Node& self) {
        auto* gx = grad_of(xn);
        auto* gq = grad_of(qn);
        auto* gk = grad_of(kn);
        auto* gv = grad_of(vn);
        auto* go = grad_of(on);
        const std::vector<double> wo_t = transposed(on->data.data(), D, D);
        const std::vector<double> wq_t = transposed(qn->data.data(), D, D);
        const std::vector<double> wk_t = transposed(kn->data.data(), D, D);
        const std::vector<double> wv_t = transposed(vn->data.data(), D, D);
        std::vector<double> dO(SD), dQ(SD), dK(SD), dV(SD), dP(S);
        for (std::size_t b = 0; b < B; ++b) {
          const double* dY = self.grad.data() + b * SD;
          const double* X = xn->data.data() + b * SD;
          const double* Q = sv->q.data() + b * SD;
          const double* K = sv->k.data() + b * SD;
          const double* V = sv->v.data() + b * SD;
          const double* O = sv->o.data() + b * SD;
          std::fill(dO.begin(), dO.end(), 0.0);
          std::fill(dQ.begin(), dQ.end(), 0.0);
          std::fill(dK.begin(), dK.end(), 0.0);
          std::fill(dV.begin(), dV.end(), 0.0);
          mm_acc(dY, wo_t.data(), dO.data(), S, D, D);
          if (go) mm_at_acc(O, dY, go->data(), S, D, D);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < S; ++i) {
              const double* P = sv->p.data() + ((b * heads + h) * S + i) * S;
              const double* dOi = dO.data() + i * D + c0;
              double dot = 0.0;
              for (std::size_t j = 0; j < S; ++j) {
                const double* vr = V + j * D + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += dOi[c] * vr[c];
                dP[j] = s;
                dot += P[j] * s;
                double* dvr = dV.data() + j * D + c0;
                for (std::size_t c = 0; c < dh; ++c) dvr[c] += P[j] * dOi[c];
              }
              const double* qi = Q + i * D + c0;
              double* dqi = dQ.data() + i * D + c0;
              for (std::size_t j = 0; j < S; ++j) {
                const double ds = P[j] * (dP[j] - dot) * scale;
                const double* kr = K + j * D + c0;
                double* dkr = dK.data() + j * D + c0;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += ds * kr[c];
                  dkr[c] += ds * qi[c];
                }
              }
            }
          }
          if (gx) {
            double* dX = gx->data() + b * SD;
            mm_acc(dQ.data(), wq_t.data(), dX, S, D, D);
            mm_acc(dK.data(), wk_t.data(), dX, S, D, D);
            mm_acc(dV.data(), wv_t.data(), dX, S, D, D);
          }
          if (gq) mm_at_acc(X, dQ.data(), gq->data(), S, D, D);
          if (gk) mm_at_acc(X, dK.data(), gk->data(), S, D, D);
          if (gv) mm_at_acc(X, dV.data(), gv->data(), S, D, D);
        }
      });
}

// ---- losses ----

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    shape_error("l1_loss", to_string(pred.shape()) + " vs " + to_string(target.shape()));
  if (pred.size() == 0) shape_error("l1_loss", "empty input");
  double s = 0.0;
  auto pd = pred.data(), td = target.data();
  for (std::size_t i = 0; i < pd.size(); ++i) s += std::abs(pd[i] - td[i]);
  const double n = static_cast<double>(pd.size());
  NodePtr pn = pred.node(), tn = target.node();
  return make_result("l1_loss", {}, {s / n}, {&pred, &target}, [pn, tn, n](Node& self) {
    const double g = self.grad[0] / n;
    for (int side = 0; side < 2; ++side) {
      const NodePtr& who = side == 0 ? pn : tn;
      if (auto* gr = grad_of(who))
        for (std::size_t i = 0; i < gr->size(); ++i) {
          const double d = pn->data[i] - tn->data[i];
          const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
          (*gr)[i] += (side == 0 ? g : -g) * sign;
        }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    shape_error("cross_entropy", std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  if (B == 0) shape_error("cross_entropy", "empty batch");
  auto probs = std::make_shared<std::vector<double>>(B * C);
  std::vector<int> y(labels.begin(), labels.end());
  auto ld = logits.data();
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (y[b] < 0 || static_cast<std::size_t>(y[b]) >= C)
      throw DomainError("cross_entropy: label " + std::to_string(y[b]) + " outside 0.." + std::to_string(C - 1));
    const double* row = ld.data() + b * C;
    const double m = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] = std::exp(row[c] - m) / z;
    loss += -(row[y[b]] - m - std::log(z));
  }
  const double n = static_cast<double>(B);
  NodePtr ln = logits.node();
  return make_result("cross_entropy", {}, {loss / n}, {&logits}, [=](Node& self) {
    auto& g = ln->grad_buffer();
    const double s = self.grad[0] / n;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        g[b * C + c] += s * ((*probs)[b * C + c] - (static_cast<int>(c) == y[b] ? 1.0 : 0.0));
  });
}

}  // namespace diffuse
