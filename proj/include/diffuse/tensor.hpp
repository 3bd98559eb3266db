#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace diffuse {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One vertex of the dynamically recorded graph. `backward` reads this
// node's grad and accumulates into the parents' grads.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Shared handle to an n-d row-major array that may take part in
/// reverse-mode differentiation. Results of operations are immutable;
/// only leaves (parameters) may be written through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v) { return from_data({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Leaf tensors only; throws for operation results.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable tensor that requires grad.
  void backward() const;

  /// Deep copy with no graph history.
  Tensor detach() const;

  const char* op() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while alive (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- operations ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);

/// input [B,Cin,L], weight [Cout,Cin,K], bias [Cout], stride 1 -> [B,Cout,L+2P-K+1].
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t padding = 1);

/// Affine map over the last axis: weight [Dout,Din], bias [Dout].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);

/// Inverted dropout; identity when !training or p == 0. The mask is a pure
/// function of `seed`.
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

/// [B,C,L] -> [B,C,floor((L-kernel)/stride)+1]; gradient goes to the first maximum.
Tensor maxpool1d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2);

/// [B,A,C] -> [B,C,A].
Tensor swap_last_axes(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor softmax(const Tensor& x, std::size_t axis);

/// Unmasked scaled dot-product self-attention over x [B,S,D]. Projections are
/// [D,D] and applied as x·W. Keys are reduced in a content-defined order, so
/// permuting the sequence axis of x permutes the output bit-for-bit.
Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk,
                            const Tensor& wv, const Tensor& wo, std::size_t heads);

/// Max along `axis`; gradient flows to the first maximum.
Tensor max_over_axis(const Tensor& x, std::size_t axis);

/// Mean absolute error over all entries.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

/// Mean negative log-softmax of the true class; logits [B,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace diffuse
