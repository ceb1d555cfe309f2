#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace groundlab::autodiff {

using Shape = std::vector<std::size_t>;

/// Additive attention-mask sentinel standing in for -inf. Applied before
/// max-subtraction so exp() underflows to exactly 0 instead of producing
/// NaN from inf - inf.
inline constexpr double kMaskedOut = -1e30;

/// Epsilon inside the layer-norm variance square root.
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

struct Node {
  Shape shape;                // always rank 2, row-major
  std::vector<double> value;
  std::vector<double> grad;   // empty until first needed
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Pushes this node's grad into its parents. Captures raw pointers; the
  // parents vector keeps the pointees alive.
  std::function<void(Node&)> backprop;

  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }
  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// Test hook: replaces the relu backward rule with a deliberately wrong one
// (gradient leaks through negative inputs). Negative control for gradient
// checking; never set outside tests.
extern bool corrupt_relu_backward;

struct Access;

}  // namespace detail

/// Dense row-major matrix of 64-bit floats participating in a reverse-mode
/// differentiation graph. A Tensor is a shared handle to a graph node:
/// copies alias the same node. Scalars are 1x1.
///
/// A graph is confined to one thread; distinct graphs may run concurrently.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  std::uint64_t node_id() const;
  bool requires_grad() const;
  bool is_leaf() const;

  const std::vector<double>& values() const;
  double value(std::size_t r, std::size_t c) const;
  /// Value of a 1x1 tensor.
  double item() const;

  /// Mutable payload access, leaves only: mutating an interior node would
  /// silently desynchronize the graph, so it is rejected.
  std::vector<double>& mutable_values();

  bool has_grad() const;
  /// Accumulated gradient; materializes zeros on first access.
  const std::vector<double>& grad() const;
  void zero_grad();

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
  friend struct detail::Access;
};

// Matrix product a[m,k] * b[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m,k] * b[n,k]^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);

/// Concatenates matrices with equal row counts along the last dimension.
Tensor concat_last_dim(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t first, std::size_t count);

/// Column means: [m,n] -> [1,n].
Tensor mean_pool_rows(const Tensor& a);
/// Euclidean norm of each row: [m,n] -> [m,1]. Zero rows get zero gradient.
Tensor l2_norm_rows(const Tensor& a);
/// Row-wise layer normalization with affine gain/bias of shape [1,n].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
/// x[m,k] * w[k,n] + b[1,n] broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor softmax_rows(const Tensor& logits);
/// Row-wise softmax of (logits + mask). Mask entries must be 0 or the
/// kMaskedOut sentinel; masked positions come out exactly 0. A fully masked
/// row is rejected (it signals a mask-construction bug).
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

/// Sum of all entries: [m,n] -> [1,1].
Tensor sum(const Tensor& a);

/// Row gather: out[i,:] = table[ids[i],:]. Backward scatter-adds into the
/// table. Out-of-range ids are rejected.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);

/// Cross-entropy of softmax(logits) against a one-hot target, computed in
/// max-subtracted form. logits may be any shape; entries are read flat.
Tensor cross_entropy_logits(const Tensor& logits, std::size_t target);

/// Mean binary cross-entropy with logits over positions where valid != 0.
/// Labels must be 0 or 1. Rejected when no position is valid.
Tensor binary_cross_entropy_logits(const Tensor& logits, std::span<const double> labels,
                                   std::span<const std::uint8_t> valid);

/// Reverse-mode sweep from a scalar loss. Interior gradients are reset per
/// call; leaf gradients (parameters, inputs) accumulate across calls. Each
/// reachable node is visited exactly once, in reverse topological order.
void backward(const Tensor& loss);

}  // namespace groundlab::autodiff
