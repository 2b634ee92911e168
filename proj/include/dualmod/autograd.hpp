#pragma once

// Minimal reverse-mode differentiation over dense tensors.
//
// Every op returns a Var that owns its value and, when any input requires a
// gradient and recording is enabled, a closure that scatters the incoming
// gradient into its parents. Parameters are long-lived leaf Vars; activations
// are rebuilt on every forward pass.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dualmod/tensor.hpp"

namespace dualmod::ag {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// A leaf holding `t`; `requires_grad` marks it as a trainable parameter.
  static Var leaf(Tensor<T> t, bool requires_grad);
  static Var constant(Tensor<T> t) { return leaf(std::move(t), false); }

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] std::span<const T> value() const { return node_->value; }
  [[nodiscard]] std::span<T> mutable_value() { return node_->value; }
  /// Gradient buffer; empty until a backward pass reached this node.
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] T item() const { return node_->value.at(0); }
  [[nodiscard]] Tensor<T> tensor() const { return Tensor<T>(node_->shape, node_->value); }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  [[nodiscard]] Node<T>* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& ptr() const { return node_; }

  /// Accumulates d(this)/d(leaves) into every reachable leaf. `this` must be a scalar.
  void backward() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

/// True while ops record backward closures on the current thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, every relu evaluated on the current thread folds the sign
/// pattern of its input into fingerprint(). Two evaluations with equal
/// fingerprints took the same linear piece of every rectifier.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  [[nodiscard]] std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  std::uint64_t fingerprint_ = 0;
  std::uint64_t* previous_;
};

namespace detail {

/// Builds an op result. The backward closure is kept only when recording is
/// enabled and some input requires a gradient.
template <typename T>
Var<T> make_result(Shape shape, std::vector<T> value, std::vector<const Var<T>*> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const Var<T>* in : inputs) node->requires_grad = node->requires_grad || in->requires_grad();
    if (node->requires_grad) {
      for (const Var<T>* in : inputs) node->parents.push_back(in->ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

/// Gradient buffer of parent `parent`, or nullptr if it takes no gradient.
template <typename T>
T* grad_of(Node<T>& self, std::size_t parent) {
  Node<T>& p = *self.parents[parent];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace detail

// ---- structural ----
template <typename T> Var<T> detach(const Var<T>& x);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T factor);
/// Concatenates two (N, C, ...) tensors along the channel axis.
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// ---- pointwise ----
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
/// Inverted dropout with a mask drawn from `seed`; identity when rate == 0.
template <typename T> Var<T> dropout(const Var<T>& x, double rate, std::uint64_t seed);

// ---- volumetric ----
/// Stride-1 convolution with zero "same" padding. x: (N, Ci, D, H, W), w: (Co, Ci, k, k, k), b: (Co).
template <typename T> Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// Per-sample, per-channel normalization over the spatial axes with affine (C) parameters.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
/// 2x2x2 average pooling with stride 2; spatial extents must be even.
template <typename T> Var<T> avg_pool2(const Var<T>& x);
/// Trilinear 2x upsampling (half-pixel centres, edge clamped).
template <typename T> Var<T> upsample2(const Var<T>& x);
/// Softmax across the channel axis at every voxel.
template <typename T> Var<T> softmax_channels(const Var<T>& x);

// ---- vector ----
/// (N, C, ...) -> (N, C) spatial mean.
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
/// x: (N, Ci), w: (Co, Ci), b: (Co) -> (N, Co).
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// out[n, c, ...] = factor * weights[n, c] * x[n, c, ...].
template <typename T> Var<T> scale_channels(const Var<T>& x, const Var<T>& weights, T factor);

// ---- reductions producing scalars ----
template <typename T> Var<T> sum(const Var<T>& x);
/// sum_i coeffs[i] * x[i]; handy for probing gradients with a generic linear functional.
template <typename T> Var<T> dot_const(const Var<T>& x, std::span<const T> coeffs);
/// Sum of scalar Vars with constant weights.
template <typename T> Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

}  // namespace dualmod::ag
