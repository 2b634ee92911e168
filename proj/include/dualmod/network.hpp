#pragma once

// Dual-branch 3D encoder-decoder with per-stage cross-modal fusion and a
// modality-aware channel re-weighting at the bottleneck.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualmod/autograd.hpp"

namespace dualmod {

struct NetworkConfig {
  int in_channels = 1;
  int base_channels = 16;
  int num_stages = 4;
  int num_classes = 2;
  bool mmf_enabled = true;
  bool mae_enabled = true;
  double dropout_rate = 0.5;
  int mae_kernel_small = 3;
  int mae_kernel_large = 5;

  /// Feature channels produced by encoder stage `s` (0-based).
  [[nodiscard]] int stage_channels(int s) const { return base_channels << s; }
  /// Spatial extents must be divisible by this.
  [[nodiscard]] int spatial_divisor() const { return 1 << (num_stages - 1); }
  void validate() const;
};

template <typename T>
struct ConvParams {
  ag::Var<T> weight;  // (out, in, k, k, k)
  ag::Var<T> bias;    // (out)
};

template <typename T>
struct NormParams {
  ag::Var<T> gamma;
  ag::Var<T> beta;
};

template <typename T>
struct LinearParams {
  ag::Var<T> weight;  // (out, in)
  ag::Var<T> bias;
};

template <typename T>
struct ConvBlockParams {
  ConvParams<T> conv1;
  NormParams<T> norm1;
  ConvParams<T> conv2;
  NormParams<T> norm2;
};

/// conv1: 2C -> C, conv2: C -> C, both 3x3x3.
template <typename T>
struct FusionLayerParams {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
};

/// Attention transforms of one branch: two receptive fields and a C -> C affine map.
template <typename T>
struct MAEBranchParams {
  ConvParams<T> psi_small;
  ConvParams<T> psi_large;
  LinearParams<T> fc;
};

template <typename T>
struct MAEParams {
  MAEBranchParams<T> a;
  MAEBranchParams<T> b;
};

template <typename T>
struct BranchParams {
  std::vector<ConvBlockParams<T>> encoder;  // num_stages blocks
  std::vector<ConvBlockParams<T>> decoder;  // num_stages - 1 blocks, deepest first
  ConvParams<T> head;                       // 1x1x1, stage0 channels -> classes
};

template <typename T>
struct NamedParameter {
  std::string name;
  ag::Var<T> var;
};

template <typename T>
class DualBranchModel {
 public:
  /// Initializes every parameter from `seed`. A parameter's initial value
  /// depends only on (seed, its name), so toggling a module leaves the
  /// remaining parameters untouched.
  static DualBranchModel create(const NetworkConfig& cfg, std::uint64_t seed);

  [[nodiscard]] const NetworkConfig& config() const { return cfg_; }

  /// All learnable tensors in a stable order.
  [[nodiscard]] std::vector<NamedParameter<T>> parameters() const;

  /// Deep copy converted to scalar type U. Plain copies of a model share
  /// parameter storage; use cast<T>() or clone() for an independent copy.
  template <typename U>
  [[nodiscard]] DualBranchModel<U> cast() const;
  [[nodiscard]] DualBranchModel clone() const { return cast<T>(); }

  BranchParams<T> branch_a;
  BranchParams<T> branch_b;
  std::vector<FusionLayerParams<T>> fusion;  // empty when mmf is off
  std::optional<MAEParams<T>> mae;           // absent when mae is off

 private:
  template <typename U>
  friend class DualBranchModel;
  NetworkConfig cfg_;
};

template <typename T>
struct DualOutput {
  ag::Var<T> prob_a;  // (N, classes, D, H, W)
  ag::Var<T> prob_b;
};

template <typename T>
struct ModalityWeights {
  ag::Var<T> w_a;  // (N, C)
  ag::Var<T> w_b;
};

/// sigmoid(conv2(relu(conv1(concat(f_a, f_b))))).
template <typename T>
ag::Var<T> mmf_fuse(const ag::Var<T>& f_a, const ag::Var<T>& f_b, const FusionLayerParams<T>& params);

/// f + fused.
template <typename T>
ag::Var<T> inject_fused(const ag::Var<T>& f, const ag::Var<T>& fused);

/// Per-branch logits z_m = fc_m(gap(psi_small_m(F_m) + psi_large_m(F_m))), then
/// a two-way softmax across modalities for every channel.
template <typename T>
ModalityWeights<T> mae_weights(const ag::Var<T>& f_a, const ag::Var<T>& f_b, const MAEParams<T>& params);

/// out[:, c] = 2 * w[:, c] * f[:, c]; neutral at w = 0.5.
template <typename T>
ag::Var<T> mae_enhance(const ag::Var<T>& f, const ag::Var<T>& w);

/// Runs both branches. x_a, x_b: (N, in_channels, D, H, W). Dropout masks are
/// derived from `dropout_seed` and are only drawn when `train_mode` is set.
template <typename T>
DualOutput<T> forward_dual(const DualBranchModel<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                           bool train_mode, std::uint64_t dropout_seed = 0);

template <typename T>
std::size_t param_count(const DualBranchModel<T>& model);

// ---------------------------------------------------------------------------

template <typename T>
template <typename U>
DualBranchModel<U> DualBranchModel<T>::cast() const {
  DualBranchModel<U> out = DualBranchModel<U>::create(cfg_, 0);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].var.value();
    auto to = dst[i].var.mutable_value();
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<U>(from[j]);
  }
  return out;
}

}  // namespace dualmod
