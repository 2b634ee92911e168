#pragma once

// Supervised cross-entropy and Dice terms, detached pseudo-labels, the
// cross-modal consistency term and their weighted total.
//
// Probability tensors are (N, C, D, H, W) softmax outputs. Targets are class
// indices laid out as (N, D, H, W).

#include <cstdint>
#include <span>

#include "dualmod/autograd.hpp"

namespace dualmod {

inline constexpr double kDiceEpsilon = 1e-5;
inline constexpr double kLogClamp = 1e-7;

/// Mean over voxels and batch of -log(max(p[target], 1e-7)).
template <typename T>
ag::Var<T> ce_loss(const ag::Var<T>& probs, std::span<const std::uint8_t> target);

/// 1 - mean over classes (background included) of (2 sum p t + eps) / (sum p + sum t + eps),
/// computed per sample and averaged over the batch.
template <typename T>
ag::Var<T> dice_loss(const ag::Var<T>& probs, std::span<const std::uint8_t> target, double eps = kDiceEpsilon);

template <typename T>
struct SupervisedTerms {
  ag::Var<T> ce_a, ce_b, dice_a, dice_b;
};

/// Cross-entropy and Dice of each branch against the shared target.
template <typename T>
SupervisedTerms<T> supervised_loss(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b,
                                   std::span<const std::uint8_t> target, double dice_eps = kDiceEpsilon);

template <typename T>
struct PseudoLabelPair {
  ag::Var<T> pl_a;
  ag::Var<T> pl_b;
};

/// Copies of the soft predictions with no link back to the network.
template <typename T>
PseudoLabelPair<T> make_pseudo_labels(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b);

/// Mean of the squared differences (prob_a - pl_b) and (prob_b - pl_a) taken
/// together over every voxel, class and sample, i.e. (mse_a + mse_b) / 2.
template <typename T>
ag::Var<T> consistency_loss(const ag::Var<T>& prob_a, const ag::Var<T>& prob_b, const PseudoLabelPair<T>& pl);

/// Plain numbers for logging.
struct LossBundle {
  double ce_a = 0, ce_b = 0, dice_a = 0, dice_b = 0, consistency = 0, total = 0, alpha = 0;

  [[nodiscard]] double supervised() const { return ce_a + ce_b + dice_a + dice_b; }
  [[nodiscard]] bool finite() const;
};

template <typename T>
struct LossGraph {
  SupervisedTerms<T> sup;
  ag::Var<T> consistency;  // undefined when there is no unsupervised term
  ag::Var<T> total;
  double alpha = 0;

  [[nodiscard]] LossBundle values() const;
};

/// total = (ce_a + ce_b + dice_a + dice_b) + alpha * consistency. An undefined
/// `consistency` contributes zero.
template <typename T>
LossGraph<T> total_loss(const SupervisedTerms<T>& sup, const ag::Var<T>& consistency, double alpha);

/// Consistency weight at iteration `it`: `alpha` when `rampup_iters` is 0,
/// otherwise alpha * exp(-5 (1 - t)^2) with t = min(it / rampup_iters, 1).
double alpha_at(long it, double alpha, long rampup_iters);

}  // namespace dualmod
