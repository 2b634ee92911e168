#pragma once

// Finite-difference verification of the analytic gradients of the total loss.

#include <string>
#include <vector>

#include "dualmod/config.hpp"

namespace dualmod {

struct GradGroupReport {
  std::string name;  // parameter tensor name
  std::size_t checked = 0;     // entries compared
  std::size_t refined = 0;     // entries whose step had to shrink to avoid a rectifier kink
  std::size_t unresolved = 0;  // entries still crossing a kink at the smallest step
  double analytic_norm = 0;
  double numeric_norm = 0;
  /// |a - n| / max(|a|, |n|) over the checked entries (Euclidean norms).
  double rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradGroupReport> groups;
  double max_rel_error = 0;
  double tolerance = 0;
  /// Largest |dL/dtheta| reached through the pseudo-labels alone; must be 0.
  double pseudo_label_grad = 0;
  /// Norm of the consistency gradient reaching the parameters through the live
  /// predictions; nonzero for a generic micro-batch.
  double live_consistency_grad = 0;
  bool mcml = false;

  [[nodiscard]] bool passed() const;
  [[nodiscard]] std::string format() const;
};

/// Builds the network of cfg.network in double precision with
/// cfg.check_grad.seed, draws a synthetic micro-batch (one labeled and, with
/// trainer.mcml_enabled, one unlabeled sample) of cfg.check_grad.patch_shape,
/// and compares backprop against central differences. Dropout masks and
/// pseudo-labels are held fixed while parameters are perturbed. Entries whose
/// +-step perturbation changes the sign of any rectifier input are measured
/// again with successively smaller steps, since the central difference then
/// straddles a kink and estimates no derivative.
GradCheckReport check_grad(const ExperimentConfig& cfg);

}  // namespace dualmod
