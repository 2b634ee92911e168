#pragma once

// Paired-modality phantoms with known ground truth. A union of ellipsoids is
// bright in modality a and dark in modality b; each modality gets its own
// Gaussian noise.

#include <cstdint>
#include <vector>

#include "dualmod/data.hpp"

namespace dualmod {

/// Axis-aligned ellipsoid in voxel coordinates; voxel (z, y, x) is inside when
/// sum(((c - centre) / radius)^2) <= 1 over the three axes.
struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> radius;

  [[nodiscard]] bool contains(int z, int y, int x) const;
};

struct SynthSpec {
  Extent3 shape{16, 16, 16};
  int num_blobs = 2;  // 1..3
  double noise_sigma = 0.1;
  double contrast_a = 0.6;
  double contrast_b = 0.6;
  /// Ellipsoids that appear in only one modality (alternating a, b, a, ...)
  /// and are not part of the mask.
  int num_decoys = 0;
  std::uint64_t seed = 0;
  /// When non-empty these replace the random lesion geometry.
  std::vector<Ellipsoid> blobs;

  void validate() const;
};

/// Random lesion geometry drawn for `spec` (or spec.blobs when given).
std::vector<Ellipsoid> sample_blobs(const SynthSpec& spec);

ModalitySample generate_sample(const SynthSpec& spec);

/// Samples with seeds base_seed + i and ids "synth_<seed>".
std::vector<ModalitySample> generate_dataset(int n, std::uint64_t base_seed, const SynthSpec& spec);

}  // namespace dualmod
