#pragma once

// Volumes, label masks, aligned two-modality samples and the dataset split.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualmod/rng.hpp"

namespace dualmod {

struct Extent3 {
  int d = 0, h = 0, w = 0;

  [[nodiscard]] std::size_t numel() const { return static_cast<std::size_t>(d) * h * w; }
  [[nodiscard]] std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * h + y) * w + x;
  }
  bool operator==(const Extent3&) const = default;
  [[nodiscard]] std::string str() const;
};

/// Millimetres per voxel along (d, h, w).
using Spacing = std::array<double, 3>;

struct Volume {
  Extent3 extent;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> voxels;

  Volume() = default;
  Volume(Extent3 e, Spacing s, float fill = 0.0f) : extent(e), spacing(s), voxels(e.numel(), fill) {}

  [[nodiscard]] float at(int z, int y, int x) const { return voxels[extent.index(z, y, x)]; }
  float& at(int z, int y, int x) { return voxels[extent.index(z, y, x)]; }

  /// Throws DataError unless extents >= 1, spacing > 0 and all voxels finite.
  void validate() const;
};

struct SegMask {
  Extent3 extent;
  int num_classes = 2;
  std::vector<std::uint8_t> labels;

  SegMask() = default;
  SegMask(Extent3 e, int classes) : extent(e), num_classes(classes), labels(e.numel(), 0) {}

  [[nodiscard]] std::uint8_t at(int z, int y, int x) const { return labels[extent.index(z, y, x)]; }
  std::uint8_t& at(int z, int y, int x) { return labels[extent.index(z, y, x)]; }

  void validate() const;
};

struct ModalitySample {
  std::string id;
  Volume vol_a;
  Volume vol_b;
  std::optional<SegMask> mask;

  [[nodiscard]] bool labeled() const { return mask.has_value(); }
  [[nodiscard]] const Extent3& extent() const { return vol_a.extent; }
  void validate() const;
};

struct DatasetSplit {
  std::vector<ModalitySample> labeled;
  std::vector<ModalitySample> unlabeled;  // masks kept for post-hoc analysis, never fed to training
  std::vector<ModalitySample> val;
  std::vector<ModalitySample> test;
};

struct Batch {
  std::vector<ModalitySample> labeled_samples;
  std::vector<ModalitySample> unlabeled_samples;

  [[nodiscard]] std::size_t size() const { return labeled_samples.size() + unlabeled_samples.size(); }
};

/// Samples reserved before the labeled/unlabeled pool is formed.
struct Holdout {
  std::size_t val = 0;
  std::size_t test = 0;
};

/// Shuffles `samples` with `seed`, sets aside test then validation samples,
/// and labels max(1, floor(fraction * pool)) of the remaining pool.
DatasetSplit make_split(std::vector<ModalitySample> samples, double labeled_fraction, std::uint64_t seed,
                        Holdout holdout = {});

struct PatchSpec;

/// Draws `labeled_count` labeled and `batch_size - labeled_count` unlabeled
/// samples with replacement, each cut to a random patch when `patch` is given.
/// Unlabeled samples come back without masks. Consumes exactly two values of
/// `rng` per call, so the labeled draws do not depend on the unlabeled ones.
Batch compose_batch(const DatasetSplit& split, int batch_size, int labeled_count, Rng& rng,
                    const PatchSpec* patch = nullptr);

// ---- manifest ----

struct ManifestEntry {
  std::string id;
  std::string path_a;
  std::string path_b;
  std::string path_mask;  // empty for unlabeled samples
};

/// `id<TAB>path_a<TAB>path_b<TAB>path_mask` per line; blank lines and lines
/// starting with '#' are skipped. Relative paths are kept as written.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

/// Reads every sample listed in a manifest, resolving relative paths against
/// the manifest's directory.
std::vector<ModalitySample> load_manifest(const std::string& path, int num_classes);

}  // namespace dualmod
