#pragma once

#include <string>

#include "dualmod/data.hpp"

namespace dualmod {

struct WindowSpec {
  double level = 40.0;
  double width = 400.0;
};

struct PatchSpec {
  Extent3 shape{16, 16, 16};
};

enum class Modality { a, b };

/// (v - min) / (max - min); all zeros for a constant volume.
Volume minmax_normalize(const Volume& v);

/// clamp((x - (level - width / 2)) / width, 0, 1).
Volume hu_window(const Volume& v, const WindowSpec& w);

/// Crops both modalities and the mask to the bounding box of the nonzero
/// voxels of the reference modality.
ModalitySample crop_nonzero(const ModalitySample& s, Modality reference);

/// Zero-pads (class 0 for the mask) at the high end of every axis up to `shape`.
ModalitySample pad_to(const ModalitySample& s, const Extent3& shape);

/// Crops a patch at one uniformly drawn offset shared by both modalities and
/// the mask. Inputs smaller than the patch are padded first.
ModalitySample random_patch(const ModalitySample& s, const PatchSpec& p, Rng& rng);

/// Copies the box [origin, origin + shape) out of every component.
ModalitySample extract_box(const ModalitySample& s, const Extent3& origin, const Extent3& shape);

enum class NormalizeMode { minmax, window };

struct PreprocessConfig {
  NormalizeMode normalize = NormalizeMode::minmax;
  WindowSpec ct_window;
  bool crop = false;
};

/// Normalization and optional cropping applied to a full sample before
/// patching. In window mode modality a is treated as CT and windowed; modality
/// b is min-max normalized.
ModalitySample preprocess(const ModalitySample& s, const PreprocessConfig& cfg);

NormalizeMode parse_normalize_mode(const std::string& name);

}  // namespace dualmod
