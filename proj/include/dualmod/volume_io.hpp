#pragma once

// Volume file formats.
//
// Raw: little-endian int32 header (magic, D, H, W, C) followed by D*H*W
// float32 values. C is 1 for intensity images; for label masks it carries the
// class count and the values are class indices. Spacing is not stored.
//
// NIfTI-1: single-file .nii or gzip-compressed .nii.gz. The i axis maps to W,
// j to H and k to D.

#include <string>

#include "dualmod/data.hpp"

namespace dualmod {

inline constexpr int kRawMagic = 0x4c56444d;

void write_raw_volume(const std::string& path, const Volume& v);
void write_raw_mask(const std::string& path, const SegMask& m);
Volume read_raw_volume(const std::string& path);
SegMask read_raw_mask(const std::string& path);

Volume read_nifti_volume(const std::string& path);
SegMask read_nifti_mask(const std::string& path, int num_classes);
/// Writes float32 NIfTI; gzip-compressed when the path ends in ".gz".
void write_nifti_volume(const std::string& path, const Volume& v);

/// Dispatches on the extension: .nii / .nii.gz are NIfTI, anything else raw.
Volume read_volume(const std::string& path);
SegMask read_mask(const std::string& path, int num_classes);

}  // namespace dualmod
