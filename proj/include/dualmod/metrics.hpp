#pragma once

// Overlap and surface-distance metrics.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dualmod/data.hpp"
#include "dualmod/error.hpp"

namespace dualmod {

/// 2|P n G| / (|P| + |G|) over the voxels of `class_id`; 1 when both are empty.
double dice_score(const SegMask& pred, const SegMask& gt, int class_id);

using Voxel = std::array<int, 3>;

/// Voxels of `class_id` with at least one 6-neighbour outside the class or
/// outside the array, in raster order.
std::vector<Voxel> extract_surface(const SegMask& mask, int class_id);

/// Raised when one of the two surfaces is empty.
class UndefinedDistance : public DataError {
 public:
  using DataError::DataError;
};

/// Symmetric mean distance in mm between the surfaces of P and G.
double asd(const SegMask& pred, const SegMask& gt, int class_id, const Spacing& spacing);

/// Squared Euclidean distance in mm^2 from every voxel to the nearest voxel
/// with features[i] != 0; +inf everywhere when there is none.
std::vector<double> squared_distance_transform(const std::vector<unsigned char>& features, const Extent3& e,
                                               const Spacing& spacing);

struct SampleMetrics {
  std::string id;
  double dsc = 0;
  std::optional<double> asd_mm;  // empty when a surface was missing
};

struct MetricsReport {
  std::vector<SampleMetrics> per_sample;
  double dsc_mean = 0, dsc_std = 0;
  double asd_mean = 0, asd_std = 0;
  int asd_undefined = 0;  // samples left out of the ASD aggregate
  int asd_count = 0;

  [[nodiscard]] std::string summary() const;
};

struct LabeledMask {
  std::string id;
  SegMask mask;
  Spacing spacing{1.0, 1.0, 1.0};
};

/// Per-sample metrics averaged over the foreground classes, then population
/// mean and std across samples. Predictions and references must list the same
/// ids in the same order; spacing is taken from the references.
MetricsReport evaluate_dataset(const std::vector<LabeledMask>& predictions, const std::vector<LabeledMask>& references);

/// Recomputes the aggregates from per_sample.
void aggregate(MetricsReport& report);

/// `id,dsc,asd_mm` rows (empty asd when undefined) and a `# summary` line.
void write_metrics_csv(const std::string& path, const MetricsReport& report);

}  // namespace dualmod
