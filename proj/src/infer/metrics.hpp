#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "volume/volume.hpp"

namespace voxelseg::eval {

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Throws ShapeMismatch.
Confusion confusion(const Mask& pred, const Mask& ref);

/// 2|A n B| / (|A| + |B|); 1.0 when both are empty.
double dice_metric(const Mask& pred, const Mask& ref);

struct ConfusionMetrics {
  double sensitivity = 1.0;
  double specificity = 1.0;
  double ppv = 1.0;
};

/// 0/0 ratios read 1.0 when both masks are empty and 0.0 when only one
/// is (specificity 0/0 always reads 1.0).
ConfusionMetrics confusion_metrics(const Mask& pred, const Mask& ref);

/// Mask voxels with a 6-neighbour outside the mask or outside the grid.
Mask surface_voxels(const Mask& m);

/// Squared Euclidean distance (mm^2) from every voxel centre to the nearest
/// nonzero voxel of `features`; exact separable transform.
std::vector<double> squared_distance_transform(const Mask& features, const Spacing& spacing);

/// Symmetric surface distance: the larger of the two directed
/// `percentile`-th percentiles (linear interpolation) of nearest-surface
/// distances. Throws EmptyMask.
double hausdorff(const Mask& pred, const Mask& ref, const Spacing& spacing, double percentile = 95.0);

/// Linear-interpolation percentile of unsorted values, p in [0, 100].
double percentile_of(std::vector<double> values, double p);

struct RegionMetrics {
  double dice = 1.0;
  double sensitivity = 1.0;
  double specificity = 1.0;
  double ppv = 1.0;
  double hausdorff = 0.0;
  bool empty_reference = false;
  bool empty_prediction = false;
};

/// Regions reported per case, in this order.
inline constexpr std::array<Region, 3> kEvalRegions = {Region::Whole, Region::Core, Region::Enhancing};

struct MetricsReport {
  std::array<RegionMetrics, 3> regions;  // kEvalRegions order
};

/// Hausdorff reads 0 when both masks of a region are empty and the grid's
/// diagonal extent (mm) when exactly one is.
MetricsReport evaluate_case(const LabelMap& pred, const LabelMap& ref, const Spacing& spacing, double percentile = 95.0);

struct SummaryStats {
  std::int64_t n = 0;
  double mean = 0.0, std = 0.0, median = 0.0, q25 = 0.0, q75 = 0.0;
};
/// std uses n - 1 (0 for a single value); empty input gives n = 0 and zeros.
SummaryStats summarize(const std::vector<double>& values);
nlohmann::json summary_json(const SummaryStats& s);

}  // namespace voxelseg::eval
