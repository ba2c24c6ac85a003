#pragma once

#include <vector>

namespace voxelseg::stats {

/// Linear-interpolation percentile (p in [0, 100]) of an ascending sequence.
double percentile_sorted(const std::vector<double>& sorted, double p);
double percentile(std::vector<double> values, double p);

/// 1-based ranks; ties share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& values);

/// Pearson correlation; 0 when either side has zero variance.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace voxelseg::stats
