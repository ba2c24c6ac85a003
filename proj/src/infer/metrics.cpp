#include "infer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "common/stats.hpp"

namespace voxelseg::eval {

Confusion confusion(const Mask& pred, const Mask& ref) {
  require(pred.dims() == ref.dims(), ErrorCode::ShapeMismatch,
          "mask shapes " + dims_string(pred.dims()) + " and " + dims_string(ref.dims()) + " differ");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, r = ref[i] != 0;
    if (p && r) ++c.tp;
    else if (p) ++c.fp;
    else if (r) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice_metric(const Mask& pred, const Mask& ref) {
  const Confusion c = confusion(pred, ref);
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

ConfusionMetrics confusion_metrics(const Mask& pred, const Mask& ref) {
  const Confusion c = confusion(pred, ref);
  const bool pred_empty = c.tp + c.fp == 0, ref_empty = c.tp + c.fn == 0;
  const double empty_value = pred_empty && ref_empty ? 1.0 : 0.0;
  auto ratio = [&](std::int64_t num, std::int64_t den, double zero_over_zero) {
    return den == 0 ? zero_over_zero : static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(c.tp, c.tp + c.fn, empty_value), ratio(c.tn, c.tn + c.fp, 1.0), ratio(c.tp, c.tp + c.fp, empty_value)};
}

Mask surface_voxels(const Mask& m) {
  const Dims3 d = m.dims();
  Mask s(d, 0);
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z == d.d - 1 || y == d.h - 1 || x == d.w - 1;
        if (edge || !m.at(z - 1, y, x) || !m.at(z + 1, y, x) || !m.at(z, y - 1, x) || !m.at(z, y + 1, x) ||
            !m.at(z, y, x - 1) || !m.at(z, y, x + 1))
          s.at(z, y, x) = 1;
      }
  return s;
}

namespace {

constexpr double kFar = 1e30;

// 1D lower-envelope transform of f with squared step w2 per index.
void edt_1d(const double* f, double* out, std::int64_t n, double w2, std::vector<std::int64_t>& v, std::vector<double>& z) {
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n + 1), 0.0);
  auto cross = [&](std::int64_t q, std::int64_t p) {
    return ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * static_cast<double>(q - p));
  };
  std::int64_t k = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::int64_t q = 1; q < n; ++q) {
    double s = cross(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = cross(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q - v[k]);
    out[q] = std::min(kFar, f[v[k]] + w2 * dq * dq);
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const Mask& features, const Spacing& spacing) {
  const Dims3 d = features.dims();
  std::vector<double> g(static_cast<std::size_t>(d.voxels()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features[i] ? 0.0 : kFar;
  std::vector<std::int64_t> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = d[axis];
    const std::int64_t stride = axis == 0 ? d.h * d.w : axis == 1 ? d.w : 1;
    const double w2 = spacing[axis] * spacing[axis];
    std::vector<double> line(static_cast<std::size_t>(n)), res(static_cast<std::size_t>(n));
    const std::int64_t lines = d.voxels() / n;
    for (std::int64_t l = 0; l < lines; ++l) {
      std::int64_t start;
      if (axis == 2) start = l * d.w;
      else if (axis == 1) start = (l / d.w) * d.h * d.w + (l % d.w);
      else start = l;
      for (std::int64_t i = 0; i < n; ++i) line[i] = g[start + i * stride];
      edt_1d(line.data(), res.data(), n, w2, v, z);
      for (std::int64_t i = 0; i < n; ++i) g[start + i * stride] = res[i];
    }
  }
  return g;
}

double percentile_of(std::vector<double> values, double p) { return stats::percentile(std::move(values), p); }

namespace {

std::vector<double> directed(const Mask& from_surface, const std::vector<double>& to_sq) {
  std::vector<double> out;
  for (std::size_t i = 0; i < from_surface.size(); ++i)
    if (from_surface[i]) out.push_back(std::sqrt(to_sq[i]));
  return out;
}

}  // namespace

double hausdorff(const Mask& pred, const Mask& ref, const Spacing& spacing, double percentile) {
  require(pred.dims() == ref.dims(), ErrorCode::ShapeMismatch, "hausdorff: mask shapes differ");
  require(pred.count() > 0 && ref.count() > 0, ErrorCode::EmptyMask, "hausdorff needs two nonempty masks");
  const Mask sp = surface_voxels(pred), sr = surface_voxels(ref);
  const auto to_ref = squared_distance_transform(sr, spacing);
  const auto to_pred = squared_distance_transform(sp, spacing);
  return std::max(percentile_of(directed(sp, to_ref), percentile), percentile_of(directed(sr, to_pred), percentile));
}

MetricsReport evaluate_case(const LabelMap& pred, const LabelMap& ref, const Spacing& spacing, double percentile) {
  require(pred.dims() == ref.dims(), ErrorCode::ShapeMismatch,
          "prediction " + dims_string(pred.dims()) + " and reference " + dims_string(ref.dims()) + " differ");
  const Dims3 d = ref.dims();
  const double diag = std::sqrt(std::pow((d.d - 1) * spacing[0], 2) + std::pow((d.h - 1) * spacing[1], 2) +
                                std::pow((d.w - 1) * spacing[2], 2));
  MetricsReport r;
  for (std::size_t k = 0; k < kEvalRegions.size(); ++k) {
    const Mask p = region_mask(pred, kEvalRegions[k]);
    const Mask q = region_mask(ref, kEvalRegions[k]);
    RegionMetrics& m = r.regions[k];
    m.dice = dice_metric(p, q);
    const ConfusionMetrics c = confusion_metrics(p, q);
    m.sensitivity = c.sensitivity;
    m.specificity = c.specificity;
    m.ppv = c.ppv;
    m.empty_prediction = p.count() == 0;
    m.empty_reference = q.count() == 0;
    if (m.empty_prediction && m.empty_reference) m.hausdorff = 0.0;
    else if (m.empty_prediction || m.empty_reference) m.hausdorff = diag;
    else m.hausdorff = hausdorff(p, q, spacing, percentile);
  }
  return r;
}

SummaryStats summarize(const std::vector<double>& values) {
  SummaryStats s;
  s.n = static_cast<std::int64_t>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  s.median = percentile_of(values, 50.0);
  s.q25 = percentile_of(values, 25.0);
  s.q75 = percentile_of(values, 75.0);
  return s;
}

nlohmann::json summary_json(const SummaryStats& s) {
  return {{"n", s.n}, {"mean", s.mean}, {"std", s.std}, {"median", s.median}, {"q25", s.q25}, {"q75", s.q75}};
}

}  // namespace voxelseg::eval
