#include "volume/volume.hpp"

#include <algorithm>
#include <cmath>

namespace voxelseg {

std::string dims_string(const Dims3& dims) {
  return std::to_string(dims.d) + "x" + std::to_string(dims.h) + "x" + std::to_string(dims.w);
}

void Volume3D::check_spacing() const {
  for (double s : spacing_) {
    require(std::isfinite(s) && s > 0.0, ErrorCode::InvalidArgument, "voxel spacing must be positive and finite");
  }
}

std::int64_t Mask::count() const noexcept {
  return std::count_if(values().begin(), values().end(), [](std::uint8_t v) { return v != 0; });
}

void validate_labels(const LabelMap& label) {
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (!is_legal_label(label[i])) {
      fail(ErrorCode::InvalidLabel, "label value " + std::to_string(label[i]) + " at voxel " + std::to_string(i));
    }
  }
}

int label_channel(std::uint8_t label) {
  switch (label) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: fail(ErrorCode::InvalidLabel, "label value " + std::to_string(label));
  }
}

void MultiModalCase::validate() const {
  const Dims3& ref = modalities[0].dims();
  for (int m = 1; m < kNumModalities; ++m) {
    require(modalities[m].dims() == ref, ErrorCode::ShapeMismatch,
            std::string(kModalityNames[m]) + " is " + dims_string(modalities[m].dims()) + ", t1 is " + dims_string(ref));
  }
  if (label) {
    require(label->dims() == ref, ErrorCode::ShapeMismatch,
            "label is " + dims_string(label->dims()) + ", volumes are " + dims_string(ref));
    validate_labels(*label);
  }
}

const char* region_name(Region r) noexcept {
  switch (r) {
    case Region::Whole: return "whole";
    case Region::Core: return "core";
    case Region::Enhancing: return "enhancing";
    case Region::Edema: return "edema";
    case Region::Necrosis: return "necrosis";
  }
  return "?";
}

Mask compute_brain_mask(const MultiModalCase& c) {
  c.validate();
  Mask mask(c.dims(), 0);
  for (const auto& vol : c.modalities) {
    for (std::size_t i = 0; i < vol.size(); ++i) {
      if (vol[i] != 0.0f) mask[i] = 1;
    }
  }
  require(mask.count() > 0, ErrorCode::EmptyBrainMask, "case '" + c.id + "' has no nonzero voxel");
  return mask;
}

Volume3D normalize_modality(const Volume3D& vol, const Mask& mask) {
  require(vol.dims() == mask.dims(), ErrorCode::ShapeMismatch, "mask does not match volume");
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    if (mask[i]) {
      sum += vol[i];
      ++n;
    }
  }
  require(n > 0, ErrorCode::EmptyBrainMask, "brain mask is empty");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    if (mask[i]) {
      const double d = vol[i] - mean;
      ss += d * d;
    }
  }
  const double stddev = std::sqrt(ss / static_cast<double>(n));
  require(stddev > kStdEpsilon, ErrorCode::DegenerateIntensity, "brain-region intensity is constant");

  Volume3D out(vol.dims(), vol.spacing(), 0.0f);
  for (std::size_t i = 0; i < vol.size(); ++i) {
    if (!mask[i]) continue;
    const double z = std::clamp((vol[i] - mean) / stddev, -5.0, 5.0);
    out[i] = static_cast<float>((z + 5.0) / 10.0);
  }
  return out;
}

MultiModalCase preprocess_case(const MultiModalCase& c) {
  const Mask mask = compute_brain_mask(c);
  MultiModalCase out;
  out.id = c.id;
  for (int m = 0; m < kNumModalities; ++m) out.modalities[m] = normalize_modality(c.modalities[m], mask);
  out.label = c.label;
  out.age = c.age;
  out.survival_days = c.survival_days;
  return out;
}

Tensor<float> one_hot_encode(const LabelMap& label) {
  const Dims3& d = label.dims();
  const auto n = static_cast<std::size_t>(d.voxels());
  Tensor<float> out({4, d.d, d.h, d.w}, 0.0f);
  for (std::size_t i = 0; i < n; ++i) out[static_cast<std::size_t>(label_channel(label[i])) * n + i] = 1.0f;
  return out;
}

LabelMap argmax_decode(const Tensor<float>& scores, Dims3 dims) {
  const auto n = static_cast<std::size_t>(dims.voxels());
  require(scores.size() == 4 * n, ErrorCode::ShapeMismatch, "score tensor must hold 4 channels of " + dims_string(dims));
  LabelMap out(dims, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < 4; ++c) {
      if (scores[c * n + i] > scores[best * n + i]) best = c;
    }
    out[i] = kChannelLabels[best];
  }
  return out;
}

Mask region_mask(const LabelMap& label, Region region) {
  Mask out(label.dims(), 0);
  for (std::size_t i = 0; i < label.size(); ++i) {
    const std::uint8_t v = label[i];
    bool in = false;
    switch (region) {
      case Region::Whole: in = v == 1 || v == 2 || v == 4; break;
      case Region::Core: in = v == 1 || v == 4; break;
      case Region::Enhancing: in = v == 4; break;
      case Region::Edema: in = v == 2; break;
      case Region::Necrosis: in = v == 1; break;
    }
    out[i] = in ? 1 : 0;
  }
  return out;
}

}  // namespace voxelseg
