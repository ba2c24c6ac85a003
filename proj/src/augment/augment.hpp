#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "common/rng.hpp"
#include "json.hpp"
#include "volume/volume.hpp"

namespace voxelseg::aug {

/// One training sample: image [C, D, H, W] plus its label map.
struct Sample {
  Tensor<float> image;
  LabelMap label;

  Dims3 dims() const noexcept { return label.dims(); }
  void validate() const;
};

struct AugmentationConfig {
  double rotation_max = 0.2617993877991494;  // 15 degrees, per axis
  double scale_low = 0.85;
  double scale_high = 1.15;
  double elastic_alpha = 10.0;  // voxels
  double elastic_sigma = 5.0;   // voxels
  double gamma_low = 0.8;
  double gamma_high = 1.2;
  std::vector<int> mirror_axes = {0, 1, 2};
  double p_rotation = 0.5;
  double p_scale = 0.5;
  double p_elastic = 0.5;
  double p_gamma = 0.5;
  double p_mirror = 0.5;  // per listed axis

  /// Throws ConfigError.
  void validate() const;
  /// Every probability zero.
  static AugmentationConfig disabled();
  /// Default end-of-training config: rotation, elastic, scale and gamma
  /// deviations halved.
  static AugmentationConfig attenuated_default();
};

void to_json(nlohmann::json& j, const AugmentationConfig& c);
void from_json(const nlohmann::json& j, AugmentationConfig& c);

struct AttenuationSchedule {
  AugmentationConfig initial;
  AugmentationConfig final = AugmentationConfig::attenuated_default();
  int total_epochs = 1;
};

/// Linear interpolation of every scalar at t = epoch / total_epochs; mirror
/// axes come from `initial`. Throws RangeError outside [0, total_epochs].
AugmentationConfig attenuate(const AttenuationSchedule& s, int epoch);

/// Flips image and label along each listed axis (0 = D, 1 = H, 2 = W).
void mirror(Sample& s, const std::vector<int>& axes);
/// Image-only variant for [C, D, H, W] or [N, C, D, H, W] tensors.
void mirror_tensor(Tensor<float>& t, const std::vector<int>& axes);

struct SpatialParams {
  std::array<double, 3> rotation{0.0, 0.0, 0.0};  // radians about axes 0, 1, 2
  double scale = 1.0;
  Tensor<float> displacement;  // [3, D, H, W] voxels, or empty for none
};

/// Backward warp about the volume centre c: output voxel p samples the
/// input at c + R^T (p - c) / scale + displacement(p). Images trilinear,
/// labels nearest; outside samples read 0.
Sample apply_spatial(const Sample& s, const SpatialParams& p);

/// Uniform [-1, 1] per voxel and component, separable Gaussian smoothing
/// (zero padding, truncated at 3 sigma), scaled by alpha.
Tensor<float> elastic_field(Dims3 dims, double alpha, double sigma, Rng& rng);

/// x -> x^gamma. Throws RangeError if a value lies outside [0, 1].
void gamma_augment(Tensor<float>& image, double gamma);

/// Draws and applies spatial, gamma and mirror transforms to every sample.
/// Sample i uses the stream derive_seed(seed, i), so results do not depend
/// on the thread count.
void augment_batch(std::vector<Sample>& batch, const AugmentationConfig& c, std::uint64_t seed);
void augment_sample(Sample& s, const AugmentationConfig& c, Rng& rng);

}  // namespace voxelseg::aug
