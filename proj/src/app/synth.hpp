#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "volume/volume.hpp"

namespace voxelseg::app {

/// Mean intensity of one modality per tissue class.
struct TissueProfile {
  double brain = 0.0;
  double edema = 0.0;
  double necrosis = 0.0;
  double enhancing = 0.0;
};

struct SyntheticCaseSpec {
  std::array<std::int64_t, 3> shape = {32, 32, 32};
  double r_enh = 3.0;
  double r_core = 5.0;
  double r_whole = 8.0;
  double centre_jitter = 3.0;  // whole voxels, uniform per axis
  double radius_jitter = 1.0;  // uniform, per radius
  double brain_fraction = 0.42;  // ellipsoid semi-axis / extent
  double noise_sigma = 30.0;
  double intensity_scale = 1000.0;
  std::array<TissueProfile, 4> profiles = {{
      {0.60, 0.50, 0.30, 0.45},  // t1
      {0.55, 0.50, 0.25, 0.95},  // t1ce
      {0.45, 0.85, 0.90, 0.65},  // t2
      {0.40, 0.90, 0.60, 0.70},  // flair
  }};
  Spacing spacing{1.0, 1.0, 1.0};
  std::uint64_t seed = 0;

  /// Throws SpecError (nesting violated, bad shape or parameters).
  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticCaseSpec& s);
void from_json(const nlohmann::json& j, SyntheticCaseSpec& s);

/// Case `index` of the dataset defined by spec: nested spherical tumour
/// (4 inside r_enh, 1 up to r_core, 2 up to r_whole) inside an ellipsoid
/// brain, Gaussian noise within the brain, zero background. Includes
/// age and survival metadata.
MultiModalCase synth_case(const SyntheticCaseSpec& spec, int index);
std::vector<MultiModalCase> synth_dataset(const SyntheticCaseSpec& spec, int n_cases);

}  // namespace voxelseg::app
