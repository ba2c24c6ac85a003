#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volume/volume.hpp"

namespace voxelseg::radiomics {

// ---- feature lists (canonical order) -------------------------------------------

inline constexpr std::array<const char*, 13> kShapeFeatures = {
    "volume",          "surface_area",    "surface_volume_ratio", "sphericity",     "max_3d_diameter",
    "max_2d_diameter_axial", "max_2d_diameter_coronal", "max_2d_diameter_sagittal", "major_axis_length",
    "minor_axis_length", "least_axis_length", "elongation",   "flatness"};

inline constexpr std::array<const char*, 19> kFirstOrderFeatures = {
    "energy", "total_energy", "entropy", "minimum", "p10", "p90", "maximum", "mean", "median", "iqr",
    "range", "mad", "robust_mad", "rms", "std", "skewness", "kurtosis", "variance", "uniformity"};

inline constexpr std::array<const char*, 28> kGlcmFeatures = {
    "autocorrelation", "joint_average", "cluster_prominence", "cluster_shade", "cluster_tendency",
    "contrast", "correlation", "difference_average", "difference_entropy", "difference_variance",
    "joint_energy", "joint_entropy", "imc1", "imc2", "idm", "idmn", "id", "idn", "inverse_variance",
    "mcc", "maximum_probability", "sum_average", "sum_entropy", "sum_squares", "sum_variance",
    "sum_energy", "difference_energy", "difference_max_probability"};

// ---- shape --------------------------------------------------------------------

/// Width (voxels) of the Gaussian used by the surface-area estimate.
inline constexpr double kSurfaceSmoothingSigma = 1.0;

/// Surface area (mm^2): integral of |grad(G * indicator)| over the grid,
/// G a Gaussian of kSurfaceSmoothingSigma voxels per axis.
double surface_area(const Mask& mask, const Spacing& spacing);

/// kShapeFeatures order. Throws EmptyRegion.
std::array<double, 13> shape_features(const Mask& mask, const Spacing& spacing);

// ---- first order ----------------------------------------------------------------

inline constexpr int kHistogramBins = 32;

/// kFirstOrderFeatures order. Entropy and uniformity use kHistogramBins
/// min-max bins over the masked values. Throws EmptyRegion.
std::array<double, 19> first_order_features(const Volume3D& image, const Mask& mask);

// ---- GLCM ------------------------------------------------------------------------

struct GlcmConfig {
  int n_bins = 32;
  std::vector<int> distances = {1};
  /// Offsets (dz, dy, dx); empty selects the 13 canonical 3D directions.
  std::vector<std::array<int, 3>> directions;
  bool symmetric = true;

  std::vector<std::array<int, 3>> offsets() const;  // directions scaled by each distance
  void validate() const;
};

void to_json(nlohmann::json& j, const GlcmConfig& c);
void from_json(const nlohmann::json& j, GlcmConfig& c);

/// The 13 unit offsets with one representative of each +-pair.
std::vector<std::array<int, 3>> canonical_directions();

/// Min-max binning of masked voxels into 1..n_bins (0 outside the mask).
Grid3<int> bin_intensities(const Volume3D& image, const Mask& mask, int n_bins);

/// Raw co-occurrence counts [n_bins x n_bins], row = level at p, column =
/// level at p + offset (1-based levels stored at index level - 1).
std::vector<double> glcm_counts(const Grid3<int>& bins, int n_bins, const std::array<int, 3>& offset, bool symmetric);

/// Features of one normalized matrix restricted to gray levels `levels`
/// (1-based values; n = levels.size()), p row-major n x n.
std::array<double, 28> glcm_matrix_features(const std::vector<double>& p, const std::vector<int>& levels);

/// Direction-averaged kGlcmFeatures. Throws EmptyRegion, DegenerateGlcm
/// (a single gray level or no voxel pair in any direction).
std::array<double, 28> glcm_features(const Volume3D& image, const Mask& mask, const GlcmConfig& config = {});

/// Values reported when glcm_features is degenerate: the features of the
/// 1 x 1 matrix at gray level 1.
std::array<double, 28> glcm_degenerate_values();

// ---- assembly ---------------------------------------------------------------------

/// Region short names in canonical order.
inline constexpr std::array<const char*, 5> kRegionShortNames = {"ede", "enh", "nec", "core", "whole"};
Region region_from_short_name(const std::string& name);

struct FeatureVector {
  std::vector<std::string> names;  // 517 image features, then "age" when present
  std::vector<double> values;
  /// Per region short name: whether the region was nonempty.
  std::vector<std::pair<std::string, bool>> presence;
  /// Modality/region pairs whose GLCM was degenerate.
  std::vector<std::string> degenerate_glcm;
};

inline constexpr int kImageFeatureCount = 517;

/// Canonical names of the 517 image features.
std::vector<std::string> feature_names();

/// Feature groups for subset selection: "shape", "firstorder", "glcm",
/// "all"; "age" adds the age column. Returns indices into feature_names()
/// (age index = 517).
std::vector<std::size_t> feature_group_indices(const std::vector<std::string>& groups);

/// case: preprocessed modalities; seg: segmentation driving region masks.
/// Empty regions yield zeros with presence false.
FeatureVector assemble_features(const MultiModalCase& c, const LabelMap& seg, std::optional<double> age,
                                const GlcmConfig& config = {});

}  // namespace voxelseg::radiomics
