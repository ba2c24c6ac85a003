#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "common/error.hpp"
#include "common/tensor.hpp"

namespace voxelseg {

/// Extent of a D x H x W grid; x (W) is the fastest-varying axis.
struct Dims3 {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t voxels() const noexcept { return d * h * w; }
  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept { return (z * h + y) * w + x; }
  std::int64_t operator[](int axis) const noexcept { return axis == 0 ? d : axis == 1 ? h : w; }
  bool valid() const noexcept { return d >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Dims3&, const Dims3&) = default;
};

std::string dims_string(const Dims3& dims);

/// Millimetres per voxel along (D, H, W).
using Spacing = std::array<double, 3>;

template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Dims3 dims, T fill = T{}) : dims_(dims) {
    require(dims.valid(), ErrorCode::ShapeMismatch, "grid dims must be >= 1, got " + dims_string(dims));
    data_.assign(static_cast<std::size_t>(dims.voxels()), fill);
  }
  Grid3(Dims3 dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    require(dims.valid() && static_cast<std::int64_t>(data_.size()) == dims.voxels(), ErrorCode::ShapeMismatch,
            "grid data length does not match " + dims_string(dims));
  }

  const Dims3& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& at(std::int64_t z, std::int64_t y, std::int64_t x) noexcept { return data_[dims_.index(z, y, x)]; }
  const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept { return data_[dims_.index(z, y, x)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  friend bool operator==(const Grid3& a, const Grid3& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

 private:
  Dims3 dims_;
  std::vector<T> data_;
};

/// Scalar intensity volume with voxel spacing.
class Volume3D : public Grid3<float> {
 public:
  Volume3D() = default;
  Volume3D(Dims3 dims, Spacing spacing, float fill = 0.0f) : Grid3<float>(dims, fill), spacing_(spacing) { check_spacing(); }
  Volume3D(Dims3 dims, Spacing spacing, std::vector<float> data)
      : Grid3<float>(dims, std::move(data)), spacing_(spacing) {
    check_spacing();
  }

  const Spacing& spacing() const noexcept { return spacing_; }

 private:
  void check_spacing() const;
  Spacing spacing_{1.0, 1.0, 1.0};
};

/// Tumour label map; legal values are 0, 1, 2 and 4.
class LabelMap : public Grid3<std::uint8_t> {
 public:
  using Grid3<std::uint8_t>::Grid3;
  explicit LabelMap(Grid3<std::uint8_t> g) : Grid3<std::uint8_t>(std::move(g)) {}
};

/// Boolean voxel mask stored as 0/1 bytes.
class Mask : public Grid3<std::uint8_t> {
 public:
  using Grid3<std::uint8_t>::Grid3;
  std::int64_t count() const noexcept;
};

inline bool is_legal_label(std::uint8_t v) noexcept { return v == 0 || v == 1 || v == 2 || v == 4; }

/// Throws InvalidLabel if any voxel is outside {0,1,2,4}.
void validate_labels(const LabelMap& label);

enum class Modality { T1 = 0, T1ce = 1, T2 = 2, Flair = 3 };
inline constexpr std::array<const char*, 4> kModalityNames = {"t1", "t1ce", "t2", "flair"};
inline constexpr int kNumModalities = 4;

/// Segmentation channel order: channel c holds label kChannelLabels[c].
inline constexpr std::array<std::uint8_t, 4> kChannelLabels = {0, 1, 2, 4};
int label_channel(std::uint8_t label);

struct MultiModalCase {
  std::string id;
  std::array<Volume3D, kNumModalities> modalities;
  std::optional<LabelMap> label;
  std::optional<double> age;
  std::optional<double> survival_days;

  const Dims3& dims() const noexcept { return modalities[0].dims(); }
  const Spacing& spacing() const noexcept { return modalities[0].spacing(); }
  const Volume3D& modality(Modality m) const noexcept { return modalities[static_cast<int>(m)]; }

  /// Throws ShapeMismatch / InvalidLabel when the case invariants do not hold.
  void validate() const;
};

enum class Region { Whole, Core, Enhancing, Edema, Necrosis };
const char* region_name(Region r) noexcept;

// ---- preprocessing --------------------------------------------------------

inline constexpr double kStdEpsilon = 1e-8;

Mask compute_brain_mask(const MultiModalCase& c);
Volume3D normalize_modality(const Volume3D& vol, const Mask& mask);
/// Brain mask + per-modality normalization; label and metadata carried over.
MultiModalCase preprocess_case(const MultiModalCase& c);

/// [4, D, H, W] one-hot tensor in channel order (0, 1, 2, 4).
Tensor<float> one_hot_encode(const LabelMap& label);
/// Inverse of one_hot_encode for any [4, D, H, W] score tensor (argmax, first wins on ties).
LabelMap argmax_decode(const Tensor<float>& scores, Dims3 dims);

Mask region_mask(const LabelMap& label, Region region);

}  // namespace voxelseg
