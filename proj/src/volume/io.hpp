#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "volume/volume.hpp"

namespace voxelseg {

namespace fs = std::filesystem;

/// Voxel payload of a NIfTI-1 file converted to double, in D x H x W order.
struct NiftiImage {
  Dims3 dims;
  Spacing spacing{1.0, 1.0, 1.0};
  int datatype = 16;
  std::vector<double> voxels;
};

/// Single-file NIfTI-1 (.nii or gzip-compressed .nii.gz). Only the
/// datatype, dim, pixdim and vox_offset header fields are interpreted.
NiftiImage read_nifti(const fs::path& path);
void write_nifti(const fs::path& path, const Volume3D& vol);
void write_nifti(const fs::path& path, const LabelMap& label, const Spacing& spacing);

/// Internal format: `<stem>.raw` (flat little-endian payload) plus
/// `<stem>.json` sidecar holding shape, spacing and dtype.
void write_raw(const fs::path& sidecar, const Volume3D& vol);
void write_raw(const fs::path& sidecar, const LabelMap& label, const Spacing& spacing);
Volume3D read_raw_volume(const fs::path& sidecar);
LabelMap read_raw_labels(const fs::path& sidecar, Spacing* spacing = nullptr);

/// Finds `<dir>/<name>.json`, `.nii.gz` or `.nii`, in that order.
std::optional<fs::path> find_image_file(const fs::path& dir, const std::string& name);

Volume3D read_volume(const fs::path& file);
LabelMap read_label_map(const fs::path& file, Spacing* spacing = nullptr);

enum class CaseFormat { Internal, Nifti };

/// Reads `<dir>/{t1,t1ce,t2,flair}` and optional `<dir>/seg`; the case id is
/// the directory name.
MultiModalCase read_case(const fs::path& dir);
void write_case(const MultiModalCase& c, const fs::path& dir, CaseFormat format);

/// Subdirectories of root holding a t1 image, sorted by name.
std::vector<fs::path> list_case_dirs(const fs::path& root);

struct SurvivalRecord {
  std::optional<double> age;
  std::optional<double> survival_days;
};

/// `case_id,age,survival_days`; empty fields are absent values.
std::map<std::string, SurvivalRecord> read_survival_csv(const fs::path& path);
void write_survival_csv(const fs::path& path, const std::map<std::string, SurvivalRecord>& records);

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, const std::string& text);
std::vector<char> read_binary_file(const fs::path& path);
void write_binary_file(const fs::path& path, std::span<const char> bytes);

}  // namespace voxelseg
