#include "volume/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace voxelseg {
namespace {

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

using json = nlohmann::json;

bool has_gz_suffix(const fs::path& p) { return p.extension() == ".gz"; }

std::vector<char> read_maybe_gzipped(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<char> out;
  char buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof(buf));
    if (n < 0) {
      gzclose(f);
      fail(ErrorCode::ParseError, "corrupt compressed stream in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

void write_maybe_gzipped(const fs::path& path, const std::vector<char>& bytes) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
    std::size_t off = 0;
    while (off < bytes.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
      if (gzwrite(f, bytes.data() + off, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        fail(ErrorCode::IoError, "short write to " + path.string());
      }
      off += chunk;
    }
    if (gzclose(f) != Z_OK) fail(ErrorCode::IoError, "cannot finish " + path.string());
  } else {
    write_binary_file(path, bytes);
  }
}

template <typename T>
T load(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    std::reverse(tmp, tmp + sizeof(T));
    std::memcpy(&v, tmp, sizeof(T));
  }
  return v;
}

template <typename T>
void store(std::vector<char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

int nifti_bytes_per_voxel(int datatype) {
  switch (datatype) {
    case 2: case 256: return 1;                // uint8, int8
    case 4: case 512: return 2;                // int16, uint16
    case 8: case 768: case 16: return 4;       // int32, uint32, float32
    case 64: case 1024: case 1280: return 8;   // float64, int64, uint64
    default: return 0;
  }
}

double nifti_voxel(const char* p, int datatype, bool swap) {
  switch (datatype) {
    case 2: return static_cast<double>(load<std::uint8_t>(p, false));
    case 256: return static_cast<double>(load<std::int8_t>(p, false));
    case 4: return static_cast<double>(load<std::int16_t>(p, swap));
    case 512: return static_cast<double>(load<std::uint16_t>(p, swap));
    case 8: return static_cast<double>(load<std::int32_t>(p, swap));
    case 768: return static_cast<double>(load<std::uint32_t>(p, swap));
    case 16: return static_cast<double>(load<float>(p, swap));
    case 64: return load<double>(p, swap);
    case 1024: return static_cast<double>(load<std::int64_t>(p, swap));
    case 1280: return static_cast<double>(load<std::uint64_t>(p, swap));
    default: return 0.0;
  }
}

std::vector<char> nifti_header(const Dims3& dims, const Spacing& spacing, std::int16_t datatype, std::int16_t bitpix) {
  std::vector<char> buf(352, 0);
  store<std::int32_t>(buf, 0, 348);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(dims.w), static_cast<std::int16_t>(dims.h),
                               static_cast<std::int16_t>(dims.d), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  store<std::int16_t>(buf, 70, datatype);
  store<std::int16_t>(buf, 72, bitpix);
  const float pixdim[8] = {1.0f, static_cast<float>(spacing[2]), static_cast<float>(spacing[1]),
                           static_cast<float>(spacing[0]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) store<float>(buf, 76 + 4 * i, pixdim[i]);
  store<float>(buf, 108, 352.0f);  // vox_offset
  store<float>(buf, 112, 0.0f);    // scl_slope
  buf[123] = 10;                   // xyzt_units: mm, s
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  return buf;
}

void check_dims_fit_nifti(const Dims3& dims) {
  require(dims.d <= 32767 && dims.h <= 32767 && dims.w <= 32767, ErrorCode::InvalidArgument,
          "volume too large for NIfTI-1: " + dims_string(dims));
}

fs::path raw_payload_path(const fs::path& sidecar) {
  fs::path p = sidecar;
  p.replace_extension(".raw");
  return p;
}

void write_sidecar(const fs::path& sidecar, const Dims3& dims, const Spacing& spacing, const char* dtype) {
  json j;
  j["shape"] = {dims.d, dims.h, dims.w};
  j["spacing"] = {spacing[0], spacing[1], spacing[2]};
  j["dtype"] = dtype;
  j["data"] = raw_payload_path(sidecar).filename().string();
  write_text_file(sidecar, j.dump(2) + "\n");
}

struct Sidecar {
  Dims3 dims;
  Spacing spacing;
  std::string dtype;
  fs::path payload;
};

Sidecar read_sidecar(const fs::path& sidecar) {
  Sidecar s;
  try {
    const json j = json::parse(read_text_file(sidecar));
    const auto shape = j.at("shape").get<std::vector<std::int64_t>>();
    const auto sp = j.at("spacing").get<std::vector<double>>();
    require(shape.size() == 3 && sp.size() == 3, ErrorCode::ParseError, "shape and spacing need 3 entries");
    s.dims = {shape[0], shape[1], shape[2]};
    s.spacing = {sp[0], sp[1], sp[2]};
    s.dtype = j.at("dtype").get<std::string>();
    s.payload = sidecar.parent_path() / j.value("data", raw_payload_path(sidecar).filename().string());
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, sidecar.string() + ": " + e.what());
  }
  require(s.dims.valid(), ErrorCode::ParseError, sidecar.string() + ": non-positive shape");
  return s;
}

LabelMap labels_from_values(Dims3 dims, const std::vector<double>& values, const std::string& what) {
  LabelMap out(dims, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    const double r = std::round(v);
    if (r != v || r < 0 || r > 255 || !is_legal_label(static_cast<std::uint8_t>(r))) {
      fail(ErrorCode::InvalidLabel, what + ": voxel " + std::to_string(i) + " holds " + std::to_string(v));
    }
    out[i] = static_cast<std::uint8_t>(r);
  }
  return out;
}

}  // namespace

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_binary_file(path, std::span<const char>(text.data(), text.size()));
}

std::vector<char> read_binary_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_binary_file(const fs::path& path, std::span<const char> bytes) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

NiftiImage read_nifti(const fs::path& path) {
  const std::vector<char> buf = read_maybe_gzipped(path);
  const std::string where = path.string();
  require(buf.size() >= 348, ErrorCode::ParseError, where + ": truncated header");
  const auto hdr_le = load<std::int32_t>(buf.data(), false);
  bool swap = false;
  if (hdr_le != 348) {
    require(load<std::int32_t>(buf.data(), true) == 348, ErrorCode::ParseError, where + ": sizeof_hdr is not 348");
    swap = true;
  }
  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = load<std::int16_t>(buf.data() + 40 + 2 * i, swap);
  require(dim[0] >= 3 && dim[0] <= 7, ErrorCode::ParseError, where + ": dim[0] must be 3..7");
  for (int i = 4; i <= dim[0]; ++i) {
    require(dim[i] == 1, ErrorCode::ParseError, where + ": only single-frame 3D images are supported");
  }
  for (int i = 1; i <= 3; ++i) require(dim[i] >= 1, ErrorCode::ParseError, where + ": non-positive dim");
  const int datatype = load<std::int16_t>(buf.data() + 70, swap);
  const int bpv = nifti_bytes_per_voxel(datatype);
  require(bpv > 0, ErrorCode::ParseError, where + ": unsupported datatype " + std::to_string(datatype));
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = load<float>(buf.data() + 76 + 4 * i, swap);
  for (int i = 1; i <= 3; ++i) {
    require(std::isfinite(pixdim[i]) && pixdim[i] > 0.0f, ErrorCode::ParseError, where + ": non-positive pixdim");
  }
  const float vox_offset = load<float>(buf.data() + 108, swap);
  const auto offset = static_cast<std::size_t>(std::max(352.0f, vox_offset));

  NiftiImage img;
  img.dims = {dim[3], dim[2], dim[1]};
  img.spacing = {pixdim[3], pixdim[2], pixdim[1]};
  img.datatype = datatype;
  const auto n = static_cast<std::size_t>(img.dims.voxels());
  require(buf.size() >= offset + n * static_cast<std::size_t>(bpv), ErrorCode::ParseError, where + ": truncated voxel data");
  img.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.voxels[i] = nifti_voxel(buf.data() + offset + i * bpv, datatype, swap);
  return img;
}

void write_nifti(const fs::path& path, const Volume3D& vol) {
  check_dims_fit_nifti(vol.dims());
  std::vector<char> buf = nifti_header(vol.dims(), vol.spacing(), 16, 32);
  const std::size_t off = buf.size();
  buf.resize(off + vol.size() * sizeof(float));
  std::memcpy(buf.data() + off, vol.data(), vol.size() * sizeof(float));
  write_maybe_gzipped(path, buf);
}

void write_nifti(const fs::path& path, const LabelMap& label, const Spacing& spacing) {
  check_dims_fit_nifti(label.dims());
  std::vector<char> buf = nifti_header(label.dims(), spacing, 2, 8);
  const std::size_t off = buf.size();
  buf.resize(off + label.size());
  std::memcpy(buf.data() + off, label.data(), label.size());
  write_maybe_gzipped(path, buf);
}

void write_raw(const fs::path& sidecar, const Volume3D& vol) {
  write_binary_file(raw_payload_path(sidecar),
                    std::span<const char>(reinterpret_cast<const char*>(vol.data()), vol.size() * sizeof(float)));
  write_sidecar(sidecar, vol.dims(), vol.spacing(), "float32");
}

void write_raw(const fs::path& sidecar, const LabelMap& label, const Spacing& spacing) {
  write_binary_file(raw_payload_path(sidecar),
                    std::span<const char>(reinterpret_cast<const char*>(label.data()), label.size()));
  write_sidecar(sidecar, label.dims(), spacing, "uint8");
}

Volume3D read_raw_volume(const fs::path& sidecar) {
  const Sidecar s = read_sidecar(sidecar);
  const std::vector<char> bytes = read_binary_file(s.payload);
  const auto n = static_cast<std::size_t>(s.dims.voxels());
  std::vector<float> data(n);
  if (s.dtype == "float32") {
    require(bytes.size() == n * 4, ErrorCode::ParseError, s.payload.string() + ": payload size mismatch");
    std::memcpy(data.data(), bytes.data(), n * 4);
  } else if (s.dtype == "uint8") {
    require(bytes.size() == n, ErrorCode::ParseError, s.payload.string() + ": payload size mismatch");
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<std::uint8_t>(bytes[i]);
  } else {
    fail(ErrorCode::ParseError, sidecar.string() + ": unsupported dtype " + s.dtype);
  }
  return Volume3D(s.dims, s.spacing, std::move(data));
}

LabelMap read_raw_labels(const fs::path& sidecar, Spacing* spacing) {
  const Sidecar s = read_sidecar(sidecar);
  if (spacing) *spacing = s.spacing;
  const std::vector<char> bytes = read_binary_file(s.payload);
  const auto n = static_cast<std::size_t>(s.dims.voxels());
  std::vector<double> values(n);
  if (s.dtype == "uint8") {
    require(bytes.size() == n, ErrorCode::ParseError, s.payload.string() + ": payload size mismatch");
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<std::uint8_t>(bytes[i]);
  } else if (s.dtype == "float32") {
    require(bytes.size() == n * 4, ErrorCode::ParseError, s.payload.string() + ": payload size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      values[i] = f;
    }
  } else {
    fail(ErrorCode::ParseError, sidecar.string() + ": unsupported dtype " + s.dtype);
  }
  return labels_from_values(s.dims, values, sidecar.string());
}

std::optional<fs::path> find_image_file(const fs::path& dir, const std::string& name) {
  for (const char* ext : {".json", ".nii.gz", ".nii"}) {
    fs::path p = dir / (name + ext);
    if (fs::is_regular_file(p)) return p;
  }
  return std::nullopt;
}

namespace {
bool is_sidecar(const fs::path& p) { return p.extension() == ".json"; }
}  // namespace

Volume3D read_volume(const fs::path& file) {
  if (is_sidecar(file)) return read_raw_volume(file);
  NiftiImage img = read_nifti(file);
  std::vector<float> data(img.voxels.begin(), img.voxels.end());
  return Volume3D(img.dims, img.spacing, std::move(data));
}

LabelMap read_label_map(const fs::path& file, Spacing* spacing) {
  if (is_sidecar(file)) return read_raw_labels(file, spacing);
  NiftiImage img = read_nifti(file);
  if (spacing) *spacing = img.spacing;
  return labels_from_values(img.dims, img.voxels, file.string());
}

MultiModalCase read_case(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::IoError, "case directory " + dir.string() + " does not exist");
  MultiModalCase c;
  c.id = dir.filename().string();
  if (c.id.empty()) c.id = dir.parent_path().filename().string();
  for (int m = 0; m < kNumModalities; ++m) {
    const auto file = find_image_file(dir, kModalityNames[m]);
    if (!file) fail(ErrorCode::MissingModality, "case '" + c.id + "' has no " + kModalityNames[m] + " image");
    c.modalities[m] = read_volume(*file);
  }
  if (const auto seg = find_image_file(dir, "seg")) c.label = read_label_map(*seg);
  c.validate();
  return c;
}

void write_case(const MultiModalCase& c, const fs::path& dir, CaseFormat format) {
  c.validate();
  fs::create_directories(dir);
  for (int m = 0; m < kNumModalities; ++m) {
    if (format == CaseFormat::Internal) {
      write_raw(dir / (std::string(kModalityNames[m]) + ".json"), c.modalities[m]);
    } else {
      write_nifti(dir / (std::string(kModalityNames[m]) + ".nii.gz"), c.modalities[m]);
    }
  }
  if (c.label) {
    if (format == CaseFormat::Internal) {
      write_raw(dir / "seg.json", *c.label, c.spacing());
    } else {
      write_nifti(dir / "seg.nii.gz", *c.label, c.spacing());
    }
  }
}

std::vector<fs::path> list_case_dirs(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::IoError, "data directory " + root.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && find_image_file(entry.path(), "t1")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> parse_optional_number(const std::string& s, const std::string& where) {
  if (s.empty() || s == "NA" || s == "nan") return std::nullopt;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::ParseError, where + ": not a number: '" + s + "'");
  }
}

std::string format_optional(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, *v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

}  // namespace

std::map<std::string, SurvivalRecord> read_survival_csv(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError, path.string() + ": empty file");
  const auto header = split_csv_line(line);
  int id_col = -1, age_col = -1, days_col = -1;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    if (header[i] == "case_id") id_col = i;
    if (header[i] == "age") age_col = i;
    if (header[i] == "survival_days") days_col = i;
  }
  require(id_col >= 0, ErrorCode::ParseError, path.string() + ": missing case_id column");
  std::map<std::string, SurvivalRecord> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    require(static_cast<int>(f.size()) == static_cast<int>(header.size()), ErrorCode::ParseError, where + ": wrong column count");
    SurvivalRecord r;
    if (age_col >= 0) r.age = parse_optional_number(f[age_col], where);
    if (days_col >= 0) r.survival_days = parse_optional_number(f[days_col], where);
    out[f[id_col]] = r;
  }
  return out;
}

void write_survival_csv(const fs::path& path, const std::map<std::string, SurvivalRecord>& records) {
  std::string text = "case_id,age,survival_days\n";
  for (const auto& [id, r] : records) text += id + "," + format_optional(r.age) + "," + format_optional(r.survival_days) + "\n";
  write_text_file(path, text);
}

}  // namespace voxelseg
