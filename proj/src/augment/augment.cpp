#include "augment/augment.hpp"

#include <algorithm>
#include <cmath>

#include "common/parallel.hpp"

namespace voxelseg::aug {
namespace {

void check_prob(double p, const char* name) {
  require(p >= 0.0 && p <= 1.0, ErrorCode::ConfigError, std::string("augmentation.") + name + " must be in [0, 1]");
}

double lerp(double a, double b, double t) { return a + (b - a) * t; }

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Rotation about axis `axis` in the plane of the other two.
Mat3 axis_rotation(int axis, double angle) {
  Mat3 r{};
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  const double c = std::cos(angle), s = std::sin(angle);
  r[axis][axis] = 1.0;
  r[a][a] = c;
  r[a][b] = -s;
  r[b][a] = s;
  r[b][b] = c;
  return r;
}

}  // namespace

void Sample::validate() const {
  require(image.rank() == 4, ErrorCode::ShapeMismatch, "sample image must be [C, D, H, W]");
  const Dims3 d = label.dims();
  require(image.dim(1) == d.d && image.dim(2) == d.h && image.dim(3) == d.w, ErrorCode::ShapeMismatch,
          "sample image " + shape_string(image.shape()) + " does not match label " + dims_string(d));
}

void AugmentationConfig::validate() const {
  require(rotation_max >= 0.0, ErrorCode::ConfigError, "augmentation.rotation_max must be >= 0");
  require(scale_low > 0.0 && scale_low <= scale_high, ErrorCode::ConfigError,
          "augmentation.scale_range must satisfy 0 < low <= high");
  require(elastic_alpha >= 0.0, ErrorCode::ConfigError, "augmentation.elastic_alpha must be >= 0");
  require(elastic_sigma > 0.0, ErrorCode::ConfigError, "augmentation.elastic_sigma must be > 0");
  require(gamma_low > 0.0 && gamma_low <= gamma_high, ErrorCode::ConfigError,
          "augmentation.gamma_range must satisfy 0 < low <= high");
  for (int a : mirror_axes) require(a >= 0 && a <= 2, ErrorCode::ConfigError, "augmentation.mirror_axes must be in {0, 1, 2}");
  check_prob(p_rotation, "p_rotation");
  check_prob(p_scale, "p_scale");
  check_prob(p_elastic, "p_elastic");
  check_prob(p_gamma, "p_gamma");
  check_prob(p_mirror, "p_mirror");
}

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig c;
  c.p_rotation = c.p_scale = c.p_elastic = c.p_gamma = c.p_mirror = 0.0;
  return c;
}

AugmentationConfig AugmentationConfig::attenuated_default() {
  AugmentationConfig c;
  c.rotation_max *= 0.5;
  c.scale_low = 1.0 - 0.5 * (1.0 - c.scale_low);
  c.scale_high = 1.0 + 0.5 * (c.scale_high - 1.0);
  c.elastic_alpha *= 0.5;
  c.gamma_low = 1.0 - 0.5 * (1.0 - c.gamma_low);
  c.gamma_high = 1.0 + 0.5 * (c.gamma_high - 1.0);
  return c;
}

void to_json(nlohmann::json& j, const AugmentationConfig& c) {
  j = nlohmann::json{{"rotation_max", c.rotation_max},
                     {"scale_range", {c.scale_low, c.scale_high}},
                     {"elastic_alpha", c.elastic_alpha},
                     {"elastic_sigma", c.elastic_sigma},
                     {"gamma_range", {c.gamma_low, c.gamma_high}},
                     {"mirror_axes", c.mirror_axes},
                     {"p_rotation", c.p_rotation},
                     {"p_scale", c.p_scale},
                     {"p_elastic", c.p_elastic},
                     {"p_gamma", c.p_gamma},
                     {"p_mirror", c.p_mirror}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& c) {
  require(j.is_object(), ErrorCode::ConfigError, "augmentation config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      auto pair = [&](double& lo, double& hi) {
        const auto v = it->get<std::vector<double>>();
        require(v.size() == 2, ErrorCode::ConfigError, "augmentation." + k + " must be [low, high]");
        lo = v[0];
        hi = v[1];
      };
      if (k == "rotation_max") c.rotation_max = it->get<double>();
      else if (k == "scale_range") pair(c.scale_low, c.scale_high);
      else if (k == "elastic_alpha") c.elastic_alpha = it->get<double>();
      else if (k == "elastic_sigma") c.elastic_sigma = it->get<double>();
      else if (k == "gamma_range") pair(c.gamma_low, c.gamma_high);
      else if (k == "mirror_axes") c.mirror_axes = it->get<std::vector<int>>();
      else if (k == "p_rotation") c.p_rotation = it->get<double>();
      else if (k == "p_scale") c.p_scale = it->get<double>();
      else if (k == "p_elastic") c.p_elastic = it->get<double>();
      else if (k == "p_gamma") c.p_gamma = it->get<double>();
      else if (k == "p_mirror") c.p_mirror = it->get<double>();
      else fail(ErrorCode::ConfigError, "augmentation." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "augmentation." + k + ": " + e.what());
    }
  }
}

AugmentationConfig attenuate(const AttenuationSchedule& s, int epoch) {
  require(s.total_epochs >= 1, ErrorCode::RangeError, "attenuation total_epochs must be >= 1");
  require(epoch >= 0 && epoch <= s.total_epochs, ErrorCode::RangeError,
          "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + "]");
  if (epoch == 0) return s.initial;
  if (epoch == s.total_epochs) {
    AugmentationConfig c = s.final;
    c.mirror_axes = s.initial.mirror_axes;
    return c;
  }
  const double t = static_cast<double>(epoch) / s.total_epochs;
  const AugmentationConfig &a = s.initial, &b = s.final;
  AugmentationConfig c = a;
  c.rotation_max = lerp(a.rotation_max, b.rotation_max, t);
  c.scale_low = lerp(a.scale_low, b.scale_low, t);
  c.scale_high = lerp(a.scale_high, b.scale_high, t);
  c.elastic_alpha = lerp(a.elastic_alpha, b.elastic_alpha, t);
  c.elastic_sigma = lerp(a.elastic_sigma, b.elastic_sigma, t);
  c.gamma_low = lerp(a.gamma_low, b.gamma_low, t);
  c.gamma_high = lerp(a.gamma_high, b.gamma_high, t);
  c.p_rotation = lerp(a.p_rotation, b.p_rotation, t);
  c.p_scale = lerp(a.p_scale, b.p_scale, t);
  c.p_elastic = lerp(a.p_elastic, b.p_elastic, t);
  c.p_gamma = lerp(a.p_gamma, b.p_gamma, t);
  c.p_mirror = lerp(a.p_mirror, b.p_mirror, t);
  return c;
}

namespace {

template <typename T>
void flip_grid(T* data, std::int64_t outer, Dims3 d, int axis) {
  const std::int64_t vox = d.voxels();
  for (std::int64_t o = 0; o < outer; ++o) {
    T* base = data + o * vox;
    if (axis == 2) {
      for (std::int64_t r = 0; r < d.d * d.h; ++r) std::reverse(base + r * d.w, base + (r + 1) * d.w);
    } else if (axis == 1) {
      for (std::int64_t z = 0; z < d.d; ++z)
        for (std::int64_t y = 0; y < d.h / 2; ++y)
          std::swap_ranges(base + d.index(z, y, 0), base + d.index(z, y, 0) + d.w, base + d.index(z, d.h - 1 - y, 0));
    } else {
      const std::int64_t plane = d.h * d.w;
      for (std::int64_t z = 0; z < d.d / 2; ++z)
        std::swap_ranges(base + z * plane, base + (z + 1) * plane, base + (d.d - 1 - z) * plane);
    }
  }
}

}  // namespace

void mirror_tensor(Tensor<float>& t, const std::vector<int>& axes) {
  require(t.rank() >= 3, ErrorCode::ShapeMismatch, "mirror needs a volumetric tensor");
  const std::size_t r = t.rank();
  const Dims3 d{t.dim(r - 3), t.dim(r - 2), t.dim(r - 1)};
  const std::int64_t outer = static_cast<std::int64_t>(t.size()) / d.voxels();
  for (int a : axes) {
    require(a >= 0 && a <= 2, ErrorCode::InvalidArgument, "mirror axis must be 0, 1 or 2");
    flip_grid(t.data(), outer, d, a);
  }
}

void mirror(Sample& s, const std::vector<int>& axes) {
  s.validate();
  mirror_tensor(s.image, axes);
  for (int a : axes) flip_grid(s.label.data(), 1, s.label.dims(), a);
}

Sample apply_spatial(const Sample& s, const SpatialParams& p) {
  s.validate();
  require(p.scale > 0.0, ErrorCode::InvalidArgument, "spatial scale must be > 0");
  const Dims3 d = s.dims();
  const bool has_disp = !p.displacement.empty();
  if (has_disp) {
    require(p.displacement.shape() == Shape{3, d.d, d.h, d.w}, ErrorCode::ShapeMismatch,
            "displacement field must be [3, D, H, W]");
  }
  // R = R0 R1 R2; the backward map uses R^T.
  const Mat3 r = matmul(matmul(axis_rotation(0, p.rotation[0]), axis_rotation(1, p.rotation[1])), axis_rotation(2, p.rotation[2]));
  const double centre[3] = {(d.d - 1) / 2.0, (d.h - 1) / 2.0, (d.w - 1) / 2.0};
  const std::int64_t C = s.image.dim(0), V = d.voxels();
  Sample out{Tensor<float>(s.image.shape(), 0.0f), LabelMap(d, 0)};
  const float* src = s.image.data();
  const std::int64_t dims[3] = {d.d, d.h, d.w};
  parallel_for(static_cast<std::size_t>(d.d), [&](std::size_t zi) {
    const auto z = static_cast<std::int64_t>(zi);
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        const std::int64_t o = d.index(z, y, x);
        const double rel[3] = {z - centre[0], y - centre[1], x - centre[2]};
        double q[3];
        for (int i = 0; i < 3; ++i) {
          q[i] = centre[i] + (r[0][i] * rel[0] + r[1][i] * rel[1] + r[2][i] * rel[2]) / p.scale;
          if (has_disp) q[i] += p.displacement[static_cast<std::size_t>(i * V + o)];
        }
        // Nearest neighbour for labels.
        std::int64_t n[3];
        bool inside = true;
        for (int i = 0; i < 3; ++i) {
          n[i] = static_cast<std::int64_t>(std::floor(q[i] + 0.5));
          inside = inside && n[i] >= 0 && n[i] < dims[i];
        }
        if (inside) out.label[o] = s.label[d.index(n[0], n[1], n[2])];
        // Trilinear for images with zero outside.
        std::int64_t base[3];
        double f[3];
        for (int i = 0; i < 3; ++i) {
          const double fl = std::floor(q[i]);
          base[i] = static_cast<std::int64_t>(fl);
          f[i] = q[i] - fl;
        }
        if (base[0] < -1 || base[1] < -1 || base[2] < -1 || base[0] >= d.d || base[1] >= d.h || base[2] >= d.w) continue;
        for (std::int64_t c = 0; c < C; ++c) {
          const float* img = src + c * V;
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz) {
            const std::int64_t iz = base[0] + dz;
            if (iz < 0 || iz >= d.d) continue;
            const double wz = dz ? f[0] : 1.0 - f[0];
            for (int dy = 0; dy < 2; ++dy) {
              const std::int64_t iy = base[1] + dy;
              if (iy < 0 || iy >= d.h) continue;
              const double wy = wz * (dy ? f[1] : 1.0 - f[1]);
              for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t ix = base[2] + dx;
                if (ix < 0 || ix >= d.w) continue;
                const double w = wy * (dx ? f[2] : 1.0 - f[2]);
                if (w != 0.0) acc += w * img[d.index(iz, iy, ix)];
              }
            }
          }
          out.image[static_cast<std::size_t>(c * V + o)] = static_cast<float>(acc);
        }
      }
  });
  return out;
}

namespace {

// In-place 1D Gaussian blur of a D x H x W grid along `axis`, zero padded.
void blur_axis(std::vector<double>& g, Dims3 d, int axis, const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  const std::int64_t n = d[axis];
  const std::int64_t stride = axis == 0 ? d.h * d.w : axis == 1 ? d.w : 1;
  std::vector<double> line(static_cast<std::size_t>(n)), res(static_cast<std::size_t>(n));
  const std::int64_t lines = d.voxels() / n;
  for (std::int64_t l = 0; l < lines; ++l) {
    std::int64_t start;
    if (axis == 2) start = l * d.w;
    else if (axis == 1) start = (l / d.w) * d.h * d.w + (l % d.w);
    else start = l;
    for (std::int64_t i = 0; i < n; ++i) line[i] = g[start + i * stride];
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const std::int64_t j = i + t;
        if (j >= 0 && j < n) acc += k[t + radius] * line[j];
      }
      res[i] = acc;
    }
    for (std::int64_t i = 0; i < n; ++i) g[start + i * stride] = res[i];
  }
}

}  // namespace

Tensor<float> elastic_field(Dims3 d, double alpha, double sigma, Rng& rng) {
  require(sigma > 0.0, ErrorCode::InvalidArgument, "elastic sigma must be > 0");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0.0;
  for (int t = -radius; t <= radius; ++t) ks += k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (double& v : k) v /= ks;
  const std::int64_t V = d.voxels();
  Tensor<float> field({3, d.d, d.h, d.w});
  std::vector<double> g(static_cast<std::size_t>(V));
  for (int comp = 0; comp < 3; ++comp) {
    for (auto& v : g) v = rng.uniform(-1.0, 1.0);
    for (int axis = 0; axis < 3; ++axis) blur_axis(g, d, axis, k);
    for (std::int64_t i = 0; i < V; ++i) field[static_cast<std::size_t>(comp * V + i)] = static_cast<float>(alpha * g[i]);
  }
  return field;
}

void gamma_augment(Tensor<float>& image, double gamma) {
  require(gamma > 0.0, ErrorCode::InvalidArgument, "gamma must be > 0");
  for (float v : image.values())
    require(v >= 0.0f && v <= 1.0f, ErrorCode::RangeError, "gamma augmentation needs values in [0, 1], got " + std::to_string(v));
  if (gamma == 1.0) return;
  for (float& v : image.values()) v = static_cast<float>(std::pow(static_cast<double>(v), gamma));
}

void augment_sample(Sample& s, const AugmentationConfig& c, Rng& rng) {
  // Every draw happens regardless of which transforms fire, so the stream
  // layout is fixed.
  const bool rot = rng.bernoulli(c.p_rotation);
  std::array<double, 3> angles{};
  for (auto& a : angles) a = rng.uniform(-c.rotation_max, c.rotation_max);
  const bool scl = rng.bernoulli(c.p_scale);
  const double scale = rng.uniform(c.scale_low, c.scale_high);
  const bool ela = rng.bernoulli(c.p_elastic);
  const std::uint64_t field_seed = rng.next_u64();
  const bool gam = rng.bernoulli(c.p_gamma);
  const double gamma = rng.uniform(c.gamma_low, c.gamma_high);
  std::vector<int> flips;
  for (int a : c.mirror_axes)
    if (rng.bernoulli(c.p_mirror)) flips.push_back(a);

  if (rot || scl || ela) {
    SpatialParams p;
    if (rot) p.rotation = angles;
    if (scl) p.scale = scale;
    if (ela) {
      Rng field_rng(field_seed);
      p.displacement = elastic_field(s.dims(), c.elastic_alpha, c.elastic_sigma, field_rng);
    }
    s = apply_spatial(s, p);
  }
  if (gam) gamma_augment(s.image, gamma);
  if (!flips.empty()) mirror(s, flips);
}

void augment_batch(std::vector<Sample>& batch, const AugmentationConfig& c, std::uint64_t seed) {
  c.validate();
  parallel_for(batch.size(), [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    augment_sample(batch[i], c, rng);
  });
}

}  // namespace voxelseg::aug
