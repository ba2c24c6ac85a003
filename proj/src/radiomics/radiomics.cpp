#include "radiomics/radiomics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "common/stats.hpp"

namespace voxelseg::radiomics {

namespace {

struct Box {
  std::int64_t lo[3];
  std::int64_t hi[3];  // inclusive
};

Box bounding_box(const Mask& mask) {
  const Dims3& d = mask.dims();
  Box b{{d.d, d.h, d.w}, {-1, -1, -1}};
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        if (!mask.at(z, y, x)) continue;
        const std::int64_t p[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], p[a]);
          b.hi[a] = std::max(b.hi[a], p[a]);
        }
      }
  return b;
}

void require_nonempty(const Mask& mask, const char* what) {
  require(mask.count() > 0, ErrorCode::EmptyRegion, std::string(what) + ": empty region mask");
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

// In-place separable convolution of a dense [n0,n1,n2] field with zero padding.
void smooth_axis(std::vector<double>& f, const std::int64_t n[3], int axis, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  const std::int64_t stride = axis == 0 ? n[1] * n[2] : axis == 1 ? n[2] : 1;
  const std::int64_t len = n[axis];
  std::vector<double> line(len), out(len);
  const std::int64_t total = n[0] * n[1] * n[2];
  for (std::int64_t base = 0; base < total; ++base) {
    if ((base / stride) % len != 0) continue;  // visit each line once, from its first element
    for (std::int64_t i = 0; i < len; ++i) line[i] = f[base + i * stride];
    for (std::int64_t i = 0; i < len; ++i) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) {
        const std::int64_t j = i + t;
        if (j >= 0 && j < len) acc += k[t + r] * line[j];
      }
      out[i] = acc;
    }
    for (std::int64_t i = 0; i < len; ++i) f[base + i * stride] = out[i];
  }
}

bool is_surface_voxel(const Mask& m, std::int64_t z, std::int64_t y, std::int64_t x) {
  const Dims3& d = m.dims();
  static constexpr int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (const auto& o : off) {
    const std::int64_t a = z + o[0], b = y + o[1], c = x + o[2];
    if (a < 0 || b < 0 || c < 0 || a >= d.d || b >= d.h || c >= d.w || !m.at(a, b, c)) return true;
  }
  return false;
}

// Min-max binning shared by first-order entropy and GLCM: levels 1..n.
int bin_of(double v, double lo, double hi, int n) {
  if (hi <= lo) return 1;
  const int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * n)) + 1;
  return std::clamp(b, 1, n);
}

double entropy_term(double p) { return p > 0.0 ? -p * std::log2(p) : 0.0; }

}  // namespace

// ---- shape ------------------------------------------------------------------------

double surface_area(const Mask& mask, const Spacing& spacing) {
  require_nonempty(mask, "surface_area");
  const int radius = static_cast<int>(std::ceil(4.0 * kSurfaceSmoothingSigma));
  const int margin = radius + 1;
  const Box b = bounding_box(mask);
  std::int64_t n[3];
  for (int a = 0; a < 3; ++a) n[a] = b.hi[a] - b.lo[a] + 1 + 2 * margin;
  std::vector<double> f(static_cast<std::size_t>(n[0] * n[1] * n[2]), 0.0);
  for (std::int64_t z = b.lo[0]; z <= b.hi[0]; ++z)
    for (std::int64_t y = b.lo[1]; y <= b.hi[1]; ++y)
      for (std::int64_t x = b.lo[2]; x <= b.hi[2]; ++x)
        if (mask.at(z, y, x))
          f[((z - b.lo[0] + margin) * n[1] + (y - b.lo[1] + margin)) * n[2] + (x - b.lo[2] + margin)] = 1.0;
  const std::vector<double> k = gaussian_kernel(kSurfaceSmoothingSigma, radius);
  for (int a = 0; a < 3; ++a) smooth_axis(f, n, a, k);

  // The smoothed field vanishes (to kernel truncation) on the margin shell,
  // so central differences over the interior capture the whole integral.
  const double voxel_volume = spacing[0] * spacing[1] * spacing[2];
  const std::int64_t s1 = n[2], s0 = n[1] * n[2];
  double area = 0.0;
  for (std::int64_t z = 1; z + 1 < n[0]; ++z)
    for (std::int64_t y = 1; y + 1 < n[1]; ++y)
      for (std::int64_t x = 1; x + 1 < n[2]; ++x) {
        const std::int64_t i = z * s0 + y * s1 + x;
        const double gz = (f[i + s0] - f[i - s0]) / (2.0 * spacing[0]);
        const double gy = (f[i + s1] - f[i - s1]) / (2.0 * spacing[1]);
        const double gx = (f[i + 1] - f[i - 1]) / (2.0 * spacing[2]);
        area += std::sqrt(gz * gz + gy * gy + gx * gx);
      }
  return area * voxel_volume;
}

std::array<double, 13> shape_features(const Mask& mask, const Spacing& spacing) {
  require_nonempty(mask, "shape_features");
  const Dims3& d = mask.dims();
  const double voxel_volume = spacing[0] * spacing[1] * spacing[2];
  const double volume = static_cast<double>(mask.count()) * voxel_volume;
  const double area = surface_area(mask, spacing);

  std::vector<std::array<double, 3>> surface;
  std::vector<std::array<std::int64_t, 3>> surface_idx;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  std::int64_t count = 0;
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        if (!mask.at(z, y, x)) continue;
        const Eigen::Vector3d p(z * spacing[0], y * spacing[1], x * spacing[2]);
        mean += p;
        ++count;
        if (is_surface_voxel(mask, z, y, x)) {
          surface.push_back({p[0], p[1], p[2]});
          surface_idx.push_back({z, y, x});
        }
      }
  mean /= static_cast<double>(count);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        if (!mask.at(z, y, x)) continue;
        const Eigen::Vector3d p = Eigen::Vector3d(z * spacing[0], y * spacing[1], x * spacing[2]) - mean;
        cov += p * p.transpose();
      }
  cov /= static_cast<double>(count);

  // Diameters between surface voxel centres; same-index pairs define the plane.
  double dmax3 = 0.0, dax = 0.0, dcor = 0.0, dsag = 0.0;
  for (std::size_t i = 0; i < surface.size(); ++i)
    for (std::size_t j = i + 1; j < surface.size(); ++j) {
      const double a = surface[i][0] - surface[j][0];
      const double b = surface[i][1] - surface[j][1];
      const double c = surface[i][2] - surface[j][2];
      const double d2 = a * a + b * b + c * c;
      dmax3 = std::max(dmax3, d2);
      if (surface_idx[i][0] == surface_idx[j][0]) dax = std::max(dax, d2);
      if (surface_idx[i][1] == surface_idx[j][1]) dcor = std::max(dcor, d2);
      if (surface_idx[i][2] == surface_idx[j][2]) dsag = std::max(dsag, d2);
    }

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov, Eigen::EigenvaluesOnly);
  // Ascending: least, minor, major.
  const double l_least = std::max(eig.eigenvalues()[0], 0.0);
  const double l_minor = std::max(eig.eigenvalues()[1], 0.0);
  const double l_major = std::max(eig.eigenvalues()[2], 0.0);
  const double elongation = l_major > 0.0 ? std::sqrt(l_minor / l_major) : 1.0;
  const double flatness = l_major > 0.0 ? std::sqrt(l_least / l_major) : 1.0;
  const double sphericity = std::cbrt(std::numbers::pi) * std::pow(6.0 * volume, 2.0 / 3.0) / area;

  return {volume,
          area,
          area / volume,
          sphericity,
          std::sqrt(dmax3),
          std::sqrt(dax),
          std::sqrt(dcor),
          std::sqrt(dsag),
          4.0 * std::sqrt(l_major),
          4.0 * std::sqrt(l_minor),
          4.0 * std::sqrt(l_least),
          elongation,
          flatness};
}

// ---- first order --------------------------------------------------------------------

std::array<double, 19> first_order_features(const Volume3D& image, const Mask& mask) {
  require(image.dims() == mask.dims(), ErrorCode::ShapeMismatch, "first_order_features: image and mask dims differ");
  require_nonempty(mask, "first_order_features");
  std::vector<double> x;
  x.reserve(static_cast<std::size_t>(mask.count()));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) x.push_back(image[i]);
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  const double voxel_volume = image.spacing()[0] * image.spacing()[1] * image.spacing()[2];

  double sum = 0.0, sum2 = 0.0;
  for (double v : x) {
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0, mad = 0.0;
  for (double v : x) {
    const double e = v - mean;
    m2 += e * e;
    m3 += e * e * e;
    m4 += e * e * e * e;
    mad += std::abs(e);
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  mad /= n;

  const double lo = x.front(), hi = x.back();
  const double p10 = stats::percentile_sorted(x, 10.0);
  const double p90 = stats::percentile_sorted(x, 90.0);
  const double p25 = stats::percentile_sorted(x, 25.0);
  const double p75 = stats::percentile_sorted(x, 75.0);
  const double median = stats::percentile_sorted(x, 50.0);

  double rsum = 0.0;
  std::size_t rn = 0;
  for (double v : x)
    if (v >= p10 && v <= p90) {
      rsum += v;
      ++rn;
    }
  const double rmean = rsum / static_cast<double>(rn);
  double rmad = 0.0;
  for (double v : x)
    if (v >= p10 && v <= p90) rmad += std::abs(v - rmean);
  rmad /= static_cast<double>(rn);

  std::vector<double> hist(kHistogramBins, 0.0);
  for (double v : x) hist[bin_of(v, lo, hi, kHistogramBins) - 1] += 1.0;
  double entropy = 0.0, uniformity = 0.0;
  for (double c : hist) {
    const double p = c / n;
    entropy += entropy_term(p);
    uniformity += p * p;
  }

  // Flat regions have no defined shape moments; report 0.
  const double skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  const double kurtosis = m2 > 0.0 ? m4 / (m2 * m2) : 0.0;

  return {sum2,
          sum2 * voxel_volume,
          entropy,
          lo,
          p10,
          p90,
          hi,
          mean,
          median,
          p75 - p25,
          hi - lo,
          mad,
          rmad,
          std::sqrt(sum2 / n),
          std::sqrt(m2),
          skewness,
          kurtosis,
          m2,
          uniformity};
}

// ---- GLCM --------------------------------------------------------------------------

std::vector<std::array<int, 3>> canonical_directions() {
  // First nonzero component positive: one of each +-pair.
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int first = dz != 0 ? dz : dy != 0 ? dy : dx;
        if (first > 0) out.push_back({dz, dy, dx});
      }
  return out;
}

std::vector<std::array<int, 3>> GlcmConfig::offsets() const {
  const auto dirs = directions.empty() ? canonical_directions() : directions;
  std::vector<std::array<int, 3>> out;
  for (int d : distances)
    for (const auto& v : dirs) out.push_back({v[0] * d, v[1] * d, v[2] * d});
  return out;
}

void GlcmConfig::validate() const {
  require(n_bins >= 2, ErrorCode::ConfigError, "glcm.n_bins: must be >= 2");
  require(!distances.empty(), ErrorCode::ConfigError, "glcm.distances: must be nonempty");
  for (int d : distances) require(d >= 1, ErrorCode::ConfigError, "glcm.distances: entries must be >= 1");
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const auto& v = directions[i];
    require(v[0] != 0 || v[1] != 0 || v[2] != 0, ErrorCode::ConfigError, "glcm.directions: zero offset");
    for (std::size_t j = 0; j < i; ++j) {
      const auto& u = directions[j];
      // Collinear iff the cross product vanishes.
      const bool collinear = u[1] * v[2] - u[2] * v[1] == 0 && u[2] * v[0] - u[0] * v[2] == 0 &&
                             u[0] * v[1] - u[1] * v[0] == 0;
      require(!collinear, ErrorCode::ConfigError, "glcm.directions: collinear offsets");
    }
  }
}

void to_json(nlohmann::json& j, const GlcmConfig& c) {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& v : c.directions.empty() ? canonical_directions() : c.directions)
    dirs.push_back({v[0], v[1], v[2]});
  j = {{"n_bins", c.n_bins}, {"distances", c.distances}, {"directions", dirs}, {"symmetric", c.symmetric}};
}

void from_json(const nlohmann::json& j, GlcmConfig& c) {
  require(j.is_object(), ErrorCode::ConfigError, "glcm: expected object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "n_bins") c.n_bins = it->get<int>();
      else if (k == "distances") c.distances = it->get<std::vector<int>>();
      else if (k == "directions") c.directions = it->get<std::vector<std::array<int, 3>>>();
      else if (k == "symmetric") c.symmetric = it->get<bool>();
      else fail(ErrorCode::ConfigError, "glcm." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "glcm." + k + ": " + e.what());
    }
  }
  c.validate();
}

Grid3<int> bin_intensities(const Volume3D& image, const Mask& mask, int n_bins) {
  require(image.dims() == mask.dims(), ErrorCode::ShapeMismatch, "bin_intensities: image and mask dims differ");
  require_nonempty(mask, "bin_intensities");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      lo = std::min<double>(lo, image[i]);
      hi = std::max<double>(hi, image[i]);
    }
  Grid3<int> out(image.dims(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i] = bin_of(image[i], lo, hi, n_bins);
  return out;
}

std::vector<double> glcm_counts(const Grid3<int>& bins, int n_bins, const std::array<int, 3>& offset, bool symmetric) {
  const Dims3& d = bins.dims();
  std::vector<double> m(static_cast<std::size_t>(n_bins) * n_bins, 0.0);
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        const int a = bins.at(z, y, x);
        if (a == 0) continue;
        const std::int64_t z2 = z + offset[0], y2 = y + offset[1], x2 = x + offset[2];
        if (z2 < 0 || y2 < 0 || x2 < 0 || z2 >= d.d || y2 >= d.h || x2 >= d.w) continue;
        const int b = bins.at(z2, y2, x2);
        if (b == 0) continue;
        m[(a - 1) * n_bins + (b - 1)] += 1.0;
        if (symmetric) m[(b - 1) * n_bins + (a - 1)] += 1.0;
      }
  return m;
}

namespace {

// Second largest eigenvalue of Q(i,j) = sum_k p(i,k) p(j,k) / (px(i) py(k)),
// over levels with px > 0; columns with py = 0 carry no mass.
double mcc_of(const std::vector<double>& p, std::size_t n, const std::vector<double>& px,
              const std::vector<double>& py) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (px[i] > 0.0) rows.push_back(i);
  if (rows.size() < 2) return 1.0;
  const std::size_t m = rows.size();
  bool symmetric = px == py;
  for (std::size_t i = 0; i < n && symmetric; ++i)
    for (std::size_t j = 0; j < i && symmetric; ++j) symmetric = p[i * n + j] == p[j * n + i];
  std::vector<double> ev;
  if (symmetric) {
    // Q is similar to M^2 with M = D^-1/2 P D^-1/2.
    Eigen::MatrixXd M(m, m);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b)
        M(a, b) = p[rows[a] * n + rows[b]] / std::sqrt(px[rows[a]] * px[rows[b]]);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) ev.push_back(es.eigenvalues()[i] * es.eigenvalues()[i]);
  } else {
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(m, m);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k)
          if (py[k] > 0.0) acc += p[rows[a] * n + k] * p[rows[b] * n + k] / (px[rows[a]] * py[k]);
        Q(a, b) = acc;
      }
    Eigen::EigenSolver<Eigen::MatrixXd> es(Q, false);
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) ev.push_back(es.eigenvalues()[i].real());
  }
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return std::sqrt(std::max(ev[1], 0.0));
}

}  // namespace

std::array<double, 28> glcm_matrix_features(const std::vector<double>& p, const std::vector<int>& levels) {
  const std::size_t n = levels.size();
  require(n >= 1 && p.size() == n * n, ErrorCode::ShapeMismatch, "glcm_matrix_features: matrix size mismatch");
  const double ng = static_cast<double>(n);
  std::vector<double> g(levels.begin(), levels.end());
  std::vector<double> px(n, 0.0), py(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      px[i] += p[i * n + j];
      py[j] += p[i * n + j];
    }
  double mux = 0.0, muy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mux += g[i] * px[i];
    muy += g[i] * py[i];
  }
  double vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    vx += (g[i] - mux) * (g[i] - mux) * px[i];
    vy += (g[i] - muy) * (g[i] - muy) * py[i];
  }

  // Sum and difference distributions keyed by gray-value sum / |difference|.
  const int gmax = *std::max_element(levels.begin(), levels.end());
  std::vector<double> psum(2 * gmax + 1, 0.0), pdiff(gmax + 1, 0.0);
  double autocorr = 0.0, prominence = 0.0, shade = 0.0, tendency = 0.0, contrast = 0.0, joint_energy = 0.0,
         joint_entropy = 0.0, idm = 0.0, idmn = 0.0, id = 0.0, idn = 0.0, maxp = 0.0, hxy1 = 0.0, hxy2 = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = p[i * n + j];
      const double d = g[i] - g[j];
      const double s = g[i] + g[j] - mux - muy;
      psum[levels[i] + levels[j]] += v;
      pdiff[std::abs(levels[i] - levels[j])] += v;
      autocorr += v * g[i] * g[j];
      prominence += v * s * s * s * s;
      shade += v * s * s * s;
      tendency += v * s * s;
      contrast += v * d * d;
      joint_energy += v * v;
      joint_entropy += entropy_term(v);
      idm += v / (1.0 + d * d);
      idmn += v / (1.0 + d * d / (ng * ng));
      id += v / (1.0 + std::abs(d));
      idn += v / (1.0 + std::abs(d) / ng);
      maxp = std::max(maxp, v);
      if (v > 0.0) hxy1 -= v * std::log2(px[i] * py[j]);
      const double q = px[i] * py[j];
      hxy2 += entropy_term(q);
    }
  double hx = 0.0, hy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    hx += entropy_term(px[i]);
    hy += entropy_term(py[i]);
  }

  double da = 0.0, dent = 0.0, denergy = 0.0, dmaxp = 0.0, inv_var = 0.0;
  for (std::size_t k = 0; k < pdiff.size(); ++k) {
    da += static_cast<double>(k) * pdiff[k];
    dent += entropy_term(pdiff[k]);
    denergy += pdiff[k] * pdiff[k];
    dmaxp = std::max(dmaxp, pdiff[k]);
    if (k > 0) inv_var += pdiff[k] / static_cast<double>(k * k);
  }
  double dvar = 0.0;
  for (std::size_t k = 0; k < pdiff.size(); ++k) dvar += (k - da) * (k - da) * pdiff[k];
  double sa = 0.0, sent = 0.0, senergy = 0.0;
  for (std::size_t k = 0; k < psum.size(); ++k) {
    sa += static_cast<double>(k) * psum[k];
    sent += entropy_term(psum[k]);
    senergy += psum[k] * psum[k];
  }
  double svar = 0.0;
  for (std::size_t k = 0; k < psum.size(); ++k) svar += (k - sa) * (k - sa) * psum[k];

  const double sx = std::sqrt(vx), sy = std::sqrt(vy);
  const double correlation = sx * sy > 0.0 ? (autocorr - mux * muy) / (sx * sy) : 1.0;
  const double hmax = std::max(hx, hy);
  const double imc1 = hmax > 0.0 ? (joint_entropy - hxy1) / hmax : 0.0;
  const double imc2 = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * (hxy2 - joint_entropy))));

  return {autocorr,  mux,     prominence, shade,      tendency, contrast, correlation,
          da,        dent,    dvar,       joint_energy, joint_entropy, imc1, imc2,
          idm,       idmn,    id,         idn,        inv_var,  mcc_of(p, n, px, py), maxp,
          sa,        sent,    vx,         svar,       senergy,  denergy,  dmaxp};
}

std::array<double, 28> glcm_degenerate_values() { return glcm_matrix_features({1.0}, {1}); }

std::array<double, 28> glcm_features(const Volume3D& image, const Mask& mask, const GlcmConfig& config) {
  config.validate();
  const Grid3<int> bins = bin_intensities(image, mask, config.n_bins);
  std::vector<int> present(config.n_bins + 1, 0);
  for (std::size_t i = 0; i < bins.size(); ++i) present[bins[i]] = 1;
  std::vector<int> levels;
  for (int l = 1; l <= config.n_bins; ++l)
    if (present[l]) levels.push_back(l);
  require(levels.size() >= 2, ErrorCode::DegenerateGlcm, "glcm_features: region has a single gray level");

  const std::size_t n = levels.size();
  const std::size_t nb = static_cast<std::size_t>(config.n_bins);
  std::array<double, 28> acc{};
  int used = 0;
  for (const auto& off : config.offsets()) {
    const std::vector<double> full = glcm_counts(bins, config.n_bins, off, config.symmetric);
    std::vector<double> p(n * n);
    double total = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) total += p[a * n + b] = full[(levels[a] - 1) * nb + (levels[b] - 1)];
    if (total == 0.0) continue;
    for (double& v : p) v /= total;
    const auto f = glcm_matrix_features(p, levels);
    for (std::size_t k = 0; k < f.size(); ++k) acc[k] += f[k];
    ++used;
  }
  require(used > 0, ErrorCode::DegenerateGlcm, "glcm_features: no voxel pair in any direction");
  for (double& v : acc) v /= used;
  return acc;
}

// ---- assembly ---------------------------------------------------------------------------

Region region_from_short_name(const std::string& name) {
  if (name == "ede") return Region::Edema;
  if (name == "enh") return Region::Enhancing;
  if (name == "nec") return Region::Necrosis;
  if (name == "core") return Region::Core;
  if (name == "whole") return Region::Whole;
  fail(ErrorCode::InvalidArgument, "unknown region '" + name + "'");
}

namespace {

constexpr std::array<const char*, 3> kFirstOrderRegions = {"enh", "nec", "core"};
constexpr std::array<const char*, 2> kGlcmRegions = {"enh", "nec"};

}  // namespace

std::vector<std::string> feature_names() {
  std::vector<std::string> out;
  out.reserve(kImageFeatureCount);
  for (const char* r : kRegionShortNames)
    for (const char* f : kShapeFeatures) out.push_back(std::string(r) + "_shape_" + f);
  for (const char* r : kFirstOrderRegions)
    for (const char* m : kModalityNames)
      for (const char* f : kFirstOrderFeatures) out.push_back(std::string(r) + "_firstorder_" + m + "_" + f);
  for (const char* r : kGlcmRegions)
    for (const char* m : kModalityNames)
      for (const char* f : kGlcmFeatures) out.push_back(std::string(r) + "_glcm_" + m + "_" + f);
  return out;
}

std::vector<std::size_t> feature_group_indices(const std::vector<std::string>& groups) {
  constexpr std::size_t shape_n = kRegionShortNames.size() * kShapeFeatures.size();
  constexpr std::size_t fo_n = kFirstOrderRegions.size() * kNumModalities * kFirstOrderFeatures.size();
  constexpr std::size_t glcm_n = kGlcmRegions.size() * kNumModalities * kGlcmFeatures.size();
  static_assert(shape_n + fo_n + glcm_n == kImageFeatureCount);
  std::vector<char> pick(kImageFeatureCount + 1, 0);
  auto range = [&](std::size_t lo, std::size_t hi) { std::fill(pick.begin() + lo, pick.begin() + hi, 1); };
  require(!groups.empty(), ErrorCode::ConfigError, "feature groups: empty selection");
  for (const std::string& g : groups) {
    if (g == "shape") range(0, shape_n);
    else if (g == "firstorder") range(shape_n, shape_n + fo_n);
    else if (g == "glcm") range(shape_n + fo_n, kImageFeatureCount);
    else if (g == "age") pick[kImageFeatureCount] = 1;
    else if (g == "all") range(0, kImageFeatureCount + 1);
    else fail(ErrorCode::ConfigError, "feature groups: unknown group '" + g + "'");
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pick.size(); ++i)
    if (pick[i]) out.push_back(i);
  return out;
}

FeatureVector assemble_features(const MultiModalCase& c, const LabelMap& seg, std::optional<double> age,
                                const GlcmConfig& config) {
  c.validate();
  require(seg.dims() == c.dims(), ErrorCode::ShapeMismatch, "assemble_features: segmentation dims differ from case");
  validate_labels(seg);
  if (age) require(std::isfinite(*age), ErrorCode::InvalidArgument, "assemble_features: age must be finite");
  config.validate();

  FeatureVector fv;
  fv.names = feature_names();
  fv.values.reserve(kImageFeatureCount + 1);
  std::array<Mask, kRegionShortNames.size()> masks;
  for (std::size_t r = 0; r < kRegionShortNames.size(); ++r) {
    masks[r] = region_mask(seg, region_from_short_name(kRegionShortNames[r]));
    fv.presence.emplace_back(kRegionShortNames[r], masks[r].count() > 0);
  }
  auto mask_of = [&](const char* name) -> const Mask& {
    for (std::size_t r = 0; r < kRegionShortNames.size(); ++r)
      if (name == std::string(kRegionShortNames[r])) return masks[r];
    fail(ErrorCode::InvalidArgument, "unknown region");
  };

  for (std::size_t r = 0; r < kRegionShortNames.size(); ++r) {
    if (masks[r].count() == 0) {
      fv.values.insert(fv.values.end(), kShapeFeatures.size(), 0.0);
      continue;
    }
    const auto f = shape_features(masks[r], c.spacing());
    fv.values.insert(fv.values.end(), f.begin(), f.end());
  }
  for (const char* r : kFirstOrderRegions) {
    const Mask& m = mask_of(r);
    for (int mod = 0; mod < kNumModalities; ++mod) {
      if (m.count() == 0) {
        fv.values.insert(fv.values.end(), kFirstOrderFeatures.size(), 0.0);
        continue;
      }
      const auto f = first_order_features(c.modalities[mod], m);
      fv.values.insert(fv.values.end(), f.begin(), f.end());
    }
  }
  for (const char* r : kGlcmRegions) {
    const Mask& m = mask_of(r);
    for (int mod = 0; mod < kNumModalities; ++mod) {
      if (m.count() == 0) {
        fv.values.insert(fv.values.end(), kGlcmFeatures.size(), 0.0);
        continue;
      }
      std::array<double, 28> f;
      try {
        f = glcm_features(c.modalities[mod], m, config);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateGlcm) throw;
        f = glcm_degenerate_values();
        fv.degenerate_glcm.push_back(std::string(r) + "_" + kModalityNames[mod]);
      }
      fv.values.insert(fv.values.end(), f.begin(), f.end());
    }
  }
  require(fv.values.size() == kImageFeatureCount, ErrorCode::DimensionMismatch, "assemble_features: width mismatch");
  if (age) {
    fv.names.push_back("age");
    fv.values.push_back(*age);
  }
  return fv;
}

}  // namespace voxelseg::radiomics
