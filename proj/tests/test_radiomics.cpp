#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "common/rng.hpp"
#include "doctest.h"
#include "radiomics/radiomics.hpp"

using namespace voxelseg;
using namespace voxelseg::radiomics;

namespace {

Mask sphere_mask(int n, double r) {
  Mask m(Dims3{n, n, n}, 0);
  const double c = (n - 1) / 2.0;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double d2 = (z - c) * (z - c) + (y - c) * (y - c) + (x - c) * (x - c);
        m.at(z, y, x) = d2 <= r * r ? 1 : 0;
      }
  return m;
}

Mask random_mask(Dims3 d, Rng& rng, double p) {
  Mask m(d, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(p) ? 1 : 0;
  return m;
}

Volume3D random_image(Dims3 d, Rng& rng, Spacing s = {1, 1, 1}) {
  Volume3D v(d, s);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform(0.0, 100.0));
  return v;
}

Volume3D volume_from(Dims3 d, std::vector<float> values) { return Volume3D(d, Spacing{1, 1, 1}, std::move(values)); }

void check_rel(double a, double b, double tol) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  CHECK(std::abs(a - b) / scale <= tol);
}

// Direct-from-definition GLCM features of one normalized matrix. Sums and
// differences are accumulated from (i, j) pairs; MCC uses the general
// eigen-decomposition of Q over rows with nonzero marginal.
std::array<double, 28> oracle_features(const std::vector<std::vector<double>>& P, const std::vector<int>& levels) {
  const std::size_t n = levels.size();
  auto g = [&](std::size_t i) { return static_cast<double>(levels[i]); };
  auto H = [](double p) { return p > 0 ? -p * std::log2(p) : 0.0; };
  std::vector<double> px(n, 0), py(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) px[i] += P[i][j], py[j] += P[i][j];
  double mux = 0, muy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) mux += g(i) * px[i], muy += g(i) * py[i];
  for (std::size_t i = 0; i < n; ++i) sxx += std::pow(g(i) - mux, 2) * px[i], syy += std::pow(g(i) - muy, 2) * py[i];
  std::map<int, double> sum, diff;
  double f[28] = {};
  double cov = 0, hxy = 0, hxy1 = 0, hxy2 = 0, hx = 0, hy = 0;
  for (std::size_t i = 0; i < n; ++i) hx += H(px[i]), hy += H(py[i]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double p = P[i][j];
      const double s = g(i) + g(j) - mux - muy, d = g(i) - g(j);
      sum[levels[i] + levels[j]] += p;
      diff[std::abs(levels[i] - levels[j])] += p;
      f[0] += g(i) * g(j) * p;
      f[2] += std::pow(s, 4) * p;
      f[3] += std::pow(s, 3) * p;
      f[4] += s * s * p;
      f[5] += d * d * p;
      cov += (g(i) - mux) * (g(j) - muy) * p;
      f[10] += p * p;
      hxy += H(p);
      if (p > 0) hxy1 += -p * std::log2(px[i] * py[j]);
      hxy2 += H(px[i] * py[j]);
      f[14] += p / (1 + d * d);
      f[15] += p / (1 + d * d / double(n * n));
      f[16] += p / (1 + std::abs(d));
      f[17] += p / (1 + std::abs(d) / double(n));
      if (i != j) f[18] += p / (d * d) / 1.0;
      f[20] = std::max(f[20], p);
    }
  // inverse variance over ordered pairs with i != j equals sum_k pdiff(k)/k^2
  f[1] = mux;
  f[6] = sxx * syy > 0 ? cov / std::sqrt(sxx * syy) : 1.0;
  for (auto [k, p] : diff) f[7] += k * p;
  for (auto [k, p] : diff) f[8] += H(p), f[9] += std::pow(k - f[7], 2) * p, f[26] += p * p, f[27] = std::max(f[27], p);
  f[11] = hxy;
  f[12] = std::max(hx, hy) > 0 ? (hxy - hxy1) / std::max(hx, hy) : 0.0;
  f[13] = std::sqrt(std::max(0.0, 1 - std::exp(-2 * (hxy2 - hxy))));
  for (auto [k, p] : sum) f[21] += k * p;
  for (auto [k, p] : sum) f[22] += H(p), f[24] += std::pow(k - f[21], 2) * p, f[25] += p * p;
  f[23] = sxx;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (px[i] > 0) rows.push_back(i);
  if (rows.size() < 2) {
    f[19] = 1.0;
  } else {
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(rows.size(), rows.size());
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = 0; b < rows.size(); ++b)
        for (std::size_t k = 0; k < n; ++k)
          if (py[k] > 0) Q(a, b) += P[rows[a]][k] * P[rows[b]][k] / (px[rows[a]] * py[k]);
    Eigen::EigenSolver<Eigen::MatrixXd> es(Q);
    std::vector<double> ev;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) ev.push_back(es.eigenvalues()[i].real());
    std::sort(ev.rbegin(), ev.rend());
    f[19] = std::sqrt(std::max(ev[1], 0.0));
  }
  std::array<double, 28> out;
  std::copy(f, f + 28, out.begin());
  return out;
}

// All-pairs enumeration: every ordered voxel pair whose index difference
// equals the offset (and its negation when symmetric).
std::vector<double> oracle_counts(const Grid3<int>& bins, int nb, std::array<int, 3> off, bool symmetric) {
  std::vector<double> m(nb * nb, 0.0);
  const Dims3& d = bins.dims();
  for (std::int64_t a = 0; a < (std::int64_t)bins.size(); ++a)
    for (std::int64_t b = 0; b < (std::int64_t)bins.size(); ++b) {
      if (!bins[a] || !bins[b]) continue;
      const std::int64_t za = a / (d.h * d.w), ya = a / d.w % d.h, xa = a % d.w;
      const std::int64_t zb = b / (d.h * d.w), yb = b / d.w % d.h, xb = b % d.w;
      const std::int64_t dz = zb - za, dy = yb - ya, dx = xb - xa;
      if (dz == off[0] && dy == off[1] && dx == off[2]) m[(bins[a] - 1) * nb + bins[b] - 1] += 1;
      if (symmetric && dz == -off[0] && dy == -off[1] && dx == -off[2]) m[(bins[a] - 1) * nb + bins[b] - 1] += 1;
    }
  return m;
}

}  // namespace

TEST_CASE("shape: cube volume and diameters") {
  Mask m(Dims3{14, 14, 14}, 0);
  for (int z = 2; z < 12; ++z)
    for (int y = 2; y < 12; ++y)
      for (int x = 2; x < 12; ++x) m.at(z, y, x) = 1;
  const auto f = shape_features(m, {1, 1, 1});
  CHECK(f[0] == 1000.0);
  CHECK(f[4] == doctest::Approx(std::sqrt(3.0) * 9.0).epsilon(1e-12));
  CHECK(f[5] == doctest::Approx(std::sqrt(2.0) * 9.0).epsilon(1e-12));
  CHECK(f[6] == doctest::Approx(std::sqrt(2.0) * 9.0).epsilon(1e-12));
  CHECK(f[7] == doctest::Approx(std::sqrt(2.0) * 9.0).epsilon(1e-12));
  // Cube of side 10 voxels: population variance (n^2-1)/12 per axis.
  CHECK(f[8] == doctest::Approx(4.0 * std::sqrt(99.0 / 12.0)).epsilon(1e-12));
  CHECK(f[11] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f[12] == doctest::Approx(1.0).epsilon(1e-12));
  // Smoothing never increases total variation, so the estimate is below 6 L^2.
  CHECK(f[1] < 600.0);
}

TEST_CASE("shape: cube area deficit is an edge effect") {
  // The smoothed field rounds the 12 edges; the lost area grows like L
  // while the true area grows like L^2, so the relative deficit halves
  // when the side doubles.
  auto deficit = [](int L) {
    Mask m(Dims3{L + 4, L + 4, L + 4}, 0);
    for (int z = 2; z < L + 2; ++z)
      for (int y = 2; y < L + 2; ++y)
        for (int x = 2; x < L + 2; ++x) m.at(z, y, x) = 1;
    return 1.0 - surface_area(m, {1, 1, 1}) / (6.0 * L * L);
  };
  const double d10 = deficit(10), d20 = deficit(20);
  CHECK(d10 > 0.0);
  CHECK(d20 > 0.0);
  CHECK(d20 / d10 > 0.4);
  CHECK(d20 / d10 < 0.6);
}

TEST_CASE("shape: two voxels 3-4-5") {
  Mask m(Dims3{1, 5, 5}, 0);
  m.at(0, 0, 0) = 1;
  m.at(0, 3, 4) = 1;
  const auto f = shape_features(m, {1, 1, 1});
  CHECK(f[4] == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(f[5] == doctest::Approx(5.0).epsilon(1e-15));  // both on axial slice 0
  CHECK(f[6] == 0.0);
  CHECK(f[7] == 0.0);
  CHECK(f[0] == 2.0);
}

TEST_CASE("shape: digitized sphere r=20") {
  const double r = 20.0;
  const Mask m = sphere_mask(45, r);
  const auto f = shape_features(m, {1, 1, 1});
  const double v_true = 4.0 / 3.0 * std::numbers::pi * r * r * r;
  CHECK(std::abs(f[0] - v_true) / v_true < 0.02);
  CHECK(std::abs(f[3] - 1.0) < 0.05);
  CHECK(f[3] <= 1.0 + 1e-3);
  CHECK(f[4] == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(f[11] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(f[12] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("shape: spacing scaling covariance") {
  Rng rng(5);
  Mask m = random_mask(Dims3{9, 8, 7}, rng, 0.4);
  m.at(4, 4, 3) = 1;
  const Spacing base{0.9, 1.3, 1.1};
  const double s = 1.7;
  const auto a = shape_features(m, base);
  const auto b = shape_features(m, {base[0] * s, base[1] * s, base[2] * s});
  check_rel(b[0], a[0] * s * s * s, 1e-9);
  check_rel(b[1], a[1] * s * s, 1e-9);
  check_rel(b[2], a[2] / s, 1e-9);
  check_rel(b[3], a[3], 1e-9);
  for (int k = 4; k <= 10; ++k) check_rel(b[k], a[k] * s, 1e-9);
  check_rel(b[11], a[11], 1e-9);
  check_rel(b[12], a[12], 1e-9);
}

TEST_CASE("shape: surface area is translation invariant and positive; empty throws") {
  Mask a(Dims3{12, 12, 12}, 0), b(Dims3{12, 12, 12}, 0);
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        a.at(z, y, x) = 1;  // touches the grid corner
        b.at(z + 6, y + 5, x + 4) = 1;
      }
  CHECK(surface_area(a, {1, 1, 1}) == doctest::Approx(surface_area(b, {1, 1, 1})).epsilon(1e-12));
  CHECK(surface_area(a, {1, 1, 1}) > 0.0);
  Mask empty(Dims3{3, 3, 3}, 0);
  try {
    shape_features(empty, {1, 1, 1});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyRegion);
  }
}

TEST_CASE("first order: hand examples") {
  {
    Volume3D v(Dims3{1, 2, 3}, Spacing{1, 1, 2}, 7.0f);
    Mask m(v.dims(), 1);
    const auto f = first_order_features(v, m);
    CHECK(f[7] == 7.0);
    CHECK(f[17] == 0.0);
    CHECK(f[0] == 6 * 49.0);
    CHECK(f[1] == 6 * 49.0 * 2.0);
    CHECK(f[2] == 0.0);
    CHECK(f[18] == 1.0);
    CHECK(f[15] == 0.0);
    CHECK(f[16] == 0.0);
  }
  {
    const Volume3D v = volume_from(Dims3{1, 1, 4}, {1, 2, 3, 4});
    const auto f = first_order_features(v, Mask(v.dims(), 1));
    CHECK(f[7] == 2.5);
    CHECK(f[10] == 3.0);
    CHECK(f[13] == doctest::Approx(std::sqrt(7.5)).epsilon(1e-15));
    CHECK(f[3] == 1.0);
    CHECK(f[6] == 4.0);
    CHECK(f[8] == 2.5);
    CHECK(f[4] == doctest::Approx(1.3).epsilon(1e-12));  // linear interpolation
    CHECK(f[5] == doctest::Approx(3.7).epsilon(1e-12));
    CHECK(f[9] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(f[11] == 1.0);
    CHECK(f[17] == 1.25);
    CHECK(f[14] == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
    CHECK(f[16] == doctest::Approx((2 * 5.0625 + 2 * 0.0625) / 4.0 / (1.25 * 1.25)).epsilon(1e-12));
    // robust MAD: values 2,3 inside [1.3,3.7], mean 2.5
    CHECK(f[12] == 0.5);
    // 4 values in 4 distinct bins of 32: entropy 2, uniformity 1/4
    CHECK(f[2] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(f[18] == doctest::Approx(0.25).epsilon(1e-15));
  }
  {
    const Volume3D v = volume_from(Dims3{1, 1, 4}, {1, 2, 2, 3});
    CHECK(first_order_features(v, Mask(v.dims(), 1))[15] == 0.0);
  }
}

TEST_CASE("first order: permutation invariance and mask restriction") {
  Rng rng(11);
  const Dims3 d{5, 4, 6};
  Volume3D v = random_image(d, rng);
  const Mask m = random_mask(d, rng, 0.5);
  std::vector<float> inside;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) inside.push_back(v[i]);
  std::reverse(inside.begin(), inside.end());
  std::swap(inside.front(), inside[inside.size() / 2]);
  Volume3D w = v;
  std::size_t k = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) w[i] = inside[k++];
    else w[i] = -1e6f;  // outside values must not matter
  }
  const auto a = first_order_features(v, m);
  const auto b = first_order_features(w, m);
  for (int i = 0; i < 19; ++i) check_rel(a[i], b[i], 1e-12);
}

TEST_CASE("glcm: worked 2x2x1 example") {
  const Volume3D v = volume_from(Dims3{2, 2, 1}, {1, 2, 1, 2});
  const Mask m(v.dims(), 1);
  const Grid3<int> bins = bin_intensities(v, m, 2);
  const auto c = glcm_counts(bins, 2, {0, 1, 0}, true);
  CHECK(c == std::vector<double>{0, 2, 2, 0});
  GlcmConfig cfg;
  cfg.n_bins = 2;
  cfg.directions = {{0, 1, 0}};
  const auto f = glcm_features(v, m, cfg);
  CHECK(f[10] == 0.5);  // joint energy
  CHECK(f[5] == 1.0);   // contrast
  CHECK(f[7] == 1.0);   // difference average
  CHECK(f[6] == doctest::Approx(-1.0).epsilon(1e-14));
  const auto g = glcm_matrix_features({0, 0.5, 0.5, 0}, {1, 2});
  CHECK(g[10] == 0.5);
}

TEST_CASE("glcm: counts equal all-pairs enumeration; normalization and symmetry") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const Dims3 d{1 + (int)rng.below(4), 1 + (int)rng.below(4), 1 + (int)rng.below(4)};
    const Volume3D v = random_image(d, rng);
    Mask m = random_mask(d, rng, 0.7);
    m[0] = 1;
    const int nb = 2 + (int)rng.below(6);
    const Grid3<int> bins = bin_intensities(v, m, nb);
    for (bool sym : {true, false})
      for (const auto& off : GlcmConfig{}.offsets()) {
        const auto c = glcm_counts(bins, nb, off, sym);
        CHECK(c == oracle_counts(bins, nb, off, sym));
        double total = 0.0;
        for (double x : c) total += x;
        if (total == 0.0) continue;
        double s = 0.0;
        for (double x : c) s += x / total;
        CHECK(std::abs(s - 1.0) <= 1e-10);
        if (sym)
          for (int i = 0; i < nb; ++i)
            for (int j = 0; j < nb; ++j) CHECK(c[i * nb + j] == c[j * nb + i]);
      }
  }
}

TEST_CASE("glcm: features equal direct definitions on small images") {
  Rng rng(33);
  int compared = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const Dims3 d{2 + (int)rng.below(3), 2 + (int)rng.below(3), 2 + (int)rng.below(3)};
    Volume3D v = random_image(d, rng);
    const Mask m = random_mask(d, rng, 0.8);
    if (m.count() < 2) continue;
    GlcmConfig cfg;
    cfg.n_bins = 2 + (int)rng.below(7);
    cfg.symmetric = trial % 4 != 0;
    std::array<double, 28> got;
    try {
      got = glcm_features(v, m, cfg);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DegenerateGlcm);
      continue;
    }
    const Grid3<int> bins = bin_intensities(v, m, cfg.n_bins);
    std::set<int> present;
    for (std::size_t i = 0; i < bins.size(); ++i)
      if (bins[i]) present.insert(bins[i]);
    const std::vector<int> levels(present.begin(), present.end());
    std::array<double, 28> want{};
    int used = 0;
    for (const auto& off : cfg.offsets()) {
      const auto c = oracle_counts(bins, cfg.n_bins, off, cfg.symmetric);
      std::vector<std::vector<double>> P(levels.size(), std::vector<double>(levels.size()));
      double total = 0;
      for (std::size_t a = 0; a < levels.size(); ++a)
        for (std::size_t b = 0; b < levels.size(); ++b) total += P[a][b] = c[(levels[a] - 1) * cfg.n_bins + levels[b] - 1];
      if (total == 0) continue;
      for (auto& row : P)
        for (double& x : row) x /= total;
      const auto f = oracle_features(P, levels);
      for (int k = 0; k < 28; ++k) want[k] += f[k];
      ++used;
    }
    REQUIRE(used > 0);
    for (int k = 0; k < 28; ++k) {
      want[k] /= used;
      INFO("feature " << kGlcmFeatures[k] << " got " << got[k] << " want " << want[k]);
      CHECK(std::abs(got[k] - want[k]) <= 1e-10 * std::max(1.0, std::abs(want[k])));
    }
    ++compared;
  }
  CHECK(compared >= 20);
}

TEST_CASE("glcm: degenerate inputs") {
  Volume3D flat(Dims3{3, 3, 3}, Spacing{1, 1, 1}, 4.0f);
  const Mask all(flat.dims(), 1);
  try {
    glcm_features(flat, all);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateGlcm);
  }
  // Two isolated voxels with different values: no pair at distance 1.
  Volume3D v(Dims3{3, 3, 3}, Spacing{1, 1, 1}, 0.0f);
  Mask m(v.dims(), 0);
  m.at(0, 0, 0) = m.at(2, 2, 2) = 1;
  v.at(2, 2, 2) = 5.0f;
  try {
    glcm_features(v, m);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateGlcm);
  }
  const auto t = glcm_degenerate_values();
  const std::array<double, 28> want = {1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0,
                                       1, 1, 1, 1, 0, 1, 1, 2, 0, 0, 0, 1, 1, 1};
  for (int k = 0; k < 28; ++k) {
    INFO(kGlcmFeatures[k]);
    CHECK(t[k] == want[k]);
  }
}

TEST_CASE("glcm: config validation and json") {
  GlcmConfig c;
  CHECK(c.offsets().size() == 13);
  CHECK_NOTHROW(c.validate());
  const auto dirs = canonical_directions();
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = 0; j < dirs.size(); ++j)
      if (i != j) CHECK(!(dirs[i][0] == -dirs[j][0] && dirs[i][1] == -dirs[j][1] && dirs[i][2] == -dirs[j][2]));
  c.n_bins = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = GlcmConfig{};
  c.directions = {{0, 0, 1}, {0, 0, -2}};
  CHECK_THROWS_AS(c.validate(), Error);
  const nlohmann::json j = GlcmConfig{};
  CHECK(j.at("directions").size() == 13);
  const GlcmConfig back = j.get<GlcmConfig>();
  CHECK(back.offsets() == GlcmConfig{}.offsets());
  CHECK_THROWS_AS(nlohmann::json({{"bins", 3}}).get<GlcmConfig>(), Error);
}

namespace {

MultiModalCase small_case(Rng& rng, const LabelMap& seg) {
  MultiModalCase c;
  c.id = "t";
  for (auto& m : c.modalities) m = random_image(seg.dims(), rng, {1.0, 1.0, 1.5});
  c.label = seg;
  return c;
}

}  // namespace

TEST_CASE("assembly: widths, names and groups") {
  const auto names = feature_names();
  CHECK(names.size() == 517);
  CHECK(std::set<std::string>(names.begin(), names.end()).size() == 517);
  CHECK(names.front() == "ede_shape_volume");
  CHECK(names[65] == "enh_firstorder_t1_energy");
  CHECK(names.back() == "nec_glcm_flair_difference_max_probability");
  CHECK(feature_group_indices({"shape", "age"}).size() == 66);
  CHECK(feature_group_indices({"glcm", "age"}).size() == 225);
  CHECK(feature_group_indices({"firstorder", "age"}).size() == 229);
  CHECK(feature_group_indices({"all"}).size() == 518);
  CHECK(feature_group_indices({"shape", "firstorder", "glcm"}).size() == 517);
  CHECK(feature_group_indices({"age"}) == std::vector<std::size_t>{517});
  CHECK_THROWS_AS(feature_group_indices({"wavelet"}), Error);

  Rng rng(3);
  LabelMap seg(Dims3{10, 10, 10}, 0);
  for (int z = 2; z < 8; ++z)
    for (int y = 2; y < 8; ++y)
      for (int x = 2; x < 8; ++x) seg.at(z, y, x) = 2;
  for (int z = 3; z < 7; ++z)
    for (int y = 3; y < 7; ++y)
      for (int x = 3; x < 7; ++x) seg.at(z, y, x) = 4;
  const MultiModalCase c = small_case(rng, seg);
  const FeatureVector a = assemble_features(c, seg, std::nullopt);
  CHECK(a.values.size() == 517);
  const FeatureVector b = assemble_features(c, seg, 55.5);
  CHECK(b.values.size() == 518);
  CHECK(b.names.back() == "age");
  CHECK(b.values.back() == 55.5);
  for (double v : b.values) CHECK(std::isfinite(v));
  // Necrosis empty: its features are zero and flagged absent.
  bool nec_present = true;
  for (const auto& [r, p] : b.presence)
    if (r == "nec") nec_present = p;
  CHECK(!nec_present);
  for (std::size_t i = 0; i < 517; ++i)
    if (b.names[i].rfind("nec_", 0) == 0) CHECK(b.values[i] == 0.0);
  // Core equals enhancing here, so their first-order blocks agree.
  for (std::size_t i = 0; i < 517; ++i)
    if (b.names[i].rfind("enh_firstorder_", 0) == 0) {
      const std::string other = "core" + b.names[i].substr(3);
      const auto it = std::find(b.names.begin(), b.names.end(), other);
      REQUIRE(it != b.names.end());
      CHECK(b.values[i] == b.values[it - b.names.begin()]);
    }
}

TEST_CASE("assembly: shape block ignores intensities") {
  Rng rng(8);
  LabelMap seg(Dims3{8, 8, 8}, 0);
  for (int i = 100; i < 300; ++i) seg[i] = static_cast<std::uint8_t>(std::array<int, 3>{1, 2, 4}[i % 3]);
  const MultiModalCase a = small_case(rng, seg);
  const MultiModalCase b = small_case(rng, seg);
  const auto fa = assemble_features(a, seg, 1.0);
  const auto fb = assemble_features(b, seg, 1.0);
  for (std::size_t i = 0; i < 65; ++i) CHECK(fa.values[i] == fb.values[i]);
}
