#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "common/parallel.hpp"
#include "doctest.h"
#include "survival/survival.hpp"
#include "volume/io.hpp"

using namespace voxelseg;
using namespace voxelseg::survival;
namespace fs = std::filesystem;

namespace {

FeatureMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix X(rows, cols);
  for (auto& v : X.data) v = rng.uniform(-1.0, 1.0);
  return X;
}

double stddev(const std::vector<double>& y) {
  const double m = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double s = 0.0;
  for (double v : y) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(y.size()));
}

// Exhaustive CART: every feature, every midpoint, SSE computed from scratch.
// Returns the prediction at x.
double oracle_tree(const FeatureMatrix& X, const std::vector<double>& y, std::vector<std::size_t> idx, const double* x,
                   int depth, std::size_t leaf) {
  auto sse = [&](const std::vector<std::size_t>& s) {
    double m = 0.0;
    for (auto i : s) m += y[i];
    m /= static_cast<double>(s.size());
    double e = 0.0;
    for (auto i : s) e += (y[i] - m) * (y[i] - m);
    return e;
  };
  double mean = 0.0;
  for (auto i : idx) mean += y[i];
  mean /= static_cast<double>(idx.size());
  double best = INFINITY;
  std::size_t bf = 0;
  double bt = 0.0;
  for (std::size_t f = 0; f < X.cols; ++f) {
    std::vector<double> v;
    for (auto i : idx) v.push_back(X.at(i, f));
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    for (std::size_t k = 0; k + 1 < v.size(); ++k) {
      const double t = 0.5 * (v[k] + v[k + 1]);
      std::vector<std::size_t> l, r;
      for (auto i : idx) (X.at(i, f) <= t ? l : r).push_back(i);
      if (l.size() < leaf || r.size() < leaf) continue;
      const double e = sse(l) + sse(r);
      if (e < best) best = e, bf = f, bt = t;
    }
  }
  if (depth == 0 || !std::isfinite(best) || sse(idx) == 0.0) return mean;
  std::vector<std::size_t> l, r;
  for (auto i : idx) (X.at(i, bf) <= bt ? l : r).push_back(i);
  return oracle_tree(X, y, x[bf] <= bt ? l : r, x, depth - 1, leaf);
}

MlpConfig small_mlp() {
  MlpConfig c;
  c.n_members = 3;
  c.hidden_layers = 2;
  c.units = 16;
  c.epochs = 60;
  c.dropout_p = 0.1;
  c.lr = 3e-3;
  return c;
}

SurvivalConfig small_survival() {
  SurvivalConfig c;
  c.rfr.n_trees = 50;
  c.mlp = small_mlp();
  c.mlp.epochs = 20;
  c.mlp.n_members = 2;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("forest on a constant target predicts the constant exactly") {
  const auto X = random_matrix(30, 4, 1);
  const std::vector<double> y(30, 412.5);
  RfrConfig c;
  c.n_trees = 20;
  const Forest f = train_rfr(X, y, c);
  for (const Tree& t : f.trees) CHECK(t.nodes.size() == 1);
  for (std::size_t r = 0; r < 30; ++r) CHECK(predict_rfr(f, random_matrix(1, 4, 100 + r).row_vector(0)) == 412.5);
}

TEST_CASE("depth-0 forest predicts the bootstrap means") {
  const auto X = random_matrix(10, 2, 2);
  std::vector<double> y(10);
  std::iota(y.begin(), y.end(), 1.0);
  RfrConfig c;
  c.n_trees = 5;
  c.max_depth = 0;
  c.seed = 9;
  const Forest f = train_rfr(X, y, c);
  double expect = 0.0;
  for (std::size_t t = 0; t < 5; ++t) {
    Rng rng(derive_seed(9, t));
    double s = 0.0;
    for (int i = 0; i < 10; ++i) s += y[rng.below(10)];
    expect += s / 10.0 / 5.0;
  }
  CHECK(predict_rfr(f, {0.0, 0.0}) == doctest::Approx(expect).epsilon(1e-12));

  c.bootstrap = false;
  CHECK(predict_rfr(train_rfr(X, y, c), {0.3, 0.3}) == doctest::Approx(5.5).epsilon(1e-15));
}

TEST_CASE("forest averages its trees") {
  Forest f;
  f.n_features = 1;
  f.trees.resize(2);
  f.trees[0].nodes = {TreeNode{-1, 0.0, -1, -1, 100.0}};
  f.trees[1].nodes = {TreeNode{-1, 0.0, -1, -1, 300.0}};
  CHECK(predict_rfr(f, {1.0}) == 200.0);
  CHECK_THROWS_AS(predict_rfr(f, {1.0, 2.0}), Error);
}

TEST_CASE("unbootstrapped all-feature tree matches exhaustive CART") {
  const auto X = random_matrix(40, 3, 3);
  std::vector<double> y(40);
  Rng rng(4);
  for (std::size_t r = 0; r < 40; ++r) y[r] = std::sin(3.0 * X.at(r, 0)) + X.at(r, 1) * X.at(r, 2) + 0.1 * rng.normal(0.0, 1.0);
  RfrConfig c;
  c.n_trees = 1;
  c.bootstrap = false;
  c.max_features = 1.0;
  // Leaves of 4+ rows keep exact cross-feature ties (which any feature order
  // may break) out of the comparison.
  c.max_depth = 3;
  c.min_samples_leaf = 4;
  const Forest shallow = train_rfr(X, y, c);
  std::vector<std::size_t> all(40);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t q = 0; q < 25; ++q) {
    const auto x = random_matrix(1, 3, 500 + q).row_vector(0);
    CHECK(predict_rfr(shallow, x) == doctest::Approx(oracle_tree(X, y, all, x.data(), 3, 4)).epsilon(1e-12));
  }
  // Unlimited depth with leaf size 1 interpolates the training targets.
  c.max_depth = -1;
  c.min_samples_leaf = 1;
  const Forest f = train_rfr(X, y, c);
  for (std::size_t r = 0; r < 40; ++r) CHECK(predict_rfr(f, X.row_vector(r)) == doctest::Approx(y[r]).epsilon(1e-12));
}

TEST_CASE("forest predictions stay within the target range and ignore row order") {
  const auto X = random_matrix(50, 5, 5);
  std::vector<double> y(50);
  Rng rng(6);
  for (auto& v : y) v = rng.uniform(50.0, 1500.0);
  RfrConfig c;
  c.n_trees = 40;
  const Forest f = train_rfr(X, y, c);
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  for (std::size_t q = 0; q < 50; ++q) {
    const double p = predict_rfr(f, random_matrix(1, 5, 900 + q).row_vector(0));
    CHECK(p >= *lo);
    CHECK(p <= *hi);
  }

  c.bootstrap = false;
  c.max_features = 1.0;
  c.n_trees = 1;
  std::vector<std::size_t> perm(50);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::reverse(perm.begin(), perm.end());
  std::vector<double> yp;
  for (auto i : perm) yp.push_back(y[i]);
  const Forest a = train_rfr(X, y, c), b = train_rfr(X.select_rows(perm), yp, c);
  for (std::size_t q = 0; q < 30; ++q) {
    const auto x = random_matrix(1, 5, 1200 + q).row_vector(0);
    CHECK(predict_rfr(a, x) == predict_rfr(b, x));
  }
}

TEST_CASE("forest learns a linear signal out of fold") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto X = random_matrix(200, 6, 40 + seed);
    std::vector<double> y(200);
    Rng rng(70 + seed);
    for (std::size_t r = 0; r < 200; ++r) y[r] = 3.0 * X.at(r, 0) + 0.3 * rng.normal(0.0, 1.0);
    RfrConfig c;
    c.n_trees = 60;
    c.seed = seed;
    const auto folds = fold_assignment(200, 5, seed);
    std::vector<double> pred(200);
    for (int k = 0; k < 5; ++k) {
      std::vector<std::size_t> tr;
      std::vector<double> ytr;
      for (std::size_t r = 0; r < 200; ++r)
        if (folds[r] != k) tr.push_back(r), ytr.push_back(y[r]);
      const Forest f = train_rfr(X.select_rows(tr), ytr, c);
      for (std::size_t r = 0; r < 200; ++r)
        if (folds[r] == k) pred[r] = predict_rfr(f, X.row_vector(r));
    }
    CHECK(evaluate_survival(pred, y).rmse < 0.5 * stddev(y));
  }
}

TEST_CASE("forest training is deterministic and independent of thread count") {
  const auto X = random_matrix(60, 4, 8);
  std::vector<double> y(60);
  for (std::size_t r = 0; r < 60; ++r) y[r] = X.at(r, 1) - X.at(r, 3);
  RfrConfig c;
  c.n_trees = 16;
  c.seed = 21;
  set_thread_count(1);
  const Forest a = train_rfr(X, y, c);
  set_thread_count(4);
  const Forest b = train_rfr(X, y, c);
  set_thread_count(1);
  REQUIRE(a.trees.size() == b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    REQUIRE(a.trees[t].nodes.size() == b.trees[t].nodes.size());
    for (std::size_t n = 0; n < a.trees[t].nodes.size(); ++n) {
      CHECK(a.trees[t].nodes[n].feature == b.trees[t].nodes[n].feature);
      CHECK(a.trees[t].nodes[n].threshold == b.trees[t].nodes[n].threshold);
      CHECK(a.trees[t].nodes[n].value == b.trees[t].nodes[n].value);
    }
  }
}

TEST_CASE("forest rejects bad inputs") {
  RfrConfig c;
  CHECK_THROWS_AS(train_rfr(FeatureMatrix(0, 3), {}, c), Error);
  try {
    train_rfr(random_matrix(4, 2, 1), {1.0, 2.0}, c);
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
  auto X = random_matrix(4, 2, 1);
  X.at(2, 1) = NAN;
  CHECK_THROWS_AS(train_rfr(X, {1, 2, 3, 4}, c), Error);
  c.max_features = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("zero-weight MLP outputs its final bias") {
  MlpConfig c = small_mlp();
  Rng rng(1);
  Mlp m = init_mlp(c, 5, rng);
  for (auto& t : m.params) std::fill(t.values().begin(), t.values().end(), 0.0f);
  m.params.back()[0] = 0.75f;
  CHECK(mlp_output(m, c, {1, -2, 3, 0.5, 9}) == doctest::Approx(0.75).epsilon(1e-7));

  MlpEnsemble e;
  e.config = c;
  e.n_features = 5;
  e.x_stats.mean.assign(5, 0.0);
  e.x_stats.scale.assign(5, 1.0);
  e.y_mean = 400.0;
  e.y_scale = 100.0;
  e.members = {m};
  CHECK(predict_mlp(e, {0, 0, 0, 0, 0}) == doctest::Approx(475.0).epsilon(1e-7));
  CHECK_THROWS_AS(predict_mlp(e, {0, 0}), Error);
}

TEST_CASE("MLP ensemble is deterministic and fits a linear target") {
  const auto X = random_matrix(80, 4, 12);
  std::vector<double> y(80);
  for (std::size_t r = 0; r < 80; ++r) y[r] = 300.0 + 200.0 * X.at(r, 0);
  const MlpConfig c = small_mlp();
  set_thread_count(1);
  const MlpEnsemble a = train_mlp_ensemble(X, y, c);
  set_thread_count(3);
  const MlpEnsemble b = train_mlp_ensemble(X, y, c);
  set_thread_count(1);
  std::vector<double> pred;
  for (std::size_t r = 0; r < 80; ++r) {
    const auto x = X.row_vector(r);
    CHECK(predict_mlp(a, x) == predict_mlp(b, x));
    pred.push_back(predict_mlp(a, x));
    double mean = 0.0;
    for (std::size_t m = 0; m < a.members.size(); ++m) mean += predict_mlp_member(a, m, x);
    CHECK(predict_mlp(a, x) == doctest::Approx(mean / 3.0).epsilon(1e-12));
  }
  CHECK(evaluate_survival(pred, y).rmse < 0.5 * stddev(y));
  CHECK(a.y_mean == doctest::Approx(std::accumulate(y.begin(), y.end(), 0.0) / 80.0));
}

TEST_CASE("standardizer z-scores columns and leaves constant columns unscaled") {
  FeatureMatrix X(4, 2);
  const double col0[] = {1, 2, 3, 4};
  for (int r = 0; r < 4; ++r) X.at(r, 0) = col0[r], X.at(r, 1) = 7.0;
  const auto s = Standardizer::fit(X);
  CHECK(s.mean[0] == 2.5);
  CHECK(s.scale[0] == doctest::Approx(std::sqrt(1.25)));
  CHECK(s.scale[1] == 1.0);
  const auto z = s.apply(X.row(3));
  CHECK(z[0] == doctest::Approx(1.5 / std::sqrt(1.25)));
  CHECK(z[1] == 0.0);
}

TEST_CASE("combined prediction is the mean of forest and ensemble") {
  const auto X = random_matrix(40, 3, 13);
  std::vector<double> y(40);
  for (std::size_t r = 0; r < 40; ++r) y[r] = 500.0 + 100.0 * X.at(r, 2);
  const SurvivalModel m = train_survival(X, y, small_survival(), {"a", "b", "c"});
  for (std::size_t r = 0; r < 10; ++r) {
    const auto x = X.row_vector(r);
    CHECK(predict_combined(m, x) ==
          doctest::Approx(0.5 * (predict_rfr(m.forest, x) + predict_mlp(m.mlp, x))).epsilon(1e-12));
  }
  CHECK_THROWS_AS(train_survival(X, y, small_survival(), {"a"}), Error);
}

TEST_CASE("survival classes and metrics") {
  const std::vector<double> e{300.0, 450.0};
  CHECK(survival_class(0.0, e) == 0);
  CHECK(survival_class(299.9, e) == 0);
  CHECK(survival_class(300.0, e) == 1);
  CHECK(survival_class(450.0, e) == 1);
  CHECK(survival_class(450.1, e) == 2);

  const auto m = evaluate_survival({100, 400, 500, 700}, {200, 350, 600, 260});
  CHECK(m.mse == doctest::Approx((1e4 + 2500 + 1e4 + 440.0 * 440.0) / 4.0));
  CHECK(m.rmse * m.rmse == doctest::Approx(m.mse).epsilon(1e-12));
  CHECK(m.mae == doctest::Approx((100 + 50 + 100 + 440) / 4.0));
  CHECK(m.accuracy == doctest::Approx(0.75));
  CHECK_THROWS_AS(evaluate_survival({1.0}, {1.0}), Error);
  CHECK_THROWS_AS(evaluate_survival({1.0, 2.0}, {1.0}), Error);
}

TEST_CASE("spearman correlation") {
  CHECK(spearman({1, 2, 3, 4, 5}, {50, 40, 30, 20, 10}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));

  // Without ties: 1 - 6 sum d^2 / (n (n^2 - 1)).
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(8);
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double ra = 1, rb = 1;
      for (std::size_t j = 0; j < n; ++j) ra += a[j] < a[i], rb += b[j] < b[i];
      d2 += (ra - rb) * (ra - rb);
    }
    const double nn = static_cast<double>(n);
    CHECK(spearman(a, b) == doctest::Approx(1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0))).epsilon(1e-12));
    std::vector<double> ea = a;
    for (auto& v : ea) v = std::exp(5.0 * v) - 3.0;
    CHECK(spearman(ea, b) == doctest::Approx(spearman(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("fold assignment") {
  const auto f = fold_assignment(23, 5, 3);
  std::vector<int> count(5, 0);
  for (int x : f) ++count[x];
  for (int c : count) CHECK((c == 4 || c == 5));
  CHECK(f == fold_assignment(23, 5, 3));
  CHECK(f != fold_assignment(23, 5, 4));
  CHECK_THROWS_AS(fold_assignment(3, 5, 0), Error);
  CHECK_THROWS_AS(fold_assignment(10, 1, 0), Error);
}

TEST_CASE("leave-one-out cross-validation on five rows") {
  const auto X = random_matrix(5, 2, 15);
  const std::vector<double> y{100, 200, 300, 400, 500};
  SurvivalConfig c = small_survival();
  c.rfr.n_trees = 10;
  const CvResult r = cross_validate(X, y, 5, c);
  CHECK(r.fold_combined.size() == 5);
  std::vector<int> sorted = r.folds;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(r.combined[i] == doctest::Approx(0.5 * (r.rfr[i] + r.mlp[i])).epsilon(1e-12));
    // Each held-out forest prediction is a mean over the other four targets.
    CHECK(r.rfr[i] >= 100.0);
    CHECK(r.rfr[i] <= 500.0);
    CHECK(r.rfr[i] != y[i]);
  }
  const CvResult again = cross_validate(X, y, 5, c);
  CHECK(again.combined == r.combined);
  CHECK(cv_json(r)["folds"].size() == 5);
}

TEST_CASE("survival model archive round trip") {
  const auto X = random_matrix(30, 3, 16);
  std::vector<double> y(30);
  for (std::size_t r = 0; r < 30; ++r) y[r] = 400.0 + 150.0 * X.at(r, 0);
  const SurvivalModel m = train_survival(X, y, small_survival(), {"f0", "f1", "f2"});
  const fs::path dir = fs::temp_directory_path() / "voxelseg_survival_archive";
  fs::remove_all(dir);
  const std::string path = save_survival_model(dir.string(), "model", m);
  const SurvivalModel back = load_survival_model(path);
  CHECK(back.feature_names == m.feature_names);
  for (std::size_t q = 0; q < 10; ++q) {
    const auto x = random_matrix(1, 3, 2000 + q).row_vector(0);
    CHECK(predict_combined(back, x) == predict_combined(m, x));
  }

  {
    auto bytes = read_binary_file(dir / "model.bin");
    bytes.pop_back();
    write_binary_file(dir / "model.bin", bytes);
  }
  try {
    load_survival_model(path);
    FAIL("expected CheckpointError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CheckpointError);
  }
  fs::remove_all(dir);
}

TEST_CASE("survival config JSON") {
  SurvivalConfig c = small_survival();
  const nlohmann::json j = c;
  const SurvivalConfig back = j.get<SurvivalConfig>();
  CHECK(back.rfr.n_trees == 50);
  CHECK(back.mlp.units == 16);
  CHECK(back.seed == 11);
  CHECK(back.accuracy_bins == std::vector<double>{300.0, 450.0});
  nlohmann::json bad = j;
  bad["mlp"]["unitz"] = 3;
  CHECK_THROWS_AS(bad.get<SurvivalConfig>(), Error);
  bad = j;
  bad["rfr"]["split_criterion"] = "mae";
  CHECK_THROWS_AS(bad.get<SurvivalConfig>(), Error);
  bad = j;
  bad["accuracy_bins"] = {450.0, 300.0};
  CHECK_THROWS_AS(bad.get<SurvivalConfig>(), Error);
}
