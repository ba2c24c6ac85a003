#include "survival/survival.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "common/stats.hpp"
#include "train/train.hpp"
#include "volume/io.hpp"

namespace voxelseg::survival {

namespace fs = std::filesystem;

FeatureMatrix FeatureMatrix::select_rows(const std::vector<std::size_t>& idx) const {
  FeatureMatrix out(idx.size(), cols);
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(row(idx[r]), cols, out.data.data() + r * cols);
  return out;
}

namespace {

void check_training_data(const FeatureMatrix& X, const std::vector<double>& y, const char* what) {
  VOXELSEG_REQUIRE(X.rows >= 1 && X.cols >= 1, ErrorCode::EmptyDataset, std::string(what) + ": empty training data");
  VOXELSEG_REQUIRE(X.rows == y.size(), ErrorCode::DimensionMismatch,
          std::string(what) + ": " + std::to_string(X.rows) + " rows but " + std::to_string(y.size()) + " targets");
  for (double v : X.data) VOXELSEG_REQUIRE(std::isfinite(v), ErrorCode::InvalidArgument, std::string(what) + ": non-finite feature");
  for (double v : y) VOXELSEG_REQUIRE(std::isfinite(v), ErrorCode::InvalidArgument, std::string(what) + ": non-finite target");
}

template <typename F>
void parse_object(const nlohmann::json& j, const std::string& section, F&& field) {
  VOXELSEG_REQUIRE(j.is_object(), ErrorCode::ConfigError, section + ": expected object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      if (!field(it.key(), *it)) fail(ErrorCode::ConfigError, section + "." + it.key() + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, section + "." + it.key() + ": " + e.what());
    }
  }
}

}  // namespace

// ---- random forest ---------------------------------------------------------------

void RfrConfig::validate() const {
  require(n_trees >= 1, ErrorCode::ConfigError, "rfr.n_trees must be >= 1");
  require(max_features > 0.0 && max_features <= 1.0, ErrorCode::ConfigError, "rfr.max_features must be in (0, 1]");
  require(min_samples_leaf >= 1, ErrorCode::ConfigError, "rfr.min_samples_leaf must be >= 1");
}

void to_json(nlohmann::json& j, const RfrConfig& c) {
  j = {{"n_trees", c.n_trees},     {"max_features", c.max_features}, {"min_samples_leaf", c.min_samples_leaf},
       {"max_depth", c.max_depth}, {"bootstrap", c.bootstrap},       {"seed", c.seed},
       {"split_criterion", "mse"}};
}

void from_json(const nlohmann::json& j, RfrConfig& c) {
  parse_object(j, "rfr", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "n_trees") c.n_trees = v.get<int>();
    else if (k == "max_features") c.max_features = v.get<double>();
    else if (k == "min_samples_leaf") c.min_samples_leaf = v.get<int>();
    else if (k == "max_depth") c.max_depth = v.get<int>();
    else if (k == "bootstrap") c.bootstrap = v.get<bool>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "split_criterion") require(v.get<std::string>() == "mse", ErrorCode::ConfigError, "rfr.split_criterion: only mse");
    else return false;
    return true;
  });
  c.validate();
}

double Tree::predict(const double* x) const {
  std::int32_t n = 0;
  while (nodes[n].feature >= 0) n = x[nodes[n].feature] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
  return nodes[n].value;
}

namespace {

struct TreeBuilder {
  const FeatureMatrix& X;
  const std::vector<double>& y;
  const RfrConfig& cfg;
  Rng& rng;
  std::size_t max_features;
  Tree tree;
  std::vector<std::size_t> feature_order;
  std::vector<std::pair<double, double>> scratch;  // (x, y) of the node

  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double score = -INFINITY;
  };

  // Best split of samples[lo, hi) on feature f by sum_l^2/n_l + sum_r^2/n_r,
  // the SSE reduction up to a node constant.
  void scan_feature(const std::vector<std::size_t>& samples, std::size_t f, Split& best) {
    scratch.clear();
    for (std::size_t s : samples) scratch.emplace_back(X.at(s, f), y[s]);
    std::sort(scratch.begin(), scratch.end());
    const std::size_t n = scratch.size();
    double total = 0.0;
    for (const auto& p : scratch) total += p.second;
    double left = 0.0;
    const std::size_t leaf = static_cast<std::size_t>(cfg.min_samples_leaf);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      left += scratch[i].second;
      const std::size_t nl = i + 1, nr = n - nl;
      if (scratch[i].first == scratch[i + 1].first || nl < leaf || nr < leaf) continue;
      const double right = total - left;
      const double score = left * left / static_cast<double>(nl) + right * right / static_cast<double>(nr);
      if (score > best.score) {
        double t = 0.5 * (scratch[i].first + scratch[i + 1].first);
        if (!(t < scratch[i + 1].first)) t = scratch[i].first;
        best = {static_cast<std::int32_t>(f), t, score};
      }
    }
  }

  std::int32_t build(std::vector<std::size_t> samples, int depth) {
    const auto id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    double sum = 0.0;
    for (std::size_t s : samples) sum += y[s];
    tree.nodes[id].value = sum / static_cast<double>(samples.size());
    bool constant = true;
    for (std::size_t s : samples) constant = constant && y[s] == y[samples[0]];
    if (constant || samples.size() < 2 * static_cast<std::size_t>(cfg.min_samples_leaf) ||
        (cfg.max_depth >= 0 && depth >= cfg.max_depth))
      return id;

    // Random feature order; the first max_features are tried, and more only
    // while no valid split has been found.
    for (std::size_t i = 0; i < feature_order.size(); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(feature_order.size() - i));
      std::swap(feature_order[i], feature_order[j]);
    }
    Split best;
    for (std::size_t i = 0; i < feature_order.size(); ++i) {
      if (i >= max_features && best.feature >= 0) break;
      scan_feature(samples, feature_order[i], best);
    }
    if (best.feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t s : samples) (X.at(s, best.feature) <= best.threshold ? left : right).push_back(s);
    samples.clear();
    samples.shrink_to_fit();
    const std::int32_t l = build(std::move(left), depth + 1);
    const std::int32_t r = build(std::move(right), depth + 1);
    tree.nodes[id].feature = best.feature;
    tree.nodes[id].threshold = best.threshold;
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

}  // namespace

Forest train_rfr(const FeatureMatrix& X, const std::vector<double>& y, const RfrConfig& config) {
  config.validate();
  check_training_data(X, y, "train_rfr");
  Forest forest;
  forest.n_features = X.cols;
  forest.trees.resize(static_cast<std::size_t>(config.n_trees));
  const auto max_features = static_cast<std::size_t>(std::ceil(config.max_features * static_cast<double>(X.cols) - 1e-12));
  parallel_for(forest.trees.size(), [&](std::size_t t) {
    Rng rng(derive_seed(config.seed, t));
    std::vector<std::size_t> samples(X.rows);
    if (config.bootstrap)
      for (auto& s : samples) s = static_cast<std::size_t>(rng.below(X.rows));
    else
      std::iota(samples.begin(), samples.end(), std::size_t{0});
    TreeBuilder b{X, y, config, rng, std::max<std::size_t>(1, max_features), {}, {}, {}};
    b.feature_order.resize(X.cols);
    std::iota(b.feature_order.begin(), b.feature_order.end(), std::size_t{0});
    b.build(std::move(samples), 0);
    forest.trees[t] = std::move(b.tree);
  });
  return forest;
}

double predict_rfr(const Forest& forest, const std::vector<double>& x) {
  VOXELSEG_REQUIRE(x.size() == forest.n_features, ErrorCode::DimensionMismatch,
          "forest expects " + std::to_string(forest.n_features) + " features, got " + std::to_string(x.size()));
  require(!forest.trees.empty(), ErrorCode::InvalidArgument, "forest has no trees");
  double s = 0.0;
  for (const Tree& t : forest.trees) s += t.predict(x.data());
  return s / static_cast<double>(forest.trees.size());
}

// ---- MLP ensemble ----------------------------------------------------------------

void MlpConfig::validate() const {
  require(n_members >= 1, ErrorCode::ConfigError, "mlp.n_members must be >= 1");
  require(hidden_layers >= 1 && units >= 1, ErrorCode::ConfigError, "mlp.hidden_layers and mlp.units must be >= 1");
  require(dropout_p >= 0.0 && dropout_p < 1.0, ErrorCode::ConfigError, "mlp.dropout_p must be in [0, 1)");
  require(noise_sigma >= 0.0, ErrorCode::ConfigError, "mlp.noise_sigma must be >= 0");
  require(lr >= 0.0 && epochs >= 0 && batch_size >= 1, ErrorCode::ConfigError, "mlp.lr/epochs/batch_size out of range");
}

void to_json(nlohmann::json& j, const MlpConfig& c) {
  j = {{"n_members", c.n_members},   {"hidden_layers", c.hidden_layers}, {"units", c.units},
       {"dropout_p", c.dropout_p},   {"noise_mu", c.noise_mu},           {"noise_sigma", c.noise_sigma},
       {"batch_norm", c.batch_norm}, {"lrelu_slope", c.lrelu_slope},     {"lr", c.lr},
       {"epochs", c.epochs},         {"batch_size", c.batch_size},       {"weight_decay", c.weight_decay},
       {"seed", c.seed},             {"loss", "mse"},                    {"optimizer", "adam"}};
}

void from_json(const nlohmann::json& j, MlpConfig& c) {
  parse_object(j, "mlp", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "n_members") c.n_members = v.get<int>();
    else if (k == "hidden_layers") c.hidden_layers = v.get<int>();
    else if (k == "units") c.units = v.get<int>();
    else if (k == "dropout_p") c.dropout_p = v.get<double>();
    else if (k == "noise_mu") c.noise_mu = v.get<double>();
    else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
    else if (k == "batch_norm") c.batch_norm = v.get<bool>();
    else if (k == "lrelu_slope") c.lrelu_slope = v.get<double>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "loss") require(v.get<std::string>() == "mse", ErrorCode::ConfigError, "mlp.loss: only mse");
    else if (k == "optimizer") require(v.get<std::string>() == "adam", ErrorCode::ConfigError, "mlp.optimizer: only adam");
    else return false;
    return true;
  });
  c.validate();
}

Standardizer Standardizer::fit(const FeatureMatrix& X) {
  Standardizer s;
  s.mean.assign(X.cols, 0.0);
  s.scale.assign(X.cols, 1.0);
  for (std::size_t c = 0; c < X.cols; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < X.rows; ++r) m += X.at(r, c);
    m /= static_cast<double>(X.rows);
    double v = 0.0;
    for (std::size_t r = 0; r < X.rows; ++r) v += (X.at(r, c) - m) * (X.at(r, c) - m);
    v /= static_cast<double>(X.rows);
    s.mean[c] = m;
    s.scale[c] = v > 0.0 ? std::sqrt(v) : 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(const double* x) const {
  std::vector<double> out(mean.size());
  for (std::size_t c = 0; c < mean.size(); ++c) out[c] = (x[c] - mean[c]) / scale[c];
  return out;
}

Mlp init_mlp(const MlpConfig& config, std::size_t n_inputs, Rng& rng) {
  Mlp m;
  std::int64_t in = static_cast<std::int64_t>(n_inputs);
  const std::int64_t u = config.units;
  for (int l = 0; l < config.hidden_layers; ++l) {
    Tensor<float> w({u, in});
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, sd));
    m.params.push_back(std::move(w));
    m.params.emplace_back(Shape{u}, 0.0f);
    m.params.emplace_back(Shape{u}, 1.0f);
    m.params.emplace_back(Shape{u}, 0.0f);
    m.bn.push_back({std::vector<double>(u, 0.0), std::vector<double>(u, 1.0)});
    in = u;
  }
  Tensor<float> w({1, in});
  const double sd = std::sqrt(1.0 / static_cast<double>(in));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, sd));
  m.params.push_back(std::move(w));
  m.params.emplace_back(Shape{1}, 0.0f);
  return m;
}

namespace {

// rng == nullptr: inference (running BN stats, no noise, no dropout).
nn::Var<float> mlp_forward(const MlpConfig& c, const std::vector<nn::Var<float>>& p, std::vector<nn::BatchNormStats>& bn,
                           nn::Var<float> x, Rng* rng) {
  const bool training = rng != nullptr;
  for (int l = 0; l < c.hidden_layers; ++l) {
    x = nn::linear(x, p[4 * l], p[4 * l + 1]);
    if (c.batch_norm) x = nn::batch_norm(x, p[4 * l + 2], p[4 * l + 3], bn[l], training);
    x = nn::leaky_relu(x, c.lrelu_slope);
    if (training && c.noise_sigma > 0.0) x = nn::gaussian_noise(x, c.noise_sigma, rng);
    if (training && c.noise_mu != 0.0) {
      nn::Graph<float>& g = *x.graph();
      x = nn::add(x, g.constant(Tensor<float>(x.shape(), static_cast<float>(c.noise_mu))));
    }
    if (training) x = nn::dropout(x, c.dropout_p, rng);
  }
  const std::size_t o = 4 * static_cast<std::size_t>(c.hidden_layers);
  return nn::linear(x, p[o], p[o + 1]);
}

void check_mlp_shape(const Mlp& m, const MlpConfig& c) {
  require(m.params.size() == 4 * static_cast<std::size_t>(c.hidden_layers) + 2 &&
              m.bn.size() == static_cast<std::size_t>(c.hidden_layers),
          ErrorCode::DimensionMismatch, "mlp parameters do not match config");
}

}  // namespace

double mlp_output(const Mlp& mlp, const MlpConfig& config, const std::vector<double>& x) {
  check_mlp_shape(mlp, config);
  VOXELSEG_REQUIRE(static_cast<std::int64_t>(x.size()) == mlp.params[0].dim(1), ErrorCode::DimensionMismatch,
          "mlp expects " + std::to_string(mlp.params[0].dim(1)) + " inputs, got " + std::to_string(x.size()));
  nn::Graph<float> g;
  std::vector<nn::Var<float>> p;
  for (const auto& t : mlp.params) p.push_back(g.constant(t));
  std::vector<nn::BatchNormStats> bn = mlp.bn;
  Tensor<float> in({1, static_cast<std::int64_t>(x.size())});
  for (std::size_t i = 0; i < x.size(); ++i) in[i] = static_cast<float>(x[i]);
  return mlp_forward(config, p, bn, g.constant(std::move(in)), nullptr).value()[0];
}

MlpEnsemble train_mlp_ensemble(const FeatureMatrix& X, const std::vector<double>& y, const MlpConfig& config) {
  config.validate();
  check_training_data(X, y, "train_mlp_ensemble");
  MlpEnsemble e;
  e.config = config;
  e.n_features = X.cols;
  e.x_stats = Standardizer::fit(X);
  double ym = 0.0;
  for (double v : y) ym += v;
  ym /= static_cast<double>(y.size());
  double yv = 0.0;
  for (double v : y) yv += (v - ym) * (v - ym);
  yv /= static_cast<double>(y.size());
  e.y_mean = ym;
  e.y_scale = yv > 0.0 ? std::sqrt(yv) : 1.0;

  const std::size_t n = X.rows;
  std::vector<float> xs(n * X.cols), ys(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = e.x_stats.apply(X.row(r));
    for (std::size_t c = 0; c < X.cols; ++c) xs[r * X.cols + c] = static_cast<float>(z[c]);
    ys[r] = static_cast<float>((y[r] - e.y_mean) / e.y_scale);
  }

  e.members.resize(static_cast<std::size_t>(config.n_members));
  parallel_for(e.members.size(), [&](std::size_t m) {
    Rng rng(derive_seed(config.seed, m));
    Mlp mlp = init_mlp(config, X.cols, rng);
    train::AdamState adam;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
      for (std::size_t start = 0, stop = 0; start < n; start = stop) {
        stop = std::min(n, start + bs);
        if (n - stop == 1) stop = n;  // never leave a single-row batch for batch statistics
        const auto rows = static_cast<std::int64_t>(stop - start);
        Tensor<float> xb({rows, static_cast<std::int64_t>(X.cols)}), yb({rows, 1});
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t src = order[start + static_cast<std::size_t>(r)];
          std::copy_n(xs.data() + src * X.cols, X.cols, xb.data() + r * static_cast<std::int64_t>(X.cols));
          yb[static_cast<std::size_t>(r)] = ys[src];
        }
        nn::Graph<float> g;
        std::vector<nn::Var<float>> p;
        for (const auto& t : mlp.params) p.push_back(g.parameter(t));
        auto loss = nn::mse_loss(mlp_forward(config, p, mlp.bn, g.constant(std::move(xb)), &rng), yb);
        g.backward(loss);
        std::vector<Tensor<float>> grads;
        for (const auto& v : p) grads.push_back(v.grad());
        train::adam_step(mlp.params, grads, adam, config.lr, config.weight_decay);
      }
    }
    e.members[m] = std::move(mlp);
  });
  return e;
}

double predict_mlp_member(const MlpEnsemble& e, std::size_t member, const std::vector<double>& x) {
  VOXELSEG_REQUIRE(x.size() == e.n_features, ErrorCode::DimensionMismatch,
          "mlp ensemble expects " + std::to_string(e.n_features) + " features, got " + std::to_string(x.size()));
  require(member < e.members.size(), ErrorCode::InvalidArgument, "mlp member index out of range");
  return e.y_mean + e.y_scale * mlp_output(e.members[member], e.config, e.x_stats.apply(x.data()));
}

double predict_mlp(const MlpEnsemble& e, const std::vector<double>& x) {
  require(!e.members.empty(), ErrorCode::InvalidArgument, "mlp ensemble has no members");
  double s = 0.0;
  for (std::size_t m = 0; m < e.members.size(); ++m) s += predict_mlp_member(e, m, x);
  return s / static_cast<double>(e.members.size());
}

// ---- combined model ----------------------------------------------------------------

void SurvivalConfig::validate() const {
  rfr.validate();
  mlp.validate();
  require(!accuracy_bins.empty() && std::is_sorted(accuracy_bins.begin(), accuracy_bins.end()), ErrorCode::ConfigError,
          "survival.accuracy_bins must be ascending and nonempty");
}

void to_json(nlohmann::json& j, const SurvivalConfig& c) {
  j = {{"rfr", c.rfr}, {"mlp", c.mlp}, {"seed", c.seed}, {"accuracy_bins", c.accuracy_bins}};
}

void from_json(const nlohmann::json& j, SurvivalConfig& c) {
  parse_object(j, "survival", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "rfr") c.rfr = v.get<RfrConfig>();
    else if (k == "mlp") c.mlp = v.get<MlpConfig>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "accuracy_bins") c.accuracy_bins = v.get<std::vector<double>>();
    else return false;
    return true;
  });
  c.validate();
}

SurvivalModel train_survival(const FeatureMatrix& X, const std::vector<double>& y, const SurvivalConfig& config,
                             std::vector<std::string> feature_names) {
  config.validate();
  if (!feature_names.empty())
    require(feature_names.size() == X.cols, ErrorCode::DimensionMismatch, "feature name count does not match columns");
  RfrConfig rc = config.rfr;
  rc.seed = derive_seed(config.seed, 0);
  MlpConfig mc = config.mlp;
  mc.seed = derive_seed(config.seed, 1);
  SurvivalModel m;
  m.feature_names = std::move(feature_names);
  m.forest = train_rfr(X, y, rc);
  m.mlp = train_mlp_ensemble(X, y, mc);
  return m;
}

double predict_combined(const SurvivalModel& model, const std::vector<double>& x) {
  return 0.5 * (predict_rfr(model.forest, x) + predict_mlp(model.mlp, x));
}

// ---- metrics ----------------------------------------------------------------------------

int survival_class(double days, const std::vector<double>& edges) {
  // Every edge but the last opens a class; the last edge closes the middle
  // class, so {300, 450} yields <300, [300, 450], >450.
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (days < edges[i]) return static_cast<int>(i);
  return days <= edges.back() ? static_cast<int>(edges.size()) - 1 : static_cast<int>(edges.size());
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), ErrorCode::DimensionMismatch, "spearman: lengths differ");
  return stats::pearson(stats::average_ranks(a), stats::average_ranks(b));
}

SurvivalMetrics evaluate_survival(const std::vector<double>& pred, const std::vector<double>& truth,
                                  const std::vector<double>& edges) {
  VOXELSEG_REQUIRE(pred.size() == truth.size(), ErrorCode::DimensionMismatch,
          "evaluate_survival: " + std::to_string(pred.size()) + " predictions for " + std::to_string(truth.size()) + " truths");
  require(pred.size() >= 2, ErrorCode::EmptyDataset, "evaluate_survival needs at least 2 values");
  SurvivalMetrics m;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    m.mse += e * e;
    m.mae += std::abs(e);
    hits += survival_class(pred[i], edges) == survival_class(truth[i], edges);
  }
  const double n = static_cast<double>(pred.size());
  m.mse /= n;
  m.mae /= n;
  m.rmse = std::sqrt(m.mse);
  m.accuracy = static_cast<double>(hits) / n;
  m.spearman = spearman(pred, truth);
  return m;
}

nlohmann::json metrics_json(const SurvivalMetrics& m) {
  return {{"rmse", m.rmse}, {"mse", m.mse}, {"mae", m.mae}, {"accuracy", m.accuracy}, {"spearman", m.spearman}};
}

std::vector<int> fold_assignment(std::size_t rows, int k, std::uint64_t seed) {
  require(k >= 2, ErrorCode::ConfigError, "cross-validation needs k >= 2");
  VOXELSEG_REQUIRE(rows >= static_cast<std::size_t>(k), ErrorCode::EmptyDataset,
          "cross-validation needs at least k = " + std::to_string(k) + " rows, got " + std::to_string(rows));
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < rows; ++i) std::swap(perm[i], perm[i + rng.below(rows - i)]);
  std::vector<int> fold(rows);
  for (std::size_t i = 0; i < rows; ++i) fold[perm[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return fold;
}

namespace {

SurvivalMetrics mean_metrics(const std::vector<SurvivalMetrics>& v) {
  SurvivalMetrics m;
  for (const auto& x : v) {
    m.rmse += x.rmse;
    m.mse += x.mse;
    m.mae += x.mae;
    m.accuracy += x.accuracy;
    m.spearman += x.spearman;
  }
  const double n = static_cast<double>(v.size());
  m.rmse /= n;
  m.mse /= n;
  m.mae /= n;
  m.accuracy /= n;
  m.spearman /= n;
  return m;
}

}  // namespace

CvResult cross_validate(const FeatureMatrix& X, const std::vector<double>& y, int k, const SurvivalConfig& config) {
  config.validate();
  check_training_data(X, y, "cross_validate");
  CvResult r;
  r.folds = fold_assignment(X.rows, k, derive_seed(config.seed, 0x6376));
  r.combined.assign(X.rows, 0.0);
  r.rfr.assign(X.rows, 0.0);
  r.mlp.assign(X.rows, 0.0);
  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < X.rows; ++i) (r.folds[i] == f ? te : tr).push_back(i);
    std::vector<double> ytr;
    for (std::size_t i : tr) ytr.push_back(y[i]);
    SurvivalConfig fc = config;
    fc.seed = derive_seed(config.seed, static_cast<std::uint64_t>(f));
    const SurvivalModel model = train_survival(X.select_rows(tr), ytr, fc);
    std::vector<double> pc, pr, pm, yt;
    for (std::size_t i : te) {
      const auto x = X.row_vector(i);
      r.rfr[i] = predict_rfr(model.forest, x);
      r.mlp[i] = predict_mlp(model.mlp, x);
      r.combined[i] = 0.5 * (r.rfr[i] + r.mlp[i]);
      pc.push_back(r.combined[i]);
      pr.push_back(r.rfr[i]);
      pm.push_back(r.mlp[i]);
      yt.push_back(y[i]);
    }
    if (yt.size() >= 2) {
      r.fold_combined.push_back(evaluate_survival(pc, yt, config.accuracy_bins));
      r.fold_rfr.push_back(evaluate_survival(pr, yt, config.accuracy_bins));
      r.fold_mlp.push_back(evaluate_survival(pm, yt, config.accuracy_bins));
    } else {
      // A single held-out row: errors only; rank metrics are undefined.
      auto one = [&](double p) {
        SurvivalMetrics m;
        m.mse = (p - yt[0]) * (p - yt[0]);
        m.rmse = std::abs(p - yt[0]);
        m.mae = m.rmse;
        m.accuracy = survival_class(p, config.accuracy_bins) == survival_class(yt[0], config.accuracy_bins);
        return m;
      };
      r.fold_combined.push_back(one(pc[0]));
      r.fold_rfr.push_back(one(pr[0]));
      r.fold_mlp.push_back(one(pm[0]));
    }
  }
  r.mean_combined = mean_metrics(r.fold_combined);
  r.mean_rfr = mean_metrics(r.fold_rfr);
  r.mean_mlp = mean_metrics(r.fold_mlp);
  return r;
}

nlohmann::json cv_json(const CvResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < r.fold_combined.size(); ++f)
    folds.push_back({{"fold", f},
                     {"combined", metrics_json(r.fold_combined[f])},
                     {"rfr", metrics_json(r.fold_rfr[f])},
                     {"mlp", metrics_json(r.fold_mlp[f])}});
  return {{"k", r.fold_combined.size()},
          {"folds", folds},
          {"mean", {{"combined", metrics_json(r.mean_combined)}, {"rfr", metrics_json(r.mean_rfr)}, {"mlp", metrics_json(r.mean_mlp)}}}};
}

// ---- archive -------------------------------------------------------------------------------

namespace {

struct BlobWriter {
  std::vector<char> bytes;
  template <typename T>
  void put(T v) {
    const auto at = bytes.size();
    bytes.resize(at + sizeof(T));
    std::memcpy(bytes.data() + at, &v, sizeof(T));
  }
  void put_floats(const Tensor<float>& t) {
    const auto at = bytes.size();
    bytes.resize(at + t.size() * sizeof(float));
    std::memcpy(bytes.data() + at, t.data(), t.size() * sizeof(float));
  }
};

struct BlobReader {
  const std::vector<char>& bytes;
  std::size_t at = 0;
  template <typename T>
  T get() {
    require(at + sizeof(T) <= bytes.size(), ErrorCode::CheckpointError, "survival archive blob truncated");
    T v;
    std::memcpy(&v, bytes.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
  }
};

}  // namespace

std::string save_survival_model(const std::string& dir, const std::string& stem, const SurvivalModel& model) {
  BlobWriter w;
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : model.forest.trees) {
    trees.push_back(t.nodes.size());
    for (const TreeNode& n : t.nodes) {
      w.put<std::int32_t>(n.feature);
      w.put<std::int32_t>(n.left);
      w.put<std::int32_t>(n.right);
      w.put<double>(n.threshold);
      w.put<double>(n.value);
    }
  }
  const std::size_t forest_bytes = w.bytes.size();
  nlohmann::json members = nlohmann::json::array();
  for (const Mlp& m : model.mlp.members) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& t : m.params) {
      shapes.push_back(t.shape());
      w.put_floats(t);
    }
    nlohmann::json bn = nlohmann::json::array();
    for (const auto& s : m.bn) bn.push_back({{"mean", s.mean}, {"var", s.var}});
    members.push_back({{"shapes", shapes}, {"batch_norm", bn}});
  }
  const std::string blob_name = stem + ".bin";
  nlohmann::json j{{"format", "voxelseg-survival"},
                   {"version", 1},
                   {"byte_order", "little"},
                   {"blob", blob_name},
                   {"total_bytes", w.bytes.size()},
                   {"feature_names", model.feature_names},
                   {"forest", {{"n_features", model.forest.n_features}, {"tree_nodes", trees}, {"bytes", forest_bytes}}},
                   {"mlp",
                    {{"config", model.mlp.config},
                     {"n_features", model.mlp.n_features},
                     {"x_mean", model.mlp.x_stats.mean},
                     {"x_scale", model.mlp.x_stats.scale},
                     {"y_mean", model.mlp.y_mean},
                     {"y_scale", model.mlp.y_scale},
                     {"members", members}}}};
  fs::create_directories(dir);
  write_binary_file(fs::path(dir) / blob_name, w.bytes);
  const fs::path json_path = fs::path(dir) / (stem + ".json");
  write_text_file(json_path, j.dump(2) + "\n");
  return json_path.string();
}

SurvivalModel load_survival_model(const std::string& json_path) {
  try {
    const nlohmann::json j = nlohmann::json::parse(read_text_file(json_path));
    VOXELSEG_REQUIRE(j.value("format", "") == "voxelseg-survival", ErrorCode::CheckpointError, json_path + ": not a survival model");
    const std::vector<char> blob = read_binary_file(fs::path(json_path).parent_path() / j.at("blob").get<std::string>());
    VOXELSEG_REQUIRE(blob.size() == j.at("total_bytes").get<std::size_t>(), ErrorCode::CheckpointError, json_path + ": blob size mismatch");
    BlobReader r{blob};
    SurvivalModel m;
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    const auto& fj = j.at("forest");
    m.forest.n_features = fj.at("n_features").get<std::size_t>();
    for (const auto& count : fj.at("tree_nodes")) {
      Tree t;
      const auto n = count.get<std::size_t>();
      VOXELSEG_REQUIRE(n >= 1, ErrorCode::CheckpointError, json_path + ": empty tree");
      for (std::size_t i = 0; i < n; ++i) {
        TreeNode node;
        node.feature = r.get<std::int32_t>();
        node.left = r.get<std::int32_t>();
        node.right = r.get<std::int32_t>();
        node.threshold = r.get<double>();
        node.value = r.get<double>();
        if (node.feature >= 0)
          VOXELSEG_REQUIRE(static_cast<std::size_t>(node.feature) < m.forest.n_features && node.left > static_cast<std::int32_t>(i) &&
                      node.right > static_cast<std::int32_t>(i) && static_cast<std::size_t>(node.left) < n &&
                      static_cast<std::size_t>(node.right) < n,
                  ErrorCode::CheckpointError, json_path + ": malformed tree");
        t.nodes.push_back(node);
      }
      m.forest.trees.push_back(std::move(t));
    }
    const auto& mj = j.at("mlp");
    m.mlp.config = mj.at("config").get<MlpConfig>();
    m.mlp.n_features = mj.at("n_features").get<std::size_t>();
    m.mlp.x_stats.mean = mj.at("x_mean").get<std::vector<double>>();
    m.mlp.x_stats.scale = mj.at("x_scale").get<std::vector<double>>();
    m.mlp.y_mean = mj.at("y_mean").get<double>();
    m.mlp.y_scale = mj.at("y_scale").get<double>();
    VOXELSEG_REQUIRE(m.mlp.x_stats.mean.size() == m.mlp.n_features && m.mlp.x_stats.scale.size() == m.mlp.n_features &&
                m.mlp.n_features == m.forest.n_features,
            ErrorCode::CheckpointError, json_path + ": feature dimension mismatch");
    for (const auto& member : mj.at("members")) {
      Mlp mlp;
      for (const auto& s : member.at("shapes")) {
        Tensor<float> t(s.get<Shape>());
        for (auto& v : t.values()) {
          v = r.get<float>();
          VOXELSEG_REQUIRE(std::isfinite(v), ErrorCode::CheckpointError, json_path + ": non-finite weight");
        }
        mlp.params.push_back(std::move(t));
      }
      for (const auto& b : member.at("batch_norm"))
        mlp.bn.push_back({b.at("mean").get<std::vector<double>>(), b.at("var").get<std::vector<double>>()});
      check_mlp_shape(mlp, m.mlp.config);
      VOXELSEG_REQUIRE(mlp.params[0].dim(1) == static_cast<std::int64_t>(m.mlp.n_features), ErrorCode::CheckpointError,
              json_path + ": mlp input width mismatch");
      m.mlp.members.push_back(std::move(mlp));
    }
    VOXELSEG_REQUIRE(r.at == blob.size(), ErrorCode::CheckpointError, json_path + ": trailing bytes in blob");
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointError, json_path + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CheckpointError) throw;
    fail(ErrorCode::CheckpointError, json_path + ": " + e.what());
  }
}

}  // namespace voxelseg::survival
