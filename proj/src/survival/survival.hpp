#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common/tensor.hpp"
#include "json.hpp"
#include "nn/ops.hpp"

namespace voxelseg::survival {

/// Row-major samples x features.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  std::vector<double> row_vector(std::size_t r) const { return {row(r), row(r) + cols}; }
  FeatureMatrix select_rows(const std::vector<std::size_t>& idx) const;
};

// ---- random forest ---------------------------------------------------------------

struct RfrConfig {
  int n_trees = 1000;
  double max_features = 1.0 / 3.0;  // fraction of features tried per split, rounded up
  int min_samples_leaf = 1;
  int max_depth = -1;  // < 0: unlimited; 0: root only
  bool bootstrap = true;
  std::uint64_t seed = 0;

  void validate() const;
};
void to_json(nlohmann::json& j, const RfrConfig& c);
void from_json(const nlohmann::json& j, RfrConfig& c);

struct TreeNode {
  std::int32_t feature = -1;  // < 0: leaf
  double threshold = 0.0;     // x[feature] <= threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // mean target of the node's samples
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  double predict(const double* x) const;
};

struct Forest {
  std::size_t n_features = 0;
  std::vector<Tree> trees;
};

/// Tree t draws from Rng(derive_seed(seed, t)); trees train in parallel.
/// Throws EmptyDataset, DimensionMismatch, InvalidArgument (non-finite).
Forest train_rfr(const FeatureMatrix& X, const std::vector<double>& y, const RfrConfig& config);
/// Mean of the tree predictions. Throws DimensionMismatch.
double predict_rfr(const Forest& forest, const std::vector<double>& x);

// ---- MLP ensemble ----------------------------------------------------------------

struct MlpConfig {
  int n_members = 15;
  int hidden_layers = 3;
  int units = 64;
  double dropout_p = 0.5;
  double noise_mu = 0.0;
  double noise_sigma = 0.1;
  bool batch_norm = true;
  double lrelu_slope = 0.01;
  double lr = 1e-3;
  int epochs = 200;
  int batch_size = 16;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};
void to_json(nlohmann::json& j, const MlpConfig& c);
void from_json(const nlohmann::json& j, MlpConfig& c);

/// Per-column z-score; zero spread maps to scale 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const FeatureMatrix& X);
  std::vector<double> apply(const double* x) const;
};

/// Per hidden layer: weight [units, in], bias, bn gain, bn offset; then the
/// output weight [1, units] and bias [1].
struct Mlp {
  std::vector<Tensor<float>> params;
  std::vector<nn::BatchNormStats> bn;
};

Mlp init_mlp(const MlpConfig& config, std::size_t n_inputs, Rng& rng);
/// Inference (no dropout or noise, running BN stats); x already standardized.
double mlp_output(const Mlp& mlp, const MlpConfig& config, const std::vector<double>& x);

struct MlpEnsemble {
  MlpConfig config;
  std::size_t n_features = 0;
  Standardizer x_stats;
  double y_mean = 0.0;
  double y_scale = 1.0;
  std::vector<Mlp> members;
};

/// Member m trains on standardized X and y from Rng(derive_seed(seed, m)).
MlpEnsemble train_mlp_ensemble(const FeatureMatrix& X, const std::vector<double>& y, const MlpConfig& config);
/// Prediction of one member, in target units.
double predict_mlp_member(const MlpEnsemble& e, std::size_t member, const std::vector<double>& x);
/// Mean over members, in target units. Throws DimensionMismatch.
double predict_mlp(const MlpEnsemble& e, const std::vector<double>& x);

// ---- combined model ----------------------------------------------------------------

struct SurvivalConfig {
  RfrConfig rfr;
  MlpConfig mlp;
  std::uint64_t seed = 0;  // overrides the component seeds via derive_seed
  std::vector<double> accuracy_bins = {300.0, 450.0};

  void validate() const;
};
void to_json(nlohmann::json& j, const SurvivalConfig& c);
void from_json(const nlohmann::json& j, SurvivalConfig& c);

struct SurvivalModel {
  std::vector<std::string> feature_names;
  Forest forest;
  MlpEnsemble mlp;
};

SurvivalModel train_survival(const FeatureMatrix& X, const std::vector<double>& y, const SurvivalConfig& config,
                             std::vector<std::string> feature_names = {});
/// 0.5 * (forest + MLP ensemble mean). Throws DimensionMismatch.
double predict_combined(const SurvivalModel& model, const std::vector<double>& x);

// ---- metrics and validation ----------------------------------------------------------

struct SurvivalMetrics {
  double rmse = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  double accuracy = 0.0;
  double spearman = 0.0;
};

/// Class of a survival time given ascending bin edges. The last edge is
/// inclusive on its left: edges {300, 450} give <300, [300, 450], >450.
int survival_class(double days, const std::vector<double>& edges);
double spearman(const std::vector<double>& a, const std::vector<double>& b);
/// Throws DimensionMismatch (lengths differ), EmptyDataset (< 2 values).
SurvivalMetrics evaluate_survival(const std::vector<double>& pred, const std::vector<double>& truth,
                                  const std::vector<double>& edges = {300.0, 450.0});
nlohmann::json metrics_json(const SurvivalMetrics& m);

/// Fold of each row: a seeded permutation dealt round-robin into k folds.
std::vector<int> fold_assignment(std::size_t rows, int k, std::uint64_t seed);

struct CvResult {
  std::vector<int> folds;
  /// Out-of-fold predictions per row.
  std::vector<double> combined, rfr, mlp;
  std::vector<SurvivalMetrics> fold_combined, fold_rfr, fold_mlp;
  SurvivalMetrics mean_combined, mean_rfr, mean_mlp;  // means of fold metrics
};

/// Fold f trains with seed derive_seed(config.seed, f). Throws EmptyDataset.
CvResult cross_validate(const FeatureMatrix& X, const std::vector<double>& y, int k, const SurvivalConfig& config);
nlohmann::json cv_json(const CvResult& r);

// ---- archive ------------------------------------------------------------------------

/// Writes <dir>/<stem>.json and <stem>.bin; returns the json path.
std::string save_survival_model(const std::string& dir, const std::string& stem, const SurvivalModel& model);
/// Throws CheckpointError on any inconsistency.
SurvivalModel load_survival_model(const std::string& json_path);

}  // namespace voxelseg::survival
