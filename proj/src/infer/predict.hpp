#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nn/network.hpp"
#include "volume/volume.hpp"

namespace voxelseg::eval {

struct PredictionConfig {
  bool mirror_tta = false;  // all 8 flip combinations
  int dropout_samples = 0;  // > 0: that many stochastic passes per variant
  std::vector<std::string> ensemble_checkpoints;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PredictionConfig& c);
void from_json(const nlohmann::json& j, PredictionConfig& c);

struct Model {
  nn::NetworkConfig config;
  nn::ParameterSet params;
  std::string source;
};

/// Loads checkpoints in sorted path order. Throws CheckpointError.
std::vector<Model> load_ensemble(std::vector<std::string> paths);

struct Prediction {
  Tensor<float> softmax;  // [num_classes, D, H, W]
  LabelMap labels;
};

/// Softmax of one model averaged over the enabled TTA variants and dropout
/// samples. input is [C, D, H, W] of any size; it is zero padded to the
/// network divisor and cropped back. Model index `member` selects the
/// dropout streams.
Tensor<float> predict_softmax(const Model& model, const Tensor<float>& input, const PredictionConfig& cfg,
                              std::size_t member = 0);

/// Ensemble mean of predict_softmax, then per-voxel argmax to {0, 1, 2, 4}.
Prediction predict(const MultiModalCase& preprocessed, const std::vector<Model>& models, const PredictionConfig& cfg);

/// [4, D, H, W] stack of the case's modalities.
Tensor<float> case_tensor(const MultiModalCase& c);

}  // namespace voxelseg::eval
