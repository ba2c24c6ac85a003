#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "augment/augment.hpp"
#include "nn/network.hpp"

namespace voxelseg::train {

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update with l2 weight decay added to the gradient.
/// An empty gradient tensor counts as zero. Throws NonFiniteGradient before
/// touching any parameter.
void adam_step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& state, double lr,
               double weight_decay);

double lr_at(double lr_init, double lr_decay, int epoch);

// ---- configuration ------------------------------------------------------------

struct TrainConfig {
  double lr_init = 5e-4;
  double lr_decay = 0.985;
  double weight_decay = 1e-5;
  int batch_size = 2;
  std::array<std::int64_t, 3> patch_size = {128, 128, 128};
  int batches_per_epoch = 100;
  int epochs = 300;
  double dice_epsilon = 1e-5;
  bool include_background = true;
  double foreground_probability = 0.5;
  /// Checkpoint every n epochs; the final epoch is always written.
  int checkpoint_interval = 0;
  std::uint64_t seed = 0;
  aug::AttenuationSchedule augmentation;

  double lr_at(int epoch) const { return train::lr_at(lr_init, lr_decay, epoch); }
  /// Throws ConfigError.
  void validate(const nn::NetworkConfig& net) const;
};

/// Network and training settings bundled for a compute budget.
struct Profile {
  nn::NetworkConfig net;
  TrainConfig train;
};

/// Full-size settings: 128^3 patches, 5 levels, 16 base filters, 300 epochs
/// of 100 batches. Needs days of compute.
Profile paper_profile();
/// 32^3 patches, 3 levels, 8 base filters, 20 epochs of 10 batches. The
/// schedule has 150x fewer steps, so lr_init is raised to 5e-3.
Profile desk_profile();
/// "desk" or "paper". Throws ConfigError.
Profile profile_by_name(const std::string& name);

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Augmentation is read from "augmentation": {"initial": ..., "final": ...};
/// total_epochs always follows `epochs`.
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---- patch sampling -------------------------------------------------------------

/// Pre-indexed case for patch sampling.
class PatchSource {
 public:
  explicit PatchSource(const MultiModalCase& c);
  const MultiModalCase& source() const noexcept { return *case_; }
  /// Start is uniform over valid positions; with probability
  /// `foreground_probability` (and foreground present) the patch is instead
  /// centred on a uniformly chosen label > 0 voxel, clamped to the volume.
  /// Volumes smaller than the patch are zero padded at the far end.
  aug::Sample sample(Dims3 patch, double foreground_probability, Rng& rng) const;
  /// Extracts the patch at `start` (may overhang; padding reads 0).
  aug::Sample extract(Dims3 patch, std::array<std::int64_t, 3> start) const;

 private:
  const MultiModalCase* case_;
  std::vector<std::int64_t> foreground_;
};

aug::Sample sample_patch(const MultiModalCase& c, Dims3 patch, double foreground_probability, Rng& rng);

/// [N, 4, D, H, W] image batch and one-hot targets.
struct Batch {
  Tensor<float> input;
  Tensor<float> target;
};
Batch assemble_batch(const std::vector<aug::Sample>& samples);

// ---- training loop -------------------------------------------------------------

struct EpochLog {
  int epoch = 0;  // zero-based; lr = lr_at(epoch)
  double lr = 0.0;
  double mean_loss = 0.0;
  double wall_time = 0.0;  // seconds since training start
};

struct TrainResult {
  nn::ParameterSet params;
  std::vector<EpochLog> log;
  std::vector<std::string> checkpoints;  // manifest paths, in write order
};

struct TrainOptions {
  /// When non-empty: checkpoints `ckpt_epoch_<n>` (n = epochs completed) and
  /// metrics.jsonl are written here.
  std::string out_dir;
  /// Starting weights; initialised from the seed when empty.
  nn::ParameterSet initial;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Dataset: preprocessed cases with labels. Throws EmptyDataset,
/// NonFiniteGradient (with epoch/step context).
TrainResult train(const TrainConfig& cfg, const nn::NetworkConfig& net, const std::vector<MultiModalCase>& data,
                  const TrainOptions& options = {});

std::string epoch_log_json(const EpochLog& e);

}  // namespace voxelseg::train
