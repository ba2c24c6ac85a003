#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "common/rng.hpp"
#include "json.hpp"
#include "nn/graph.hpp"
#include "nn/ops.hpp"

namespace voxelseg::nn {

struct NetworkConfig {
  int levels = 5;
  int base_filters = 16;
  int in_channels = 4;
  int num_classes = 4;
  double dropout_p = 0.3;
  double lrelu_slope = 0.01;
  double norm_eps = 1e-5;
  /// Decoder levels carrying a segmentation layer. Level 0 is required;
  /// entries deeper than levels-2 have no localization module and are dropped.
  std::vector<int> deep_supervision_levels = {0, 1, 2};

  int filters(int level) const noexcept { return base_filters << level; }
  /// Spatial dims must be multiples of this.
  std::int64_t divisor() const noexcept { return std::int64_t{1} << (levels - 1); }
  std::vector<int> effective_deep_supervision() const;
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, NetworkConfig& c);

enum class ParamKind { ConvWeight, Bias, Gain, Offset };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

/// Every learnable tensor implied by the config, in canonical order.
std::vector<ParamSpec> parameter_specs(const NetworkConfig& config);
std::int64_t parameter_count(const NetworkConfig& config);

template <typename T>
struct ParameterSetT {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const noexcept { return tensors.size(); }
  std::int64_t numel() const;
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  template <typename U>
  ParameterSetT<U> cast() const {
    ParameterSetT<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};
using ParameterSet = ParameterSetT<float>;

/// He fan-in normal conv weights, zero biases/offsets, unit gains.
ParameterSet init_parameters(const NetworkConfig& config, std::uint64_t seed);
/// Zero-filled parameters with the right shapes.
template <typename T>
ParameterSetT<T> zero_parameters(const NetworkConfig& config);

/// Parameters recorded on a graph, addressable by name.
template <typename T>
class BoundParameters {
 public:
  BoundParameters(Graph<T>& g, const ParameterSetT<T>& set, bool trainable);
  BoundParameters(const std::vector<std::string>& names, std::vector<Var<T>> vars);
  Var<T> operator()(const std::string& name) const;
  const std::vector<Var<T>>& vars() const noexcept { return vars_; }

 private:
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, int> index_;
};

enum class Mode {
  Train,   // dropout active
  Eval,    // deterministic
  Sample,  // dropout active at inference (MC sampling)
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;  // required unless mode == Eval
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  Var<T> softmax;
};

// Building blocks; `prefix` selects the parameter group, e.g. "enc1.ctx".
template <typename T>
Var<T> context_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x,
                      const ForwardOptions& opt);
template <typename T>
Var<T> upsample_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x);
template <typename T>
Var<T> localization_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x);

/// input [N, in_channels, D, H, W] with D, H, W multiples of divisor().
template <typename T>
ForwardResult<T> forward(const NetworkConfig& c, const BoundParameters<T>& p, Var<T> input, const ForwardOptions& opt);

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  NetworkConfig config;
  ParameterSet params;
  int epoch = 0;
};

/// Writes <dir>/<stem>.json and <dir>/<stem>.bin; returns the JSON path.
std::string save_checkpoint(const std::string& dir, const std::string& stem, const Checkpoint& ckpt);
/// Accepts the JSON manifest path. Throws CheckpointError.
Checkpoint load_checkpoint(const std::string& json_path);

}  // namespace voxelseg::nn
