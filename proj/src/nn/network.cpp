#include "nn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "volume/io.hpp"

namespace voxelseg::nn {

std::vector<int> NetworkConfig::effective_deep_supervision() const {
  std::vector<int> out;
  for (int l : deep_supervision_levels)
    if (l <= levels - 2) out.push_back(l);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void NetworkConfig::validate() const {
  require(levels >= 2, ErrorCode::ConfigError, "network.levels must be >= 2");
  require(levels <= 8, ErrorCode::ConfigError, "network.levels must be <= 8");
  require(base_filters >= 1, ErrorCode::ConfigError, "network.base_filters must be >= 1");
  require(in_channels >= 1, ErrorCode::ConfigError, "network.in_channels must be >= 1");
  require(num_classes >= 2, ErrorCode::ConfigError, "network.num_classes must be >= 2");
  require(dropout_p >= 0.0 && dropout_p < 1.0, ErrorCode::ConfigError, "network.dropout_p must be in [0, 1)");
  require(lrelu_slope >= 0.0 && lrelu_slope < 1.0, ErrorCode::ConfigError, "network.lrelu_slope must be in [0, 1)");
  require(norm_eps > 0.0, ErrorCode::ConfigError, "network.norm_eps must be > 0");
  bool has_zero = false;
  for (int l : deep_supervision_levels) {
    require(l >= 0, ErrorCode::ConfigError, "network.deep_supervision_levels entries must be >= 0");
    has_zero = has_zero || l == 0;
  }
  require(has_zero, ErrorCode::ConfigError, "network.deep_supervision_levels must contain 0");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"base_filters", c.base_filters},
                     {"in_channels", c.in_channels},
                     {"num_classes", c.num_classes},
                     {"dropout_p", c.dropout_p},
                     {"lrelu_slope", c.lrelu_slope},
                     {"norm_eps", c.norm_eps},
                     {"deep_supervision_levels", c.deep_supervision_levels}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  require(j.is_object(), ErrorCode::ConfigError, "network config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "levels") c.levels = it->get<int>();
      else if (k == "base_filters") c.base_filters = it->get<int>();
      else if (k == "in_channels") c.in_channels = it->get<int>();
      else if (k == "num_classes") c.num_classes = it->get<int>();
      else if (k == "dropout_p") c.dropout_p = it->get<double>();
      else if (k == "lrelu_slope") c.lrelu_slope = it->get<double>();
      else if (k == "norm_eps") c.norm_eps = it->get<double>();
      else if (k == "deep_supervision_levels") c.deep_supervision_levels = it->get<std::vector<int>>();
      else fail(ErrorCode::ConfigError, "network." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "network." + k + ": " + e.what());
    }
  }
}

namespace {

void add_conv(std::vector<ParamSpec>& s, const std::string& prefix, int in, int out, int k) {
  s.push_back({prefix + ".weight", {out, in, k, k, k}, ParamKind::ConvWeight});
  s.push_back({prefix + ".bias", {out}, ParamKind::Bias});
}

void add_norm(std::vector<ParamSpec>& s, const std::string& prefix, int ch) {
  s.push_back({prefix + ".gain", {ch}, ParamKind::Gain});
  s.push_back({prefix + ".offset", {ch}, ParamKind::Offset});
}

std::string level_prefix(const char* side, int l) { return std::string(side) + std::to_string(l); }

}  // namespace

std::vector<ParamSpec> parameter_specs(const NetworkConfig& c) {
  c.validate();
  std::vector<ParamSpec> s;
  for (int l = 0; l < c.levels; ++l) {
    const std::string p = level_prefix("enc", l);
    add_conv(s, p + ".entry", l == 0 ? c.in_channels : c.filters(l - 1), c.filters(l), 3);
    add_norm(s, p + ".ctx.norm1", c.filters(l));
    add_conv(s, p + ".ctx.conv1", c.filters(l), c.filters(l), 3);
    add_norm(s, p + ".ctx.norm2", c.filters(l));
    add_conv(s, p + ".ctx.conv2", c.filters(l), c.filters(l), 3);
  }
  const std::vector<int> ds = c.effective_deep_supervision();
  for (int l = c.levels - 2; l >= 0; --l) {
    const std::string p = level_prefix("dec", l);
    const int f = c.filters(l);
    add_conv(s, p + ".up.conv", c.filters(l + 1), f, 3);
    add_norm(s, p + ".up.norm", f);
    add_conv(s, p + ".loc.conv1", 2 * f, 2 * f, 3);
    add_norm(s, p + ".loc.norm1", 2 * f);
    add_conv(s, p + ".loc.conv2", 2 * f, f, 1);
    add_norm(s, p + ".loc.norm2", f);
    if (std::find(ds.begin(), ds.end(), l) != ds.end()) add_conv(s, p + ".seg", f, c.num_classes, 1);
  }
  return s;
}

std::int64_t parameter_count(const NetworkConfig& c) {
  std::int64_t n = 0;
  for (const auto& s : parameter_specs(c)) n += shape_numel(s.shape);
  return n;
}

template <typename T>
std::int64_t ParameterSetT<T>::numel() const {
  std::int64_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::int64_t>(t.size());
  return n;
}

template <typename T>
const Tensor<T>& ParameterSetT<T>::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return tensors[i];
  fail(ErrorCode::InvalidArgument, "no parameter named " + name);
}

template <typename T>
Tensor<T>& ParameterSetT<T>::at(const std::string& name) {
  return const_cast<Tensor<T>&>(static_cast<const ParameterSetT&>(*this).at(name));
}

template <typename T>
ParameterSetT<T> zero_parameters(const NetworkConfig& c) {
  ParameterSetT<T> set;
  for (const auto& s : parameter_specs(c)) {
    set.names.push_back(s.name);
    set.tensors.emplace_back(s.shape, T(0));
  }
  return set;
}

ParameterSet init_parameters(const NetworkConfig& c, std::uint64_t seed) {
  const auto specs = parameter_specs(c);
  ParameterSet set;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const ParamSpec& s = specs[i];
    Tensor<float> t(s.shape, 0.0f);
    if (s.kind == ParamKind::ConvWeight) {
      const double fan_in = static_cast<double>(s.shape[1] * s.shape[2] * s.shape[3] * s.shape[4]);
      const double sd = std::sqrt(2.0 / fan_in);
      Rng rng(derive_seed(seed, i));
      for (auto& v : t.values()) v = static_cast<float>(rng.normal(0.0, sd));
    } else if (s.kind == ParamKind::Gain) {
      t.fill(1.0f);
    }
    set.names.push_back(s.name);
    set.tensors.push_back(std::move(t));
  }
  return set;
}

template <typename T>
BoundParameters<T>::BoundParameters(Graph<T>& g, const ParameterSetT<T>& set, bool trainable) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    vars_.push_back(trainable ? g.parameter(set.tensors[i]) : g.constant(set.tensors[i]));
    index_.emplace(set.names[i], static_cast<int>(i));
  }
}

template <typename T>
BoundParameters<T>::BoundParameters(const std::vector<std::string>& names, std::vector<Var<T>> vars)
    : vars_(std::move(vars)) {
  require(names.size() == vars_.size(), ErrorCode::InvalidArgument, "names and vars differ in length");
  for (std::size_t i = 0; i < names.size(); ++i) index_.emplace(names[i], static_cast<int>(i));
}

template <typename T>
Var<T> BoundParameters<T>::operator()(const std::string& name) const {
  auto it = index_.find(name);
  VOXELSEG_REQUIRE(it != index_.end(), ErrorCode::InvalidArgument, "no parameter named " + name);
  return vars_[it->second];
}

namespace {

template <typename T>
Var<T> conv(const BoundParameters<T>& p, const std::string& prefix, Var<T> x, int stride = 1) {
  return conv3d(x, p(prefix + ".weight"), p(prefix + ".bias"), stride);
}

template <typename T>
Var<T> norm(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  return instance_norm(x, p(prefix + ".gain"), p(prefix + ".offset"), c.norm_eps);
}

Rng* dropout_rng(const ForwardOptions& opt) {
  if (opt.mode == Mode::Eval) return nullptr;
  require(opt.rng != nullptr, ErrorCode::InvalidArgument, "train/sample mode needs an rng");
  return opt.rng;
}

}  // namespace

template <typename T>
Var<T> context_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x,
                      const ForwardOptions& opt) {
  Var<T> h = leaky_relu(norm(c, p, prefix + ".norm1", x), c.lrelu_slope);
  h = conv(p, prefix + ".conv1", h);
  h = dropout(h, c.dropout_p, dropout_rng(opt));
  h = leaky_relu(norm(c, p, prefix + ".norm2", h), c.lrelu_slope);
  h = conv(p, prefix + ".conv2", h);
  return add(x, h);
}

template <typename T>
Var<T> upsample_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  Var<T> h = conv(p, prefix + ".conv", upsample_repeat(x));
  return leaky_relu(norm(c, p, prefix + ".norm", h), c.lrelu_slope);
}

template <typename T>
Var<T> localization_module(const NetworkConfig& c, const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  Var<T> h = leaky_relu(norm(c, p, prefix + ".norm1", conv(p, prefix + ".conv1", x)), c.lrelu_slope);
  return leaky_relu(norm(c, p, prefix + ".norm2", conv(p, prefix + ".conv2", h)), c.lrelu_slope);
}

template <typename T>
ForwardResult<T> forward(const NetworkConfig& c, const BoundParameters<T>& p, Var<T> input, const ForwardOptions& opt) {
  const Shape& s = input.shape();
  VOXELSEG_REQUIRE(s.size() == 5 && s[1] == c.in_channels, ErrorCode::ShapeMismatch,
          "network input must be [N, " + std::to_string(c.in_channels) + ", D, H, W], got " + shape_string(s));
  const std::int64_t div = c.divisor();
  VOXELSEG_REQUIRE(s[2] % div == 0 && s[3] % div == 0 && s[4] % div == 0, ErrorCode::ShapeMismatch,
          "network input spatial dims " + shape_string(s) + " must be multiples of " + std::to_string(div));

  std::vector<Var<T>> skips;
  Var<T> x = input;
  for (int l = 0; l < c.levels; ++l) {
    const std::string pre = level_prefix("enc", l);
    x = conv(p, pre + ".entry", x, l == 0 ? 1 : 2);
    x = context_module(c, p, pre + ".ctx", x, opt);
    skips.push_back(x);
  }
  const std::vector<int> ds = c.effective_deep_supervision();
  Var<T> seg;
  for (int l = c.levels - 2; l >= 0; --l) {
    const std::string pre = level_prefix("dec", l);
    x = upsample_module(c, p, pre + ".up", x);
    x = localization_module(c, p, pre + ".loc", concat_channels(x, skips[l]));
    if (seg) seg = upsample_repeat(seg);
    if (std::find(ds.begin(), ds.end(), l) != ds.end()) {
      Var<T> tap = conv(p, pre + ".seg", x);
      seg = seg ? add(seg, tap) : tap;
    }
  }
  return {seg, softmax_channels(seg)};
}

// ---- checkpoints ------------------------------------------------------------

std::string save_checkpoint(const std::string& dir, const std::string& stem, const Checkpoint& ckpt) {
  const auto specs = parameter_specs(ckpt.config);
  require(specs.size() == ckpt.params.size(), ErrorCode::CheckpointError, "parameter set does not match config");
  nlohmann::json params = nlohmann::json::array();
  std::vector<char> blob;
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Tensor<float>& t = ckpt.params.tensors[i];
    VOXELSEG_REQUIRE(ckpt.params.names[i] == specs[i].name && t.shape() == specs[i].shape, ErrorCode::CheckpointError,
            "parameter " + ckpt.params.names[i] + " does not match config");
    const auto bytes = static_cast<std::int64_t>(t.size() * sizeof(float));
    params.push_back({{"name", specs[i].name}, {"shape", specs[i].shape}, {"offset", offset}, {"count", t.size()}});
    blob.resize(static_cast<std::size_t>(offset + bytes));
    std::memcpy(blob.data() + offset, t.data(), static_cast<std::size_t>(bytes));
    offset += bytes;
  }
  const std::string blob_name = stem + ".bin";
  nlohmann::json j{{"format", "voxelseg-checkpoint"}, {"version", 1},      {"epoch", ckpt.epoch},
                   {"config", ckpt.config},           {"dtype", "float32"}, {"byte_order", "little"},
                   {"blob", blob_name},               {"total_bytes", offset}, {"parameters", params}};
  fs::create_directories(dir);
  write_binary_file(fs::path(dir) / blob_name, blob);
  const fs::path json_path = fs::path(dir) / (stem + ".json");
  write_text_file(json_path, j.dump(2) + "\n");
  return json_path.string();
}

Checkpoint load_checkpoint(const std::string& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointError, json_path + ": " + e.what());
  } catch (const Error& e) {
    fail(ErrorCode::CheckpointError, e.what());
  }
  Checkpoint ck;
  std::vector<char> blob;
  try {
    VOXELSEG_REQUIRE(j.value("format", "") == "voxelseg-checkpoint", ErrorCode::CheckpointError, json_path + ": not a checkpoint");
    VOXELSEG_REQUIRE(j.at("dtype") == "float32", ErrorCode::CheckpointError, json_path + ": unsupported dtype");
    from_json(j.at("config"), ck.config);
    ck.epoch = j.at("epoch").get<int>();
    blob = read_binary_file(fs::path(json_path).parent_path() / j.at("blob").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointError, json_path + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CheckpointError) throw;
    fail(ErrorCode::CheckpointError, json_path + ": " + e.what());
  }
  const auto specs = parameter_specs(ck.config);
  const auto& entries = j.at("parameters");
  VOXELSEG_REQUIRE(entries.size() == specs.size(), ErrorCode::CheckpointError, json_path + ": parameter count mismatch");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& e = entries[i];
    VOXELSEG_REQUIRE(e.at("name") == specs[i].name && e.at("shape").get<Shape>() == specs[i].shape, ErrorCode::CheckpointError,
            json_path + ": parameter " + specs[i].name + " does not match config");
    const auto offset = e.at("offset").get<std::int64_t>();
    const auto count = shape_numel(specs[i].shape);
    VOXELSEG_REQUIRE(offset >= 0 && offset + count * 4 <= static_cast<std::int64_t>(blob.size()), ErrorCode::CheckpointError,
            json_path + ": blob too small for " + specs[i].name);
    Tensor<float> t(specs[i].shape);
    std::memcpy(t.data(), blob.data() + offset, static_cast<std::size_t>(count) * 4);
    for (float v : t.values()) VOXELSEG_REQUIRE(std::isfinite(v), ErrorCode::CheckpointError, json_path + ": non-finite weight");
    ck.params.names.push_back(specs[i].name);
    ck.params.tensors.push_back(std::move(t));
  }
  return ck;
}

#define VOXELSEG_INSTANTIATE_NETWORK(T)                                                                         \
  template struct ParameterSetT<T>;                                                                            \
  template class BoundParameters<T>;                                                                           \
  template ParameterSetT<T> zero_parameters<T>(const NetworkConfig&);                                          \
  template Var<T> context_module<T>(const NetworkConfig&, const BoundParameters<T>&, const std::string&, Var<T>, \
                                    const ForwardOptions&);                                                    \
  template Var<T> upsample_module<T>(const NetworkConfig&, const BoundParameters<T>&, const std::string&, Var<T>); \
  template Var<T> localization_module<T>(const NetworkConfig&, const BoundParameters<T>&, const std::string&,     \
                                         Var<T>);                                                              \
  template ForwardResult<T> forward<T>(const NetworkConfig&, const BoundParameters<T>&, Var<T>, const ForwardOptions&);

VOXELSEG_INSTANTIATE_NETWORK(float)
VOXELSEG_INSTANTIATE_NETWORK(double)

}  // namespace voxelseg::nn
