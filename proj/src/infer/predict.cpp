#include "infer/predict.hpp"

#include <algorithm>

#include "augment/augment.hpp"

namespace voxelseg::eval {

void PredictionConfig::validate() const {
  require(dropout_samples >= 0, ErrorCode::ConfigError, "predict.dropout_samples must be >= 0");
}

void to_json(nlohmann::json& j, const PredictionConfig& c) {
  j = nlohmann::json{{"mirror_tta", c.mirror_tta},
                     {"dropout_samples", c.dropout_samples},
                     {"ensemble_checkpoints", c.ensemble_checkpoints},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PredictionConfig& c) {
  require(j.is_object(), ErrorCode::ConfigError, "predict config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "mirror_tta") c.mirror_tta = it->get<bool>();
      else if (k == "dropout_samples") c.dropout_samples = it->get<int>();
      else if (k == "ensemble_checkpoints") c.ensemble_checkpoints = it->get<std::vector<std::string>>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else fail(ErrorCode::ConfigError, "predict." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "predict." + k + ": " + e.what());
    }
  }
}

std::vector<Model> load_ensemble(std::vector<std::string> paths) {
  require(!paths.empty(), ErrorCode::CheckpointError, "no checkpoints given");
  std::sort(paths.begin(), paths.end());
  std::vector<Model> out;
  for (const auto& p : paths) {
    nn::Checkpoint ck = nn::load_checkpoint(p);
    out.push_back({ck.config, std::move(ck.params), p});
  }
  return out;
}

Tensor<float> case_tensor(const MultiModalCase& c) {
  const Dims3 d = c.dims();
  Tensor<float> t({kNumModalities, d.d, d.h, d.w});
  for (int m = 0; m < kNumModalities; ++m)
    std::copy(c.modalities[m].values().begin(), c.modalities[m].values().end(), t.data() + m * d.voxels());
  return t;
}

Tensor<float> predict_softmax(const Model& model, const Tensor<float>& input, const PredictionConfig& cfg, std::size_t member) {
  cfg.validate();
  const nn::NetworkConfig& net = model.config;
  require(input.rank() == 4 && input.dim(0) == net.in_channels, ErrorCode::ShapeMismatch,
          "prediction input must be [" + std::to_string(net.in_channels) + ", D, H, W], got " + shape_string(input.shape()));
  const Dims3 d{input.dim(1), input.dim(2), input.dim(3)};
  const std::int64_t div = net.divisor();
  auto up = [div](std::int64_t n) { return (n + div - 1) / div * div; };
  const Dims3 pd{up(d.d), up(d.h), up(d.w)};
  const std::int64_t C = input.dim(0), K = net.num_classes;

  Tensor<float> padded({1, C, pd.d, pd.h, pd.w}, 0.0f);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t z = 0; z < d.d; ++z)
      for (std::int64_t y = 0; y < d.h; ++y)
        std::copy_n(input.data() + c * d.voxels() + d.index(z, y, 0), d.w,
                    padded.data() + c * pd.voxels() + pd.index(z, y, 0));

  std::vector<std::vector<int>> variants = {{}};
  if (cfg.mirror_tta) variants = {{}, {0}, {1}, {2}, {0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
  const int passes = std::max(1, cfg.dropout_samples);
  std::vector<double> acc(static_cast<std::size_t>(K * pd.voxels()), 0.0);
  for (std::size_t v = 0; v < variants.size(); ++v) {
    Tensor<float> x = padded;
    aug::mirror_tensor(x, variants[v]);
    for (int s = 0; s < passes; ++s) {
      nn::Graph<float> g;
      nn::BoundParameters<float> b(g, model.params, false);
      Rng rng(derive_seed(derive_seed(cfg.seed, member), v, static_cast<std::uint64_t>(s)));
      const nn::ForwardOptions opt{cfg.dropout_samples > 0 ? nn::Mode::Sample : nn::Mode::Eval, &rng};
      Tensor<float> u = nn::forward(net, b, g.constant(x), opt).softmax.value();
      aug::mirror_tensor(u, variants[v]);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += u[i];
    }
  }
  const double n = static_cast<double>(variants.size() * static_cast<std::size_t>(passes));
  Tensor<float> out({K, d.d, d.h, d.w});
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t z = 0; z < d.d; ++z)
      for (std::int64_t y = 0; y < d.h; ++y)
        for (std::int64_t x = 0; x < d.w; ++x)
          out[static_cast<std::size_t>(k * d.voxels() + d.index(z, y, x))] =
              static_cast<float>(acc[static_cast<std::size_t>(k * pd.voxels() + pd.index(z, y, x))] / n);
  return out;
}

Prediction predict(const MultiModalCase& c, const std::vector<Model>& models, const PredictionConfig& cfg) {
  require(!models.empty(), ErrorCode::CheckpointError, "no models to predict with");
  const Tensor<float> input = case_tensor(c);
  std::vector<double> acc;
  Shape shape;
  for (std::size_t m = 0; m < models.size(); ++m) {
    require(models[m].config.num_classes == 4, ErrorCode::CheckpointError, "segmentation models must have 4 classes");
    const Tensor<float> u = predict_softmax(models[m], input, cfg, m);
    if (acc.empty()) {
      acc.assign(u.size(), 0.0);
      shape = u.shape();
    }
    for (std::size_t i = 0; i < u.size(); ++i) acc[i] += u[i];
  }
  Tensor<float> mean(shape);
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<float>(acc[i] / static_cast<double>(models.size()));
  LabelMap labels = argmax_decode(mean, c.dims());
  return {std::move(mean), std::move(labels)};
}

}  // namespace voxelseg::eval
