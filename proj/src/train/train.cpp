#include "train/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "volume/io.hpp"

namespace voxelseg::train {

void adam_step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& s, double lr,
               double weight_decay) {
  require(params.size() == grads.size(), ErrorCode::ShapeMismatch, "adam_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].empty()) continue;
    require(grads[i].size() == params[i].size(), ErrorCode::ShapeMismatch, "adam_step: gradient shape mismatch");
    for (float g : grads[i].values())
      VOXELSEG_REQUIRE(std::isfinite(g), ErrorCode::NonFiniteGradient, "non-finite gradient in parameter " + std::to_string(i));
  }
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
  }
  require(s.m.size() == params.size(), ErrorCode::ShapeMismatch, "adam_step: optimizer state does not match parameters");
  ++s.step;
  const double b1 = s.config.beta1, b2 = s.config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].empty() ? nullptr : grads[i].data();
    std::vector<double>& m = s.m[i];
    std::vector<double>& v = s.v[i];
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double gk = (g ? g[k] : 0.0) + weight_decay * p[k];
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p[k] = static_cast<float>(p[k] - lr * mhat / (std::sqrt(vhat) + s.config.eps));
    }
  }
}

double lr_at(double lr_init, double lr_decay, int epoch) {
  require(epoch >= 0, ErrorCode::RangeError, "epoch must be >= 0");
  return lr_init * std::pow(lr_decay, epoch);
}

void TrainConfig::validate(const nn::NetworkConfig& net) const {
  net.validate();
  require(lr_init >= 0.0, ErrorCode::ConfigError, "train.lr_init must be >= 0");
  require(lr_decay > 0.0 && lr_decay <= 1.0, ErrorCode::ConfigError, "train.lr_decay must be in (0, 1]");
  require(weight_decay >= 0.0, ErrorCode::ConfigError, "train.weight_decay must be >= 0");
  require(batch_size >= 1, ErrorCode::ConfigError, "train.batch_size must be >= 1");
  require(batches_per_epoch >= 1, ErrorCode::ConfigError, "train.batches_per_epoch must be >= 1");
  require(epochs >= 1, ErrorCode::ConfigError, "train.epochs must be >= 1");
  require(dice_epsilon >= 0.0, ErrorCode::ConfigError, "train.dice_epsilon must be >= 0");
  require(foreground_probability >= 0.0 && foreground_probability <= 1.0, ErrorCode::ConfigError,
          "train.foreground_probability must be in [0, 1]");
  require(checkpoint_interval >= 0, ErrorCode::ConfigError, "train.checkpoint_interval must be >= 0");
  for (auto p : patch_size) {
    VOXELSEG_REQUIRE(p >= 1 && p % net.divisor() == 0, ErrorCode::ConfigError,
            "train.patch_size entries must be positive multiples of " + std::to_string(net.divisor()));
  }
  augmentation.initial.validate();
  augmentation.final.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_init", c.lr_init},
                     {"lr_decay", c.lr_decay},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"patch_size", c.patch_size},
                     {"batches_per_epoch", c.batches_per_epoch},
                     {"epochs", c.epochs},
                     {"dice_epsilon", c.dice_epsilon},
                     {"include_background", c.include_background},
                     {"foreground_probability", c.foreground_probability},
                     {"checkpoint_interval", c.checkpoint_interval},
                     {"seed", c.seed},
                     {"augmentation", {{"initial", c.augmentation.initial}, {"final", c.augmentation.final}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  require(j.is_object(), ErrorCode::ConfigError, "train config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "lr_init") c.lr_init = it->get<double>();
      else if (k == "lr_decay") c.lr_decay = it->get<double>();
      else if (k == "weight_decay") c.weight_decay = it->get<double>();
      else if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "patch_size") {
        if (it->is_number()) c.patch_size.fill(it->get<std::int64_t>());
        else c.patch_size = it->get<std::array<std::int64_t, 3>>();
      } else if (k == "batches_per_epoch") c.batches_per_epoch = it->get<int>();
      else if (k == "epochs") c.epochs = it->get<int>();
      else if (k == "dice_epsilon") c.dice_epsilon = it->get<double>();
      else if (k == "include_background") c.include_background = it->get<bool>();
      else if (k == "foreground_probability") c.foreground_probability = it->get<double>();
      else if (k == "checkpoint_interval") c.checkpoint_interval = it->get<int>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "augmentation") {
        require(it->is_object(), ErrorCode::ConfigError, "train.augmentation must be an object");
        for (auto a = it->begin(); a != it->end(); ++a) {
          if (a.key() == "initial") aug::from_json(*a, c.augmentation.initial);
          else if (a.key() == "final") aug::from_json(*a, c.augmentation.final);
          else fail(ErrorCode::ConfigError, "train.augmentation." + a.key() + ": unknown key");
        }
      } else fail(ErrorCode::ConfigError, "train." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "train." + k + ": " + e.what());
    }
  }
  c.augmentation.total_epochs = c.epochs;
}

PatchSource::PatchSource(const MultiModalCase& c) : case_(&c) {
  VOXELSEG_REQUIRE(c.label.has_value(), ErrorCode::InvalidArgument, "case " + c.id + " has no label map");
  const LabelMap& l = *c.label;
  for (std::size_t i = 0; i < l.size(); ++i)
    if (l[i] != 0) foreground_.push_back(static_cast<std::int64_t>(i));
}

aug::Sample PatchSource::extract(Dims3 patch, std::array<std::int64_t, 3> start) const {
  const Dims3 d = case_->dims();
  aug::Sample s{Tensor<float>({kNumModalities, patch.d, patch.h, patch.w}, 0.0f), LabelMap(patch, 0)};
  const std::int64_t pv = patch.voxels();
  for (std::int64_t z = 0; z < patch.d; ++z) {
    const std::int64_t sz = start[0] + z;
    if (sz < 0 || sz >= d.d) continue;
    for (std::int64_t y = 0; y < patch.h; ++y) {
      const std::int64_t sy = start[1] + y;
      if (sy < 0 || sy >= d.h) continue;
      for (std::int64_t x = 0; x < patch.w; ++x) {
        const std::int64_t sx = start[2] + x;
        if (sx < 0 || sx >= d.w) continue;
        const std::int64_t src = d.index(sz, sy, sx), dst = patch.index(z, y, x);
        for (int m = 0; m < kNumModalities; ++m) s.image[static_cast<std::size_t>(m * pv + dst)] = case_->modalities[m][src];
        s.label[dst] = (*case_->label)[src];
      }
    }
  }
  return s;
}

aug::Sample PatchSource::sample(Dims3 patch, double foreground_probability, Rng& rng) const {
  const Dims3 d = case_->dims();
  std::array<std::int64_t, 3> start{};
  std::array<std::int64_t, 3> span{};
  for (int a = 0; a < 3; ++a) span[a] = std::max<std::int64_t>(d[a], patch[a]) - patch[a];
  const bool centred = rng.bernoulli(foreground_probability);
  if (centred && !foreground_.empty()) {
    const std::int64_t f = foreground_[rng.below(foreground_.size())];
    const std::int64_t pos[3] = {f / (d.h * d.w), (f / d.w) % d.h, f % d.w};
    for (int a = 0; a < 3; ++a) start[a] = std::clamp<std::int64_t>(pos[a] - patch[a] / 2, 0, span[a]);
  } else {
    for (int a = 0; a < 3; ++a) start[a] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(span[a] + 1)));
  }
  return extract(patch, start);
}

aug::Sample sample_patch(const MultiModalCase& c, Dims3 patch, double foreground_probability, Rng& rng) {
  return PatchSource(c).sample(patch, foreground_probability, rng);
}

Batch assemble_batch(const std::vector<aug::Sample>& samples) {
  require(!samples.empty(), ErrorCode::EmptyDataset, "empty batch");
  const Dims3 d = samples[0].dims();
  const auto n = static_cast<std::int64_t>(samples.size());
  const std::int64_t C = samples[0].image.dim(0), V = d.voxels();
  Batch b{Tensor<float>({n, C, d.d, d.h, d.w}), Tensor<float>({n, 4, d.d, d.h, d.w}, 0.0f)};
  for (std::int64_t i = 0; i < n; ++i) {
    const aug::Sample& s = samples[i];
    require(s.dims() == d && s.image.dim(0) == C, ErrorCode::ShapeMismatch, "batch samples differ in shape");
    std::copy(s.image.values().begin(), s.image.values().end(), b.input.data() + i * C * V);
    for (std::int64_t v = 0; v < V; ++v) b.target[static_cast<std::size_t>((i * 4 + label_channel(s.label[v])) * V + v)] = 1.0f;
  }
  return b;
}

std::string epoch_log_json(const EpochLog& e) {
  return nlohmann::json{{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}, {"wall_time", e.wall_time}}.dump();
}

Profile paper_profile() { return {}; }

Profile desk_profile() {
  Profile p;
  p.net.levels = 3;
  p.net.base_filters = 8;
  p.train.patch_size = {32, 32, 32};
  p.train.epochs = 20;
  p.train.batches_per_epoch = 10;
  p.train.lr_init = 5e-3;
  return p;
}

Profile profile_by_name(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  fail(ErrorCode::ConfigError, "profile: unknown profile '" + name + "' (expected desk or paper)");
}

TrainResult train(const TrainConfig& cfg_in, const nn::NetworkConfig& net, const std::vector<MultiModalCase>& data,
                  const TrainOptions& options) {
  TrainConfig cfg = cfg_in;
  cfg.augmentation.total_epochs = cfg.epochs;
  cfg.validate(net);
  require(!data.empty(), ErrorCode::EmptyDataset, "training set is empty");
  std::vector<PatchSource> sources;
  for (const auto& c : data) {
    c.validate();
    sources.emplace_back(c);
  }
  TrainResult result;
  result.params = options.initial.size() ? options.initial : nn::init_parameters(net, derive_seed(cfg.seed, 0));
  require(result.params.size() == nn::parameter_specs(net).size(), ErrorCode::CheckpointError,
          "initial parameters do not match the network config");

  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    metrics.open(fs::path(options.out_dir) / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    VOXELSEG_REQUIRE(metrics.good(), ErrorCode::IoError, "cannot write metrics.jsonl in " + options.out_dir);
  }
  const Dims3 patch{cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]};
  const auto t0 = std::chrono::steady_clock::now();
  AdamState adam;
  const std::uint64_t batch_root = derive_seed(cfg.seed, 1);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const aug::AugmentationConfig augc = aug::attenuate(cfg.augmentation, epoch);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      Rng rng(derive_seed(batch_root, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)));
      std::vector<aug::Sample> samples;
      for (int s = 0; s < cfg.batch_size; ++s) {
        const PatchSource& src = sources[rng.below(sources.size())];
        samples.push_back(src.sample(patch, cfg.foreground_probability, rng));
      }
      aug::augment_batch(samples, augc, rng.next_u64());
      Rng dropout_rng(rng.next_u64());
      const Batch batch = assemble_batch(samples);

      nn::Graph<float> g;
      nn::BoundParameters<float> bound(g, result.params, true);
      auto out = nn::forward(net, bound, g.constant(batch.input), {nn::Mode::Train, &dropout_rng});
      auto loss = nn::dice_loss(out.softmax, batch.target, cfg.dice_epsilon, cfg.include_background);
      g.backward(loss);
      std::vector<Tensor<float>> grads;
      for (const auto& v : bound.vars()) grads.push_back(v.grad());
      try {
        adam_step(result.params.tensors, grads, adam, lr, cfg.weight_decay);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteGradient) throw;
        fail(ErrorCode::NonFiniteGradient,
             "epoch " + std::to_string(epoch) + ", step " + std::to_string(b) + ": " + e.what());
      }
      loss_sum += loss.value()[0];
    }
    EpochLog log{epoch, lr, loss_sum / cfg.batches_per_epoch,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.log.push_back(log);
    if (metrics.is_open()) {
      metrics << epoch_log_json(log) << '\n';
      metrics.flush();
    }
    const int done = epoch + 1;
    const bool last = done == cfg.epochs;
    if (!options.out_dir.empty() && (last || (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0))) {
      result.checkpoints.push_back(
          nn::save_checkpoint(options.out_dir, "ckpt_epoch_" + std::to_string(done), {net, result.params, done}));
    }
    if (options.on_epoch) options.on_epoch(log);
  }
  return result;
}

}  // namespace voxelseg::train
