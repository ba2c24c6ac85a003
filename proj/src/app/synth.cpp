#include "app/synth.hpp"

#include <cmath>
#include <cstdio>

#include "common/rng.hpp"

namespace voxelseg::app {

void SyntheticCaseSpec::validate() const {
  for (auto s : shape) require(s >= 4, ErrorCode::SpecError, "synth.shape entries must be >= 4");
  require(r_enh > 0.0, ErrorCode::SpecError, "synth.r_enh must be > 0");
  require(centre_jitter >= 0.0 && radius_jitter >= 0.0, ErrorCode::SpecError, "synth jitter must be >= 0");
  require(r_enh + radius_jitter <= r_core - radius_jitter && r_core + radius_jitter <= r_whole - radius_jitter,
          ErrorCode::SpecError, "synth shells must nest: r_enh <= r_core <= r_whole after jitter");
  require(r_enh - radius_jitter > 0.0, ErrorCode::SpecError, "synth.radius_jitter must be < r_enh");
  require(brain_fraction > 0.0 && brain_fraction <= 0.5, ErrorCode::SpecError, "synth.brain_fraction must be in (0, 0.5]");
  require(noise_sigma >= 0.0 && intensity_scale > 0.0, ErrorCode::SpecError, "synth noise/intensity must be non-negative");
  for (double sp : spacing) require(sp > 0.0, ErrorCode::SpecError, "synth.spacing must be > 0");
}

void to_json(nlohmann::json& j, const SyntheticCaseSpec& s) {
  nlohmann::json prof = nlohmann::json::object();
  for (int m = 0; m < kNumModalities; ++m) {
    const auto& p = s.profiles[m];
    prof[kModalityNames[m]] = {{"brain", p.brain}, {"edema", p.edema}, {"necrosis", p.necrosis}, {"enhancing", p.enhancing}};
  }
  j = nlohmann::json{{"shape", s.shape},
                     {"r_enh", s.r_enh},
                     {"r_core", s.r_core},
                     {"r_whole", s.r_whole},
                     {"centre_jitter", s.centre_jitter},
                     {"radius_jitter", s.radius_jitter},
                     {"brain_fraction", s.brain_fraction},
                     {"noise_sigma", s.noise_sigma},
                     {"intensity_scale", s.intensity_scale},
                     {"profiles", prof},
                     {"spacing", s.spacing},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticCaseSpec& s) {
  require(j.is_object(), ErrorCode::ConfigError, "synth config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "shape") {
        if (it->is_number()) s.shape.fill(it->get<std::int64_t>());
        else s.shape = it->get<std::array<std::int64_t, 3>>();
      } else if (k == "r_enh") s.r_enh = it->get<double>();
      else if (k == "r_core") s.r_core = it->get<double>();
      else if (k == "r_whole") s.r_whole = it->get<double>();
      else if (k == "centre_jitter") s.centre_jitter = it->get<double>();
      else if (k == "radius_jitter") s.radius_jitter = it->get<double>();
      else if (k == "brain_fraction") s.brain_fraction = it->get<double>();
      else if (k == "noise_sigma") s.noise_sigma = it->get<double>();
      else if (k == "intensity_scale") s.intensity_scale = it->get<double>();
      else if (k == "spacing") s.spacing = it->get<Spacing>();
      else if (k == "seed") s.seed = it->get<std::uint64_t>();
      else if (k == "profiles") {
        for (auto m = it->begin(); m != it->end(); ++m) {
          int idx = -1;
          for (int q = 0; q < kNumModalities; ++q)
            if (m.key() == kModalityNames[q]) idx = q;
          require(idx >= 0, ErrorCode::ConfigError, "synth.profiles." + m.key() + ": unknown modality");
          auto& p = s.profiles[idx];
          p.brain = m->value("brain", p.brain);
          p.edema = m->value("edema", p.edema);
          p.necrosis = m->value("necrosis", p.necrosis);
          p.enhancing = m->value("enhancing", p.enhancing);
        }
      } else fail(ErrorCode::ConfigError, "synth." + k + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "synth." + k + ": " + e.what());
    }
  }
}

MultiModalCase synth_case(const SyntheticCaseSpec& spec, int index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const Dims3 d{spec.shape[0], spec.shape[1], spec.shape[2]};
  double centre[3];
  const double mid[3] = {(d.d - 1) / 2.0, (d.h - 1) / 2.0, (d.w - 1) / 2.0};
  const auto jit = static_cast<std::int64_t>(std::floor(spec.centre_jitter));
  for (int a = 0; a < 3; ++a) {
    const double shift = jit > 0 ? static_cast<double>(rng.below(static_cast<std::uint64_t>(2 * jit + 1))) - jit : 0.0;
    centre[a] = std::round(mid[a]) + shift;
  }
  const double r_enh = spec.r_enh + rng.uniform(-spec.radius_jitter, spec.radius_jitter);
  const double r_core = spec.r_core + rng.uniform(-spec.radius_jitter, spec.radius_jitter);
  const double r_whole = spec.r_whole + rng.uniform(-spec.radius_jitter, spec.radius_jitter);
  const double brain_axes[3] = {spec.brain_fraction * d.d, spec.brain_fraction * d.h, spec.brain_fraction * d.w};

  MultiModalCase c;
  char id[32];
  std::snprintf(id, sizeof id, "case_%03d", index);
  c.id = id;
  for (auto& m : c.modalities) m = Volume3D(d, spec.spacing, 0.0f);
  c.label = LabelMap(d, 0);
  Rng noise(rng.next_u64());
  std::int64_t whole_voxels = 0;
  for (std::int64_t z = 0; z < d.d; ++z)
    for (std::int64_t y = 0; y < d.h; ++y)
      for (std::int64_t x = 0; x < d.w; ++x) {
        const double p[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        double e = 0.0, r2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          e += std::pow((p[a] - mid[a]) / brain_axes[a], 2);
          r2 += (p[a] - centre[a]) * (p[a] - centre[a]);
        }
        const double r = std::sqrt(r2);
        std::uint8_t lab = 0;
        if (r <= r_enh) lab = 4;
        else if (r <= r_core) lab = 1;
        else if (r <= r_whole) lab = 2;
        if (e > 1.0 && lab == 0) continue;
        const std::int64_t i = d.index(z, y, x);
        (*c.label)[i] = lab;
        whole_voxels += lab != 0;
        for (int m = 0; m < kNumModalities; ++m) {
          const TissueProfile& t = spec.profiles[m];
          const double mean = lab == 4 ? t.enhancing : lab == 1 ? t.necrosis : lab == 2 ? t.edema : t.brain;
          const double v = mean * spec.intensity_scale + noise.normal(0.0, spec.noise_sigma);
          c.modalities[m][i] = static_cast<float>(std::max(v, 1.0));
        }
      }
  c.age = std::round(rng.uniform(30.0, 80.0) * 10.0) / 10.0;
  const double voxel_ml = spec.spacing[0] * spec.spacing[1] * spec.spacing[2];
  const double days = 1400.0 - 12.0 * *c.age - 0.25 * whole_voxels * voxel_ml + rng.normal(0.0, 60.0);
  c.survival_days = std::round(std::max(days, 30.0));
  c.validate();
  return c;
}

std::vector<MultiModalCase> synth_dataset(const SyntheticCaseSpec& spec, int n_cases) {
  require(n_cases >= 1, ErrorCode::SpecError, "synth needs at least one case");
  std::vector<MultiModalCase> out;
  for (int i = 0; i < n_cases; ++i) out.push_back(synth_case(spec, i));
  return out;
}

}  // namespace voxelseg::app
