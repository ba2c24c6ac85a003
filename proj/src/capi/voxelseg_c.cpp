#include "voxelseg/voxelseg.h"

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "app/commands.hpp"
#include "common/parallel.hpp"
#include "infer/predict.hpp"
#include "survival/survival.hpp"
#include "volume/io.hpp"

using voxelseg::Error;
using voxelseg::ErrorCode;
using nlohmann::json;

struct vxs_run {
  voxelseg::app::RunRequest request;
  std::string manifest;
  bool executed = false;
};

struct vxs_survival_model {
  voxelseg::survival::SurvivalModel model;
};

struct vxs_seg_model {
  std::vector<voxelseg::eval::Model> models;
};

namespace {

thread_local std::string g_last_error;

// The enum values mirror ErrorCode order, shifted by one.
vxs_status to_status(ErrorCode code) { return static_cast<vxs_status>(static_cast<int>(code) + 1); }

template <typename F>
vxs_status guarded(F&& body) noexcept {
  try {
    body();
    g_last_error.clear();
    return VXS_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const json::exception& e) {
    g_last_error = std::string("ConfigError: ") + e.what();
    return VXS_ERR_CONFIG;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = std::string("IoError: ") + e.what();
    return VXS_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = std::string("internal error: ") + e.what();
    return VXS_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "internal error: unknown exception";
    return VXS_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) voxelseg::fail(ErrorCode::InvalidArgument, std::string(what) + " must not be NULL");
}

json parse_json(const char* text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    voxelseg::fail(ErrorCode::ConfigError, std::string(what) + ": " + e.what());
  }
}

}  // namespace

extern "C" {

const char* vxs_version(void) { return "1.0.0"; }

const char* vxs_last_error(void) { return g_last_error.c_str(); }

const char* vxs_status_name(vxs_status status) {
  if (status == VXS_OK) return "Ok";
  if (status == VXS_ERR_INTERNAL) return "InternalError";
  const int i = static_cast<int>(status) - 1;
  if (i < 0 || i > static_cast<int>(ErrorCode::SpecError)) return "UnknownStatus";
  static std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (int c = 0; c <= static_cast<int>(ErrorCode::SpecError); ++c)
      n.emplace_back(voxelseg::error_code_name(static_cast<ErrorCode>(c)));
    return n;
  }();
  return names[i].c_str();
}

int vxs_exit_code(vxs_status status) {
  if (status == VXS_OK) return 0;
  if (status == VXS_ERR_INTERNAL) return 1;
  const int i = static_cast<int>(status) - 1;
  if (i < 0 || i > static_cast<int>(ErrorCode::SpecError)) return 1;
  return voxelseg::app::exit_code_for(static_cast<ErrorCode>(i));
}

vxs_status vxs_set_threads(int n) {
  return guarded([&] {
    voxelseg::require(n >= 1, ErrorCode::InvalidArgument, "thread count must be >= 1");
    voxelseg::set_thread_count(n);
  });
}

const char* const* vxs_commands(void) {
  static const std::vector<const char*> names = [] {
    std::vector<const char*> v;
    for (const auto& n : voxelseg::app::command_names()) v.push_back(n.c_str());
    v.push_back(nullptr);
    return v;
  }();
  return names.data();
}

vxs_status vxs_run_create(const char* command, vxs_run** out) {
  return guarded([&] {
    need(command, "command");
    need(out, "out");
    *out = nullptr;
    const auto& names = voxelseg::app::command_names();
    voxelseg::require(std::find(names.begin(), names.end(), command) != names.end(), ErrorCode::ConfigError,
                      std::string("unknown command '") + command + "'");
    auto* run = new vxs_run;
    run->request.command = command;
    *out = run;
  });
}

void vxs_run_free(vxs_run* run) { delete run; }

vxs_status vxs_run_set_config(vxs_run* run, const char* config_json) {
  return guarded([&] {
    need(run, "run");
    need(config_json, "config_json");
    json j = parse_json(config_json, "config");
    voxelseg::require(j.is_object(), ErrorCode::ConfigError, "config: expected a JSON object");
    run->request.config = std::move(j);
  });
}

vxs_status vxs_run_load_config(vxs_run* run, const char* path) {
  return guarded([&] {
    need(run, "run");
    need(path, "path");
    const std::string text = voxelseg::read_text_file(path);
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      voxelseg::fail(ErrorCode::ConfigError, std::string(path) + ": " + e.what());
    }
    voxelseg::require(j.is_object(), ErrorCode::ConfigError, std::string(path) + ": expected a JSON object");
    run->request.config = std::move(j);
  });
}

vxs_status vxs_run_override(vxs_run* run, const char* dotted_path, const char* value_json) {
  return guarded([&] {
    need(run, "run");
    need(dotted_path, "dotted_path");
    need(value_json, "value_json");
    run->request.overrides.emplace_back(dotted_path, parse_json(value_json, dotted_path));
  });
}

vxs_status vxs_run_override_string(vxs_run* run, const char* dotted_path, const char* value) {
  return guarded([&] {
    need(run, "run");
    need(dotted_path, "dotted_path");
    need(value, "value");
    run->request.overrides.emplace_back(dotted_path, json(value));
  });
}

vxs_status vxs_run_execute(vxs_run* run) {
  return guarded([&] {
    need(run, "run");
    run->manifest = voxelseg::app::run_command(run->request).dump(2);
    run->executed = true;
  });
}

const char* vxs_run_manifest(const vxs_run* run) { return run && run->executed ? run->manifest.c_str() : nullptr; }

vxs_status vxs_survival_model_load(const char* json_path, vxs_survival_model** out) {
  return guarded([&] {
    need(json_path, "json_path");
    need(out, "out");
    *out = nullptr;
    auto m = std::make_unique<vxs_survival_model>();
    m->model = voxelseg::survival::load_survival_model(json_path);
    *out = m.release();
  });
}

void vxs_survival_model_free(vxs_survival_model* model) { delete model; }

size_t vxs_survival_model_num_features(const vxs_survival_model* model) {
  return model ? model->model.forest.n_features : 0;
}

const char* vxs_survival_model_feature_name(const vxs_survival_model* model, size_t i) {
  if (!model || i >= model->model.feature_names.size()) return nullptr;
  return model->model.feature_names[i].c_str();
}

vxs_status vxs_survival_model_predict(const vxs_survival_model* model, const double* features, size_t n_features,
                                      double* out_days) {
  return guarded([&] {
    need(model, "model");
    need(features, "features");
    need(out_days, "out_days");
    *out_days = voxelseg::survival::predict_combined(model->model, std::vector<double>(features, features + n_features));
  });
}

vxs_status vxs_seg_model_load(const char* const* checkpoint_paths, size_t n, vxs_seg_model** out) {
  return guarded([&] {
    need(checkpoint_paths, "checkpoint_paths");
    need(out, "out");
    *out = nullptr;
    voxelseg::require(n >= 1, ErrorCode::InvalidArgument, "at least one checkpoint is required");
    std::vector<std::string> paths;
    for (size_t i = 0; i < n; ++i) {
      need(checkpoint_paths[i], "checkpoint path");
      paths.emplace_back(checkpoint_paths[i]);
    }
    auto m = std::make_unique<vxs_seg_model>();
    m->models = voxelseg::eval::load_ensemble(paths);
    *out = m.release();
  });
}

void vxs_seg_model_free(vxs_seg_model* model) { delete model; }

vxs_status vxs_seg_model_predict_case(const vxs_seg_model* model, const char* case_dir, const char* out_dir) {
  return guarded([&] {
    need(model, "model");
    need(case_dir, "case_dir");
    need(out_dir, "out_dir");
    const auto c = voxelseg::read_case(case_dir);
    const auto pred = voxelseg::eval::predict(c, model->models, {});
    std::filesystem::create_directories(out_dir);
    voxelseg::write_raw(std::filesystem::path(out_dir) / "seg.json", pred.labels, c.spacing());
  });
}

vxs_status vxs_seg_model_softmax(const vxs_seg_model* model, const float* input, size_t d, size_t h, size_t w,
                                 float* out_softmax) {
  return guarded([&] {
    need(model, "model");
    need(input, "input");
    need(out_softmax, "out_softmax");
    voxelseg::require(d > 0 && h > 0 && w > 0, ErrorCode::InvalidArgument, "volume extents must be > 0");
    const auto n = static_cast<std::int64_t>(4 * d * h * w);
    voxelseg::Tensor<float> in({4, static_cast<std::int64_t>(d), static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)},
                               std::vector<float>(input, input + n));
    voxelseg::Tensor<float> mean;
    for (std::size_t m = 0; m < model->models.size(); ++m) {
      auto s = voxelseg::eval::predict_softmax(model->models[m], in, {}, m);
      if (mean.size() == 0) {
        mean = std::move(s);
      } else {
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += s[i];
      }
    }
    const float inv = 1.0f / static_cast<float>(model->models.size());
    for (std::size_t i = 0; i < mean.size(); ++i) out_softmax[i] = mean[i] * inv;
  });
}

}  // extern "C"
