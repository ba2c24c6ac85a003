// voxelseg command-line front end. Talks to the library only through the C API.

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxelseg/voxelseg.h"

namespace {

struct Override {
  std::string path;
  std::string value;
  bool as_json;
};

// Flags of one subcommand, collected as dotted-path overrides in flag order.
struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<Override> overrides;
};

// An option whose value becomes a string override at `path` when given.
void string_flag(Command& c, const std::string& flag, const std::string& path, const std::string& help) {
  c.app->add_option_function<std::string>(
      flag, [&c, path](const std::string& v) { c.overrides.push_back({path, v, false}); }, help);
}

// An option whose value is parsed as JSON (numbers, booleans).
template <typename T>
void value_flag(Command& c, const std::string& flag, const std::string& path, const std::string& help) {
  c.app->add_option_function<T>(
      flag,
      [&c, path](const T& v) {
        std::ostringstream o;
        o.precision(17);
        o << v;
        c.overrides.push_back({path, o.str(), true});
      },
      help);
}

void bool_flag(Command& c, const std::string& flag, const std::string& path, const std::string& help) {
  c.app->add_flag_callback(flag, [&c, path] { c.overrides.push_back({path, "true", true}); }, help);
}

// Comma-separated list option, stored as a JSON array of strings.
void list_flag(Command& c, const std::string& flag, const std::string& path, const std::string& help) {
  c.app->add_option_function<std::vector<std::string>>(
      flag,
      [&c, path](const std::vector<std::string>& v) {
        std::string j = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (i) j += ",";
          j += "\"" + v[i] + "\"";
        }
        c.overrides.push_back({path, j + "]", true});
      },
      help)
      ->delimiter(',');
}

int report(vxs_status s) {
  std::fprintf(stderr, "voxelseg: %s\n", vxs_last_error());
  return vxs_exit_code(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-tumour segmentation and survival prediction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(vxs_version()));

  std::optional<int> threads;
  app.add_option("--threads", threads, "Worker threads (default: $VOXELSEG_THREADS or 1)")->check(CLI::PositiveNumber);

  std::vector<Command> commands;
  const char* const* names = vxs_commands();
  std::size_t n = 0;
  while (names[n]) ++n;
  commands.reserve(n);

  const auto help_for = [](const std::string& name) -> std::string {
    if (name == "synth") return "Generate synthetic tumour phantoms with labels and survival.csv";
    if (name == "preprocess") return "Brain-mask and normalize raw cases";
    if (name == "train") return "Train a segmentation network";
    if (name == "predict") return "Segment cases with one checkpoint or an ensemble";
    if (name == "evaluate") return "Score predicted segmentations against references";
    if (name == "features") return "Extract radiomics features to features.csv";
    if (name == "survival-train") return "Train the forest + MLP survival model";
    if (name == "survival-predict") return "Predict survival days from features.csv";
    if (name == "cv") return "k-fold segmentation cross-validation; yields an ensemble";
    return name;
  };

  for (std::size_t i = 0; i < n; ++i) {
    commands.push_back({names[i], nullptr, {}, {}, {}});
    Command& c = commands.back();
    c.app = app.add_subcommand(c.name, help_for(c.name));
    c.app->add_option("-c,--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
    c.app->add_option("--set", c.sets, "Override a config field: dotted.path=value (value is JSON or a string)");
    string_flag(c, "-o,--out", "out_dir", "Output directory");
    value_flag<unsigned long long>(c, "--seed", "seed", "Global seed");
    if (c.name != "synth" && c.name != "evaluate" && c.name != "survival-train" && c.name != "survival-predict")
      string_flag(c, "-i,--input", "input_dir", "Directory of case subdirectories");
    if (c.name == "train" || c.name == "cv" || c.name == "predict" || c.name == "features")
      c.app->add_flag_callback("--raw", [&c] { c.overrides.push_back({"preprocessed", "false", true}); },
                               "Input cases are raw; preprocess them in memory");

    if (c.name == "synth") {
      value_flag<int>(c, "-n,--n-cases", "n_cases", "Number of cases");
      string_flag(c, "--format", "format", "internal | nifti");
    } else if (c.name == "preprocess") {
      string_flag(c, "--format", "format", "internal | nifti");
    } else if (c.name == "train" || c.name == "cv") {
      string_flag(c, "--profile", "profile", "desk | paper");
      value_flag<int>(c, "--epochs", "train.epochs", "Epochs");
      value_flag<int>(c, "--batches-per-epoch", "train.batches_per_epoch", "Batches per epoch");
      value_flag<int>(c, "--levels", "network.levels", "Network levels");
      value_flag<int>(c, "--base-filters", "network.base_filters", "Filters at level 0");
      value_flag<double>(c, "--lr", "train.lr_init", "Initial learning rate");
      if (c.name == "cv") value_flag<int>(c, "-k,--folds", "k", "Number of folds");
    } else if (c.name == "predict") {
      list_flag(c, "--checkpoint", "checkpoints", "Checkpoint manifest(s), comma separated");
      string_flag(c, "--ensemble", "ensemble_manifest", "Manifest of a cv run; predicts with its fold models");
      bool_flag(c, "--tta", "prediction.mirror_tta", "Average over the 8 mirrorings");
      value_flag<int>(c, "--dropout-samples", "prediction.dropout_samples", "Stochastic dropout passes");
      string_flag(c, "--format", "format", "internal | nifti");
    } else if (c.name == "evaluate") {
      string_flag(c, "--pred", "pred_dir", "Directory of predicted <case>/seg");
      string_flag(c, "--ref", "ref_dir", "Directory of reference cases");
      value_flag<double>(c, "--percentile", "percentile", "Hausdorff percentile");
    } else if (c.name == "features") {
      string_flag(c, "--seg-dir", "seg_dir", "Segmentations to use instead of the case labels");
      string_flag(c, "--survival-csv", "survival_csv", "case_id,age,survival_days table");
    } else if (c.name == "survival-train") {
      string_flag(c, "--features", "features_csv", "features.csv");
      string_flag(c, "--survival-csv", "survival_csv", "case_id,age,survival_days table");
      list_flag(c, "--groups", "groups", "Feature groups: shape, firstorder, glcm, age, all");
      value_flag<int>(c, "--cv-folds", "cv_folds", "Also run k-fold cross-validation");
    } else if (c.name == "survival-predict") {
      string_flag(c, "--model", "model", "Survival model JSON");
      string_flag(c, "--features", "features_csv", "features.csv");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  int thread_count = 1;
  bool threads_given = false;
  if (threads) {
    thread_count = *threads;
    threads_given = true;
  } else if (const char* env = std::getenv("VOXELSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      std::fprintf(stderr, "voxelseg: VOXELSEG_THREADS must be a positive integer, got '%s'\n", env);
      return 2;
    }
    thread_count = static_cast<int>(v);
    threads_given = true;
  }

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    vxs_run* run = nullptr;
    vxs_status s = vxs_run_create(c.name.c_str(), &run);
    if (s != VXS_OK) return report(s);
    if (!c.config_path.empty()) s = vxs_run_load_config(run, c.config_path.c_str());
    for (const auto& kv : c.sets) {
      if (s != VXS_OK) break;
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) {
        std::fprintf(stderr, "voxelseg: --set expects path=value, got '%s'\n", kv.c_str());
        vxs_run_free(run);
        return 2;
      }
      const std::string path = kv.substr(0, eq), value = kv.substr(eq + 1);
      s = vxs_run_override(run, path.c_str(), value.c_str());
      if (s != VXS_OK) s = vxs_run_override_string(run, path.c_str(), value.c_str());
    }
    for (const auto& o : c.overrides) {
      if (s != VXS_OK) break;
      s = o.as_json ? vxs_run_override(run, o.path.c_str(), o.value.c_str())
                    : vxs_run_override_string(run, o.path.c_str(), o.value.c_str());
    }
    if (s == VXS_OK && threads_given) s = vxs_run_override(run, "threads", std::to_string(thread_count).c_str());
    if (s == VXS_OK) s = vxs_run_execute(run);
    if (s != VXS_OK) {
      const int code = report(s);
      vxs_run_free(run);
      return code;
    }
    std::printf("%s: done\n", c.name.c_str());
    vxs_run_free(run);
  }
  return 0;
}
