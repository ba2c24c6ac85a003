#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "app/commands.hpp"
#include "doctest.h"
#include "radiomics/radiomics.hpp"
#include "survival/survival.hpp"
#include "volume/io.hpp"
#include "voxelseg/voxelseg.h"

using namespace voxelseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("voxelseg_app_" + name);
  fs::remove_all(p);
  return p;
}

json run(const std::string& command, json config) {
  app::RunRequest r;
  r.command = command;
  r.config = std::move(config);
  return app::run_command(r);
}

ErrorCode code_of(const std::string& command, const json& config) {
  try {
    run(command, config);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

// Small synthetic dataset shared by the tests below, generated once.
const fs::path& dataset() {
  static const fs::path root = [] {
    const fs::path r = scratch("dataset");
    run("synth", {{"out_dir", (r / "raw").string()}, {"n_cases", 3}, {"seed", 2}, {"synth", {{"shape", {16, 16, 16}}}}});
    run("preprocess", {{"input_dir", (r / "raw").string()}, {"out_dir", (r / "pre").string()}});
    return r;
  }();
  return root;
}

}  // namespace

TEST_CASE("exit codes by error class") {
  CHECK(app::exit_code_for(ErrorCode::ConfigError) == 2);
  CHECK(app::exit_code_for(ErrorCode::SpecError) == 2);
  CHECK(app::exit_code_for(ErrorCode::MissingModality) == 3);
  CHECK(app::exit_code_for(ErrorCode::EmptyDataset) == 3);
  CHECK(app::exit_code_for(ErrorCode::NonFiniteGradient) == 4);
  CHECK(app::exit_code_for(ErrorCode::IoError) == 5);
  CHECK(app::exit_code_for(ErrorCode::CheckpointError) == 5);
  CHECK(vxs_exit_code(VXS_OK) == 0);
  CHECK(vxs_exit_code(VXS_ERR_CONFIG) == 2);
  CHECK(vxs_exit_code(VXS_ERR_MISSING_MODALITY) == 3);
  CHECK(vxs_exit_code(VXS_ERR_NON_FINITE_GRADIENT) == 4);
  CHECK(vxs_exit_code(VXS_ERR_IO) == 5);
  CHECK(std::string(vxs_status_name(VXS_ERR_DEGENERATE_GLCM)) == "DegenerateGlcm");
  CHECK(std::string(vxs_status_name(VXS_ERR_SPEC)) == "SpecError");
}

TEST_CASE("overrides merge by dotted path and win over the file") {
  app::RunRequest r;
  r.config = {{"train", {{"epochs", 5}, {"seed", 1}}}};
  r.overrides = {{"train.epochs", 2}, {"network.levels", 2}};
  const json m = app::merged_config(r);
  CHECK(m["train"]["epochs"] == 2);
  CHECK(m["train"]["seed"] == 1);
  CHECK(m["network"]["levels"] == 2);
  r.overrides = {{"train.epochs.x", 1}};
  CHECK_THROWS_AS(app::merged_config(r), Error);
}

TEST_CASE("invalid config fails before any output exists") {
  const fs::path out = scratch("invalid");
  const std::string pre = (dataset() / "pre").string();
  CHECK(code_of("train", {{"input_dir", pre}, {"out_dir", out.string()}, {"train", {{"epochz", 1}}}}) == ErrorCode::ConfigError);
  CHECK(code_of("train", {{"input_dir", pre}, {"out_dir", out.string()}, {"colour", 1}}) == ErrorCode::ConfigError);
  CHECK(code_of("train", {{"input_dir", pre}, {"out_dir", out.string()}, {"network", {{"levels", 0}}}}) == ErrorCode::ConfigError);
  CHECK(code_of("train", {{"input_dir", "/nonexistent"}, {"out_dir", out.string()}}) == ErrorCode::IoError);
  CHECK(code_of("synth", {{"out_dir", out.string()}, {"synth", {{"r_enh", 9.0}}}}) == ErrorCode::SpecError);
  CHECK(code_of("bogus", {{"out_dir", out.string()}}) == ErrorCode::ConfigError);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("preprocess writes normalized volumes and is deterministic") {
  const fs::path pre = dataset() / "pre";
  const auto cases = list_case_dirs(pre);
  REQUIRE(cases.size() == 3);
  const MultiModalCase c = read_case(cases[0]);
  for (const auto& vol : c.modalities) {
    for (double v : vol.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(fs::exists(pre / "survival.csv"));

  const fs::path again = scratch("pre_again");
  run("preprocess", {{"input_dir", (dataset() / "raw").string()}, {"out_dir", again.string()}});
  for (const auto& entry : fs::recursive_directory_iterator(pre)) {
    if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
    const fs::path twin = again / fs::relative(entry.path(), pre);
    REQUIRE(fs::exists(twin));
    CHECK(slurp(entry.path()) == slurp(twin));
  }
  fs::remove_all(again);
}

TEST_CASE("preprocess rejects a case with a missing modality without writing") {
  const fs::path raw = scratch("missing_raw"), out = scratch("missing_out");
  fs::copy(dataset() / "raw", raw, fs::copy_options::recursive);
  for (const auto& e : fs::directory_iterator(raw / "case_001"))
    if (e.path().filename().string().rfind("flair", 0) == 0) fs::remove(e.path());
  CHECK(code_of("preprocess", {{"input_dir", raw.string()}, {"out_dir", out.string()}}) == ErrorCode::MissingModality);
  CHECK_FALSE(fs::exists(out));
  fs::remove_all(raw);
}

TEST_CASE("train, predict, evaluate and features pipeline") {
  const fs::path root = scratch("pipeline");
  const std::string pre = (dataset() / "pre").string();
  app::RunRequest tr;
  tr.command = "train";
  tr.config = {{"input_dir", pre}, {"out_dir", (root / "train").string()}, {"seed", 3}, {"train", {{"epochs", 5}}}};
  tr.overrides = {{"train.epochs", 2}, {"network.levels", 2}, {"train.patch_size", {16, 16, 16}}, {"train.batches_per_epoch", 2}};
  const json tm = app::run_command(tr);
  CHECK(tm["cli_overrides"]["train.epochs"] == 2);
  CHECK(tm["result"]["resolved"]["train"]["epochs"] == 2);
  CHECK(tm["result"]["resolved"]["train"]["seed"] == 3);
  CHECK(fs::exists(root / "train" / "ckpt_epoch_2.json"));
  CHECK(fs::exists(root / "train" / "ckpt_epoch_2.bin"));
  std::istringstream log(slurp(root / "train" / "metrics.jsonl"));
  int lines = 0;
  for (std::string l; std::getline(log, l);) lines += !l.empty();
  CHECK(lines == 2);
  const json manifest = json::parse(slurp(root / "train" / "manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["config"]["network"]["levels"] == 2);

  run("predict", {{"input_dir", pre}, {"out_dir", (root / "pred").string()},
                  {"checkpoints", {(root / "train" / "ckpt_epoch_2.json").string()}}});
  for (const auto& c : list_case_dirs(pre)) CHECK(find_image_file(root / "pred" / c.filename(), "seg").has_value());

  // Evaluating the references against themselves scores perfectly.
  const fs::path self_pred = root / "self";
  for (const auto& c : list_case_dirs(pre)) {
    fs::create_directories(self_pred / c.filename());
    Spacing sp;
    const LabelMap l = read_label_map(*find_image_file(c, "seg"), &sp);
    write_raw(self_pred / c.filename() / "seg.json", l, sp);
  }
  const json ev = run("evaluate", {{"pred_dir", self_pred.string()}, {"ref_dir", pre}, {"out_dir", (root / "eval").string()}});
  std::istringstream csv(slurp(root / "eval" / "metrics.csv"));
  std::string header, row;
  std::getline(csv, header);
  int rows = 0;
  while (std::getline(csv, row)) {
    std::vector<std::string> f;
    std::istringstream cells(row);
    for (std::string cell; std::getline(cells, cell, ',');) f.push_back(cell);
    REQUIRE(f.size() == 16);
    for (int region = 0; region < 3; ++region) CHECK(f[1 + 5 * region] == "1");
    ++rows;
  }
  CHECK(rows == 3);
  CHECK(ev["result"]["summary"]["whole"]["dice"]["mean"] == 1.0);

  run("features", {{"input_dir", pre}, {"out_dir", (root / "features").string()}});
  std::istringstream fcsv(slurp(root / "features" / "features.csv"));
  std::getline(fcsv, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 518);  // case_id + 517 image features + age
  std::getline(fcsv, row);
  CHECK(std::count(row.begin(), row.end(), ',') == 518);
  CHECK(row.back() != ',');  // age present from survival.csv
  fs::remove_all(root);
}

TEST_CASE("survival train and predict through the C API") {
  const fs::path root = scratch("survival");
  fs::create_directories(root);
  // A synthetic feature table: days driven by the first feature.
  const auto names = radiomics::feature_names();
  std::string csv = "case_id";
  for (const auto& n : names) csv += "," + n;
  csv += ",age\n";
  std::map<std::string, SurvivalRecord> records;
  for (int i = 0; i < 12; ++i) {
    const std::string id = "c" + std::to_string(i);
    csv += id;
    for (std::size_t f = 0; f < names.size(); ++f) csv += "," + std::to_string(f == 0 ? i : (i * 7 + f) % 5);
    csv += "," + std::to_string(40 + i) + "\n";
    records[id] = {40.0 + i, 100.0 + 50.0 * i};
  }
  write_text_file(root / "features.csv", csv);
  write_survival_csv(root / "survival.csv", records);

  vxs_run* r = nullptr;
  REQUIRE(vxs_run_create("survival-train", &r) == VXS_OK);
  const json cfg{{"features_csv", (root / "features.csv").string()},
                 {"survival_csv", (root / "survival.csv").string()},
                 {"out_dir", (root / "model").string()},
                 {"groups", {"shape", "age"}},
                 {"survival", {{"rfr", {{"n_trees", 30}}}, {"mlp", {{"n_members", 2}, {"epochs", 5}}}}}};
  REQUIRE(vxs_run_set_config(r, cfg.dump().c_str()) == VXS_OK);
  CHECK(vxs_run_manifest(r) == nullptr);
  CHECK(vxs_run_override(r, "survival.mlp.units", "not json") == VXS_ERR_CONFIG);
  REQUIRE(vxs_run_override(r, "survival.mlp.units", "8") == VXS_OK);
  REQUIRE(vxs_run_execute(r) == VXS_OK);
  const json manifest = json::parse(vxs_run_manifest(r));
  CHECK(manifest["result"]["n_features"] == 66);
  CHECK(manifest["cli_overrides"]["survival.mlp.units"] == 8);
  vxs_run_free(r);

  vxs_survival_model* m = nullptr;
  REQUIRE(vxs_survival_model_load((root / "model" / "model.json").string().c_str(), &m) == VXS_OK);
  REQUIRE(vxs_survival_model_num_features(m) == 66);
  CHECK(std::string(vxs_survival_model_feature_name(m, 65)) == "age");
  CHECK(vxs_survival_model_feature_name(m, 66) == nullptr);
  std::vector<double> x(66, 1.0);
  double days = 0.0;
  CHECK(vxs_survival_model_predict(m, x.data(), 66, &days) == VXS_OK);
  const auto direct = survival::load_survival_model((root / "model" / "model.json").string());
  CHECK(days == survival::predict_combined(direct, x));
  CHECK(vxs_survival_model_predict(m, x.data(), 65, &days) == VXS_ERR_DIMENSION_MISMATCH);
  CHECK(std::string(vxs_last_error()).find("DimensionMismatch") == 0);
  vxs_survival_model_free(m);

  REQUIRE(vxs_run_create("survival-predict", &r) == VXS_OK);
  REQUIRE(vxs_run_override_string(r, "model", (root / "model" / "model.json").string().c_str()) == VXS_OK);
  REQUIRE(vxs_run_override_string(r, "features_csv", (root / "features.csv").string().c_str()) == VXS_OK);
  REQUIRE(vxs_run_override_string(r, "out_dir", (root / "pred").string().c_str()) == VXS_OK);
  REQUIRE(vxs_run_execute(r) == VXS_OK);
  vxs_run_free(r);
  std::istringstream pred(slurp(root / "pred" / "predictions.csv"));
  std::string line;
  std::getline(pred, line);
  CHECK(line == "case_id,predicted_days");
  int n = 0;
  while (std::getline(pred, line)) ++n;
  CHECK(n == 12);
  fs::remove_all(root);
}

TEST_CASE("C API argument checking") {
  vxs_run* r = nullptr;
  CHECK(vxs_run_create("nope", &r) == VXS_ERR_CONFIG);
  CHECK(r == nullptr);
  CHECK(vxs_run_create(nullptr, &r) == VXS_ERR_INVALID_ARGUMENT);
  CHECK(vxs_set_threads(0) == VXS_ERR_INVALID_ARGUMENT);
  CHECK(vxs_set_threads(1) == VXS_OK);
  CHECK(std::string(vxs_last_error()).empty());
  vxs_survival_model* m = nullptr;
  CHECK(vxs_survival_model_load("/nonexistent/model.json", &m) == VXS_ERR_CHECKPOINT);
  CHECK(m == nullptr);
  std::size_t n = 0;
  for (const char* const* c = vxs_commands(); *c; ++c) ++n;
  CHECK(n == app::command_names().size());
}

TEST_CASE("segmentation model handle softmax") {
  const fs::path root = scratch("seg_handle");
  run("train", {{"input_dir", (dataset() / "pre").string()},
                {"out_dir", root.string()},
                {"network", {{"levels", 2}, {"base_filters", 4}}},
                {"train", {{"epochs", 1}, {"batches_per_epoch", 1}, {"patch_size", {8, 8, 8}}}}});
  const std::string ckpt = (root / "ckpt_epoch_1.json").string();
  const char* paths[] = {ckpt.c_str(), ckpt.c_str()};
  vxs_seg_model* m = nullptr;
  REQUIRE(vxs_seg_model_load(paths, 2, &m) == VXS_OK);
  std::vector<float> in(4 * 5 * 6 * 7), out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>((i * 37) % 11) / 11.0f;
  REQUIRE(vxs_seg_model_softmax(m, in.data(), 5, 6, 7, out.data()) == VXS_OK);
  for (std::size_t v = 0; v < 5 * 6 * 7; ++v) {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += out[k * 210 + v];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  const fs::path case_dir = list_case_dirs(dataset() / "pre")[0];
  REQUIRE(vxs_seg_model_predict_case(m, case_dir.string().c_str(), (root / "pred").string().c_str()) == VXS_OK);
  CHECK(fs::exists(root / "pred" / "seg.json"));
  vxs_seg_model_free(m);
  fs::remove_all(root);
}
