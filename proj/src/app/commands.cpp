#include "app/commands.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "app/synth.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "infer/metrics.hpp"
#include "infer/predict.hpp"
#include "radiomics/radiomics.hpp"
#include "survival/survival.hpp"
#include "train/train.hpp"
#include "volume/io.hpp"

namespace voxelseg::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string format_number(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : std::string("nan");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> csv_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::istringstream in(read_text_file(path));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// Wraps one command's config: every key must be consumed by the command,
// so typos surface as "<key>: unknown key" before anything runs.
class ConfigReader {
 public:
  explicit ConfigReader(const json& j) : j_(j) {
    require(j.is_object(), ErrorCode::ConfigError, "config: expected a JSON object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigError, key + ": " + e.what());
    }
  }

  std::string path(const std::string& key, bool must_exist = true) {
    require(has(key), ErrorCode::ConfigError, key + ": required");
    const std::string p = get<std::string>(key, "");
    require(!p.empty(), ErrorCode::ConfigError, key + ": must be a nonempty path");
    if (must_exist) require(fs::exists(p), ErrorCode::IoError, key + ": '" + p + "' does not exist");
    return p;
  }

  const json& section(const std::string& key) {
    static const json empty = json::object();
    return has(key) ? j_.at(key) : empty;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(used_.count(it.key()) > 0, ErrorCode::ConfigError, it.key() + ": unknown key for this command");
  }

 private:
  const json& j_;
  std::set<std::string> used_;
};

CaseFormat parse_format(const std::string& s) {
  if (s == "internal") return CaseFormat::Internal;
  if (s == "nifti") return CaseFormat::Nifti;
  fail(ErrorCode::ConfigError, "format: expected 'internal' or 'nifti', got '" + s + "'");
}

// Case directories with every modality present, checked before any output.
std::vector<fs::path> require_cases(const fs::path& dir) {
  auto cases = list_case_dirs(dir);
  require(!cases.empty(), ErrorCode::EmptyDataset, "no case directories under '" + dir.string() + "'");
  for (const auto& c : cases)
    for (const char* m : kModalityNames)
      VOXELSEG_REQUIRE(find_image_file(c, m).has_value(), ErrorCode::MissingModality,
                       "case '" + c.filename().string() + "' has no " + m + " image");
  return cases;
}

std::vector<MultiModalCase> load_cases(const std::vector<fs::path>& dirs, bool preprocessed) {
  std::vector<MultiModalCase> out;
  for (const auto& d : dirs) {
    MultiModalCase c = read_case(d);
    out.push_back(preprocessed ? std::move(c) : preprocess_case(c));
  }
  return out;
}

void attach_survival(std::vector<MultiModalCase>& cases, const std::optional<fs::path>& csv) {
  if (!csv) return;
  const auto records = read_survival_csv(*csv);
  for (auto& c : cases)
    if (const auto it = records.find(c.id); it != records.end()) {
      c.age = it->second.age;
      c.survival_days = it->second.survival_days;
    }
}

void write_label(const fs::path& dir, const LabelMap& seg, const Spacing& spacing, CaseFormat format) {
  fs::create_directories(dir);
  if (format == CaseFormat::Nifti)
    write_nifti(dir / "seg.nii.gz", seg, spacing);
  else
    write_raw(dir / "seg.json", seg, spacing);
}

// Network + training settings: profile, then the network/train sections, then
// the top-level seed when given.
train::Profile resolve_profile(ConfigReader& r) {
  train::Profile p = train::profile_by_name(r.get<std::string>("profile", "desk"));
  try {
    nn::from_json(r.section("network"), p.net);
    train::from_json(r.section("train"), p.train);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, e.what());
  }
  if (r.has("seed")) p.train.seed = r.get<std::uint64_t>("seed", 0);
  p.net.validate();
  p.train.validate(p.net);
  return p;
}

json profile_json(const train::Profile& p) { return {{"network", p.net}, {"train", p.train}}; }

json metrics_row_json(const eval::MetricsReport& m) {
  json j = json::object();
  for (std::size_t i = 0; i < eval::kEvalRegions.size(); ++i) {
    const auto& r = m.regions[i];
    j[region_name(eval::kEvalRegions[i])] = {{"dice", r.dice},   {"sensitivity", r.sensitivity}, {"specificity", r.specificity},
                                              {"ppv", r.ppv},     {"hausdorff95", r.hausdorff}};
  }
  return j;
}

std::string metrics_csv_header() {
  std::string h = "case_id";
  for (Region reg : eval::kEvalRegions)
    for (const char* m : {"dice", "sensitivity", "specificity", "ppv", "hausdorff95"}) h += std::string(",") + region_name(reg) + "_" + m;
  return h + "\n";
}

std::string metrics_csv_row(const std::string& id, const eval::MetricsReport& m) {
  std::string row = id;
  for (const auto& r : m.regions)
    for (double v : {r.dice, r.sensitivity, r.specificity, r.ppv, r.hausdorff}) row += "," + format_number(v);
  return row + "\n";
}

// Per-region summary of a metric table (case order irrelevant).
json summary_of(const std::vector<eval::MetricsReport>& reports) {
  json out = json::object();
  for (std::size_t i = 0; i < eval::kEvalRegions.size(); ++i) {
    std::vector<double> dice, sens, spec, ppv, hd;
    for (const auto& r : reports) {
      dice.push_back(r.regions[i].dice);
      sens.push_back(r.regions[i].sensitivity);
      spec.push_back(r.regions[i].specificity);
      ppv.push_back(r.regions[i].ppv);
      hd.push_back(r.regions[i].hausdorff);
    }
    out[region_name(eval::kEvalRegions[i])] = {{"dice", eval::summary_json(eval::summarize(dice))},
                                                {"sensitivity", eval::summary_json(eval::summarize(sens))},
                                                {"specificity", eval::summary_json(eval::summarize(spec))},
                                                {"ppv", eval::summary_json(eval::summarize(ppv))},
                                                {"hausdorff95", eval::summary_json(eval::summarize(hd))}};
  }
  return out;
}

// Feature table: case_id column, then named feature columns.
struct FeatureTable {
  std::vector<std::string> names;
  std::vector<std::string> ids;
  std::vector<std::vector<std::optional<double>>> rows;
};

FeatureTable read_feature_csv(const fs::path& path) {
  const auto lines = csv_lines(path);
  require(!lines.empty(), ErrorCode::ParseError, path.string() + ": empty feature table");
  FeatureTable t;
  auto header = split_csv_line(lines[0]);
  require(!header.empty() && header[0] == "case_id", ErrorCode::ParseError, path.string() + ": first column must be case_id");
  t.names.assign(header.begin() + 1, header.end());
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto f = split_csv_line(lines[l]);
    const std::string where = path.string() + ":" + std::to_string(l + 1);
    require(f.size() == header.size(), ErrorCode::ParseError,
            where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    t.ids.push_back(f[0]);
    std::vector<std::optional<double>> row;
    for (std::size_t c = 1; c < f.size(); ++c) {
      if (f[c].empty()) {
        row.emplace_back();
        continue;
      }
      double v = 0.0;
      const auto [p, ec] = std::from_chars(f[c].data(), f[c].data() + f[c].size(), v);
      require(ec == std::errc() && p == f[c].data() + f[c].size(), ErrorCode::ParseError,
              where + ": column '" + header[c] + "' is not a number: '" + f[c] + "'");
      row.emplace_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// Rows x selected columns; a missing value in a selected column is an error.
survival::FeatureMatrix select_features(const FeatureTable& t, const std::vector<std::string>& columns,
                                        const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> col_index;
  for (const auto& name : columns) {
    const auto it = std::find(t.names.begin(), t.names.end(), name);
    require(it != t.names.end(), ErrorCode::DimensionMismatch, "feature table has no column '" + name + "'");
    col_index.push_back(static_cast<std::size_t>(it - t.names.begin()));
  }
  survival::FeatureMatrix X(rows.size(), columns.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& v = t.rows[rows[r]][col_index[c]];
      require(v.has_value(), ErrorCode::InvalidArgument,
              "case '" + t.ids[rows[r]] + "' has no value for feature '" + columns[c] + "'");
      X.at(r, c) = *v;
    }
  return X;
}

struct Output {
  fs::path dir;
  std::vector<std::string> files;
  void add(const fs::path& p) { files.push_back(fs::relative(p, dir).generic_string()); }
};

// ---- commands ------------------------------------------------------------------------
// Each returns a function that performs the run; everything before the
// return is validation.

using Runner = std::function<json(Output&)>;

Runner plan_synth(ConfigReader& r) {
  SyntheticCaseSpec spec;
  try {
    from_json(r.section("synth"), spec);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("synth: ") + e.what());
  }
  if (r.has("seed")) spec.seed = r.get<std::uint64_t>("seed", 0);
  spec.validate();
  const int n = r.get<int>("n_cases", 4);
  require(n >= 1, ErrorCode::ConfigError, "n_cases must be >= 1");
  const CaseFormat format = parse_format(r.get<std::string>("format", "internal"));
  return [=](Output& out) {
    std::map<std::string, SurvivalRecord> records;
    for (int i = 0; i < n; ++i) {
      const MultiModalCase c = synth_case(spec, i);
      write_case(c, out.dir / c.id, format);
      out.add(out.dir / c.id);
      records[c.id] = {c.age, c.survival_days};
    }
    write_survival_csv(out.dir / "survival.csv", records);
    out.add(out.dir / "survival.csv");
    return json{{"synth", spec}, {"n_cases", n}};
  };
}

Runner plan_preprocess(ConfigReader& r) {
  const fs::path input = r.path("input_dir");
  const auto dirs = require_cases(input);
  const CaseFormat format = parse_format(r.get<std::string>("format", "internal"));
  return [=](Output& out) {
    json cases = json::array();
    for (const auto& d : dirs) {
      const MultiModalCase raw = read_case(d);
      const MultiModalCase c = preprocess_case(raw);
      write_case(c, out.dir / c.id, format);
      out.add(out.dir / c.id);
      cases.push_back({{"id", c.id}, {"brain_voxels", compute_brain_mask(raw).count()}});
    }
    if (fs::exists(input / "survival.csv")) {
      fs::copy_file(input / "survival.csv", out.dir / "survival.csv", fs::copy_options::overwrite_existing);
      out.add(out.dir / "survival.csv");
    }
    return json{{"cases", cases}};
  };
}

Runner plan_train(ConfigReader& r) {
  const fs::path input = r.path("input_dir");
  const bool preprocessed = r.get<bool>("preprocessed", true);
  const train::Profile p = resolve_profile(r);
  const auto dirs = require_cases(input);
  return [=](Output& out) {
    const auto data = load_cases(dirs, preprocessed);
    train::TrainOptions opt;
    opt.out_dir = out.dir.string();
    const auto result = train::train(p.train, p.net, data, opt);
    for (const auto& c : result.checkpoints) {
      out.add(c);
      out.add(fs::path(c).replace_extension(".bin"));
    }
    out.add(out.dir / "metrics.jsonl");
    json losses = json::array();
    for (const auto& e : result.log) losses.push_back(e.mean_loss);
    return json{{"resolved", profile_json(p)},
                {"final_checkpoint", fs::relative(result.checkpoints.back(), out.dir).generic_string()},
                {"epoch_losses", losses},
                {"cases", data.size()}};
  };
}

Runner plan_predict(ConfigReader& r) {
  const fs::path input = r.path("input_dir");
  const bool preprocessed = r.get<bool>("preprocessed", true);
  eval::PredictionConfig pc;
  try {
    eval::from_json(r.section("prediction"), pc);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("prediction: ") + e.what());
  }
  if (r.has("checkpoints")) pc.ensemble_checkpoints = r.get<std::vector<std::string>>("checkpoints", {});
  if (r.has("ensemble_manifest")) {
    // Manifest of a cv run; its checkpoints are relative to the manifest.
    const fs::path m = r.path("ensemble_manifest");
    json cv;
    try {
      cv = json::parse(read_text_file(m));
      for (const auto& c : cv.at("result").at("ensemble_checkpoints"))
        pc.ensemble_checkpoints.push_back((m.parent_path() / c.get<std::string>()).string());
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigError, "ensemble_manifest: " + m.string() + ": " + e.what());
    }
  }
  if (r.has("seed")) pc.seed = r.get<std::uint64_t>("seed", 0);
  pc.validate();
  require(!pc.ensemble_checkpoints.empty(), ErrorCode::ConfigError, "checkpoints: at least one checkpoint is required");
  for (const auto& c : pc.ensemble_checkpoints)
    require(fs::exists(c), ErrorCode::IoError, "checkpoints: '" + c + "' does not exist");
  const CaseFormat format = parse_format(r.get<std::string>("format", "internal"));
  const auto dirs = require_cases(input);
  const auto models = std::make_shared<std::vector<eval::Model>>(eval::load_ensemble(pc.ensemble_checkpoints));
  return [=](Output& out) {
    json cases = json::array();
    for (const auto& d : dirs) {
      MultiModalCase c = read_case(d);
      if (!preprocessed) c = preprocess_case(c);
      const auto pred = eval::predict(c, *models, pc);
      write_label(out.dir / c.id, pred.labels, c.spacing(), format);
      out.add(out.dir / c.id);
      json counts = json::object();
      for (Region reg : eval::kEvalRegions) counts[region_name(reg)] = region_mask(pred.labels, reg).count();
      cases.push_back({{"id", c.id}, {"voxels", counts}});
    }
    return json{{"prediction", pc}, {"cases", cases}};
  };
}

Runner plan_evaluate(ConfigReader& r) {
  const fs::path pred_dir = r.path("pred_dir");
  const fs::path ref_dir = r.path("ref_dir");
  const double percentile = r.get<double>("percentile", 95.0);
  require(percentile >= 0.0 && percentile <= 100.0, ErrorCode::ConfigError, "percentile must be in [0, 100]");
  const auto refs = require_cases(ref_dir);
  std::vector<std::pair<fs::path, fs::path>> pairs;  // (pred seg, ref case)
  for (const auto& ref : refs) {
    const auto seg = find_image_file(pred_dir / ref.filename(), "seg");
    require(seg.has_value(), ErrorCode::IoError, "pred_dir has no segmentation for case '" + ref.filename().string() + "'");
    pairs.emplace_back(*seg, ref);
  }
  return [=](Output& out) {
    std::string csv = metrics_csv_header();
    std::vector<eval::MetricsReport> reports;
    json per_case = json::object();
    for (const auto& [seg_path, ref_dir_case] : pairs) {
      const MultiModalCase ref = read_case(ref_dir_case);
      require(ref.label.has_value(), ErrorCode::IoError, "reference case '" + ref.id + "' has no seg image");
      const LabelMap pred = read_label_map(seg_path);
      const auto m = eval::evaluate_case(pred, *ref.label, ref.spacing(), percentile);
      reports.push_back(m);
      csv += metrics_csv_row(ref.id, m);
      per_case[ref.id] = metrics_row_json(m);
    }
    write_text_file(out.dir / "metrics.csv", csv);
    out.add(out.dir / "metrics.csv");
    const json summary = summary_of(reports);
    write_text_file(out.dir / "summary.json", summary.dump(2) + "\n");
    out.add(out.dir / "summary.json");
    return json{{"percentile", percentile}, {"summary", summary}, {"cases", per_case}};
  };
}

Runner plan_features(ConfigReader& r) {
  const fs::path input = r.path("input_dir");
  const bool preprocessed = r.get<bool>("preprocessed", true);
  std::optional<fs::path> seg_dir;
  if (r.has("seg_dir")) seg_dir = r.path("seg_dir");
  std::optional<fs::path> survival_csv;
  if (r.has("survival_csv"))
    survival_csv = r.path("survival_csv");
  else if (fs::exists(input / "survival.csv"))
    survival_csv = input / "survival.csv";
  radiomics::GlcmConfig glcm;
  try {
    radiomics::from_json(r.section("glcm"), glcm);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("glcm: ") + e.what());
  }
  glcm.validate();
  const auto dirs = require_cases(input);
  if (seg_dir)
    for (const auto& d : dirs)
      require(find_image_file(*seg_dir / d.filename(), "seg").has_value(), ErrorCode::IoError,
              "seg_dir has no segmentation for case '" + d.filename().string() + "'");
  return [=](Output& out) {
    std::vector<MultiModalCase> cases = load_cases(dirs, preprocessed);
    attach_survival(cases, survival_csv);
    std::string csv = "case_id";
    for (const auto& n : radiomics::feature_names()) csv += "," + n;
    csv += ",age\n";
    json per_case = json::object();
    for (const auto& c : cases) {
      LabelMap seg;
      if (seg_dir) {
        seg = read_label_map(*find_image_file(*seg_dir / c.id, "seg"));
      } else {
        require(c.label.has_value(), ErrorCode::IoError, "case '" + c.id + "' has no seg image and no seg_dir was given");
        seg = *c.label;
      }
      const auto fv = radiomics::assemble_features(c, seg, c.age, glcm);
      csv += c.id;
      for (std::size_t i = 0; i < static_cast<std::size_t>(radiomics::kImageFeatureCount); ++i) csv += "," + format_number(fv.values[i]);
      csv += "," + (c.age ? format_number(*c.age) : std::string()) + "\n";
      json presence = json::object();
      for (const auto& [name, present] : fv.presence) presence[name] = present;
      per_case[c.id] = {{"presence", presence}, {"degenerate_glcm", fv.degenerate_glcm}, {"has_age", c.age.has_value()}};
    }
    write_text_file(out.dir / "features.csv", csv);
    out.add(out.dir / "features.csv");
    return json{{"glcm", glcm},
                {"image_features", radiomics::kImageFeatureCount},
                {"columns", radiomics::kImageFeatureCount + 1},
                {"survival_csv", survival_csv ? survival_csv->string() : std::string()},
                {"cases", per_case}};
  };
}

std::vector<std::string> group_columns(const std::vector<std::string>& groups) {
  const auto idx = radiomics::feature_group_indices(groups);
  const auto names = radiomics::feature_names();
  std::vector<std::string> cols;
  for (auto i : idx) cols.push_back(i < names.size() ? names[i] : "age");
  return cols;
}

Runner plan_survival_train(ConfigReader& r) {
  const fs::path features_csv = r.path("features_csv");
  const fs::path survival_csv = r.path("survival_csv");
  const auto groups = r.get<std::vector<std::string>>("groups", {"all"});
  survival::SurvivalConfig sc;
  try {
    survival::from_json(r.section("survival"), sc);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("survival: ") + e.what());
  }
  if (r.has("seed")) sc.seed = r.get<std::uint64_t>("seed", 0);
  sc.validate();
  const int cv_folds = r.get<int>("cv_folds", 0);
  require(cv_folds == 0 || cv_folds >= 2, ErrorCode::ConfigError, "cv_folds must be 0 (off) or >= 2");
  const auto columns = group_columns(groups);
  return [=](Output& out) {
    const FeatureTable table = read_feature_csv(features_csv);
    const auto records = read_survival_csv(survival_csv);
    std::vector<std::size_t> rows;
    std::vector<double> y;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < table.ids.size(); ++i)
      if (const auto it = records.find(table.ids[i]); it != records.end() && it->second.survival_days) {
        rows.push_back(i);
        y.push_back(*it->second.survival_days);
        ids.push_back(table.ids[i]);
      }
    require(rows.size() >= 2, ErrorCode::EmptyDataset,
            "survival-train needs at least 2 cases with survival_days, found " + std::to_string(rows.size()));
    const auto X = select_features(table, columns, rows);
    const auto model = survival::train_survival(X, y, sc, columns);
    const std::string path = survival::save_survival_model(out.dir.string(), "model", model);
    out.add(path);
    out.add(out.dir / "model.bin");
    std::vector<double> fit;
    for (std::size_t i = 0; i < X.rows; ++i) fit.push_back(survival::predict_combined(model, X.row_vector(i)));
    json result{{"survival", sc},
                {"groups", groups},
                {"n_features", columns.size()},
                {"n_cases", rows.size()},
                {"training_metrics", survival::metrics_json(survival::evaluate_survival(fit, y, sc.accuracy_bins))}};
    if (cv_folds > 0) {
      const auto cv = survival::cross_validate(X, y, cv_folds, sc);
      json j = survival::cv_json(cv);
      json oof = json::object();
      for (std::size_t i = 0; i < ids.size(); ++i) oof[ids[i]] = {{"fold", cv.folds[i]}, {"combined", cv.combined[i]}};
      j["predictions"] = oof;
      write_text_file(out.dir / "cv.json", j.dump(2) + "\n");
      out.add(out.dir / "cv.json");
      result["cv"] = j["mean"];
    }
    return result;
  };
}

Runner plan_survival_predict(ConfigReader& r) {
  const fs::path model_path = r.path("model");
  const fs::path features_csv = r.path("features_csv");
  const auto model = std::make_shared<survival::SurvivalModel>(survival::load_survival_model(model_path.string()));
  require(!model->feature_names.empty(), ErrorCode::CheckpointError, model_path.string() + ": model has no feature names");
  return [=](Output& out) {
    const FeatureTable table = read_feature_csv(features_csv);
    std::vector<std::size_t> rows(table.ids.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const auto X = select_features(table, model->feature_names, rows);
    std::string csv = "case_id,predicted_days\n";
    for (std::size_t i = 0; i < X.rows; ++i)
      csv += table.ids[i] + "," + format_number(survival::predict_combined(*model, X.row_vector(i))) + "\n";
    write_text_file(out.dir / "predictions.csv", csv);
    out.add(out.dir / "predictions.csv");
    return json{{"model", model_path.string()}, {"n_cases", X.rows}};
  };
}

Runner plan_cv(ConfigReader& r) {
  const fs::path input = r.path("input_dir");
  const bool preprocessed = r.get<bool>("preprocessed", true);
  const int k = r.get<int>("k", 5);
  const double percentile = r.get<double>("percentile", 95.0);
  const train::Profile p = resolve_profile(r);
  const auto dirs = require_cases(input);
  require(k >= 2 && static_cast<std::size_t>(k) <= dirs.size(), ErrorCode::ConfigError,
          "k must be in [2, number of cases = " + std::to_string(dirs.size()) + "]");
  return [=](Output& out) {
    const auto data = load_cases(dirs, preprocessed);
    const auto folds = survival::fold_assignment(data.size(), k, derive_seed(p.train.seed, 0x7365));
    std::string csv = "fold," + metrics_csv_header();
    std::vector<eval::MetricsReport> reports;
    json ensemble = json::array();
    for (int f = 0; f < k; ++f) {
      std::vector<MultiModalCase> tr;
      std::vector<const MultiModalCase*> te;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (folds[i] == f)
          te.push_back(&data[i]);
        else
          tr.push_back(data[i]);
      }
      train::TrainConfig tc = p.train;
      tc.seed = derive_seed(p.train.seed, static_cast<std::uint64_t>(f));
      train::TrainOptions opt;
      const fs::path fold_dir = out.dir / ("fold_" + std::to_string(f));
      opt.out_dir = fold_dir.string();
      const auto result = train::train(tc, p.net, tr, opt);
      const std::string ckpt = result.checkpoints.back();
      out.add(ckpt);
      out.add(fs::path(ckpt).replace_extension(".bin"));
      out.add(fold_dir / "metrics.jsonl");
      ensemble.push_back(fs::relative(ckpt, out.dir).generic_string());
      const auto models = eval::load_ensemble({ckpt});
      for (const MultiModalCase* c : te) {
        const auto pred = eval::predict(*c, models, {});
        write_label(fold_dir / "predictions" / c->id, pred.labels, c->spacing(), CaseFormat::Internal);
        out.add(fold_dir / "predictions" / c->id);
        if (!c->label) continue;
        const auto m = eval::evaluate_case(pred.labels, *c->label, c->spacing(), percentile);
        reports.push_back(m);
        csv += std::to_string(f) + "," + metrics_csv_row(c->id, m);
      }
    }
    write_text_file(out.dir / "cv_metrics.csv", csv);
    out.add(out.dir / "cv_metrics.csv");
    json fold_of = json::object();
    for (std::size_t i = 0; i < data.size(); ++i) fold_of[data[i].id] = folds[i];
    return json{{"resolved", profile_json(p)},
                {"k", k},
                {"folds", fold_of},
                {"ensemble_checkpoints", ensemble},
                {"summary", summary_of(reports)}};
  };
}

const std::map<std::string, Runner (*)(ConfigReader&)>& planners() {
  static const std::map<std::string, Runner (*)(ConfigReader&)> m{
      {"synth", plan_synth},
      {"preprocess", plan_preprocess},
      {"train", plan_train},
      {"predict", plan_predict},
      {"evaluate", plan_evaluate},
      {"features", plan_features},
      {"survival-train", plan_survival_train},
      {"survival-predict", plan_survival_predict},
      {"cv", plan_cv},
  };
  return m;
}

void set_path(json& root, const std::string& dotted, const json& value) {
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!key.empty(), ErrorCode::ConfigError, "override '" + dotted + "': empty path component");
    require(node->is_object(), ErrorCode::ConfigError, "override '" + dotted + "': '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth",    "preprocess",     "train",           "predict", "evaluate",
                                              "features", "survival-train", "survival-predict", "cv"};
  return names;
}

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::ConfigError:
    case ErrorCode::SpecError:
      return 2;
    case ErrorCode::NonFiniteGradient:
      return 4;
    case ErrorCode::IoError:
    case ErrorCode::CheckpointError:
      return 5;
    default:
      return 3;
  }
}

json merged_config(const RunRequest& request) {
  json config = request.config.is_null() ? json::object() : request.config;
  require(config.is_object(), ErrorCode::ConfigError, "config: expected a JSON object");
  for (const auto& [path, value] : request.overrides) set_path(config, path, value);
  return config;
}

json run_command(const RunRequest& request) {
  const auto& plans = planners();
  const auto plan = plans.find(request.command);
  require(plan != plans.end(), ErrorCode::ConfigError, "unknown command '" + request.command + "'");
  const json config = merged_config(request);

  ConfigReader reader(config);
  const int threads = reader.get<int>("threads", 1);
  require(threads >= 1, ErrorCode::ConfigError, "threads must be >= 1");
  const std::uint64_t seed = reader.get<std::uint64_t>("seed", 0);
  const fs::path out_dir = reader.path("out_dir", false);
  set_thread_count(threads);
  const Runner run = plan->second(reader);
  reader.finish();

  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::create_directories(out_dir);
  } catch (const fs::filesystem_error& e) {
    fail(ErrorCode::IoError, "out_dir: " + std::string(e.what()));
  }
  Output out{out_dir, {}};
  json result = run(out);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json overrides = json::object();
  for (const auto& [path, value] : request.overrides) overrides[path] = value;
  json manifest{{"command", request.command},
                {"version", kVersion},
                {"seed", seed},
                {"threads", threads},
                {"config", config},
                {"cli_overrides", overrides},
                {"outputs", out.files},
                {"result", result},
                {"timings", {{"total_seconds", seconds}}}};
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace voxelseg::app
