#include "posegraph/app.hpp"

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "posegraph/conv.hpp"
#include "posegraph/data.hpp"
#include "posegraph/detector.hpp"
#include "posegraph/eval.hpp"
#include "posegraph/selftest.hpp"
#include "posegraph/serialize.hpp"
#include "posegraph/spatial.hpp"
#include "posegraph/train.hpp"

namespace posegraph {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string radii_string(const std::vector<double>& radii) {
  std::vector<std::string> parts;
  for (double r : radii) parts.push_back(format_double(r));
  return join(parts, ',');
}

void write_manifest(const fs::path& out, json manifest, const ConfigMap& config) {
  manifest["config_hash"] = config_hash(config);
  write_text_file(out / "manifest.json", manifest.dump(2) + "\n");
  write_text_file(out / "config.ini", format_ini(config));
}

json read_manifest(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw Error(path.string() + ": malformed manifest: " + e.what());
  }
}

ConfigMap section(const ConfigMap& config, const std::string& prefix) {
  ConfigMap out;
  for (const auto& [k, v] : config) {
    if (k.rfind(prefix, 0) == 0) out[k] = v;
  }
  return out;
}

const std::set<std::string> kStage1TrainKeys = {
    "train.learning_rate", "train.momentum",   "train.batch_size", "train.detector_epochs",
    "train.target_sigma",  "train.flip_prob",  "train.scale_min",  "train.scale_max",
    "train.seed",          "train.validation_fraction", "train.dataset_hash"};

ConfigMap stage1_keys(const ConfigMap& config) {
  ConfigMap out = section(config, "detector.");
  for (const auto& k : kStage1TrainKeys) {
    if (auto it = config.find(k); it != config.end()) out.insert(*it);
  }
  return out;
}

// A model file with a spatial block holds the unified model.
bool is_pose_model(const ParamFile& file) {
  return parse_ini(file.meta, "model meta").count("spatial.kernel_size") > 0;
}

std::vector<std::string> joint_names(int count) {
  const JointSchema schema = JointSchema::upper_body();
  if (schema.size() == count) return schema.names;
  std::vector<std::string> names;
  for (int j = 0; j < count; ++j) names.push_back("joint" + std::to_string(j));
  return names;
}

Dataset load_dataset_for(const ConfigMap& config, const std::string& key) {
  const std::string& dir = get_string(config, key);
  if (dir.empty()) throw Error("config key '" + key + "' must name a dataset directory");
  return read_dataset(dir);
}

}  // namespace

ConfigMap default_run_config() {
  ConfigMap c = SyntheticSceneConfig{}.to_config();
  c["data.count"] = "100";
  c["data.seed"] = "1";
  c["data.maxval"] = "65535";
  c.merge(DetectorConfig{}.to_config());
  c.merge(SpatialConfig{}.to_config());
  c.merge(TrainConfig{}.to_config());
  c["train.dataset"] = "";
  c["train.cache_dir"] = "";
  c["train.resume"] = "false";
  c["eval.dataset"] = "";
  c["eval.models"] = "";
  c["eval.tags"] = "";
  c["eval.radii"] = radii_string(default_radii());
  c["infer.model"] = "";
  c["infer.image"] = "";
  c["infer.torso"] = "";
  c["infer.dump_heatmaps"] = "true";
  return c;
}

ConfigMap resolve_config(const RunOptions& options) {
  ConfigMap config = default_run_config();
  const std::set<std::string> known = [&] {
    std::set<std::string> k;
    for (const auto& [key, v] : config) k.insert(key);
    return k;
  }();
  auto set_checked = [&](const std::string& key, const std::string& value, const std::string& where) {
    if (!known.count(key)) throw Error(where + ": unknown configuration key '" + key + "'");
    config[key] = value;
  };
  if (!options.config_path.empty()) {
    const ConfigMap file =
        parse_ini(read_text_file(options.config_path), options.config_path.string());
    for (const auto& [k, v] : file) set_checked(k, v, options.config_path.string());
  }
  if (options.seed) {
    config["data.seed"] = std::to_string(*options.seed);
    config["train.seed"] = std::to_string(*options.seed);
  }
  for (const auto& o : options.overrides) {
    ConfigMap one;
    apply_override(one, o);
    for (const auto& [k, v] : one) set_checked(k, v, "--set " + o);
  }
  return config;
}

std::string stage1_hash(const ConfigMap& config) { return config_hash(stage1_keys(config)); }

std::string stage2_hash(const ConfigMap& config) {
  ConfigMap keys = stage1_keys(config);
  keys.merge(section(config, "spatial."));
  for (const char* k : {"train.spatial_learning_rate", "train.spatial_epochs"}) {
    keys[k] = config.at(k);
  }
  return config_hash(keys);
}

// ---------------------------------------------------------------------------

void cmd_gen(const ConfigMap& config, const fs::path& out) {
  const SyntheticSceneConfig scene = SyntheticSceneConfig::from_config(config);
  const int count = get_int(config, "data.count");
  const std::uint64_t seed = std::stoull(get_string(config, "data.seed"));
  const Dataset ds = generate_dataset(scene, count, seed);
  fs::create_directories(out);
  write_dataset(out, ds, get_int(config, "data.maxval"));
  const ConfigMap data = section(config, "data.");
  write_manifest(out,
                 {{"command", "gen"},
                  {"seed", seed},
                  {"count", count},
                  {"data_hash", config_hash(data)}},
                 data);
}

void cmd_train(const ConfigMap& config, const fs::path& out) {
  const fs::path data_dir = get_string(config, "train.dataset");
  const Dataset ds = load_dataset_for(config, "train.dataset");
  // The dataset's own manifest, when present, pins its contents for resume.
  ConfigMap hashed = config;
  if (fs::exists(data_dir / "manifest.json")) {
    hashed["train.dataset_hash"] = read_manifest(data_dir / "manifest.json").value("config_hash", "");
  }
  const DetectorConfig det_cfg = DetectorConfig::from_config(config);
  const SpatialConfig sp_cfg = SpatialConfig::from_config(config);
  TrainConfig tr = TrainConfig::from_config(config);
  tr.threads = threads_from_env();
  tr.cache_dir = get_string(config, "train.cache_dir").empty()
                     ? out / "cache"
                     : fs::path(get_string(config, "train.cache_dir"));
  if (det_cfg.num_joints != ds.schema.size()) {
    throw Error("detector.num_joints is " + std::to_string(det_cfg.num_joints) +
                " but the dataset has " + std::to_string(ds.schema.size()) + " joints");
  }
  fs::create_directories(out);

  const std::string h1 = stage1_hash(hashed), h2 = stage2_hash(hashed);
  std::optional<PartDetector> resume_det;
  std::optional<SpatialModelParams> resume_sp;
  std::vector<std::string> kept_rows;
  if (get_bool(config, "train.resume")) {
    const fs::path mpath = out / "manifest.json";
    if (!fs::exists(mpath)) throw Error("resume: no previous run in " + out.string());
    const json m = read_manifest(mpath);
    const int done = m.value("stages_completed", 0);
    if (done < 1 || !fs::exists(out / "detector.model")) {
      throw Error("resume: the previous run did not complete stage 1");
    }
    if (m.value("stage1_hash", "") != h1) {
      throw Error("resume refused: stage-1 configuration hash " + h1 +
                  " differs from the recorded " + m.value("stage1_hash", std::string("(none)")));
    }
    resume_det = load_detector(out / "detector.model");
    if (done >= 2 && m.value("stage2_hash", "") == h2 && fs::exists(out / "spatial.model")) {
      resume_sp = load_spatial(out / "spatial.model");
    }
    // Keep the metric rows of the stages that are not rerun.
    if (fs::exists(out / "metrics.csv")) {
      std::istringstream prev(read_text_file(out / "metrics.csv"));
      std::string line;
      std::getline(prev, line);
      while (std::getline(prev, line)) {
        if (line.rfind("1,", 0) == 0 || (resume_sp && line.rfind("2,", 0) == 0)) {
          kept_rows.push_back(line);
        }
      }
    }
  }

  std::ofstream metrics(out / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot write " + (out / "metrics.csv").string());
  metrics << metrics_header(tr.report_radii);
  for (const auto& l : kept_rows) metrics << l << "\n";
  metrics.flush();

  json manifest = {{"command", "train"},
                   {"seed", tr.seed},
                   {"stage1_hash", h1},
                   {"stage2_hash", h2},
                   {"stages_completed", 0}};
  if (resume_det) manifest["stages_completed"] = resume_sp ? 2 : 1;
  write_manifest(out, manifest, config);

  TrainHooks hooks;
  hooks.resume_detector = resume_det ? &*resume_det : nullptr;
  hooks.resume_spatial = resume_sp ? &*resume_sp : nullptr;
  hooks.on_metric = [&](const MetricRow& row) {
    metrics << format_metric_row(row);
    metrics.flush();
    std::cerr << "stage " << row.stage << " epoch " << row.epoch << " " << row.split
              << " mse=" << row.mse << "\n";
  };
  hooks.on_stage_done = [&](int stage, const TrainResult& r) {
    // Resumed artifacts stay byte-for-byte untouched.
    if (stage == 1 && !resume_det) save_detector(out / "detector.model", r.detector);
    if (stage == 2 && !resume_sp) save_spatial(out / "spatial.model", r.spatial);
    if (stage == 3) save_pose_model(out / "unified.model", r.unified);
    manifest["stages_completed"] = std::max(stage, manifest["stages_completed"].get<int>());
    write_manifest(out, manifest, config);
  };
  train_staged(ds, det_cfg, sp_cfg, tr, hooks);
}

void cmd_eval(const ConfigMap& config, const fs::path& out, std::ostream& log) {
  const Dataset ds = load_dataset_for(config, "eval.dataset");
  const std::vector<std::string> models = split(get_string(config, "eval.models"), ',');
  if (models.empty() || models[0].empty()) throw Error("eval.models lists no model files");
  std::vector<std::string> tags;
  if (!get_string(config, "eval.tags").empty()) tags = split(get_string(config, "eval.tags"), ',');
  if (!tags.empty() && tags.size() != models.size()) {
    throw Error("eval.tags must have one entry per model");
  }
  const std::vector<double> radii = get_double_list(config, "eval.radii");
  const double sigma = TrainConfig::from_config(config).target_sigma;
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  std::vector<DetectionCurve> curves;
  for (std::size_t m = 0; m < models.size(); ++m) {
    const fs::path path = models[m];
    const ParamFile file = read_param_file(path);
    const EvalOutput ev =
        is_pose_model(file)
            ? evaluate_pose_model(load_pose_model(path), ds, all, sigma, threads_from_env())
            : evaluate_detector(load_detector(path), ds, all, sigma, threads_from_env());
    const std::string tag = tags.empty() ? path.stem().string() : tags[m];
    curves.push_back(detection_rate(ev.predictions, ds.annotations, ds.schema, radii, tag));
    log << tag << ": mse " << format_double(ev.mse);
    for (std::size_t r = 0; r < radii.size(); ++r) {
      log << (r == 0 ? ", mean rate" : "") << " @" << radii[r] << "=" << curves.back().mean[r];
    }
    log << "\n";
  }
  fs::create_directories(out);
  emit_curves(curves, out / "curves.csv");
  write_manifest(out, {{"command", "eval"}, {"models", models}},
                 [&] {
                   ConfigMap c = section(config, "eval.");
                   c["train.target_sigma"] = config.at("train.target_sigma");
                   return c;
                 }());
}

void cmd_infer(const ConfigMap& config, const fs::path& out) {
  const fs::path model_path = get_string(config, "infer.model");
  const fs::path image_path = get_string(config, "infer.image");
  if (model_path.empty() || image_path.empty()) {
    throw Error("infer needs both infer.model and infer.image");
  }
  const Tensor image = read_pgm(image_path);
  const ParamFile file = read_param_file(model_path);
  HeatMapSet maps;
  std::vector<std::string> names;
  if (is_pose_model(file)) {
    const PoseModel model = load_pose_model(model_path);
    Annotation ann;
    if (model.uses_torso()) {
      const std::vector<double> box = get_string(config, "infer.torso").empty()
                                          ? std::vector<double>{}
                                          : get_double_list(config, "infer.torso");
      if (box.size() != 4 || !(box[3] > 0.0)) {
        throw Error("this model takes a torso map: set infer.torso = u,v,w,h (pixels, h > 0)");
      }
      ann.torso = {box[0], box[1], box[2], box[3]};
      if (ann.torso.center_u() < 0 || ann.torso.center_u() > image.width() - 1 ||
          ann.torso.center_v() < 0 || ann.torso.center_v() > image.height() - 1) {
        throw Error("infer.torso center lies outside the " + std::to_string(image.width()) + "x" +
                    std::to_string(image.height()) + " image");
      }
    }
    maps = model.evaluate(image, ann);
    names = model.spatial().outputs();
  } else {
    const PartDetector det = load_detector(model_path);
    maps = det.evaluate_image(image);
    names = joint_names(det.config().num_joints);
  }

  json joints = json::array();
  for (const JointEstimate& e : extract_joints(maps)) {
    joints.push_back({{"name", names[e.joint]},
                      {"u", e.u},
                      {"v", e.v},
                      {"confidence", argmax2d(maps.maps, e.joint).value}});
  }
  fs::create_directories(out);
  const json result = {{"image", image_path.string()},
                       {"model", model_path.string()},
                       {"stride", maps.stride},
                       {"joints", joints}};
  write_text_file(out / "prediction.json", result.dump(2) + "\n");
  if (get_bool(config, "infer.dump_heatmaps")) {
    write_param_file(out / "heatmaps.pgnn",
                     {"[heatmap]\nstride = " + std::to_string(maps.stride) + "\n",
                      {{"heatmaps", maps.maps}}});
  }
  write_manifest(out, {{"command", "infer"}}, section(config, "infer."));
}

bool cmd_selftest(std::ostream& log, bool sabotage_fft) {
  set_fft_sabotage(sabotage_fft);
  bool ok = true;
  for (const CheckResult& r : run_selftest()) {
    log << format_check(r) << "\n";
    ok = ok && r.passed;
  }
  set_fft_sabotage(false);
  log << (ok ? "selftest: all checks passed" : "selftest: FAILED") << "\n";
  return ok;
}

}  // namespace posegraph
