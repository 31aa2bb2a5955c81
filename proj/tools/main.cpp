#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cubeseg/config.hpp"
#include "cubeseg/eval.hpp"
#include "cubeseg/infer.hpp"
#include "cubeseg/scene.hpp"
#include "cubeseg/train.hpp"

namespace fs = std::filesystem;
using namespace cubeseg;

namespace {

// Exit codes: 0 ok, 1 check violation, 2 usage/config, 3 data, 4 numeric.
constexpr int kExitViolation = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  int threads = 1;
};

KvConfig effective_config(const CommonOpts& common) {
  KvConfig cfg;
  if (!common.config_path.empty()) cfg = KvConfig::load(common.config_path);
  for (const std::string& kv : common.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    auto strip = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
    };
    strip(key);
    strip(value);
    cfg.set(key, value);
  }
  return cfg;
}

const std::set<std::string> kSceneKeys = {
    "scene.instances_min", "scene.instances_max", "scene.points_min",
    "scene.points_max",    "scene.shapes",        "scene.size_min",
    "scene.size_max",      "scene.noise_sigma",   "scene.min_separation",
    "scene.background_points"};
const std::set<std::string> kDatasetKeys = {"dataset.count", "dataset.seed", "dataset.format"};
const std::set<std::string> kModelKeys = {
    "model.feature_widths", "model.feature_dim",         "model.c_sem",
    "model.head_hidden",    "model.flatten_head_layers", "model.project_head_layers",
    "model.score_head_layers", "model.score_k",          "model.local_stats",
    "model.local_stat_k",   "model.score_prior",         "model.global_context"};
const std::set<std::string> kTrainKeys = {
    "train.lr0",   "train.decay_factor", "train.decay_every", "train.epochs",
    "train.batch_size", "train.seed",    "train.paradigm",    "train.n_s",
    "train.center_scale"};
const std::set<std::string> kInferKeys = {"infer.score_threshold", "infer.mask_binarize",
                                          "infer.nms_iou", "infer.max_predictions",
                                          "infer.binarize_product"};
const std::set<std::string> kBaselineKeys = {"baseline.delta_v", "baseline.delta_d",
                                             "baseline.embed_dim", "baseline.head_hidden",
                                             "baseline.bandwidth"};
const std::set<std::string> kBenchKeys = {"bench.n_s", "bench.points", "bench.repeats",
                                          "bench.seed"};

std::set<std::string> merge_keys(std::initializer_list<const std::set<std::string>*> groups) {
  std::set<std::string> out;
  for (const auto* g : groups) out.insert(g->begin(), g->end());
  return out;
}

SceneSpec scene_spec_from(const KvConfig& cfg) {
  SceneSpec spec;
  spec.instances_min = cfg.get_int("scene.instances_min", spec.instances_min);
  spec.instances_max = cfg.get_int("scene.instances_max", spec.instances_max);
  spec.points_min = cfg.get_int("scene.points_min", spec.points_min);
  spec.points_max = cfg.get_int("scene.points_max", spec.points_max);
  spec.size_min = cfg.get_double("scene.size_min", spec.size_min);
  spec.size_max = cfg.get_double("scene.size_max", spec.size_max);
  spec.noise_sigma = cfg.get_double("scene.noise_sigma", spec.noise_sigma);
  spec.min_centroid_separation = cfg.get_double("scene.min_separation", 0.0);
  spec.background_points = cfg.get_int("scene.background_points", 0);
  const std::string shapes = cfg.get_string("scene.shapes", "box,ellipsoid");
  spec.shape_kinds.clear();
  std::size_t start = 0;
  while (start <= shapes.size()) {
    const std::size_t comma = shapes.find(',', start);
    const std::string tok = shapes.substr(start, comma - start);
    if (tok == "box")
      spec.shape_kinds.push_back(ShapeKind::Box);
    else if (tok == "ellipsoid")
      spec.shape_kinds.push_back(ShapeKind::Ellipsoid);
    else if (!tok.empty())
      throw ConfigError("unknown shape kind '" + tok + "'");
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return spec;
}

void record_scene_spec(KvConfig& cfg, const SceneSpec& spec) {
  cfg.set("scene.instances_min", spec.instances_min);
  cfg.set("scene.instances_max", spec.instances_max);
  cfg.set("scene.points_min", spec.points_min);
  cfg.set("scene.points_max", spec.points_max);
  cfg.set("scene.size_min", spec.size_min);
  cfg.set("scene.size_max", spec.size_max);
  cfg.set("scene.noise_sigma", spec.noise_sigma);
  cfg.set("scene.min_separation", spec.min_centroid_separation);
  cfg.set("scene.background_points", spec.background_points);
  std::string shapes;
  for (ShapeKind k : spec.shape_kinds) {
    if (!shapes.empty()) shapes += ",";
    shapes += k == ShapeKind::Box ? "box" : "ellipsoid";
  }
  cfg.set("scene.shapes", shapes);
}

std::vector<int> parse_widths(const std::string& text) {
  std::vector<int> widths;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string tok = text.substr(start, comma - start);
    if (!tok.empty()) widths.push_back(std::stoi(tok));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (widths.size() < 2) throw ConfigError("model.feature_widths needs at least two entries");
  return widths;
}

ModelConfig model_config_from(const KvConfig& cfg, Paradigm paradigm, int n_s) {
  ModelConfig m;
  m.paradigm = paradigm;
  m.n_s = n_s;
  m.local_stats = cfg.get_bool("model.local_stats", m.local_stats);
  m.local_stat_k = cfg.get_int("model.local_stat_k", m.local_stat_k);
  m.score_prior = cfg.get_double("model.score_prior", m.score_prior);
  m.global_context = cfg.get_bool("model.global_context", m.global_context);
  m.feature_widths =
      parse_widths(cfg.get_string("model.feature_widths", m.local_stats ? "7,64,64" : "3,64,64"));
  m.feature_dim = cfg.get_int("model.feature_dim", m.feature_dim);
  m.c_sem = cfg.get_int("model.c_sem", m.c_sem);
  m.head_hidden = cfg.get_int("model.head_hidden", m.head_hidden);
  m.flatten_head_layers = cfg.get_int("model.flatten_head_layers", m.flatten_head_layers);
  m.project_head_layers = cfg.get_int("model.project_head_layers", m.project_head_layers);
  m.score_head_layers = cfg.get_int("model.score_head_layers", m.score_head_layers);
  m.score_k = cfg.get_int("model.score_k", m.score_k);
  return m;
}

void record_model_config(KvConfig& cfg, const ModelConfig& m) {
  std::string widths;
  for (int w : m.feature_widths) {
    if (!widths.empty()) widths += ",";
    widths += std::to_string(w);
  }
  cfg.set("model.feature_widths", widths);
  cfg.set("model.feature_dim", m.feature_dim);
  cfg.set("model.c_sem", m.c_sem);
  cfg.set("model.head_hidden", m.head_hidden);
  cfg.set("model.flatten_head_layers", m.flatten_head_layers);
  cfg.set("model.project_head_layers", m.project_head_layers);
  cfg.set("model.score_head_layers", m.score_head_layers);
  cfg.set("model.score_k", m.score_k);
  cfg.set("model.local_stats", std::string(m.local_stats ? "true" : "false"));
  cfg.set("model.local_stat_k", m.local_stat_k);
  cfg.set("model.score_prior", m.score_prior);
  cfg.set("model.global_context", std::string(m.global_context ? "true" : "false"));
}

TrainConfig train_config_from(const KvConfig& cfg, int threads) {
  TrainConfig t;
  t.lr0 = cfg.get_double("train.lr0", t.lr0);
  t.decay_factor = cfg.get_double("train.decay_factor", t.decay_factor);
  t.decay_every = cfg.get_int("train.decay_every", t.decay_every);
  t.epochs = cfg.get_int("train.epochs", t.epochs);
  t.batch_size = cfg.get_int("train.batch_size", t.batch_size);
  t.seed = cfg.get_u64("train.seed", t.seed);
  t.paradigm = paradigm_from_name(cfg.get_string("train.paradigm", "flatten"));
  t.n_s = cfg.get_int("train.n_s", t.n_s);
  t.center_scale = cfg.get_double("train.center_scale", t.center_scale);
  t.threads = threads;
  return t;
}

void record_train_config(KvConfig& cfg, const TrainConfig& t) {
  cfg.set("train.lr0", t.lr0);
  cfg.set("train.decay_factor", t.decay_factor);
  cfg.set("train.decay_every", t.decay_every);
  cfg.set("train.epochs", t.epochs);
  cfg.set("train.batch_size", t.batch_size);
  cfg.set("train.seed", t.seed);
  cfg.set("train.paradigm", std::string(paradigm_name(t.paradigm)));
  cfg.set("train.n_s", t.n_s);
  cfg.set("train.center_scale", t.center_scale);
}

InferConfig infer_config_from(const KvConfig& cfg) {
  InferConfig i;
  i.score_threshold = cfg.get_double("infer.score_threshold", i.score_threshold);
  i.mask_binarize = cfg.get_double("infer.mask_binarize", i.mask_binarize);
  i.nms_iou = cfg.get_double("infer.nms_iou", i.nms_iou);
  i.max_predictions = cfg.get_int("infer.max_predictions", i.max_predictions);
  i.binarize_product = cfg.get_bool("infer.binarize_product", i.binarize_product);
  i.validate();
  return i;
}

void record_infer_config(KvConfig& cfg, const InferConfig& i) {
  cfg.set("infer.score_threshold", i.score_threshold);
  cfg.set("infer.mask_binarize", i.mask_binarize);
  cfg.set("infer.nms_iou", i.nms_iou);
  cfg.set("infer.max_predictions", i.max_predictions);
  cfg.set("infer.binarize_product", std::string(i.binarize_product ? "true" : "false"));
}

std::vector<PointCloud> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a dataset directory: " + dir.string());
  std::vector<fs::path> files;
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream f(manifest);
    nlohmann::json j;
    f >> j;
    for (const auto& scene : j.at("scenes")) files.push_back(dir / scene.at("file").get<std::string>());
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto ext = entry.path().extension();
      if (ext == ".csv" || ext == ".ply") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw DataError("no scenes found in " + dir.string());
  std::vector<PointCloud> clouds;
  clouds.reserve(files.size());
  for (const fs::path& f : files) {
    LoadResult r = load_cloud(f, format_from_extension(f));
    canonicalize(r.cloud);
    clouds.push_back(std::move(r.cloud));
  }
  return clouds;
}

void ensure_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError("output path is not a directory: " + dir.string());
    if (!force && !fs::is_empty(dir))
      throw ConfigError("output directory is not empty (use --force): " + dir.string());
  } else {
    fs::create_directories(dir);
  }
}

std::string checksum_of_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}

void emit(const std::string& key, const std::string& value) {
  std::cout << key << "=" << value << "\n";
}

void emit(const std::string& key, double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  emit(key, std::string(buf));
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const CommonOpts& common, const std::string& out_dir, bool force) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kSceneKeys, &kDatasetKeys}));
  const SceneSpec base = scene_spec_from(cfg);
  const int count = cfg.get_int("dataset.count", 10);
  const std::uint64_t seed = cfg.get_u64("dataset.seed", 0);
  const std::string format = cfg.get_string("dataset.format", "csv");
  if (format != "csv" && format != "ply") throw ConfigError("dataset.format must be csv or ply");
  if (count < 1) throw ConfigError("dataset.count must be >= 1");

  const fs::path dir(out_dir);
  ensure_out_dir(dir, force);

  nlohmann::json manifest;
  manifest["format"] = format;
  manifest["count"] = count;
  manifest["seed"] = seed;
  auto scenes = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.rng_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    const PointCloud cloud = generate_scene(spec);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d.%s", i, format.c_str());
    const fs::path path = dir / name;
    save_cloud(cloud, path, format == "csv" ? CloudFormat::CsvPoints : CloudFormat::PlyAscii);
    nlohmann::json entry;
    entry["file"] = name;
    entry["checksum"] = checksum_of_file(path);
    entry["points"] = cloud.size();
    entry["instances"] = cloud.instance_count();
    scenes.push_back(entry);
  }
  manifest["scenes"] = std::move(scenes);
  {
    std::ofstream f(dir / "manifest.json", std::ios::binary);
    f << manifest.dump(2) << "\n";
  }

  KvConfig resolved;
  record_scene_spec(resolved, base);
  resolved.set("dataset.count", count);
  resolved.set("dataset.seed", seed);
  resolved.set("dataset.format", format);
  resolved.set("io.out", out_dir);
  resolved.write(dir / "config.resolved");

  emit("scenes", std::to_string(count));
  emit("manifest", (dir / "manifest.json").string());
  return 0;
}

// ---------------------------------------------------------------------------
// encode-check
// ---------------------------------------------------------------------------

int cmd_encode_check(const CommonOpts& common, const std::string& data_dir, int n_s, double scale,
                     const std::string& sweep, const std::string& out_dir) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys({});
  const std::vector<PointCloud> clouds = load_dataset(data_dir);

  if (!sweep.empty()) {
    int lo = 0, hi = 0, step = 2;
    if (std::sscanf(sweep.c_str(), "%d:%d:%d", &lo, &hi, &step) != 3 || lo < 2 || hi < lo ||
        step < 1)
      throw ConfigError("--sweep expects lo:hi:step");
    std::vector<int> ns;
    for (int n = lo; n <= hi; n += step) ns.push_back(n);
    const auto rows = overlap_sweep(clouds, ns, scale);
    const fs::path dir = out_dir.empty() ? fs::path(data_dir) : fs::path(out_dir);
    if (!out_dir.empty()) ensure_out_dir(dir, true);
    write_sweep_csv(dir / "sweep.csv", rows);
    std::ofstream svg(dir / "sweep.svg", std::ios::binary);
    svg << sweep_svg(rows);
    for (const SweepRow& r : rows)
      std::cout << "sweep." << r.n_s << "=" << r.overlap_rate << "," << r.oracle_mprec << "\n";
    emit("sweep_csv", (dir / "sweep.csv").string());
  }

  const CubeGrid grid(n_s);
  long long positives = 0, collisions = 0;
  int equivalence_violations = 0, round_trip_failures = 0;
  for (std::size_t s = 0; s < clouds.size(); ++s) {
    const PointCloud& cloud = clouds[s];
    const TargetSet flat = build_targets(cloud, grid, Paradigm::Flatten, scale);
    const TargetSet proj = build_targets(cloud, grid, Paradigm::Project, scale);
    positives += flat.n_positive();
    collisions += flat.collision_count;

    for (int cube : flat.positive_cubes) {
      if (std::find(flat.colliding_cubes.begin(), flat.colliding_cubes.end(), cube) !=
          flat.colliding_cubes.end())
        continue;
      const CubeIndex ci = unflatten_index(cube, n_s);
      const auto want = flat.flatten_column(cube);
      const auto cx = proj.project_column(0, ci.x);
      const auto cy = proj.project_column(1, ci.y);
      const auto cz = proj.project_column(2, ci.z);
      for (std::size_t p = 0; p < cloud.size(); ++p) {
        if (int(want[p]) != int(cx[p] & cy[p] & cz[p])) {
          ++equivalence_violations;
          std::cerr << "equivalence violation: scene " << s << " cube " << cube << " point " << p
                    << "\n";
          break;
        }
      }
    }

    if (flat.collision_count == 0) {
      Mat category(cloud.size(), grid.cell_count());
      for (std::size_t p = 0; p < cloud.size(); ++p)
        for (int cube : flat.row_columns(int(p))) category(p, cube) = 1.0;
      std::vector<double> scores(flat.score_target.begin(), flat.score_target.end());
      Mat logits(cloud.size(), 2);
      for (std::size_t p = 0; p < cloud.size(); ++p)
        logits(p, cloud.semantic_labels[p] == 1 ? 1 : 0) = 50.0;
      const auto preds = decode_flatten(category, scores, logits, InferConfig{});
      const auto part = partition_points(preds, cloud.size());
      if (canonical_ids(part) != canonical_ids(cloud.instance_ids)) {
        ++round_trip_failures;
        std::cerr << "oracle round-trip failure: scene " << s << "\n";
      }
    }
  }

  const double rate =
      positives == 0 ? 0.0 : static_cast<double>(collisions) / static_cast<double>(positives);
  emit("equivalence", equivalence_violations == 0 ? "OK" : "VIOLATED");
  emit("round_trip", round_trip_failures == 0 ? "OK" : "VIOLATED");
  emit("overlap_rate", rate);
  emit("positives", std::to_string(positives));
  emit("collisions", std::to_string(collisions));
  return (equivalence_violations == 0 && round_trip_failures == 0) ? 0 : kExitViolation;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume_path, bool force) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kTrainKeys, &kModelKeys}));
  const TrainConfig tcfg = train_config_from(cfg, common.threads);
  const ModelConfig mcfg = model_config_from(cfg, tcfg.paradigm, tcfg.n_s);

  const std::vector<PointCloud> dataset = load_dataset(data_dir);
  const fs::path dir(out_dir);
  ensure_out_dir(dir, force);

  TrainResult result;
  if (!resume_path.empty()) {
    const Checkpoint resume = load_checkpoint(resume_path);
    result = train(dataset, mcfg, tcfg, &resume);
  } else {
    result = train(dataset, mcfg, tcfg);
  }

  save_checkpoint(dir / "checkpoint.ckpt", result.checkpoint);
  result.log.to_csv(dir / "trainlog.csv");

  KvConfig resolved;
  record_train_config(resolved, tcfg);
  record_model_config(resolved, mcfg);
  resolved.set("io.data", data_dir);
  resolved.set("io.out", out_dir);
  if (!resume_path.empty()) resolved.set("io.resume", resume_path);
  resolved.write(dir / "config.resolved");

  emit("steps", std::to_string(result.checkpoint.step));
  emit("epochs", std::to_string(result.checkpoint.epoch));
  if (!result.log.rows.empty()) emit("final_loss", result.log.rows.back().loss.total);
  emit("checkpoint", (dir / "checkpoint.ckpt").string());
  return 0;
}

// ---------------------------------------------------------------------------
// infer / eval
// ---------------------------------------------------------------------------

int cmd_infer(const CommonOpts& common, const std::string& params_path,
              const std::string& cloud_path, const std::string& out_dir, bool force) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kInferKeys}));
  const InferConfig icfg = infer_config_from(cfg);

  const Checkpoint ckpt = load_checkpoint(params_path);
  LoadResult loaded = load_cloud(cloud_path, format_from_extension(cloud_path));
  const CubeGrid grid(ckpt.params.cfg.n_s);

  const ForwardOutputs out = forward(ckpt.params, loaded.cloud, grid);
  std::vector<InstancePrediction> preds;
  if (ckpt.params.cfg.paradigm == Paradigm::Flatten)
    preds = decode_flatten(out.category_scores, out.cube_scores, out.semantic_logits, icfg);
  else
    preds = decode_project(out.axis_scores_x, out.axis_scores_y, out.axis_scores_z,
                           out.cube_scores, out.semantic_logits, grid, icfg);

  const fs::path dir(out_dir);
  ensure_out_dir(dir, force);
  save_predictions_csv(dir / "predictions.csv", preds, loaded.cloud.size());
  save_partition_csv(dir / "partition.csv", partition_points(preds, loaded.cloud.size()));

  KvConfig resolved;
  record_infer_config(resolved, icfg);
  resolved.set("io.params", params_path);
  resolved.set("io.cloud", cloud_path);
  resolved.set("io.out", out_dir);
  resolved.write(dir / "config.resolved");

  emit("predictions", std::to_string(preds.size()));
  emit("out", dir.string());
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& params_path, const std::string& data_dir,
             const std::string& out_dir, bool force) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kInferKeys}));
  const InferConfig icfg = infer_config_from(cfg);

  const Checkpoint ckpt = load_checkpoint(params_path);
  const std::vector<PointCloud> dataset = load_dataset(data_dir);
  const CubeGrid grid(ckpt.params.cfg.n_s);
  const MetricsReport report = evaluate_epoch(ckpt.params, dataset, grid, icfg);

  if (!out_dir.empty()) {
    const fs::path dir(out_dir);
    ensure_out_dir(dir, force);
    write_metrics_csv(dir / "metrics.csv", report);
    std::ofstream svg(dir / "metrics.svg", std::ios::binary);
    svg << metrics_svg(report);
    KvConfig resolved;
    record_infer_config(resolved, icfg);
    resolved.set("io.params", params_path);
    resolved.set("io.data", data_dir);
    resolved.set("io.out", out_dir);
    resolved.write(dir / "config.resolved");
  }

  emit("mcov", report.mcov);
  emit("mwcov", report.mwcov);
  emit("mprec", report.mprec);
  emit("mrec", report.mrec);
  emit("ap25", report.ap_by_threshold.empty() ? 0.0 : report.ap_by_threshold[0]);
  emit("ap50", report.ap_by_threshold.size() > 1 ? report.ap_by_threshold[1] : 0.0);
  emit("map_avg", report.map_avg);
  emit("scenes", std::to_string(report.scene_count));
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const CommonOpts& common, const std::string& flatten_path,
              const std::string& project_path, const std::string& out_dir) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kBenchKeys, &kModelKeys, &kInferKeys}));
  const int n_s = cfg.get_int("bench.n_s", 20);
  const int points = cfg.get_int("bench.points", 4096);
  const int repeats = cfg.get_int("bench.repeats", 11);
  const std::uint64_t seed = cfg.get_u64("bench.seed", 7);
  const InferConfig icfg = infer_config_from(cfg);

  ModelParams flatten_params =
      flatten_path.empty()
          ? init_params(model_config_from(cfg, Paradigm::Flatten, n_s), mix_seed(seed, 1))
          : load_checkpoint(flatten_path).params;
  ModelParams project_params =
      project_path.empty()
          ? init_params(model_config_from(cfg, Paradigm::Project, n_s), mix_seed(seed, 2))
          : load_checkpoint(project_path).params;

  SceneSpec spec;
  spec.instances_min = spec.instances_max = 4;
  spec.points_min = spec.points_max = points / 4;
  spec.size_min = 0.1;
  spec.size_max = 0.25;
  spec.min_centroid_separation = 0.3;
  spec.rng_seed = seed;
  const PointCloud cloud = generate_scene(spec);

  const LatencyReport r = latency_bench(flatten_params, project_params, cloud, repeats, icfg);

  if (!out_dir.empty()) {
    const fs::path dir(out_dir);
    ensure_out_dir(dir, true);
    std::ofstream f(dir / "bench.csv", std::ios::binary);
    f << "paradigm,median_ms,peak_bytes\n";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "flatten,%.17g,%zu\n", r.flatten_median_ms,
                  r.flatten_peak_bytes);
    f << buf;
    std::snprintf(buf, sizeof(buf), "project,%.17g,%zu\n", r.project_median_ms,
                  r.project_peak_bytes);
    f << buf;
  }

  emit("flatten_ms", r.flatten_median_ms);
  emit("project_ms", r.project_median_ms);
  emit("flatten_peak_bytes", std::to_string(r.flatten_peak_bytes));
  emit("project_peak_bytes", std::to_string(r.project_peak_bytes));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", r.ratio);
  std::cout << "flatten/project: " << buf << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compare-baseline
// ---------------------------------------------------------------------------

int cmd_compare_baseline(const CommonOpts& common, const std::string& train_dir,
                         const std::string& test_dir, const std::string& out_dir, bool force) {
  KvConfig cfg = effective_config(common);
  cfg.require_known_keys(merge_keys({&kTrainKeys, &kModelKeys, &kInferKeys, &kBaselineKeys}));
  const TrainConfig tcfg = train_config_from(cfg, common.threads);
  const ModelConfig mcfg = model_config_from(cfg, tcfg.paradigm, tcfg.n_s);
  const InferConfig icfg = infer_config_from(cfg);
  DiscriminativeConfig dcfg;
  dcfg.delta_v = cfg.get_double("baseline.delta_v", dcfg.delta_v);
  dcfg.delta_d = cfg.get_double("baseline.delta_d", dcfg.delta_d);
  BaselineConfig bcfg;
  bcfg.feature_widths = mcfg.feature_widths;
  bcfg.feature_dim = mcfg.feature_dim;
  bcfg.local_stats = mcfg.local_stats;
  bcfg.local_stat_k = mcfg.local_stat_k;
  bcfg.global_context = mcfg.global_context;
  bcfg.embed_dim = cfg.get_int("baseline.embed_dim", 4);
  bcfg.head_hidden = cfg.get_int("baseline.head_hidden", mcfg.head_hidden);
  const double bandwidth = cfg.get_double("baseline.bandwidth", dcfg.delta_v * 2.0);

  const std::vector<PointCloud> train_set = load_dataset(train_dir);
  std::vector<PointCloud> test_set = load_dataset(test_dir);
  for (PointCloud& c : test_set) canonicalize(c);

  std::cerr << "training the instance-category arm (" << paradigm_name(tcfg.paradigm) << ")...\n";
  const TrainResult icm = train(train_set, mcfg, tcfg);
  std::cerr << "training the discriminative baseline arm...\n";
  const BaselineTrainResult baseline = train_baseline(train_set, bcfg, tcfg, dcfg);

  const CubeGrid grid(tcfg.n_s);
  double icm_overlap = 0.0, base_overlap = 0.0;
  std::vector<MetricsReport> icm_reports;
  double base_mcov = 0, base_mwcov = 0, base_mprec = 0, base_mrec = 0;
  DistanceOverlapReport icm_last, base_last;
  for (const PointCloud& scene : test_set) {
    const ForwardOutputs out = forward(icm.checkpoint.params, scene, grid);
    const Mat icm_embed = category_embeddings(out);
    icm_last = distance_overlap(icm_embed, scene.instance_ids);
    icm_overlap += icm_last.overlap_probability;

    std::vector<InstancePrediction> preds;
    if (tcfg.paradigm == Paradigm::Flatten)
      preds = decode_flatten(out.category_scores, out.cube_scores, out.semantic_logits, icfg);
    else
      preds = decode_project(out.axis_scores_x, out.axis_scores_y, out.axis_scores_z,
                             out.cube_scores, out.semantic_logits, grid, icfg);
    icm_reports.push_back(eval_scene(scene, preds));

    const BaselineOutputs bout = baseline_forward(baseline.checkpoint.params, scene);
    base_last = distance_overlap(bout.embeddings, scene.instance_ids);
    base_overlap += base_last.overlap_probability;

    const std::vector<int> labels = mean_shift(bout.embeddings, bandwidth);
    int k = 0;
    for (int l : labels) k = std::max(k, l + 1);
    std::vector<InstancePrediction> base_preds(k);
    for (int c = 0; c < k; ++c) {
      base_preds[c].mask = Bitmask(scene.size());
      base_preds[c].score = 1.0;
      base_preds[c].cube_index = c;
    }
    for (std::size_t p = 0; p < labels.size(); ++p)
      if (labels[p] >= 0) base_preds[labels[p]].mask.set(p);
    const auto gt = canonical_ids(scene.instance_ids);
    const auto [cov, wcov] = coverage_metrics(gt, base_preds);
    const PrecRec pr = prec_rec(gt, base_preds, 0.5);
    base_mcov += cov;
    base_mwcov += wcov;
    base_mprec += pr.mprec;
    base_mrec += pr.mrec;
  }
  const double inv = 1.0 / static_cast<double>(test_set.size());
  icm_overlap *= inv;
  base_overlap *= inv;
  base_mcov *= inv;
  base_mwcov *= inv;
  base_mprec *= inv;
  base_mrec *= inv;
  const MetricsReport icm_report = average_reports(icm_reports);

  const fs::path dir(out_dir);
  ensure_out_dir(dir, force);
  {
    std::ofstream f(dir / "compare.csv", std::ios::binary);
    f << "arm,mcov,mwcov,mprec,mrec,overlap_probability\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "icm,%.17g,%.17g,%.17g,%.17g,%.17g\n", icm_report.mcov,
                  icm_report.mwcov, icm_report.mprec, icm_report.mrec, icm_overlap);
    f << buf;
    std::snprintf(buf, sizeof(buf), "baseline,%.17g,%.17g,%.17g,%.17g,%.17g\n", base_mcov,
                  base_mwcov, base_mprec, base_mrec, base_overlap);
    f << buf;
  }
  {
    std::ofstream f(dir / "distance_overlap.svg", std::ios::binary);
    f << distance_overlap_svg(icm_last, "instance-category arm", &base_last,
                              "embed-and-cluster arm");
  }
  save_checkpoint(dir / "icm.ckpt", icm.checkpoint);
  save_baseline_checkpoint(dir / "baseline.ckpt", baseline.checkpoint);

  KvConfig resolved;
  record_train_config(resolved, tcfg);
  record_model_config(resolved, mcfg);
  record_infer_config(resolved, icfg);
  resolved.set("baseline.delta_v", dcfg.delta_v);
  resolved.set("baseline.delta_d", dcfg.delta_d);
  resolved.set("baseline.embed_dim", bcfg.embed_dim);
  resolved.set("baseline.head_hidden", bcfg.head_hidden);
  resolved.set("baseline.bandwidth", bandwidth);
  resolved.set("io.train_data", train_dir);
  resolved.set("io.test_data", test_dir);
  resolved.set("io.out", out_dir);
  resolved.write(dir / "config.resolved");

  emit("icm_overlap", icm_overlap);
  emit("baseline_overlap", base_overlap);
  emit("icm_mprec", icm_report.mprec);
  emit("icm_mrec", icm_report.mrec);
  emit("baseline_mprec", base_mprec);
  emit("baseline_mrec", base_mrec);
  emit("out", dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatial-cube instance-category segmentation lab"};
  app.require_subcommand(1);
  CommonOpts common;
  app.add_option("--config", common.config_path, "key=value config file")
      ->check(CLI::ExistingFile);
  app.add_option("--set", common.overrides, "override a config key (key=value), repeatable");
  app.add_option("--threads", common.threads, "worker threads for batch parallelism")
      ->default_val(1);

  std::string out_dir, data_dir, params_path, cloud_path, resume_path;
  std::string flatten_path, project_path, train_dir, test_dir, sweep;
  bool force = false;
  int ns = 8;
  double scale = 0.2;

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic scene dataset");
  generate->add_option("--out", out_dir, "output directory")->required();
  generate->add_flag("--force", force, "allow a non-empty output directory");

  CLI::App* encode_check =
      app.add_subcommand("encode-check", "verify target encoding invariants on a dataset");
  encode_check->add_option("--data", data_dir, "dataset directory")->required();
  encode_check->add_option("--ns", ns, "cells per axis")->default_val(8);
  encode_check->add_option("--scale", scale, "center-sampling scale")->default_val(0.2);
  encode_check->add_option("--sweep", sweep, "emit an overlap sweep, lo:hi:step");
  encode_check->add_option("--out", out_dir, "directory for sweep artifacts");

  CLI::App* train_cmd = app.add_subcommand("train", "train the classifier network");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from")
      ->check(CLI::ExistingFile);
  train_cmd->add_flag("--force", force, "allow a non-empty output directory");

  CLI::App* infer_cmd = app.add_subcommand("infer", "decode instances for one cloud");
  infer_cmd->add_option("--params", params_path, "checkpoint file")->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--cloud", cloud_path, "point cloud file")->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--out", out_dir, "output directory")->required();
  infer_cmd->add_flag("--force", force, "allow a non-empty output directory");

  CLI::App* eval_cmd = app.add_subcommand("eval", "run metrics over a dataset");
  eval_cmd->add_option("--params", params_path, "checkpoint file")->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--out", out_dir, "output directory for reports");
  eval_cmd->add_flag("--force", force, "allow a non-empty output directory");

  CLI::App* bench_cmd = app.add_subcommand("bench", "forward+decode latency, both paradigms");
  bench_cmd->add_option("--flatten-params", flatten_path, "flatten checkpoint (seeded init if omitted)")
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--project-params", project_path, "project checkpoint (seeded init if omitted)")
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--out", out_dir, "output directory for bench.csv");

  CLI::App* compare_cmd =
      app.add_subcommand("compare-baseline", "train both arms and compare separability");
  compare_cmd->add_option("--train-data", train_dir, "training dataset directory")->required();
  compare_cmd->add_option("--test-data", test_dir, "held-out dataset directory")->required();
  compare_cmd->add_option("--out", out_dir, "output directory")->required();
  compare_cmd->add_flag("--force", force, "allow a non-empty output directory");

  // Global options (--config/--set/--threads) may appear after the subcommand.
  for (CLI::App* sub : {generate, encode_check, train_cmd, infer_cmd, eval_cmd, bench_cmd,
                        compare_cmd})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : kExitUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(common, out_dir, force);
    if (encode_check->parsed())
      return cmd_encode_check(common, data_dir, ns, scale, sweep, out_dir);
    if (train_cmd->parsed()) return cmd_train(common, data_dir, out_dir, resume_path, force);
    if (infer_cmd->parsed()) return cmd_infer(common, params_path, cloud_path, out_dir, force);
    if (eval_cmd->parsed()) return cmd_eval(common, params_path, data_dir, out_dir, force);
    if (bench_cmd->parsed()) return cmd_bench(common, flatten_path, project_path, out_dir);
    if (compare_cmd->parsed())
      return cmd_compare_baseline(common, train_dir, test_dir, out_dir, force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitViolation;
  }
  return 0;
}
