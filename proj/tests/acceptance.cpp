// Acceptance suite: one checkable criterion per function, each printing a
// single [PASS]/[FAIL] line. Run with no arguments for the full suite or with
// a list of criterion numbers. Criterion 9 drives the CLI binary named by the
// CUBESEG_CLI environment variable.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cubeseg/config.hpp"
#include "cubeseg/eval.hpp"
#include "cubeseg/infer.hpp"
#include "cubeseg/loss.hpp"
#include "cubeseg/model.hpp"
#include "cubeseg/scene.hpp"
#include "cubeseg/train.hpp"

namespace fs = std::filesystem;
using namespace cubeseg;

namespace {

struct Failure {
  std::string detail;
};

std::vector<std::string> g_notes;

void require(bool ok, const std::string& detail) {
  if (!ok) throw Failure{detail};
}

void note(const std::string& text) { g_notes.push_back(text); }

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

std::vector<PointCloud> make_dataset(int count, std::uint64_t base_seed, const SceneSpec& base) {
  std::vector<PointCloud> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.rng_seed = mix_seed(base_seed, static_cast<std::uint64_t>(i));
    PointCloud cloud = generate_scene(spec);
    canonicalize(cloud);
    out.push_back(std::move(cloud));
  }
  return out;
}

// The fixed dataset of criterion 4 (also used by criterion 5): 3-6 instances,
// ~1024 points nominal per scene, moderate separation, light clutter.
SceneSpec toy_scene_spec() {
  SceneSpec spec;
  spec.instances_min = 3;
  spec.instances_max = 6;
  spec.points_min = 170;
  spec.points_max = 341;
  spec.size_min = 0.18;
  spec.size_max = 0.32;
  spec.min_centroid_separation = 0.32;
  spec.noise_sigma = 0.005;
  spec.background_points = 96;
  return spec;
}

std::vector<PointCloud> toy_train_set() { return make_dataset(64, 9001, toy_scene_spec()); }
std::vector<PointCloud> toy_test_set() { return make_dataset(16, 9002, toy_scene_spec()); }

// Appends a translated copy of instance 0 as a fresh instance, putting two
// centroids roughly `delta` apart. Uniformly placed instances almost never
// share a cube, so crowded configurations are built deliberately.
PointCloud with_twin(PointCloud cloud, double delta, std::uint64_t seed) {
  Rng rng(seed);
  Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
  const double n = norm(dir);
  dir = n == 0.0 ? Vec3{1, 0, 0} : (1.0 / n) * dir;
  const auto groups = group_by_instance(cloud);
  const int next_id = cloud.instance_count();
  const std::vector<int> source = groups.front();
  for (int p : source) {
    Vec3 q = cloud.positions[p] + delta * dir;
    q.x = std::min(1.0, std::max(0.0, q.x));
    q.y = std::min(1.0, std::max(0.0, q.y));
    q.z = std::min(1.0, std::max(0.0, q.z));
    cloud.positions.push_back(q);
    cloud.semantic_labels.push_back(cloud.semantic_labels[source.front()]);
    cloud.instance_ids.push_back(next_id);
  }
  return cloud;
}

// Scenes for the encoding criteria: half get a deliberately close twin so
// that coarse grids genuinely collide, half stay clean.
std::vector<PointCloud> encoding_scenes() {
  std::vector<PointCloud> out;
  SceneSpec tight;
  tight.instances_min = 2;
  tight.instances_max = 5;
  tight.points_min = 40;
  tight.points_max = 120;
  tight.size_min = 0.08;
  tight.size_max = 0.3;
  tight.min_centroid_separation = 0.3;
  tight.noise_sigma = 0.004;
  tight.background_points = 12;
  const auto a = make_dataset(50, 7101, tight);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double delta = 0.05 + 0.004 * double(i);  // 0.05 .. 0.25
    out.push_back(with_twin(a[i], delta, mix_seed(7103, i)));
  }
  SceneSpec loose = tight;
  loose.background_points = 0;
  auto b = make_dataset(50, 7102, loose);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct OracleOutputs {
  Mat category;
  Mat fx, fy, fz;
  std::vector<double> scores;
  Mat logits;
};

OracleOutputs inject_targets(const PointCloud& cloud, const TargetSet& flat,
                             const TargetSet& proj) {
  OracleOutputs o;
  const std::size_t n = cloud.size();
  o.category = Mat(n, flat.score_target.size());
  for (std::size_t p = 0; p < n; ++p)
    for (int cube : flat.row_columns(static_cast<int>(p))) o.category(p, cube) = 1.0;
  o.fx = Mat(n, proj.n_s);
  o.fy = Mat(n, proj.n_s);
  o.fz = Mat(n, proj.n_s);
  for (std::size_t p = 0; p < n; ++p)
    for (int a = 0; a < proj.n_s; ++a) {
      o.fx(p, a) = proj.project_entry(0, static_cast<int>(p), a);
      o.fy(p, a) = proj.project_entry(1, static_cast<int>(p), a);
      o.fz(p, a) = proj.project_entry(2, static_cast<int>(p), a);
    }
  o.scores.assign(flat.score_target.begin(), flat.score_target.end());
  o.logits = Mat(n, 2);
  for (std::size_t p = 0; p < n; ++p) o.logits(p, cloud.semantic_labels[p] == 1 ? 1 : 0) = 50.0;
  return o;
}

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-2});
}

// Central differences at h = 1e-4; coordinates whose +/-h window straddles a
// relu kink or hinge boundary re-check at 1e-5 and 1e-6 (fd converges to the
// true derivative, so a wrong analytic gradient fails at every width).
bool fd_matches_one(std::vector<double>& x, std::size_t i, const std::function<double()>& f,
                    double analytic, double* got) {
  for (double h : {1e-4, 1e-5, 1e-6}) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    const double fd = (fp - fm) / (2.0 * h);
    *got = fd;
    if (rel_err(fd, analytic) <= 1e-5) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// 1. Encoding equivalence
// ---------------------------------------------------------------------------

void criterion_1() {
  const std::vector<PointCloud> scenes = encoding_scenes();
  require(scenes.size() == 100, "expected 100 scenes");
  long long checked = 0, collided = 0;
  for (int n_s : {4, 8, 20}) {
    const CubeGrid grid(n_s);
    for (const PointCloud& cloud : scenes) {
      const TargetSet flat = build_targets(cloud, grid, Paradigm::Flatten, 0.2);
      const TargetSet proj = build_targets(cloud, grid, Paradigm::Project, 0.2);
      const std::set<int> colliding(flat.colliding_cubes.begin(), flat.colliding_cubes.end());
      collided += flat.collision_count;
      for (int cube : flat.positive_cubes) {
        if (colliding.count(cube)) continue;
        const CubeIndex ci = unflatten_index(cube, n_s);
        const auto want = flat.flatten_column(cube);
        const auto cx = proj.project_column(0, ci.x);
        const auto cy = proj.project_column(1, ci.y);
        const auto cz = proj.project_column(2, ci.z);
        for (std::size_t p = 0; p < cloud.size(); ++p)
          require(int(want[p]) == int(cx[p] & cy[p] & cz[p]),
                  "product mismatch at cube " + std::to_string(cube));
        ++checked;
      }
    }
  }
  require(checked > 0, "no collision-free positive cubes checked");
  note("collision-free cubes checked: " + std::to_string(checked) +
       ", contested cubes excluded: " + std::to_string(collided));
}

// ---------------------------------------------------------------------------
// 2. Oracle round-trip
// ---------------------------------------------------------------------------

void criterion_2() {
  const std::vector<PointCloud> scenes = encoding_scenes();
  int decoded_scenes = 0;
  for (int n_s : {4, 8, 20}) {
    const CubeGrid grid(n_s);
    for (const PointCloud& cloud : scenes) {
      const TargetSet flat = build_targets(cloud, grid, Paradigm::Flatten, 0.2);
      if (flat.collision_count != 0) continue;
      const TargetSet proj = build_targets(cloud, grid, Paradigm::Project, 0.2);
      const OracleOutputs o = inject_targets(cloud, flat, proj);
      const InferConfig cfg;
      const std::vector<int> gt = canonical_ids(cloud.instance_ids);

      const auto fp = decode_flatten(o.category, o.scores, o.logits, cfg);
      const PrecRec fpr = prec_rec(gt, fp, 0.5);
      require(fpr.mprec == 1.0 && fpr.mrec == 1.0, "flatten round-trip lost an instance");
      require(canonical_ids(partition_points(fp, cloud.size())) == gt,
              "flatten partition mismatch");

      const auto pp = decode_project(o.fx, o.fy, o.fz, o.scores, o.logits, grid, cfg);
      const PrecRec ppr = prec_rec(gt, pp, 0.5);
      require(ppr.mprec == 1.0 && ppr.mrec == 1.0, "project round-trip lost an instance");
      require(canonical_ids(partition_points(pp, cloud.size())) == gt,
              "project partition mismatch");
      ++decoded_scenes;
    }
  }
  require(decoded_scenes >= 100, "too few collision-free scenes exercised: " +
                                     std::to_string(decoded_scenes));
  note("collision-free scene decodes: " + std::to_string(decoded_scenes));
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness
// ---------------------------------------------------------------------------

void fd_check(std::vector<double>& x, const std::function<double()>& f,
              const std::vector<double>& analytic, const char* what, int& trials) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    double fd = 0.0;
    require(fd_matches_one(x, i, f, analytic[i], &fd),
            std::string(what) + ": fd " + std::to_string(fd) + " vs analytic " +
                std::to_string(analytic[i]));
  }
  ++trials;
}

void criterion_3() {
  int trials = 0;

  for (std::uint64_t seed = 1; seed <= 24; ++seed) {
    Rng rng(mix_seed(3000, seed));
    {
      std::vector<double> f(10);
      std::vector<std::uint8_t> g(10);
      for (auto& v : f) v = rng.uniform(0.1, 0.9);
      for (auto& v : g) v = rng.uniform() < 0.5;
      fd_check(f, [&] { return dice(f, g); }, dice_grad(f, g), "dice", trials);
    }
    {
      std::vector<double> s(12);
      std::vector<std::uint8_t> t(12);
      for (auto& v : s) v = rng.uniform(0.05, 0.95);
      for (auto& v : t) v = rng.uniform() < 0.5;
      fd_check(s, [&] { return score_bce(s, t); }, score_bce_grad(s, t), "bce", trials);
    }
    {
      Mat logits(5, 3);
      for (double& v : logits.data()) v = rng.uniform(-2, 2);
      std::vector<int> labels(5), inst(5, 0);
      for (auto& v : labels) v = rng.uniform_int(0, 2);
      const Mat g = semantic_ce_grad(logits, labels, inst);
      fd_check(logits.data(), [&] { return semantic_ce(logits, labels, inst); }, g.data(),
               "semantic-ce", trials);
    }
    {
      DiscriminativeConfig cfg;
      Mat embed(8, 2);
      for (double& v : embed.data()) v = rng.uniform(-2, 2);
      std::vector<int> ids(8);
      for (auto& v : ids) v = rng.uniform_int(0, 2);
      const Mat g = discriminative_grad(embed, ids, cfg);
      fd_check(embed.data(),
               [&] {
                 const DiscriminativeLoss l = discriminative_loss(embed, ids, cfg);
                 return l.pull + l.push;
               },
               g.data(), "discriminative", trials);
    }
  }

  // pcate, both paradigms, on real targets.
  SceneSpec spec;
  spec.instances_min = 2;
  spec.instances_max = 3;
  spec.points_min = 6;
  spec.points_max = 10;
  spec.size_min = 0.1;
  spec.size_max = 0.3;
  spec.min_centroid_separation = 0.3;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    spec.rng_seed = mix_seed(3100, seed);
    PointCloud cloud = generate_scene(spec);
    canonicalize(cloud);
    const CubeGrid grid(4);
    Rng rng(mix_seed(3200, seed));
    {
      const TargetSet t = build_targets(cloud, grid, Paradigm::Flatten, 0.3);
      Mat f(t.n_points, t.score_target.size());
      for (double& v : f.data()) v = rng.uniform(0.05, 0.95);
      const Mat g = pcate_flatten_grad(f, t);
      fd_check(f.data(), [&] { return pcate_flatten(f, t); }, g.data(), "pcate-flatten", trials);
    }
    {
      const TargetSet t = build_targets(cloud, grid, Paradigm::Project, 0.3);
      Mat fx(t.n_points, 4), fy(t.n_points, 4), fz(t.n_points, 4);
      for (double& v : fx.data()) v = rng.uniform(0.05, 0.95);
      for (double& v : fy.data()) v = rng.uniform(0.05, 0.95);
      for (double& v : fz.data()) v = rng.uniform(0.05, 0.95);
      Mat dx, dy, dz;
      pcate_project_grad(fx, fy, fz, t, dx, dy, dz);
      fd_check(fx.data(), [&] { return pcate_project(fx, fy, fz, t); }, dx.data(),
               "pcate-project", trials);
      fd_check(fz.data(), [&] { return pcate_project(fx, fy, fz, t); }, dz.data(),
               "pcate-project", trials);
    }
  }

  // Full-network backward, both paradigms, every parameter swept.
  SceneSpec net_spec = spec;
  net_spec.points_min = net_spec.points_max = 16;
  net_spec.instances_min = net_spec.instances_max = 2;
  net_spec.rng_seed = 3301;
  PointCloud cloud = generate_scene(net_spec);  // 32 points
  canonicalize(cloud);
  const CubeGrid grid(4);
  for (Paradigm paradigm : {Paradigm::Flatten, Paradigm::Project}) {
    ModelConfig cfg;
    cfg.paradigm = paradigm;
    cfg.n_s = 4;
    cfg.feature_widths = {3, 8, 8};
    cfg.local_stats = false;
    cfg.feature_dim = 8;
    cfg.head_hidden = 8;
    cfg.score_k = 8;
    ModelParams params = init_params(cfg, 3302);
    const TargetSet targets = build_targets(cloud, grid, paradigm, 0.3);
    const ForwardOutputs out = forward(params, cloud, grid);
    OutputGrads ograds;
    total_loss_grads(out, targets, cloud, ograds);
    const ParamGrads analytic = backward(params, cloud, grid, out, ograds);
    auto loss_value = [&]() {
      const ForwardOutputs o = forward(params, cloud, grid);
      return total_loss(o, targets, cloud).total;
    };
    fd_check(params.data, loss_value, analytic.data,
             paradigm == Paradigm::Flatten ? "network-flatten" : "network-project", trials);
  }

  // Default-width network, sampled parameter sweep.
  {
    ModelConfig cfg;
    cfg.paradigm = Paradigm::Flatten;
    cfg.n_s = 4;
    ModelParams params = init_params(cfg, 3303);
    const TargetSet targets = build_targets(cloud, grid, Paradigm::Flatten, 0.3);
    const ForwardOutputs out = forward(params, cloud, grid);
    OutputGrads ograds;
    total_loss_grads(out, targets, cloud, ograds);
    const ParamGrads analytic = backward(params, cloud, grid, out, ograds);
    auto loss_value = [&]() {
      const ForwardOutputs o = forward(params, cloud, grid);
      return total_loss(o, targets, cloud).total;
    };
    Rng rng(3304);
    for (int probe = 0; probe < 400; ++probe) {
      const std::size_t i = std::size_t(rng.uniform_int(0, int(params.data.size()) - 1));
      double fd = 0.0;
      require(fd_matches_one(params.data, i, loss_value, analytic.data[i], &fd),
              "default-width network gradient mismatch at param " + std::to_string(i));
    }
    ++trials;
  }
  require(trials >= 100, "need >= 100 randomized gradient trials, got " + std::to_string(trials));
  note("gradient trials: " + std::to_string(trials));
}

// ---------------------------------------------------------------------------
// 4. Toy training
// ---------------------------------------------------------------------------

struct ToyTrainOutcome {
  std::uint64_t steps = 0;
  double mprec = 0.0;
  double mrec = 0.0;
  Checkpoint checkpoint;
};

ToyTrainOutcome train_toy(Paradigm paradigm, const std::vector<PointCloud>& train_set,
                          const std::vector<PointCloud>& test_set, std::uint64_t max_steps,
                          std::uint64_t fixed_steps = 0) {
  ModelConfig mcfg;
  mcfg.paradigm = paradigm;
  mcfg.n_s = 8;
  TrainConfig tcfg;
  tcfg.paradigm = paradigm;
  tcfg.n_s = 8;
  tcfg.seed = 404;
  const CubeGrid grid(8);

  const std::uint64_t steps_per_epoch =
      (train_set.size() + tcfg.batch_size - 1) / tcfg.batch_size;
  const int epochs_per_chunk = 8;  // evaluate every 8 epochs = 128 steps

  ToyTrainOutcome outcome;
  Checkpoint ckpt;
  bool have_ckpt = false;
  while (true) {
    TrainConfig chunk = tcfg;
    chunk.epochs = epochs_per_chunk;
    const TrainResult r = have_ckpt ? train(train_set, mcfg, chunk, &ckpt)
                                    : train(train_set, mcfg, chunk);
    ckpt = r.checkpoint;
    have_ckpt = true;
    const MetricsReport report = evaluate_epoch(ckpt.params, test_set, grid);
    outcome.steps = ckpt.step;
    outcome.mprec = report.mprec;
    outcome.mrec = report.mrec;
    if (fixed_steps > 0) {
      if (ckpt.step >= fixed_steps) break;
    } else if ((report.mprec >= 0.8 && report.mrec >= 0.8) || ckpt.step >= max_steps) {
      break;
    }
    if (ckpt.step >= max_steps + steps_per_epoch * epochs_per_chunk) break;
  }
  outcome.checkpoint = std::move(ckpt);
  return outcome;
}

void criterion_4() {
  const auto train_set = toy_train_set();
  const auto test_set = toy_test_set();
  for (Paradigm paradigm : {Paradigm::Flatten, Paradigm::Project}) {
    const ToyTrainOutcome o = train_toy(paradigm, train_set, test_set, 5000);
    note(std::string(paradigm_name(paradigm)) + ": mPrec " + std::to_string(o.mprec) +
         ", mRec " + std::to_string(o.mrec) + " at step " + std::to_string(o.steps));
    require(o.steps <= 5000, std::string(paradigm_name(paradigm)) + " exceeded 5k steps");
    require(o.mprec >= 0.8, std::string(paradigm_name(paradigm)) + " mPrec " +
                                std::to_string(o.mprec) + " < 0.8 within 5k steps");
    require(o.mrec >= 0.8, std::string(paradigm_name(paradigm)) + " mRec " +
                               std::to_string(o.mrec) + " < 0.8 within 5k steps");
  }
}

// ---------------------------------------------------------------------------
// 5. Separability comparison
// ---------------------------------------------------------------------------

void criterion_5() {
  const auto train_set = toy_train_set();
  const auto test_set = toy_test_set();
  const std::uint64_t budget = 1024;  // matched step budget for both arms

  const ToyTrainOutcome icm = train_toy(Paradigm::Flatten, train_set, test_set, budget, budget);

  BaselineConfig bcfg;
  bcfg.embed_dim = 4;
  TrainConfig tcfg;
  tcfg.paradigm = Paradigm::Flatten;
  tcfg.n_s = 8;
  tcfg.seed = 404;
  tcfg.epochs = static_cast<int>(budget / ((train_set.size() + 3) / 4));
  const BaselineTrainResult baseline =
      train_baseline(train_set, bcfg, tcfg, DiscriminativeConfig{});
  require(baseline.checkpoint.step == budget, "baseline step budget mismatch");
  require(icm.checkpoint.step == budget, "icm step budget mismatch");

  const CubeGrid grid(8);
  double icm_overlap = 0.0, base_overlap = 0.0;
  for (const PointCloud& scene : test_set) {
    const ForwardOutputs out = forward(icm.checkpoint.params, scene, grid);
    icm_overlap +=
        distance_overlap(category_embeddings(out), scene.instance_ids).overlap_probability;
    const BaselineOutputs bout = baseline_forward(baseline.checkpoint.params, scene);
    base_overlap += distance_overlap(bout.embeddings, scene.instance_ids).overlap_probability;
  }
  icm_overlap /= test_set.size();
  base_overlap /= test_set.size();
  note("overlap probability: instance-category arm " + std::to_string(icm_overlap) +
       ", embed-and-cluster arm " + std::to_string(base_overlap));
  require(base_overlap - icm_overlap >= 0.005,
          "separability margin " + std::to_string(base_overlap - icm_overlap) + " < 0.005");
}

// ---------------------------------------------------------------------------
// 6. Granularity sweep
// ---------------------------------------------------------------------------

// A compact blob mirrored around its nominal center, so the realized centroid
// equals the center up to rounding.
void add_blob(PointCloud& cloud, Vec3 center, int inst, Rng& rng) {
  const double spread = 1e-4;
  for (int i = 0; i < 12; ++i) {
    const Vec3 u{spread * (rng.uniform() - 0.5), spread * (rng.uniform() - 0.5),
                 spread * (rng.uniform() - 0.5)};
    for (const Vec3 q : {center + u, center - u}) {
      cloud.positions.push_back(q);
      cloud.semantic_labels.push_back(0);
      cloud.instance_ids.push_back(inst);
    }
  }
}

// A pair of blobs that provably shares one cube for every grid n <= n_star
// and provably separates for every sweep grid n > n_star: both x coordinates
// sit inside (0, 1/n_star), and every finer grid's first cell boundary 1/n
// falls strictly between them. Close pairs with a known resolution threshold
// are the mechanism behind the coarse-grid overlap.
PointCloud ladder_pair_scene(int n_star, double y, double z, std::uint64_t seed) {
  Rng rng(seed);
  constexpr double kEps = 1e-3;
  PointCloud cloud;
  add_blob(cloud, {kEps, y, z}, 0, rng);
  add_blob(cloud, {1.0 / n_star - kEps, y, z}, 1, rng);
  return cloud;
}

// Pair blobs closer than the finest sweep cell: contested at every grid size.
PointCloud unresolved_pair_scene(double y, double z, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud cloud;
  add_blob(cloud, {0.001, y, z}, 0, rng);
  add_blob(cloud, {0.021, y, z}, 1, rng);
  return cloud;
}

void criterion_6() {
  // Well-separated background scenes (never collide) plus a ladder of close
  // pairs whose resolution thresholds cover the sweep. Collision counts then
  // thin out as the cells shrink past each pair separation, which is the
  // regime the sweep is meant to expose: coarse grids cannot distinguish
  // nearby small objects.
  SceneSpec spec;
  spec.instances_min = 3;
  spec.instances_max = 5;
  spec.points_min = 50;
  spec.points_max = 120;
  spec.size_min = 0.1;
  spec.size_max = 0.2;
  spec.min_centroid_separation = 0.3;
  spec.noise_sigma = 0.003;
  std::vector<PointCloud> clouds = make_dataset(30, 6001, spec);

  const int ladder_counts[10][2] = {{8, 6},  {10, 5}, {12, 4}, {14, 3}, {16, 3},
                                    {18, 2}, {20, 2}, {22, 1}, {24, 1}, {26, 1}};
  std::uint64_t pair_seed = 6100;
  double y = 0.17, z = 0.23;
  auto next_anchor = [&]() {
    y += 0.171;
    if (y > 0.9) y -= 0.73;
    z += 0.233;
    if (z > 0.9) z -= 0.81;
  };
  for (const auto& [n_star, count] : ladder_counts)
    for (int i = 0; i < count; ++i) {
      clouds.push_back(ladder_pair_scene(n_star, y, z, ++pair_seed));
      next_anchor();
    }
  for (int i = 0; i < 2; ++i) {
    clouds.push_back(unresolved_pair_scene(y, z, ++pair_seed));
    next_anchor();
  }
  for (PointCloud& c : clouds) canonicalize(c);

  std::vector<int> ns;
  for (int n = 8; n <= 28; n += 2) ns.push_back(n);
  const auto rows = overlap_sweep(clouds, ns, 0.2);
  std::string series;
  for (const SweepRow& r : rows)
    series += std::to_string(r.n_s) + ":" + std::to_string(r.overlap_rate) + "/" +
              std::to_string(r.oracle_mprec) + " ";
  note("sweep " + series);
  require(rows.front().overlap_rate > 0.0, "coarsest grid shows no collisions; sweep vacuous");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    require(rows[i].overlap_rate <= rows[i - 1].overlap_rate + 1e-12,
            "overlap rate increased between n_s " + std::to_string(rows[i - 1].n_s) + " and " +
                std::to_string(rows[i].n_s));
    require(rows[i].oracle_mprec + 1e-12 >= rows[i - 1].oracle_mprec,
            "oracle precision bound decreased between n_s " + std::to_string(rows[i - 1].n_s) +
                " and " + std::to_string(rows[i].n_s));
  }
}

// ---------------------------------------------------------------------------
// 7. Paradigm cost
// ---------------------------------------------------------------------------

void criterion_7() {
  SceneSpec spec;
  spec.instances_min = spec.instances_max = 4;
  spec.points_min = spec.points_max = 1024;  // 4096 points total
  spec.size_min = 0.12;
  spec.size_max = 0.28;
  spec.min_centroid_separation = 0.3;
  spec.rng_seed = 7007;
  const PointCloud cloud = generate_scene(spec);
  require(cloud.size() == 4096, "expected a 4096-point scene");

  ModelConfig fcfg;
  fcfg.paradigm = Paradigm::Flatten;
  fcfg.n_s = 20;
  ModelConfig pcfg = fcfg;
  pcfg.paradigm = Paradigm::Project;
  const ModelParams flatten_params = init_params(fcfg, 7008);
  const ModelParams project_params = init_params(pcfg, 7009);

  const LatencyReport r = latency_bench(flatten_params, project_params, cloud, 11);
  note("flatten " + std::to_string(r.flatten_median_ms) + " ms, project " +
       std::to_string(r.project_median_ms) + " ms, ratio " + std::to_string(r.ratio) +
       ", peak bytes " + std::to_string(r.flatten_peak_bytes) + " vs " +
       std::to_string(r.project_peak_bytes));
  require(r.ratio > 1.1, "flatten/project latency ratio " + std::to_string(r.ratio) + " <= 1.1");
  require(r.project_peak_bytes < r.flatten_peak_bytes,
          "project peak decode memory is not lower than flatten");
}

// ---------------------------------------------------------------------------
// 8. Metric oracle
// ---------------------------------------------------------------------------

int oracle_greedy_matches(const std::vector<Bitmask>& gt,
                          const std::vector<InstancePrediction>& preds, double thr) {
  std::vector<bool> used(preds.size(), false), taken(gt.size(), false);
  int matched = 0;
  for (std::size_t round = 0; round < preds.size(); ++round) {
    int pick = -1;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (used[i]) continue;
      if (pick < 0 || preds[i].score > preds[pick].score ||
          (preds[i].score == preds[pick].score && preds[i].cube_index < preds[pick].cube_index))
        pick = static_cast<int>(i);
    }
    used[pick] = true;
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const double v = Bitmask::iou(gt[g], preds[pick].mask);
      if (v >= thr && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++matched;
    }
  }
  return matched;
}

// Independent AP: explicit TP flags via the same greedy rule coded separately,
// then direct area accumulation over the stepwise PR curve.
double oracle_ap(const std::vector<Bitmask>& gt, std::vector<InstancePrediction> preds,
                 double thr) {
  if (gt.empty()) return 0.0;
  std::sort(preds.begin(), preds.end(), [](const InstancePrediction& a, const InstancePrediction& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cube_index < b.cube_index;
  });
  std::vector<bool> taken(gt.size(), false);
  std::vector<int> tp_at;
  int tp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const double v = Bitmask::iou(gt[g], preds[i].mask);
      if (v >= thr && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++tp;
    }
    tp_at.push_back(tp);
  }
  double ap = 0.0;
  const double n_gt = static_cast<double>(gt.size());
  for (std::size_t i = 0; i < tp_at.size(); ++i) {
    const int prev = i == 0 ? 0 : tp_at[i - 1];
    if (tp_at[i] == prev) continue;  // recall unchanged
    // precision envelope at this recall level
    double best_prec = 0.0;
    for (std::size_t j = i; j < tp_at.size(); ++j)
      best_prec = std::max(best_prec, tp_at[j] / static_cast<double>(j + 1));
    ap += (tp_at[i] - prev) / n_gt * best_prec;
  }
  return ap;
}

void criterion_8() {
  Rng rng(8001);
  int scenes = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n_points = 24;
    const int k = rng.uniform_int(1, 5);
    std::vector<int> gt(n_points);
    for (int p = 0; p < n_points; ++p) gt[p] = rng.uniform_int(-1, k - 1);
    bool all_present = true;
    for (int g = 0; g < k; ++g)
      if (std::count(gt.begin(), gt.end(), g) == 0) all_present = false;
    if (!all_present) continue;
    ++scenes;

    const int n_preds = rng.uniform_int(0, 6);
    std::vector<InstancePrediction> preds;
    for (int i = 0; i < n_preds; ++i) {
      InstancePrediction p;
      p.mask = Bitmask(n_points);
      bool any = false;
      for (int q = 0; q < n_points; ++q)
        if (rng.uniform() < 0.3) {
          p.mask.set(q);
          any = true;
        }
      if (!any) p.mask.set(rng.uniform_int(0, n_points - 1));
      p.score = rng.uniform_int(1, 5) / 5.0;
      p.cube_index = i;
      p.semantic_class = 0;
      preds.push_back(std::move(p));
    }

    std::vector<Bitmask> gt_masks(k, Bitmask(n_points));
    std::size_t labeled = 0;
    for (int p = 0; p < n_points; ++p)
      if (gt[p] >= 0) {
        gt_masks[gt[p]].set(p);
        ++labeled;
      }

    double cov = 0.0, wcov = 0.0;
    for (const Bitmask& m : gt_masks) {
      double best = 0.0;
      for (const auto& p : preds) best = std::max(best, Bitmask::iou(m, p.mask));
      cov += best / k;
      wcov += best * static_cast<double>(m.count()) / static_cast<double>(labeled);
    }
    const auto [got_cov, got_wcov] = coverage_metrics(gt, preds);
    require(std::fabs(got_cov - cov) <= 1e-12, "mCov disagrees with the brute-force matcher");
    require(std::fabs(got_wcov - wcov) <= 1e-12, "mWCov disagrees with the brute-force matcher");

    const int matched = oracle_greedy_matches(gt_masks, preds, 0.5);
    const PrecRec pr = prec_rec(gt, preds, 0.5);
    if (!preds.empty())
      require(std::fabs(pr.mprec - double(matched) / preds.size()) <= 1e-12,
              "mPrec disagrees with the brute-force matcher");
    require(std::fabs(pr.mrec - double(matched) / k) <= 1e-12,
            "mRec disagrees with the brute-force matcher");

    // Single-class AP against the independent implementation, two thresholds.
    SceneGroundTruth sgt;
    sgt.n_points = n_points;
    sgt.masks = gt_masks;
    sgt.classes.assign(k, 0);
    for (double thr : {0.25, 0.5}) {
      const std::vector<double> thrv = {thr};
      const double got = average_precision(sgt, preds, thrv)[0];
      require(std::fabs(got - oracle_ap(gt_masks, preds, thr)) <= 1e-12,
              "AP disagrees with the brute-force matcher");
    }
  }
  require(scenes >= 100, "too few valid random scenes: " + std::to_string(scenes));
  note("scenes cross-checked: " + std::to_string(scenes));
}

// ---------------------------------------------------------------------------
// 9. CLI determinism
// ---------------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  require(bool(f), "missing output file: " + p.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void run_cli(const std::string& cli, const std::string& args) {
  const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  require(rc == 0, "CLI command failed (" + std::to_string(rc) + "): " + cmd);
}

void criterion_9() {
  const char* cli_env = std::getenv("CUBESEG_CLI");
  std::string cli = cli_env ? cli_env : "";
  if (cli.empty()) {
    for (const char* probe : {"./tools/cubeseg", "../tools/cubeseg", "build/tools/cubeseg"})
      if (fs::exists(probe)) {
        cli = probe;
        break;
      }
  }
  require(!cli.empty(), "CLI binary not found; set CUBESEG_CLI");

  const fs::path root = fs::temp_directory_path() / "cubeseg_acceptance_9";
  fs::remove_all(root);
  fs::create_directories(root);

  const std::string gen_cfg =
      "--set dataset.count=4 --set dataset.seed=11 --set scene.instances_min=2 "
      "--set scene.instances_max=3 --set scene.points_min=40 --set scene.points_max=60 "
      "--set scene.min_separation=0.3";
  for (const char* run : {"a", "b"}) {
    run_cli(cli, "generate --out " + (root / ("data_" + std::string(run))).string() + " " +
                     gen_cfg + " --threads 1");
  }
  for (const char* name : {"manifest.json", "scene_0000.csv", "scene_0003.csv",
                           "config.resolved"}) {
    require(file_bytes(root / "data_a" / name) == file_bytes(root / "data_b" / name),
            std::string("generate outputs differ: ") + name);
  }

  const std::string train_cfg =
      "--set train.epochs=8 --set train.n_s=4 --set train.batch_size=2 --set train.seed=5 "
      "--set model.feature_widths=3,12,12 --set model.feature_dim=12 "
      "--set model.head_hidden=8 --set model.score_k=8";
  for (const char* run : {"a", "b"}) {
    run_cli(cli, "train --data " + (root / "data_a").string() + " --out " +
                     (root / ("train_" + std::string(run))).string() + " " + train_cfg +
                     " --threads 1");
  }
  for (const char* name : {"checkpoint.ckpt", "trainlog.csv", "config.resolved"}) {
    require(file_bytes(root / "train_a" / name) == file_bytes(root / "train_b" / name),
            std::string("train outputs differ: ") + name);
  }

  for (const char* run : {"a", "b"}) {
    run_cli(cli, "eval --params " + (root / "train_a" / "checkpoint.ckpt").string() +
                     " --data " + (root / "data_a").string() + " --out " +
                     (root / ("eval_" + std::string(run))).string() + " --threads 1");
    run_cli(cli, "infer --params " + (root / "train_a" / "checkpoint.ckpt").string() +
                     " --cloud " + (root / "data_a" / "scene_0000.csv").string() + " --out " +
                     (root / ("infer_" + std::string(run))).string() + " --threads 1");
  }
  require(file_bytes(root / "eval_a" / "metrics.csv") == file_bytes(root / "eval_b" / "metrics.csv"),
          "eval metrics differ between runs");
  require(file_bytes(root / "infer_a" / "predictions.csv") ==
              file_bytes(root / "infer_b" / "predictions.csv"),
          "infer predictions differ between runs");
  require(file_bytes(root / "infer_a" / "partition.csv") ==
              file_bytes(root / "infer_b" / "partition.csv"),
          "infer partitions differ between runs");
  fs::remove_all(root);
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* title;
  void (*fn)();
};

const Criterion kCriteria[] = {
    {1, "encoding equivalence (project column product == flatten column)", criterion_1},
    {2, "oracle round-trip (mPrec = mRec = 1.0 on collision-free scenes)", criterion_2},
    {3, "gradient correctness vs central finite differences", criterion_3},
    {4, "toy training reaches mPrec/mRec >= 0.8 within 5k steps, both paradigms", criterion_4},
    {5, "separability: lower distance overlap than the embed-and-cluster arm", criterion_5},
    {6, "granularity sweep: overlap rate down, oracle precision bound up", criterion_6},
    {7, "paradigm cost: project faster (>1.1x) and smaller than flatten", criterion_7},
    {8, "metrics agree exactly with brute-force matchers", criterion_8},
    {9, "CLI determinism: byte-identical outputs at --threads 1", criterion_9},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    g_notes.clear();
    const auto t0 = std::chrono::steady_clock::now();
    std::string failure;
    try {
      c.fn();
    } catch (const Failure& f) {
      failure = f.detail;
    } catch (const std::exception& e) {
      failure = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char timing[32];
    std::snprintf(timing, sizeof(timing), "%.1fs", secs);
    if (failure.empty()) {
      std::cout << "[PASS] criterion " << c.id << ": " << c.title << " (" << timing << ")\n";
    } else {
      std::cout << "[FAIL] criterion " << c.id << ": " << c.title << " (" << timing << ") - "
                << failure << "\n";
      ++failures;
    }
    for (const std::string& n : g_notes) std::cout << "       " << n << "\n";
  }
  return failures == 0 ? 0 : 1;
}
