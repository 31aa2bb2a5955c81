#include "cubeseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <numeric>

namespace cubeseg {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0))
    throw ConfigError("decay_factor must be in (0,1]");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n_s < 2) throw ConfigError("n_s must be >= 2");
  if (!(center_scale > 0.0 && center_scale <= 1.0))
    throw ConfigError("center_scale must be in (0,1]");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

double lr_at_step(const TrainConfig& cfg, std::uint64_t steps_done) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(steps_done / cfg.decay_every));
}

void TrainingLog::to_csv(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << "step,l_pcate,l_score,l_sem,total\n";
  char buf[160];
  for (const TrainingLogRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.loss.l_pcate, r.loss.l_score,
                  r.loss.l_sem, r.loss.total);
    f << buf;
  }
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, epoch + 1));
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
  return order;
}

void adam_update(std::vector<double>& params, const std::vector<double>& grad, AdamState& st,
                 double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++st.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    params[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
  }
}

void check_finite(const LossBreakdown& loss, std::uint64_t step) {
  const char* component = nullptr;
  if (!std::isfinite(loss.l_pcate)) component = "l_pcate";
  else if (!std::isfinite(loss.l_score)) component = "l_score";
  else if (!std::isfinite(loss.l_sem)) component = "l_sem";
  else if (!std::isfinite(loss.total)) component = "total";
  if (component)
    throw NumericError("non-finite " + std::string(component) + " at step " +
                       std::to_string(step));
}

template <typename SceneGrad>
void run_batch(std::span<const std::size_t> batch, int threads,
               const std::function<SceneGrad(std::size_t)>& work,
               std::vector<SceneGrad>& results) {
  results.clear();
  results.resize(batch.size());
  if (threads <= 1 || batch.size() <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) results[i] = work(batch[i]);
    return;
  }
  std::vector<std::future<SceneGrad>> futures;
  futures.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    futures.push_back(std::async(std::launch::async, work, batch[i]));
  for (std::size_t i = 0; i < batch.size(); ++i) results[i] = futures[i].get();
}

}  // namespace

TrainResult train(std::span<const PointCloud> dataset, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, const Checkpoint* resume) {
  tcfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");
  if (mcfg.paradigm != tcfg.paradigm || mcfg.n_s != tcfg.n_s)
    throw ConfigError("model and train configuration disagree on paradigm or n_s");

  const CubeGrid grid(tcfg.n_s);
  std::vector<PointCloud> scenes(dataset.begin(), dataset.end());
  for (PointCloud& s : scenes) canonicalize(s);
  std::vector<TargetSet> targets;
  targets.reserve(scenes.size());
  for (const PointCloud& s : scenes)
    targets.push_back(build_targets(s, grid, tcfg.paradigm, tcfg.center_scale));

  TrainResult result;
  if (resume) {
    if (!(resume->params.cfg == mcfg))
      throw ConfigError("resume checkpoint configuration mismatch");
    result.checkpoint = *resume;
    if (!result.checkpoint.adam) {
      result.checkpoint.adam = AdamState{};
      result.checkpoint.adam->m.assign(result.checkpoint.params.data.size(), 0.0);
      result.checkpoint.adam->v.assign(result.checkpoint.params.data.size(), 0.0);
    }
  } else {
    result.checkpoint.params = init_params(mcfg, tcfg.seed);
    result.checkpoint.adam = AdamState{};
    result.checkpoint.adam->m.assign(result.checkpoint.params.data.size(), 0.0);
    result.checkpoint.adam->v.assign(result.checkpoint.params.data.size(), 0.0);
  }
  ModelParams& params = result.checkpoint.params;
  AdamState& adam = *result.checkpoint.adam;

  struct SceneResult {
    std::vector<double> grad;
    LossBreakdown loss;
  };

  std::function<SceneResult(std::size_t)> work = [&](std::size_t idx) {
    const ForwardOutputs out = forward(params, scenes[idx], grid);
    OutputGrads ograds;
    SceneResult r;
    r.loss = total_loss_grads(out, targets[idx], scenes[idx], ograds);
    r.grad = std::move(backward(params, scenes[idx], grid, out, ograds).data);
    return r;
  };

  const std::uint64_t epoch0 = result.checkpoint.epoch;
  std::vector<SceneResult> batch_results;
  for (int e = 0; e < tcfg.epochs; ++e) {
    const std::uint64_t epoch = epoch0 + static_cast<std::uint64_t>(e);
    const std::vector<std::size_t> order = epoch_order(scenes.size(), tcfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t len = std::min<std::size_t>(tcfg.batch_size, order.size() - start);
      run_batch(std::span(order).subspan(start, len), tcfg.threads, work, batch_results);

      // Mean of per-scene gradients, reduced in batch order.
      std::vector<double> grad(params.data.size(), 0.0);
      LossBreakdown mean;
      for (const SceneResult& sr : batch_results) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += sr.grad[i];
        mean.l_pcate += sr.loss.l_pcate;
        mean.l_score += sr.loss.l_score;
        mean.l_sem += sr.loss.l_sem;
      }
      const double inv = 1.0 / static_cast<double>(len);
      for (double& g : grad) g *= inv;
      mean.l_pcate *= inv;
      mean.l_score *= inv;
      mean.l_sem *= inv;
      mean.total = mean.l_pcate + mean.l_score + mean.l_sem;
      check_finite(mean, result.checkpoint.step + 1);

      adam_update(params.data, grad, adam, lr_at_step(tcfg, result.checkpoint.step));
      ++result.checkpoint.step;
      result.log.rows.push_back({result.checkpoint.step, mean});
    }
    result.checkpoint.epoch = epoch + 1;
  }
  return result;
}

MetricsReport evaluate_epoch(const ModelParams& params, std::span<const PointCloud> dataset,
                             const CubeGrid& grid, const InferConfig& infer_cfg) {
  if (dataset.empty()) throw DataError("evaluation dataset is empty");
  std::vector<MetricsReport> reports;
  reports.reserve(dataset.size());
  for (const PointCloud& scene : dataset) {
    const ForwardOutputs out = forward(params, scene, grid);
    std::vector<InstancePrediction> preds;
    if (params.cfg.paradigm == Paradigm::Flatten)
      preds = decode_flatten(out.category_scores, out.cube_scores, out.semantic_logits, infer_cfg);
    else
      preds = decode_project(out.axis_scores_x, out.axis_scores_y, out.axis_scores_z,
                             out.cube_scores, out.semantic_logits, grid, infer_cfg);
    reports.push_back(eval_scene(scene, preds));
  }
  return average_reports(reports);
}

BaselineTrainResult train_baseline(std::span<const PointCloud> dataset, const BaselineConfig& bcfg,
                                   const TrainConfig& tcfg, const DiscriminativeConfig& dcfg,
                                   const BaselineCheckpoint* resume) {
  tcfg.validate();
  bcfg.validate();
  dcfg.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");

  std::vector<PointCloud> scenes(dataset.begin(), dataset.end());
  for (PointCloud& s : scenes) canonicalize(s);

  BaselineTrainResult result;
  if (resume) {
    if (!(resume->params.cfg == bcfg))
      throw ConfigError("resume checkpoint configuration mismatch");
    result.checkpoint = *resume;
    if (!result.checkpoint.adam) {
      result.checkpoint.adam = AdamState{};
      result.checkpoint.adam->m.assign(result.checkpoint.params.data.size(), 0.0);
      result.checkpoint.adam->v.assign(result.checkpoint.params.data.size(), 0.0);
    }
  } else {
    result.checkpoint.params = init_baseline_params(bcfg, tcfg.seed);
    result.checkpoint.adam = AdamState{};
    result.checkpoint.adam->m.assign(result.checkpoint.params.data.size(), 0.0);
    result.checkpoint.adam->v.assign(result.checkpoint.params.data.size(), 0.0);
  }
  BaselineParams& params = result.checkpoint.params;
  AdamState& adam = *result.checkpoint.adam;

  struct SceneResult {
    std::vector<double> grad;
    DiscriminativeLoss loss;
  };
  std::function<SceneResult(std::size_t)> work = [&](std::size_t idx) {
    const BaselineOutputs out = baseline_forward(params, scenes[idx]);
    SceneResult r;
    r.loss = discriminative_loss(out.embeddings, scenes[idx].instance_ids, dcfg);
    const Mat d_embed = discriminative_grad(out.embeddings, scenes[idx].instance_ids, dcfg);
    r.grad = std::move(baseline_backward(params, scenes[idx], out, d_embed).data);
    return r;
  };

  const std::uint64_t epoch0 = result.checkpoint.epoch;
  std::vector<SceneResult> batch_results;
  for (int e = 0; e < tcfg.epochs; ++e) {
    const std::uint64_t epoch = epoch0 + static_cast<std::uint64_t>(e);
    const std::vector<std::size_t> order = epoch_order(scenes.size(), tcfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t len = std::min<std::size_t>(tcfg.batch_size, order.size() - start);
      run_batch(std::span(order).subspan(start, len), tcfg.threads, work, batch_results);

      std::vector<double> grad(params.data.size(), 0.0);
      DiscriminativeLoss mean;
      for (const SceneResult& sr : batch_results) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += sr.grad[i];
        mean.pull += sr.loss.pull;
        mean.push += sr.loss.push;
      }
      const double inv = 1.0 / static_cast<double>(len);
      for (double& g : grad) g *= inv;
      mean.pull *= inv;
      mean.push *= inv;
      if (!std::isfinite(mean.total()))
        throw NumericError("non-finite discriminative loss at step " +
                           std::to_string(result.checkpoint.step + 1));

      adam_update(params.data, grad, adam, lr_at_step(tcfg, result.checkpoint.step));
      ++result.checkpoint.step;
      result.log.emplace_back(result.checkpoint.step, mean);
    }
    result.checkpoint.epoch = epoch + 1;
  }
  return result;
}

}  // namespace cubeseg
