#include "cubeseg/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

namespace cubeseg {

SceneGroundTruth ground_truth_of(const PointCloud& cloud) {
  SceneGroundTruth gt;
  gt.n_points = cloud.size();
  const std::vector<int> ids = canonical_ids(cloud.instance_ids);
  const int k = *std::max_element(ids.begin(), ids.end()) + 1;
  if (k < 1) throw DataError("scene has no ground-truth instances");
  gt.masks.assign(k, Bitmask(cloud.size()));
  std::vector<std::map<int, int>> votes(k);
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    if (ids[p] < 0) continue;
    gt.masks[ids[p]].set(p);
    ++votes[ids[p]][cloud.semantic_labels[p]];
  }
  gt.classes.resize(k);
  for (int i = 0; i < k; ++i) {
    int best_cls = votes[i].begin()->first;
    int best_n = votes[i].begin()->second;
    for (const auto& [cls, n] : votes[i])
      if (n > best_n) {
        best_cls = cls;
        best_n = n;
      }
    gt.classes[i] = best_cls;
  }
  return gt;
}

std::vector<double> ap_thresholds() {
  std::vector<double> t = {0.25};
  for (int i = 0; i <= 9; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

std::vector<Bitmask> partition_masks(std::span<const int> gt_partition) {
  int k = 0;
  for (int id : gt_partition) k = std::max(k, id + 1);
  if (k < 1) throw DataError("partition has no ground-truth instances");
  std::vector<Bitmask> masks(k, Bitmask(gt_partition.size()));
  for (std::size_t p = 0; p < gt_partition.size(); ++p)
    if (gt_partition[p] >= 0) masks[gt_partition[p]].set(p);
  return masks;
}

/// Prediction order used everywhere: score descending, ties by cube index.
std::vector<std::size_t> score_order(std::span<const InstancePrediction> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
    return preds[a].cube_index < preds[b].cube_index;
  });
  return order;
}

}  // namespace

std::pair<double, double> coverage_metrics(std::span<const int> gt_partition,
                                           std::span<const InstancePrediction> predictions) {
  const std::vector<Bitmask> gt = partition_masks(gt_partition);
  double cov = 0.0, wcov = 0.0;
  std::size_t labeled = 0;
  for (const Bitmask& m : gt) labeled += m.count();
  for (const Bitmask& m : gt) {
    double best = 0.0;
    for (const InstancePrediction& p : predictions)
      best = std::max(best, Bitmask::iou(m, p.mask));
    cov += best;
    wcov += best * static_cast<double>(m.count()) / static_cast<double>(labeled);
  }
  return {cov / static_cast<double>(gt.size()), wcov};
}

PrecRec prec_rec(std::span<const int> gt_partition,
                 std::span<const InstancePrediction> predictions, double iou) {
  const std::vector<Bitmask> gt = partition_masks(gt_partition);
  PrecRec result;
  if (predictions.empty()) {
    result.zero_predictions = true;
    return result;  // precision defined as 0, flagged
  }
  std::vector<bool> taken(gt.size(), false);
  int matched = 0;
  for (std::size_t i : score_order(predictions)) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const double v = Bitmask::iou(gt[g], predictions[i].mask);
      if (v >= iou && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++matched;
    }
  }
  result.mprec = static_cast<double>(matched) / static_cast<double>(predictions.size());
  result.mrec = static_cast<double>(matched) / static_cast<double>(gt.size());
  return result;
}

namespace {

/// AP of one class at one threshold: greedy score-ranked matching, then
/// all-points interpolated area under the PR curve.
double ap_single(const std::vector<Bitmask>& gt_masks,
                 std::span<const InstancePrediction> preds,
                 const std::vector<std::size_t>& order, double threshold) {
  if (gt_masks.empty()) return 0.0;
  std::vector<bool> taken(gt_masks.size(), false);
  std::vector<bool> is_tp;
  is_tp.reserve(order.size());
  for (std::size_t i : order) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt_masks.size(); ++g) {
      if (taken[g]) continue;
      const double v = Bitmask::iou(gt_masks[g], preds[i].mask);
      if (v >= threshold && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) taken[best] = true;
    is_tp.push_back(best >= 0);
  }

  const double n_gt = static_cast<double>(gt_masks.size());
  std::vector<double> precision(is_tp.size()), recall(is_tp.size());
  int tp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    if (is_tp[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / n_gt;
  }
  // Precision envelope from the right, integrated at recall increments.
  double ap = 0.0;
  double max_prec = 0.0;
  for (std::size_t i = is_tp.size(); i-- > 0;) {
    max_prec = std::max(max_prec, precision[i]);
    const double prev_recall = i == 0 ? 0.0 : recall[i - 1];
    ap += (recall[i] - prev_recall) * max_prec;
  }
  return ap;
}

}  // namespace

std::vector<double> average_precision(const SceneGroundTruth& gt,
                                      std::span<const InstancePrediction> predictions,
                                      std::span<const double> thresholds) {
  std::vector<int> classes;
  for (int c : gt.classes)
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
  std::sort(classes.begin(), classes.end());

  std::vector<double> out(thresholds.size(), 0.0);
  for (int cls : classes) {
    std::vector<Bitmask> gt_masks;
    for (std::size_t g = 0; g < gt.masks.size(); ++g)
      if (gt.classes[g] == cls) gt_masks.push_back(gt.masks[g]);

    std::vector<InstancePrediction> preds;
    for (const InstancePrediction& p : predictions)
      if (p.semantic_class == cls) preds.push_back(p);
    const std::vector<std::size_t> order = score_order(preds);

    for (std::size_t t = 0; t < thresholds.size(); ++t)
      out[t] += ap_single(gt_masks, preds, order, thresholds[t]);
  }
  for (double& v : out) v /= static_cast<double>(classes.size());
  return out;
}

MetricsReport eval_scene(const PointCloud& gt_cloud,
                         std::span<const InstancePrediction> predictions, double match_iou) {
  MetricsReport r;
  r.scene_count = 1;
  const std::vector<int> gt_partition = canonical_ids(gt_cloud.instance_ids);
  const auto [mcov, mwcov] = coverage_metrics(gt_partition, predictions);
  r.mcov = mcov;
  r.mwcov = mwcov;
  const PrecRec pr = prec_rec(gt_partition, predictions, match_iou);
  r.mprec = pr.mprec;
  r.mrec = pr.mrec;
  r.zero_prediction_flag = pr.zero_predictions;

  const SceneGroundTruth gt = ground_truth_of(gt_cloud);
  const std::vector<double> thresholds = ap_thresholds();
  r.ap_by_threshold = average_precision(gt, predictions, thresholds);
  double avg = 0.0;
  for (std::size_t t = 1; t < thresholds.size(); ++t) avg += r.ap_by_threshold[t];
  r.map_avg = avg / static_cast<double>(thresholds.size() - 1);

  std::vector<int> classes;
  for (int c : gt.classes)
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
  std::sort(classes.begin(), classes.end());
  for (int cls : classes) {
    SceneGroundTruth sub;
    sub.n_points = gt.n_points;
    for (std::size_t g = 0; g < gt.masks.size(); ++g)
      if (gt.classes[g] == cls) {
        sub.masks.push_back(gt.masks[g]);
        sub.classes.push_back(cls);
      }
    const std::vector<double> ap = average_precision(sub, predictions, thresholds);
    PerClassMetrics pc;
    pc.cls = cls;
    pc.ap25 = ap[0];
    pc.ap50 = ap[1];
    double s = 0.0;
    for (std::size_t t = 1; t < thresholds.size(); ++t) s += ap[t];
    pc.map_avg = s / static_cast<double>(thresholds.size() - 1);
    r.per_class.push_back(pc);
  }
  return r;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DataError("no reports to average");
  MetricsReport out;
  out.ap_by_threshold.assign(ap_thresholds().size(), 0.0);
  std::map<int, std::pair<PerClassMetrics, int>> per_class;
  for (const MetricsReport& r : reports) {
    out.mcov += r.mcov;
    out.mwcov += r.mwcov;
    out.mprec += r.mprec;
    out.mrec += r.mrec;
    out.map_avg += r.map_avg;
    out.scene_count += r.scene_count;
    out.zero_prediction_flag = out.zero_prediction_flag || r.zero_prediction_flag;
    for (std::size_t t = 0; t < out.ap_by_threshold.size(); ++t)
      out.ap_by_threshold[t] += r.ap_by_threshold[t];
    for (const PerClassMetrics& pc : r.per_class) {
      auto& [acc, n] = per_class[pc.cls];
      acc.cls = pc.cls;
      acc.ap25 += pc.ap25;
      acc.ap50 += pc.ap50;
      acc.map_avg += pc.map_avg;
      ++n;
    }
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  out.mcov *= inv;
  out.mwcov *= inv;
  out.mprec *= inv;
  out.mrec *= inv;
  out.map_avg *= inv;
  for (double& v : out.ap_by_threshold) v *= inv;
  for (auto& [cls, entry] : per_class) {
    auto& [acc, n] = entry;
    acc.ap25 /= n;
    acc.ap50 /= n;
    acc.map_avg /= n;
    out.per_class.push_back(acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding separability
// ---------------------------------------------------------------------------

DistanceOverlapReport distance_overlap(const Mat& embeddings, std::span<const int> instance_ids,
                                       int bins) {
  if (bins < 1) throw ConfigError("bins must be >= 1");
  if (embeddings.rows() != instance_ids.size()) throw DataError("embedding/id count mismatch");
  const std::vector<int> ids = canonical_ids(instance_ids);
  int k = 0;
  for (int id : ids) k = std::max(k, id + 1);
  if (k < 2) throw DataError("distance overlap needs at least two instances");

  std::vector<std::size_t> labeled;
  for (std::size_t p = 0; p < ids.size(); ++p)
    if (ids[p] >= 0) labeled.push_back(p);

  const std::size_t dim = embeddings.cols();
  std::vector<double> intra_d, inter_d;
  double hi = 0.0;
  for (std::size_t a = 0; a < labeled.size(); ++a) {
    const double* ra = embeddings.row(labeled[a]);
    for (std::size_t b = a + 1; b < labeled.size(); ++b) {
      const double* rb = embeddings.row(labeled[b]);
      double d2 = 0.0;
      for (std::size_t c = 0; c < dim; ++c) d2 += (ra[c] - rb[c]) * (ra[c] - rb[c]);
      const double d = std::sqrt(d2);
      hi = std::max(hi, d);
      (ids[labeled[a]] == ids[labeled[b]] ? intra_d : inter_d).push_back(d);
    }
  }

  DistanceOverlapReport r;
  r.bin_lo = 0.0;
  r.bin_hi = hi;
  r.intra_pairs = intra_d.size();
  r.inter_pairs = inter_d.size();
  r.intra_histogram.assign(bins, 0.0);
  r.inter_histogram.assign(bins, 0.0);

  auto bin_of = [&](double d) {
    if (hi <= 0.0) return 0;
    int b = static_cast<int>(std::floor(d / hi * bins));
    return std::min(b, bins - 1);
  };
  for (double d : intra_d) r.intra_histogram[bin_of(d)] += 1.0;
  for (double d : inter_d) r.inter_histogram[bin_of(d)] += 1.0;
  if (!intra_d.empty())
    for (double& v : r.intra_histogram) v /= static_cast<double>(intra_d.size());
  if (!inter_d.empty())
    for (double& v : r.inter_histogram) v /= static_cast<double>(inter_d.size());

  for (int b = 0; b < bins; ++b)
    r.overlap_probability += std::min(r.intra_histogram[b], r.inter_histogram[b]);
  return r;
}

Mat category_embeddings(const ForwardOutputs& outputs) {
  if (!outputs.category_scores.empty()) return outputs.category_scores;
  const Mat& fx = outputs.axis_scores_x;
  const Mat& fy = outputs.axis_scores_y;
  const Mat& fz = outputs.axis_scores_z;
  Mat out(fx.rows(), fx.cols() + fy.cols() + fz.cols());
  for (std::size_t p = 0; p < fx.rows(); ++p) {
    double* row = out.row(p);
    std::copy(fx.row(p), fx.row(p) + fx.cols(), row);
    std::copy(fy.row(p), fy.row(p) + fy.cols(), row + fx.cols());
    std::copy(fz.row(p), fz.row(p) + fz.cols(), row + fx.cols() + fy.cols());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Granularity sweep
// ---------------------------------------------------------------------------

std::vector<SweepRow> overlap_sweep(std::span<const PointCloud> clouds,
                                    std::span<const int> ns_values, double scale) {
  std::vector<SweepRow> rows;
  for (int n_s : ns_values) {
    const CubeGrid grid(n_s);
    SweepRow row;
    row.n_s = n_s;
    long long positives = 0, collisions = 0, instances = 0, kept = 0;
    for (const PointCloud& cloud : clouds) {
      const TargetSet t = build_targets(cloud, grid, Paradigm::Flatten, scale);
      positives += t.n_positive();
      collisions += t.collision_count;
      instances += t.instance_count();
      for (const auto& owned : t.owned_cubes)
        if (!owned.empty()) ++kept;
    }
    row.overlap_rate =
        positives == 0 ? 0.0 : static_cast<double>(collisions) / static_cast<double>(positives);
    row.oracle_mprec =
        instances == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(instances);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

LatencyReport latency_bench(const ModelParams& flatten_params, const ModelParams& project_params,
                            const PointCloud& cloud, int repeats, const InferConfig& cfg) {
  if (flatten_params.cfg.paradigm != Paradigm::Flatten ||
      project_params.cfg.paradigm != Paradigm::Project)
    throw ConfigError("latency bench needs one flatten and one project checkpoint");
  if (flatten_params.cfg.n_s != project_params.cfg.n_s)
    throw ConfigError("latency bench checkpoints must share grid resolution");
  if (flatten_params.cfg.feature_dim != project_params.cfg.feature_dim)
    throw ConfigError("latency bench checkpoints must share feature width");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");

  const CubeGrid grid(flatten_params.cfg.n_s);
  LatencyReport r;

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };

  // Untimed warm-up pass per paradigm so that repeats=1 is not dominated by
  // cold caches and first-touch page faults.
  {
    ForwardOutputs out = forward(flatten_params, cloud, grid);
    decode_flatten(out.category_scores, out.cube_scores, out.semantic_logits, cfg);
    ForwardOutputs pout = forward(project_params, cloud, grid);
    decode_project(pout.axis_scores_x, pout.axis_scores_y, pout.axis_scores_z, pout.cube_scores,
                   pout.semantic_logits, grid, cfg);
  }

  for (int rep = 0; rep < repeats; ++rep) {
    {
      const auto t0 = std::chrono::steady_clock::now();
      ForwardOutputs out = forward(flatten_params, cloud, grid);
      DecodeStats stats;
      const auto preds =
          decode_flatten(out.category_scores, out.cube_scores, out.semantic_logits, cfg, &stats);
      const auto t1 = std::chrono::steady_clock::now();
      (void)preds;
      r.flatten_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      r.flatten_peak_bytes = std::max(r.flatten_peak_bytes,
                                      out.head_output_bytes() + stats.decode_bytes);
    }
    {
      const auto t0 = std::chrono::steady_clock::now();
      ForwardOutputs out = forward(project_params, cloud, grid);
      DecodeStats stats;
      const auto preds = decode_project(out.axis_scores_x, out.axis_scores_y, out.axis_scores_z,
                                        out.cube_scores, out.semantic_logits, grid, cfg, &stats);
      const auto t1 = std::chrono::steady_clock::now();
      (void)preds;
      r.project_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      r.project_peak_bytes = std::max(r.project_peak_bytes,
                                      out.head_output_bytes() + stats.decode_bytes);
    }
  }
  r.flatten_median_ms = median(r.flatten_ms);
  r.project_median_ms = median(r.project_ms);
  r.ratio = r.flatten_median_ms / r.project_median_ms;
  return r;
}

}  // namespace cubeseg
