#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cubeseg/common.hpp"
#include "cubeseg/grid.hpp"
#include "cubeseg/infer.hpp"
#include "cubeseg/model.hpp"
#include "cubeseg/scene.hpp"

namespace cubeseg {

/// Ground-truth instance masks and classes of one scene (class = majority
/// semantic label over the instance's points).
struct SceneGroundTruth {
  std::vector<Bitmask> masks;
  std::vector<int> classes;
  std::size_t n_points = 0;
};

SceneGroundTruth ground_truth_of(const PointCloud& cloud);

/// AP thresholds: 0.25 plus 0.50..0.95 in steps of 0.05. map_avg averages the
/// 0.50..0.95 range.
std::vector<double> ap_thresholds();

struct PerClassMetrics {
  int cls = 0;
  double ap25 = 0.0;
  double ap50 = 0.0;
  double map_avg = 0.0;
};

struct MetricsReport {
  double mcov = 0.0;
  double mwcov = 0.0;
  double mprec = 0.0;
  double mrec = 0.0;
  std::vector<double> ap_by_threshold;  // aligned with ap_thresholds()
  double map_avg = 0.0;
  std::vector<PerClassMetrics> per_class;
  int scene_count = 0;
  bool zero_prediction_flag = false;  // some scene produced no predictions
};

/// mCov: mean over GT instances of the best prediction IoU. mWCov: the same,
/// weighted by instance point count over total labeled points.
std::pair<double, double> coverage_metrics(std::span<const int> gt_partition,
                                           std::span<const InstancePrediction> predictions);

struct PrecRec {
  double mprec = 0.0;
  double mrec = 0.0;
  bool zero_predictions = false;
};

/// Greedy one-to-one matching in descending score order at IoU >= threshold;
/// each prediction takes the best-IoU unmatched GT instance.
PrecRec prec_rec(std::span<const int> gt_partition,
                 std::span<const InstancePrediction> predictions, double iou = 0.5);

/// Per-class score-ranked PR integration (all-points interpolation) for one
/// scene; returns AP per threshold averaged over the classes present in GT.
std::vector<double> average_precision(const SceneGroundTruth& gt,
                                      std::span<const InstancePrediction> predictions,
                                      std::span<const double> thresholds);

MetricsReport eval_scene(const PointCloud& gt_cloud,
                         std::span<const InstancePrediction> predictions, double match_iou = 0.5);
MetricsReport average_reports(std::span<const MetricsReport> reports);

// ---------------------------------------------------------------------------
// Embedding separability analysis
// ---------------------------------------------------------------------------

struct DistanceOverlapReport {
  std::vector<double> intra_histogram;  // normalized to sum 1 over shared bins
  std::vector<double> inter_histogram;
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;
  double overlap_probability = 0.0;  // sum of per-bin minima
};

/// Pairwise L2 distances between labeled points' embeddings, split into
/// intra-/inter-instance histograms over shared bins. Requires >= 2 labeled
/// instances.
DistanceOverlapReport distance_overlap(const Mat& embeddings, std::span<const int> instance_ids,
                                       int bins = 100);

/// Per-point embedding of the trained category head: the flatten row, or the
/// three project rows concatenated.
Mat category_embeddings(const ForwardOutputs& outputs);

// ---------------------------------------------------------------------------
// Granularity sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  int n_s = 0;
  double overlap_rate = 0.0;
  /// Share of GT instances that keep at least one owned cube after collision
  /// resolution; instances lost to collisions cannot be recovered by any
  /// decoder, so this upper-bounds accuracy.
  double oracle_mprec = 0.0;
};

std::vector<SweepRow> overlap_sweep(std::span<const PointCloud> clouds,
                                    std::span<const int> ns_values, double scale);

// ---------------------------------------------------------------------------
// Forward+decode latency
// ---------------------------------------------------------------------------

struct LatencyReport {
  std::vector<double> flatten_ms;
  std::vector<double> project_ms;
  double flatten_median_ms = 0.0;
  double project_median_ms = 0.0;
  double ratio = 0.0;  // flatten / project
  std::size_t flatten_peak_bytes = 0;  // head outputs + decode buffers
  std::size_t project_peak_bytes = 0;
};

/// Times forward+decode for both paradigms on the same cloud. The checkpoints
/// must share grid resolution and feature width.
LatencyReport latency_bench(const ModelParams& flatten_params, const ModelParams& project_params,
                            const PointCloud& cloud, int repeats, const InferConfig& cfg = {});

// ---------------------------------------------------------------------------
// Report emission (CSV + self-contained SVG)
// ---------------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);
std::string metrics_svg(const MetricsReport& report);
std::string distance_overlap_svg(const DistanceOverlapReport& a, const std::string& label_a,
                                 const DistanceOverlapReport* b = nullptr,
                                 const std::string& label_b = "");
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);
std::string sweep_svg(std::span<const SweepRow> rows);

}  // namespace cubeseg
