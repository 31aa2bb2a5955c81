#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cubeseg/common.hpp"
#include "cubeseg/grid.hpp"

namespace cubeseg {

/// Fixed-size bitset over points.
class Bitmask {
 public:
  Bitmask() = default;
  explicit Bitmask(std::size_t n) : n_(n), words_((n + 63) / 64, 0) {}

  std::size_t size() const { return n_; }
  void set(std::size_t i) { words_[i >> 6] |= (std::uint64_t{1} << (i & 63)); }
  bool test(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1; }

  std::size_t count() const;
  std::size_t size_bytes() const { return words_.size() * sizeof(std::uint64_t); }

  /// IoU = |A&B| / |A|B|; 0 when both masks are empty.
  static double iou(const Bitmask& a, const Bitmask& b);

  bool operator==(const Bitmask&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> words_;
};

struct InstancePrediction {
  Bitmask mask;
  double score = 0.0;
  int cube_index = -1;
  int semantic_class = 0;
};

struct InferConfig {
  double score_threshold = 0.3;
  double mask_binarize = 0.5;
  double nms_iou = 0.3;
  int max_predictions = 256;
  /// Project-paradigm binarization: each axis factor >= mask_binarize
  /// (default), or the three-factor product >= mask_binarize.
  bool binarize_product = false;

  void validate() const;
};

/// Decode bookkeeping used by the memory assertions and the latency report:
/// bytes of candidate masks materialized plus the per-cube probability
/// scratch, all proportional to the number of score-passing cubes.
struct DecodeStats {
  std::size_t candidate_cubes = 0;
  std::size_t materialized_masks = 0;
  std::size_t decode_bytes = 0;
};

/// Flatten decoding: per score-passing cube, binarize its column at
/// mask_binarize, drop empty masks, greedy mask NMS, semantic majority vote,
/// sort by descending score.
std::vector<InstancePrediction> decode_flatten(const Mat& category_scores,
                                               std::span<const double> cube_scores,
                                               const Mat& semantic_logits, const InferConfig& cfg,
                                               DecodeStats* stats = nullptr);

/// Project decoding: the mask probability of cube (x,y,z) is the element-wise
/// product of the three axis columns; only score-passing cubes are
/// materialized. Identical NMS and semantic steps afterwards.
std::vector<InstancePrediction> decode_project(const Mat& axis_x, const Mat& axis_y,
                                               const Mat& axis_z,
                                               std::span<const double> cube_scores,
                                               const Mat& semantic_logits, const CubeGrid& grid,
                                               const InferConfig& cfg,
                                               DecodeStats* stats = nullptr);

/// Greedy NMS: visit masks by descending score (ties by lower id); keep one
/// iff its IoU with every kept mask is <= threshold. ids default to input
/// positions, which makes the result order-independent when callers pass
/// stable ids.
std::vector<std::size_t> mask_nms(std::span<const Bitmask> masks, std::span<const double> scores,
                                  double iou_threshold, std::span<const int> ids = {});

/// Assigns each point to the highest-scoring prediction containing it, -1
/// otherwise.
std::vector<int> partition_points(std::span<const InstancePrediction> predictions,
                                  std::size_t n_points);

/// Flat-kernel mean-shift: every point seeds an iteration (shift < 1e-4 or
/// 300 iterations), modes closer than bandwidth/2 merge, points go to the
/// nearest mode. Labels are canonical by first appearance.
std::vector<int> mean_shift(const Mat& embeddings, double bandwidth);

// CSV forms: one row per prediction with cube index, score, semantic class
// and a run-length-encoded mask; partitions as point_index,instance_id.
void save_predictions_csv(const std::filesystem::path& path,
                          std::span<const InstancePrediction> predictions, std::size_t n_points);
std::vector<InstancePrediction> load_predictions_csv(const std::filesystem::path& path);
void save_partition_csv(const std::filesystem::path& path, std::span<const int> partition);

std::string rle_encode(const Bitmask& mask);
Bitmask rle_decode(const std::string& text, std::size_t n_points);

}  // namespace cubeseg
