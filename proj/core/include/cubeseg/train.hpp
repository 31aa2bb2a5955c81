#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cubeseg/eval.hpp"
#include "cubeseg/grid.hpp"
#include "cubeseg/loss.hpp"
#include "cubeseg/model.hpp"

namespace cubeseg {

struct TrainConfig {
  double lr0 = 0.001;
  double decay_factor = 0.5;
  int decay_every = 2000;  // desk schedule; the reference protocol uses 300k
  int epochs = 100;
  int batch_size = 4;
  std::uint64_t seed = 0;
  Paradigm paradigm = Paradigm::Flatten;
  int n_s = 8;
  double center_scale = 0.2;
  int threads = 1;

  void validate() const;
};

/// lr at a given number of completed optimizer steps:
/// lr0 * decay_factor^floor(steps / decay_every).
double lr_at_step(const TrainConfig& cfg, std::uint64_t steps_done);

struct TrainingLogRow {
  std::uint64_t step = 0;  // 1-based completed step
  LossBreakdown loss;
};

struct TrainingLog {
  std::vector<TrainingLogRow> rows;
  void to_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainingLog log;
};

/// Adam over mean per-scene gradients; one epoch is one seeded-shuffled pass
/// over the scene list. Deterministic given the seed (any thread count; the
/// gradient reduction order is fixed). Resuming from a checkpoint reproduces
/// the uninterrupted run exactly. Aborts with NumericError naming the step
/// and component when a loss turns non-finite.
TrainResult train(std::span<const PointCloud> dataset, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, const Checkpoint* resume = nullptr);

/// Inference + metrics over a held-out split; no parameter mutation.
MetricsReport evaluate_epoch(const ModelParams& params, std::span<const PointCloud> dataset,
                             const CubeGrid& grid, const InferConfig& infer_cfg = {});

// Baseline arm: same loop shape, discriminative loss on the embedding head.
struct BaselineTrainResult {
  BaselineCheckpoint checkpoint;
  std::vector<std::pair<std::uint64_t, DiscriminativeLoss>> log;
};

BaselineTrainResult train_baseline(std::span<const PointCloud> dataset, const BaselineConfig& bcfg,
                                   const TrainConfig& tcfg, const DiscriminativeConfig& dcfg,
                                   const BaselineCheckpoint* resume = nullptr);

}  // namespace cubeseg
