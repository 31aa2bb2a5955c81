#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cubeseg/common.hpp"
#include "cubeseg/grid.hpp"
#include "cubeseg/scene.hpp"

namespace cubeseg {

// ---------------------------------------------------------------------------
// Flat parameter storage. Every trainable tensor lives in one contiguous
// vector<double>; a layout table names the slices. Adam, checkpoints and
// finite-difference sweeps all address parameters through this layout.
// ---------------------------------------------------------------------------

struct TensorDesc {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t count() const { return rows * cols; }
};

struct TensorLayout {
  std::vector<TensorDesc> tensors;
  std::size_t total = 0;

  void add(const std::string& name, std::size_t rows, std::size_t cols);
  const TensorDesc& find(const std::string& name) const;
};

/// Read-only view of one tensor slice (row-major).
struct ConstView {
  const double* d = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  const double* row(std::size_t r) const { return d + r * cols; }
  double operator()(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
};

struct View {
  double* d = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double* row(std::size_t r) const { return d + r * cols; }
  double& operator()(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
};

// ---------------------------------------------------------------------------
// Network configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  Paradigm paradigm = Paradigm::Flatten;
  int n_s = 8;
  // Per-point MLP. The first width must match the input channels: 3 (xyz) or
  // 7 when local_stats is on (xyz + k-NN mean offset + rms neighbor radius).
  std::vector<int> feature_widths = {7, 64, 64};
  int feature_dim = 64;  // per-point feature width after context concat
  int c_sem = 2;
  int head_hidden = 32;
  int flatten_head_layers = 2;  // hidden 32-channel layers before the output projection
  int project_head_layers = 3;
  int score_head_layers = 1;
  int score_k = 32;  // points pooled around each cube center
  // Local-neighborhood input statistics. Absolute xyz alone cannot tell a
  // blob-core patch from a blob-edge patch under average pooling, which the
  // cube-scoring head needs; these channels carry that local geometry.
  bool local_stats = true;
  int local_stat_k = 16;
  // The score output bias starts at the logit of this prior. Almost all cubes
  // are negative; starting calibrated keeps the early imbalance from killing
  // the head's hidden units before they can learn the contrast.
  double score_prior = 0.01;
  // Concatenate the global max-pooled context back to each point. Scene-level
  // codes invite memorizing the training layouts; the per-point local
  // statistics already carry the information the heads need.
  bool global_context = true;

  int input_channels() const { return local_stats ? 7 : 3; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Per-point backbone input rows: xyz, and with local_stats the offset to the
/// mean of the k nearest neighbors (self included, ties by index) plus the
/// rms neighbor distance.
Mat backbone_inputs(const PointCloud& cloud, bool local_stats, int local_stat_k);

TensorLayout model_layout(const ModelConfig& cfg);

struct ModelParams {
  ModelConfig cfg;
  TensorLayout layout;
  std::vector<double> data;

  ConstView tensor(const std::string& name) const;
  View tensor(const std::string& name);
};

ModelParams make_params(const ModelConfig& cfg);  // zero-initialized
/// Weights uniform in +/- sqrt(6/(fan_in+fan_out)), biases zero; seedable.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Gradient container matching a ModelParams layout.
using ParamGrads = ModelParams;

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache;  // intermediates owned by ForwardOutputs, defined in model.cpp

struct ForwardOutputs {
  Mat point_features;    // N_p x feature_dim
  Mat category_scores;   // N_p x n_s^3, sigmoid (flatten paradigm only)
  Mat axis_scores_x;     // N_p x n_s, sigmoid (project paradigm only)
  Mat axis_scores_y;
  Mat axis_scores_z;
  std::vector<double> cube_scores;  // n_s^3, sigmoid
  Mat semantic_logits;   // N_p x c_sem

  std::shared_ptr<const ForwardCache> cache;

  /// Bytes held by the head output matrices (paradigm memory comparison).
  std::size_t head_output_bytes() const;
};

/// Runs the feature network and the configured heads. Throws ConfigError when
/// the grid does not match cfg.n_s.
ForwardOutputs forward(const ModelParams& params, const PointCloud& cloud, const CubeGrid& grid);

/// Average of the features of the k points nearest to each cube center
/// (ties broken by the smaller point index). Exposed for its oracle tests;
/// `selected` optionally receives the chosen point indices per cube.
Mat score_head_context(const Mat& point_features, const PointCloud& cloud, const CubeGrid& grid,
                       int k, std::vector<std::vector<int>>* selected = nullptr);

/// Set-abstraction-style local frame of each cube's selected points: mean
/// offset to the cube center (3) and rms distance (1). Average pooling alone
/// discards where the patch sits relative to the cube center, which is the
/// quantity cube scoring hinges on; these channels restore it.
Mat score_head_geometry(const PointCloud& cloud, const CubeGrid& grid,
                        const std::vector<std::vector<int>>& selected);

/// Gradients of the total loss w.r.t. the head outputs.
struct OutputGrads {
  Mat d_category;      // flatten paradigm
  Mat d_axis_x, d_axis_y, d_axis_z;  // project paradigm
  std::vector<double> d_cube_scores;
  Mat d_semantic;
};

/// Backpropagates through the heads and feature network. Requires the cache
/// produced by forward; throws Error when it is missing.
ParamGrads backward(const ModelParams& params, const PointCloud& cloud, const CubeGrid& grid,
                    const ForwardOutputs& outputs, const OutputGrads& grads);

// ---------------------------------------------------------------------------
// Baseline arm: same feature network with a plain embedding head, trained
// with the discriminative loss and clustered at inference.
// ---------------------------------------------------------------------------

struct BaselineConfig {
  std::vector<int> feature_widths = {7, 64, 64};
  int feature_dim = 64;
  int embed_dim = 4;
  int head_hidden = 32;
  bool local_stats = true;
  int local_stat_k = 16;
  bool global_context = true;

  int input_channels() const { return local_stats ? 7 : 3; }
  void validate() const;
  bool operator==(const BaselineConfig&) const = default;
};

TensorLayout baseline_layout(const BaselineConfig& cfg);

struct BaselineParams {
  BaselineConfig cfg;
  TensorLayout layout;
  std::vector<double> data;

  ConstView tensor(const std::string& name) const;
  View tensor(const std::string& name);
};

BaselineParams make_baseline_params(const BaselineConfig& cfg);
BaselineParams init_baseline_params(const BaselineConfig& cfg, std::uint64_t seed);

struct BaselineOutputs {
  Mat embeddings;  // N_p x embed_dim, linear
  std::shared_ptr<const ForwardCache> cache;
};

BaselineOutputs baseline_forward(const BaselineParams& params, const PointCloud& cloud);
BaselineParams baseline_backward(const BaselineParams& params, const PointCloud& cloud,
                                 const BaselineOutputs& outputs, const Mat& d_embeddings);

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary with named tensors plus the configuration;
// loading rejects mismatched configuration. Optimizer state rides along so a
// resumed run reproduces the uninterrupted one.
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

struct Checkpoint {
  ModelParams params;
  std::optional<AdamState> adam;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct BaselineCheckpoint {
  BaselineParams params;
  std::optional<AdamState> adam;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
};

void save_baseline_checkpoint(const std::filesystem::path& path, const BaselineCheckpoint& ckpt);
BaselineCheckpoint load_baseline_checkpoint(const std::filesystem::path& path);

}  // namespace cubeseg
