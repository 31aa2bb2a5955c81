#pragma once

#include <span>
#include <vector>

#include "cubeseg/common.hpp"
#include "cubeseg/grid.hpp"
#include "cubeseg/model.hpp"

namespace cubeseg {

struct LossBreakdown {
  double l_pcate = 0.0;
  double l_score = 0.0;
  double l_sem = 0.0;
  double total = 0.0;
};

/// Dice loss over one column: 1 - 2*sum(F.G) / (sum(F^2) + sum(G^2) + eps).
double dice(std::span<const double> f, std::span<const std::uint8_t> g);
std::vector<double> dice_grad(std::span<const double> f, std::span<const std::uint8_t> g);

/// Mean dice over the positive flatten columns. Throws when no cube is
/// positive. Non-positive columns never contribute.
double pcate_flatten(const Mat& category_scores, const TargetSet& targets);
Mat pcate_flatten_grad(const Mat& category_scores, const TargetSet& targets);

/// Sum over the three axes of whole-matrix dice. With positive_columns_only
/// the dice is restricted to axis columns owned by some instance (comparison
/// variant, off by default).
double pcate_project(const Mat& fx, const Mat& fy, const Mat& fz, const TargetSet& targets,
                     bool positive_columns_only = false);
void pcate_project_grad(const Mat& fx, const Mat& fy, const Mat& fz, const TargetSet& targets,
                        Mat& dfx, Mat& dfy, Mat& dfz, bool positive_columns_only = false);

/// Mean binary cross entropy over cubes, inputs clamped at 1e-7.
double score_bce(std::span<const double> scores, std::span<const std::uint8_t> target);
std::vector<double> score_bce_grad(std::span<const double> scores,
                                   std::span<const std::uint8_t> target);

/// Mean negative log-softmax of the true class; background points (instance
/// id < 0) are excluded.
double semantic_ce(const Mat& logits, std::span<const int> labels,
                   std::span<const int> instance_ids);
Mat semantic_ce_grad(const Mat& logits, std::span<const int> labels,
                     std::span<const int> instance_ids);

/// Unweighted sum of the three components, as trained.
LossBreakdown total_loss(const ForwardOutputs& outputs, const TargetSet& targets,
                         const PointCloud& cloud);
LossBreakdown total_loss_grads(const ForwardOutputs& outputs, const TargetSet& targets,
                               const PointCloud& cloud, OutputGrads& grads);

// ---------------------------------------------------------------------------
// Discriminative (pull/push) baseline objective
// ---------------------------------------------------------------------------

struct DiscriminativeConfig {
  double delta_v = 0.5;  // pull margin
  double delta_d = 1.5;  // push margin

  void validate() const {
    if (!(delta_d > delta_v && delta_v > 0.0))
      throw ConfigError("discriminative margins need delta_d > delta_v > 0");
  }
};

struct DiscriminativeLoss {
  double pull = 0.0;
  double push = 0.0;
  double total() const { return pull + push; }
};

/// Pull: mean over instances of mean squared hinge of (||mu_k - F_i|| -
/// delta_v). Push: mean over ordered pairs of squared hinge of (2 delta_d -
/// ||mu_A - mu_B||); zero when K = 1. Background points are ignored.
DiscriminativeLoss discriminative_loss(const Mat& embeddings, std::span<const int> instance_ids,
                                       const DiscriminativeConfig& cfg);

/// Full gradient of pull+push w.r.t. the embeddings, including the dependence
/// of the instance means on each point.
Mat discriminative_grad(const Mat& embeddings, std::span<const int> instance_ids,
                        const DiscriminativeConfig& cfg);

}  // namespace cubeseg
