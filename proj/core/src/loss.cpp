#include "cubeseg/loss.hpp"

#include <algorithm>
#include <cmath>

namespace cubeseg {

namespace {

constexpr double kDiceEps = 1e-8;   // guards all-zero columns
constexpr double kBceClamp = 1e-7;

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw DataError("loss inputs have mismatched lengths");
}

}  // namespace

double dice(std::span<const double> f, std::span<const std::uint8_t> g) {
  check_lengths(f.size(), g.size());
  double inter = 0.0, f2 = 0.0, g2 = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (g[i]) inter += f[i];
    f2 += f[i] * f[i];
    g2 += g[i] ? 1.0 : 0.0;
  }
  return 1.0 - 2.0 * inter / (f2 + g2 + kDiceEps);
}

std::vector<double> dice_grad(std::span<const double> f, std::span<const std::uint8_t> g) {
  check_lengths(f.size(), g.size());
  double inter = 0.0, f2 = 0.0, g2 = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (g[i]) inter += f[i];
    f2 += f[i] * f[i];
    g2 += g[i] ? 1.0 : 0.0;
  }
  const double denom = f2 + g2 + kDiceEps;
  const double inv2 = 1.0 / (denom * denom);
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = (4.0 * inter * f[i] - 2.0 * (g[i] ? denom : 0.0)) * inv2;
  return out;
}

// ---------------------------------------------------------------------------
// Instance-category losses. Flatten columns are sparse: the target column of
// a positive cube j is exactly the point set of the owning instance.
// ---------------------------------------------------------------------------

double pcate_flatten(const Mat& category_scores, const TargetSet& targets) {
  if (targets.paradigm != Paradigm::Flatten) throw ConfigError("targets are not flatten targets");
  if (targets.n_positive() == 0) throw DataError("no positive cubes");
  check_lengths(category_scores.rows(), targets.n_points);

  const std::size_t n = targets.n_points;
  double sum = 0.0;
  for (int cube : targets.positive_cubes) {
    const int owner = targets.instance_of_cube.at(cube);
    double inter = 0.0, f2 = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double v = category_scores(p, cube);
      f2 += v * v;
    }
    for (int p : targets.instance_points[owner]) inter += category_scores(p, cube);
    const double g2 = static_cast<double>(targets.instance_points[owner].size());
    sum += 1.0 - 2.0 * inter / (f2 + g2 + kDiceEps);
  }
  return sum / targets.n_positive();
}

Mat pcate_flatten_grad(const Mat& category_scores, const TargetSet& targets) {
  if (targets.paradigm != Paradigm::Flatten) throw ConfigError("targets are not flatten targets");
  if (targets.n_positive() == 0) throw DataError("no positive cubes");
  const std::size_t n = targets.n_points;
  Mat grad(category_scores.rows(), category_scores.cols());
  const double inv_pos = 1.0 / targets.n_positive();

  for (int cube : targets.positive_cubes) {
    const int owner = targets.instance_of_cube.at(cube);
    const auto& pts = targets.instance_points[owner];
    double inter = 0.0, f2 = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double v = category_scores(p, cube);
      f2 += v * v;
    }
    for (int p : pts) inter += category_scores(p, cube);
    const double denom = f2 + static_cast<double>(pts.size()) + kDiceEps;
    const double inv2 = inv_pos / (denom * denom);
    for (std::size_t p = 0; p < n; ++p)
      grad(p, cube) = 4.0 * inter * category_scores(p, cube) * inv2;
    for (int p : pts) grad(p, cube) -= 2.0 * denom * inv2;
  }
  return grad;
}

namespace {

struct AxisDice {
  double inter = 0.0;
  double f2 = 0.0;
  double g2 = 0.0;
};

std::vector<std::uint8_t> positive_axis_columns(const TargetSet& t, int axis) {
  std::vector<std::uint8_t> mask(t.n_s, 0);
  for (const auto& owned : t.owned_axis[axis])
    for (int a : owned) mask[a] = 1;
  return mask;
}

AxisDice axis_sums(const Mat& f, const TargetSet& t, int axis,
                   const std::vector<std::uint8_t>* column_mask) {
  AxisDice s;
  for (std::size_t p = 0; p < f.rows(); ++p) {
    const double* row = f.row(p);
    const int inst = t.point_instance[p];
    for (std::size_t a = 0; a < f.cols(); ++a) {
      if (column_mask && !(*column_mask)[a]) continue;
      s.f2 += row[a] * row[a];
      if (inst >= 0 && t.project_entry(axis, static_cast<int>(p), static_cast<int>(a))) {
        s.inter += row[a];
        s.g2 += 1.0;
      }
    }
  }
  return s;
}

}  // namespace

double pcate_project(const Mat& fx, const Mat& fy, const Mat& fz, const TargetSet& targets,
                     bool positive_columns_only) {
  if (targets.paradigm != Paradigm::Project) throw ConfigError("targets are not project targets");
  const Mat* f[3] = {&fx, &fy, &fz};
  double total = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    check_lengths(f[axis]->rows(), targets.n_points);
    std::vector<std::uint8_t> mask;
    if (positive_columns_only) mask = positive_axis_columns(targets, axis);
    const AxisDice s = axis_sums(*f[axis], targets, axis, positive_columns_only ? &mask : nullptr);
    total += 1.0 - 2.0 * s.inter / (s.f2 + s.g2 + kDiceEps);
  }
  return total;
}

void pcate_project_grad(const Mat& fx, const Mat& fy, const Mat& fz, const TargetSet& targets,
                        Mat& dfx, Mat& dfy, Mat& dfz, bool positive_columns_only) {
  if (targets.paradigm != Paradigm::Project) throw ConfigError("targets are not project targets");
  const Mat* f[3] = {&fx, &fy, &fz};
  Mat* df[3] = {&dfx, &dfy, &dfz};
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<std::uint8_t> mask;
    if (positive_columns_only) mask = positive_axis_columns(targets, axis);
    const auto* mask_ptr = positive_columns_only ? &mask : nullptr;
    const AxisDice s = axis_sums(*f[axis], targets, axis, mask_ptr);
    const double denom = s.f2 + s.g2 + kDiceEps;
    const double inv2 = 1.0 / (denom * denom);
    *df[axis] = Mat(f[axis]->rows(), f[axis]->cols());
    for (std::size_t p = 0; p < f[axis]->rows(); ++p) {
      const double* row = f[axis]->row(p);
      double* grow = df[axis]->row(p);
      const int inst = targets.point_instance[p];
      for (std::size_t a = 0; a < f[axis]->cols(); ++a) {
        if (mask_ptr && !(*mask_ptr)[a]) continue;
        const bool g = inst >= 0 && targets.project_entry(axis, static_cast<int>(p),
                                                          static_cast<int>(a));
        grow[a] = (4.0 * s.inter * row[a] - (g ? 2.0 * denom : 0.0)) * inv2;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Cube-score BCE and semantic cross-entropy
// ---------------------------------------------------------------------------

double score_bce(std::span<const double> scores, std::span<const std::uint8_t> target) {
  check_lengths(scores.size(), target.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = std::clamp(scores[i], kBceClamp, 1.0 - kBceClamp);
    sum -= target[i] ? std::log(s) : std::log(1.0 - s);
  }
  return sum / static_cast<double>(scores.size());
}

std::vector<double> score_bce_grad(std::span<const double> scores,
                                   std::span<const std::uint8_t> target) {
  check_lengths(scores.size(), target.size());
  std::vector<double> out(scores.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    if (s < kBceClamp || s > 1.0 - kBceClamp) continue;  // clamp region: flat
    out[i] = inv * (target[i] ? -1.0 / s : 1.0 / (1.0 - s));
  }
  return out;
}

double semantic_ce(const Mat& logits, std::span<const int> labels,
                   std::span<const int> instance_ids) {
  check_lengths(logits.rows(), labels.size());
  check_lengths(labels.size(), instance_ids.size());
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < logits.rows(); ++p) {
    if (instance_ids[p] < 0) continue;
    const int label = labels[p];
    if (label < 0 || label >= static_cast<int>(logits.cols()))
      throw DataError("semantic label out of range");
    const double* row = logits.row(p);
    double m = row[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, row[c]);
    double lse = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) lse += std::exp(row[c] - m);
    sum += m + std::log(lse) - row[label];
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

Mat semantic_ce_grad(const Mat& logits, std::span<const int> labels,
                     std::span<const int> instance_ids) {
  Mat grad(logits.rows(), logits.cols());
  std::size_t count = 0;
  for (std::size_t p = 0; p < logits.rows(); ++p)
    if (instance_ids[p] >= 0) ++count;
  if (count == 0) return grad;
  const double inv = 1.0 / static_cast<double>(count);

  for (std::size_t p = 0; p < logits.rows(); ++p) {
    if (instance_ids[p] < 0) continue;
    const double* row = logits.row(p);
    double* grow = grad.row(p);
    double m = row[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(row[c] - m);
    for (std::size_t c = 0; c < logits.cols(); ++c) grow[c] = inv * std::exp(row[c] - m) / z;
    grow[labels[p]] -= inv;
  }
  return grad;
}

LossBreakdown total_loss(const ForwardOutputs& outputs, const TargetSet& targets,
                         const PointCloud& cloud) {
  LossBreakdown b;
  if (targets.paradigm == Paradigm::Flatten)
    b.l_pcate = pcate_flatten(outputs.category_scores, targets);
  else
    b.l_pcate = pcate_project(outputs.axis_scores_x, outputs.axis_scores_y, outputs.axis_scores_z,
                              targets);
  b.l_score = score_bce(outputs.cube_scores, targets.score_target);
  b.l_sem = semantic_ce(outputs.semantic_logits, cloud.semantic_labels, cloud.instance_ids);
  b.total = b.l_pcate + b.l_score + b.l_sem;
  return b;
}

LossBreakdown total_loss_grads(const ForwardOutputs& outputs, const TargetSet& targets,
                               const PointCloud& cloud, OutputGrads& grads) {
  const LossBreakdown b = total_loss(outputs, targets, cloud);
  if (targets.paradigm == Paradigm::Flatten) {
    grads.d_category = pcate_flatten_grad(outputs.category_scores, targets);
  } else {
    pcate_project_grad(outputs.axis_scores_x, outputs.axis_scores_y, outputs.axis_scores_z,
                       targets, grads.d_axis_x, grads.d_axis_y, grads.d_axis_z);
  }
  grads.d_cube_scores = score_bce_grad(outputs.cube_scores, targets.score_target);
  grads.d_semantic =
      semantic_ce_grad(outputs.semantic_logits, cloud.semantic_labels, cloud.instance_ids);
  return b;
}

// ---------------------------------------------------------------------------
// Discriminative baseline
// ---------------------------------------------------------------------------

namespace {

struct InstanceEmbedding {
  std::vector<std::vector<int>> points;  // per instance
  std::vector<std::vector<double>> mean; // per instance, embed_dim
};

InstanceEmbedding instance_means(const Mat& embeddings, std::span<const int> instance_ids) {
  const std::vector<int> ids = canonical_ids(instance_ids);
  int k = 0;
  for (int id : ids) k = std::max(k, id + 1);
  if (k < 1) throw DataError("no labeled instances");

  InstanceEmbedding e;
  e.points.assign(k, {});
  e.mean.assign(k, std::vector<double>(embeddings.cols(), 0.0));
  for (std::size_t p = 0; p < ids.size(); ++p)
    if (ids[p] >= 0) e.points[ids[p]].push_back(static_cast<int>(p));
  for (int inst = 0; inst < k; ++inst) {
    for (int p : e.points[inst]) {
      const double* row = embeddings.row(p);
      for (std::size_t c = 0; c < embeddings.cols(); ++c) e.mean[inst][c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(e.points[inst].size());
    for (double& v : e.mean[inst]) v *= inv;
  }
  return e;
}

double embed_distance(const double* a, const double* b, std::size_t dim) {
  double d2 = 0.0;
  for (std::size_t c = 0; c < dim; ++c) d2 += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(d2);
}

}  // namespace

DiscriminativeLoss discriminative_loss(const Mat& embeddings, std::span<const int> instance_ids,
                                       const DiscriminativeConfig& cfg) {
  cfg.validate();
  check_lengths(embeddings.rows(), instance_ids.size());
  const InstanceEmbedding e = instance_means(embeddings, instance_ids);
  const int k = static_cast<int>(e.points.size());
  const std::size_t dim = embeddings.cols();

  DiscriminativeLoss loss;
  for (int inst = 0; inst < k; ++inst) {
    double acc = 0.0;
    for (int p : e.points[inst]) {
      const double d = embed_distance(embeddings.row(p), e.mean[inst].data(), dim);
      const double h = std::max(0.0, d - cfg.delta_v);
      acc += h * h;
    }
    loss.pull += acc / static_cast<double>(e.points[inst].size());
  }
  loss.pull /= static_cast<double>(k);

  if (k >= 2) {
    double acc = 0.0;
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) {
        if (a == b) continue;
        const double d = embed_distance(e.mean[a].data(), e.mean[b].data(), dim);
        const double h = std::max(0.0, 2.0 * cfg.delta_d - d);
        acc += h * h;
      }
    loss.push = acc / static_cast<double>(k * (k - 1));
  }
  return loss;
}

Mat discriminative_grad(const Mat& embeddings, std::span<const int> instance_ids,
                        const DiscriminativeConfig& cfg) {
  cfg.validate();
  check_lengths(embeddings.rows(), instance_ids.size());
  const InstanceEmbedding e = instance_means(embeddings, instance_ids);
  const int k = static_cast<int>(e.points.size());
  const std::size_t dim = embeddings.cols();
  Mat grad(embeddings.rows(), dim);

  // Pull. The mean depends on every member point, so each instance carries a
  // shared correction term alongside the per-point hinge derivative.
  for (int inst = 0; inst < k; ++inst) {
    const double n_k = static_cast<double>(e.points[inst].size());
    const double scale = 2.0 / (static_cast<double>(k) * n_k);
    std::vector<double> mean_term(dim, 0.0);
    for (int p : e.points[inst]) {
      const double* row = embeddings.row(p);
      const double d = embed_distance(row, e.mean[inst].data(), dim);
      const double h = std::max(0.0, d - cfg.delta_v);
      if (h <= 0.0 || d == 0.0) continue;
      double* grow = grad.row(p);
      const double coeff = scale * h / d;
      for (std::size_t c = 0; c < dim; ++c) {
        const double u = row[c] - e.mean[inst][c];
        grow[c] += coeff * u;
        mean_term[c] += coeff * u;
      }
    }
    for (int p : e.points[inst]) {
      double* grow = grad.row(p);
      for (std::size_t c = 0; c < dim; ++c) grow[c] -= mean_term[c] / n_k;
    }
  }

  // Push, through the instance means. Each ordered pair term depends on both
  // endpoints, so every visit updates the pair's two means.
  if (k >= 2) {
    const double c_pair = 1.0 / static_cast<double>(k * (k - 1));
    std::vector<std::vector<double>> d_mean(k, std::vector<double>(dim, 0.0));
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) {
        if (a == b) continue;
        const double d = embed_distance(e.mean[a].data(), e.mean[b].data(), dim);
        const double h = std::max(0.0, 2.0 * cfg.delta_d - d);
        if (h <= 0.0 || d == 0.0) continue;
        const double coeff = -2.0 * c_pair * h / d;
        for (std::size_t c = 0; c < dim; ++c) {
          const double v = coeff * (e.mean[a][c] - e.mean[b][c]);
          d_mean[a][c] += v;
          d_mean[b][c] -= v;
        }
      }
    for (int inst = 0; inst < k; ++inst) {
      const double inv = 1.0 / static_cast<double>(e.points[inst].size());
      for (int p : e.points[inst]) {
        double* grow = grad.row(p);
        for (std::size_t c = 0; c < dim; ++c) grow[c] += inv * d_mean[inst][c];
      }
    }
  }
  return grad;
}

}  // namespace cubeseg
