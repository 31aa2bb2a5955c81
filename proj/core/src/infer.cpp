#include "cubeseg/infer.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cubeseg {

std::size_t Bitmask::count() const {
  std::size_t c = 0;
  for (std::uint64_t w : words_) c += static_cast<std::size_t>(std::popcount(w));
  return c;
}

double Bitmask::iou(const Bitmask& a, const Bitmask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.words_.size(); ++i) {
    inter += static_cast<std::size_t>(std::popcount(a.words_[i] & b.words_[i]));
    uni += static_cast<std::size_t>(std::popcount(a.words_[i] | b.words_[i]));
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void InferConfig::validate() const {
  if (!(score_threshold > 0.0 && score_threshold < 1.0) ||
      !(mask_binarize > 0.0 && mask_binarize < 1.0) || !(nms_iou > 0.0 && nms_iou < 1.0))
    throw ConfigError("inference thresholds must lie in (0,1)");
  if (max_predictions < 0) throw ConfigError("max_predictions must be >= 0");
}

namespace {

int majority_semantic(const Mat& semantic_logits, const Bitmask& mask) {
  std::vector<int> votes(semantic_logits.cols(), 0);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask.test(p)) continue;
    const double* row = semantic_logits.row(p);
    int best = 0;
    for (std::size_t c = 1; c < semantic_logits.cols(); ++c)
      if (row[c] > row[best]) best = static_cast<int>(c);
    ++votes[best];
  }
  int cls = 0;
  for (std::size_t c = 1; c < votes.size(); ++c)
    if (votes[c] > votes[cls]) cls = static_cast<int>(c);
  return cls;
}

struct Candidate {
  Bitmask mask;
  double score;
  int cube;
};

std::vector<InstancePrediction> finish_decoding(std::vector<Candidate> candidates,
                                                const Mat& semantic_logits,
                                                const InferConfig& cfg, DecodeStats* stats) {
  std::vector<Bitmask> masks;
  std::vector<double> scores;
  std::vector<int> ids;
  masks.reserve(candidates.size());
  for (Candidate& c : candidates) {
    masks.push_back(std::move(c.mask));
    scores.push_back(c.score);
    ids.push_back(c.cube);
  }
  if (stats) {
    stats->materialized_masks = masks.size();
    for (const Bitmask& m : masks) stats->decode_bytes += m.size_bytes();
  }

  const std::vector<std::size_t> kept = mask_nms(masks, scores, cfg.nms_iou, ids);
  std::vector<InstancePrediction> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) {
    InstancePrediction pred;
    pred.mask = std::move(masks[i]);
    pred.score = scores[i];
    pred.cube_index = ids[i];
    pred.semantic_class = majority_semantic(semantic_logits, pred.mask);
    out.push_back(std::move(pred));
  }
  std::sort(out.begin(), out.end(), [](const InstancePrediction& a, const InstancePrediction& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cube_index < b.cube_index;
  });
  if (cfg.max_predictions > 0 && out.size() > static_cast<std::size_t>(cfg.max_predictions))
    out.resize(cfg.max_predictions);
  return out;
}

}  // namespace

std::vector<InstancePrediction> decode_flatten(const Mat& category_scores,
                                               std::span<const double> cube_scores,
                                               const Mat& semantic_logits, const InferConfig& cfg,
                                               DecodeStats* stats) {
  cfg.validate();
  if (cube_scores.size() != category_scores.cols())
    throw DataError("cube score count does not match category columns");
  const std::size_t n = category_scores.rows();

  std::vector<Candidate> candidates;
  for (std::size_t j = 0; j < cube_scores.size(); ++j) {
    if (cube_scores[j] < cfg.score_threshold) continue;
    if (stats) ++stats->candidate_cubes;
    Bitmask mask(n);
    bool any = false;
    for (std::size_t p = 0; p < n; ++p)
      if (category_scores(p, j) >= cfg.mask_binarize) {
        mask.set(p);
        any = true;
      }
    if (!any) continue;
    candidates.push_back({std::move(mask), cube_scores[j], static_cast<int>(j)});
  }
  return finish_decoding(std::move(candidates), semantic_logits, cfg, stats);
}

std::vector<InstancePrediction> decode_project(const Mat& axis_x, const Mat& axis_y,
                                               const Mat& axis_z,
                                               std::span<const double> cube_scores,
                                               const Mat& semantic_logits, const CubeGrid& grid,
                                               const InferConfig& cfg, DecodeStats* stats) {
  cfg.validate();
  if (cube_scores.size() != static_cast<std::size_t>(grid.cell_count()))
    throw DataError("cube score count does not match the grid");
  const std::size_t n = axis_x.rows();
  if (axis_y.rows() != n || axis_z.rows() != n) throw DataError("axis score shape mismatch");

  std::vector<Candidate> candidates;
  for (std::size_t j = 0; j < cube_scores.size(); ++j) {
    if (cube_scores[j] < cfg.score_threshold) continue;
    if (stats) {
      ++stats->candidate_cubes;
      stats->decode_bytes += 3 * sizeof(double);  // per-cube column pointers, no dense product
    }
    const CubeIndex ci = unflatten_index(static_cast<int>(j), grid.n_s);
    Bitmask mask(n);
    bool any = false;
    for (std::size_t p = 0; p < n; ++p) {
      const double px = axis_x(p, ci.x);
      const double py = axis_y(p, ci.y);
      const double pz = axis_z(p, ci.z);
      const bool in = cfg.binarize_product
                          ? (px * py * pz >= cfg.mask_binarize)
                          : (px >= cfg.mask_binarize && py >= cfg.mask_binarize &&
                             pz >= cfg.mask_binarize);
      if (in) {
        mask.set(p);
        any = true;
      }
    }
    if (!any) continue;
    candidates.push_back({std::move(mask), cube_scores[j], static_cast<int>(j)});
  }
  return finish_decoding(std::move(candidates), semantic_logits, cfg, stats);
}

std::vector<std::size_t> mask_nms(std::span<const Bitmask> masks, std::span<const double> scores,
                                  double iou_threshold, std::span<const int> ids) {
  if (masks.size() != scores.size()) throw DataError("mask/score count mismatch");
  if (!ids.empty() && ids.size() != masks.size()) throw DataError("mask/id count mismatch");

  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), 0);
  auto id_of = [&](std::size_t i) { return ids.empty() ? static_cast<int>(i) : ids[i]; };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return id_of(a) < id_of(b);
  });

  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept)
      if (Bitmask::iou(masks[i], masks[k]) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  return kept;
}

std::vector<int> partition_points(std::span<const InstancePrediction> predictions,
                                  std::size_t n_points) {
  std::vector<int> out(n_points, -1);
  std::vector<double> best(n_points, -1.0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const InstancePrediction& pred = predictions[i];
    for (std::size_t p = 0; p < n_points; ++p) {
      if (!pred.mask.test(p)) continue;
      if (pred.score > best[p]) {
        best[p] = pred.score;
        out[p] = static_cast<int>(i);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mean-shift baseline decoder
// ---------------------------------------------------------------------------

std::vector<int> mean_shift(const Mat& embeddings, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be > 0");
  const std::size_t n = embeddings.rows();
  const std::size_t dim = embeddings.cols();
  constexpr double kShiftTol = 1e-4;
  constexpr int kMaxIters = 300;
  const double bw2 = bandwidth * bandwidth;

  std::vector<double> modes;  // n x dim, each seed iterated to convergence
  modes.resize(n * dim);
  std::vector<double> cur(dim), next(dim);
  for (std::size_t seed = 0; seed < n; ++seed) {
    const double* start = embeddings.row(seed);
    std::copy(start, start + dim, cur.begin());
    for (int it = 0; it < kMaxIters; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      std::size_t inside = 0;
      for (std::size_t p = 0; p < n; ++p) {
        const double* row = embeddings.row(p);
        double d2 = 0.0;
        for (std::size_t c = 0; c < dim; ++c) d2 += (cur[c] - row[c]) * (cur[c] - row[c]);
        if (d2 <= bw2) {
          ++inside;
          for (std::size_t c = 0; c < dim; ++c) next[c] += row[c];
        }
      }
      // The flat kernel always covers the seed itself, so inside >= 1.
      double shift2 = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        next[c] /= static_cast<double>(inside);
        shift2 += (next[c] - cur[c]) * (next[c] - cur[c]);
      }
      std::swap(cur, next);
      if (shift2 < kShiftTol * kShiftTol) break;
    }
    std::copy(cur.begin(), cur.end(), modes.begin() + seed * dim);
  }

  // Merge modes closer than bandwidth/2, then assign points to the nearest
  // surviving mode.
  const double merge2 = (bandwidth / 2.0) * (bandwidth / 2.0);
  std::vector<std::vector<double>> centers;
  std::vector<int> mode_label(n, -1);
  for (std::size_t seed = 0; seed < n; ++seed) {
    const double* m = modes.data() + seed * dim;
    int found = -1;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (m[k] - centers[c][k]) * (m[k] - centers[c][k]);
      if (d2 < merge2) {
        found = static_cast<int>(c);
        break;
      }
    }
    if (found < 0) {
      centers.emplace_back(m, m + dim);
      found = static_cast<int>(centers.size()) - 1;
    }
    mode_label[seed] = found;
  }

  std::vector<int> labels(n, -1);
  for (std::size_t p = 0; p < n; ++p) {
    const double* row = embeddings.row(p);
    int best = 0;
    double best_d2 = 0.0;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (row[k] - centers[c][k]) * (row[k] - centers[c][k]);
      if (c == 0 || d2 < best_d2) {
        best = static_cast<int>(c);
        best_d2 = d2;
      }
    }
    labels[p] = best;
  }
  return canonical_ids(labels);
}

// ---------------------------------------------------------------------------
// CSV forms
// ---------------------------------------------------------------------------

std::string rle_encode(const Bitmask& mask) {
  // Alternating run lengths starting with a zero-run, separated by spaces.
  std::string out;
  std::size_t i = 0;
  bool value = false;
  while (i < mask.size()) {
    std::size_t run = 0;
    while (i < mask.size() && mask.test(i) == value) {
      ++run;
      ++i;
    }
    if (!out.empty()) out += ' ';
    out += std::to_string(run);
    value = !value;
  }
  return out;
}

Bitmask rle_decode(const std::string& text, std::size_t n_points) {
  Bitmask mask(n_points);
  std::size_t pos = 0;
  bool value = false;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size()) break;
    std::size_t run = 0;
    const auto res = std::from_chars(text.data() + i, text.data() + text.size(), run);
    if (res.ec != std::errc()) throw DataError("bad run-length encoding");
    i = static_cast<std::size_t>(res.ptr - text.data());
    if (pos + run > n_points) throw DataError("run-length encoding exceeds point count");
    if (value)
      for (std::size_t p = pos; p < pos + run; ++p) mask.set(p);
    pos += run;
    value = !value;
  }
  if (pos != n_points) throw DataError("run-length encoding does not cover all points");
  return mask;
}

void save_predictions_csv(const std::filesystem::path& path,
                          std::span<const InstancePrediction> predictions, std::size_t n_points) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << "n_points," << n_points << "\n";
  f << "cube_index,score,semantic_class,mask_rle\n";
  char buf[32];
  for (const InstancePrediction& p : predictions) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.score);
    f << p.cube_index << ',' << buf << ',' << p.semantic_class << ',' << rle_encode(p.mask)
      << '\n';
  }
}

std::vector<InstancePrediction> load_predictions_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string line;
  int lineno = 0;
  if (!std::getline(f, line)) throw ParseError("missing n_points header", 1);
  ++lineno;
  std::size_t n_points = 0;
  if (line.rfind("n_points,", 0) != 0) throw ParseError("expected 'n_points,<count>'", lineno);
  {
    const std::string tok = line.substr(9);
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), n_points);
    if (res.ec != std::errc()) throw ParseError("bad point count", lineno);
  }
  if (!std::getline(f, line)) throw ParseError("missing column header", lineno + 1);
  ++lineno;

  std::vector<InstancePrediction> out;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    InstancePrediction p;
    std::size_t c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos || c3 == std::string::npos)
      throw ParseError("expected 4 fields", lineno);
    p.cube_index = std::stoi(line.substr(0, c1));
    p.score = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    p.semantic_class = std::stoi(line.substr(c2 + 1, c3 - c2 - 1));
    p.mask = rle_decode(line.substr(c3 + 1), n_points);
    out.push_back(std::move(p));
  }
  return out;
}

void save_partition_csv(const std::filesystem::path& path, std::span<const int> partition) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << "point_index,instance_id\n";
  for (std::size_t i = 0; i < partition.size(); ++i) f << i << ',' << partition[i] << '\n';
}

}  // namespace cubeseg
