#include "cubeseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace cubeseg {

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

void TensorLayout::add(const std::string& name, std::size_t rows, std::size_t cols) {
  tensors.push_back({name, total, rows, cols});
  total += rows * cols;
}

const TensorDesc& TensorLayout::find(const std::string& name) const {
  for (const TensorDesc& t : tensors)
    if (t.name == name) return t;
  throw Error("unknown tensor '" + name + "'");
}

namespace {

void add_chain(TensorLayout& layout, const std::string& prefix, int in_dim, int hidden,
               int hidden_layers, int out_dim) {
  int prev = in_dim;
  for (int i = 0; i < hidden_layers; ++i) {
    layout.add(prefix + "." + std::to_string(i) + ".w", prev, hidden);
    layout.add(prefix + "." + std::to_string(i) + ".b", 1, hidden);
    prev = hidden;
  }
  layout.add(prefix + ".out.w", prev, out_dim);
  layout.add(prefix + ".out.b", 1, out_dim);
}

void add_feature_net(TensorLayout& layout, const std::vector<int>& widths, int feature_dim) {
  for (std::size_t i = 1; i < widths.size(); ++i) {
    layout.add("feature." + std::to_string(i - 1) + ".w", widths[i - 1], widths[i]);
    layout.add("feature." + std::to_string(i - 1) + ".b", 1, widths[i]);
  }
  layout.add("combine.w", 2 * widths.back(), feature_dim);
  layout.add("combine.b", 1, feature_dim);
}

}  // namespace

void ModelConfig::validate() const {
  if (n_s < 2) throw ConfigError("n_s must be >= 2");
  if (feature_widths.size() < 2 || feature_widths.front() != input_channels())
    throw ConfigError("first feature width must match the input channels (3, or 7 with local stats)");
  for (int w : feature_widths)
    if (w < 1) throw ConfigError("feature widths must be positive");
  if (feature_dim < 1 || c_sem < 2 || head_hidden < 1) throw ConfigError("bad head dimensions");
  if (flatten_head_layers < 1 || project_head_layers < 1 || score_head_layers < 1)
    throw ConfigError("head layer counts must be >= 1");
  if (score_k < 1 || local_stat_k < 1) throw ConfigError("neighborhood sizes must be >= 1");
}

Mat backbone_inputs(const PointCloud& cloud, bool local_stats, int local_stat_k) {
  const std::size_t n = cloud.size();
  Mat in(n, local_stats ? 7 : 3);
  for (std::size_t p = 0; p < n; ++p) {
    in(p, 0) = cloud.positions[p].x;
    in(p, 1) = cloud.positions[p].y;
    in(p, 2) = cloud.positions[p].z;
  }
  if (!local_stats) return in;

  const int take = static_cast<int>(std::min<std::size_t>(local_stat_k, n));
  std::vector<std::pair<double, int>> dist(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Vec3 self = cloud.positions[p];
    for (std::size_t q = 0; q < n; ++q)
      dist[q] = {squared_norm(cloud.positions[q] - self), static_cast<int>(q)};
    std::nth_element(dist.begin(), dist.begin() + (take - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + take);  // index-stable accumulation order
    Vec3 mean{};
    double d2 = 0.0;
    for (int i = 0; i < take; ++i) {
      mean = mean + cloud.positions[dist[i].second];
      d2 += dist[i].first;
    }
    mean = mean / static_cast<double>(take);
    in(p, 3) = mean.x - self.x;
    in(p, 4) = mean.y - self.y;
    in(p, 5) = mean.z - self.z;
    in(p, 6) = std::sqrt(d2 / static_cast<double>(take));
  }
  return in;
}

TensorLayout model_layout(const ModelConfig& cfg) {
  cfg.validate();
  TensorLayout layout;
  add_feature_net(layout, cfg.feature_widths, cfg.feature_dim);
  const int cells = cfg.n_s * cfg.n_s * cfg.n_s;
  if (cfg.paradigm == Paradigm::Flatten) {
    add_chain(layout, "flat", cfg.feature_dim, cfg.head_hidden, cfg.flatten_head_layers, cells);
  } else {
    add_chain(layout, "projx", cfg.feature_dim, cfg.head_hidden, cfg.project_head_layers, cfg.n_s);
    add_chain(layout, "projy", cfg.feature_dim, cfg.head_hidden, cfg.project_head_layers, cfg.n_s);
    add_chain(layout, "projz", cfg.feature_dim, cfg.head_hidden, cfg.project_head_layers, cfg.n_s);
  }
  // Score head input: pooled context plus the 4 local-frame channels.
  add_chain(layout, "score", cfg.feature_dim + 4, cfg.head_hidden, cfg.score_head_layers, 1);
  add_chain(layout, "sem", cfg.feature_dim, cfg.head_hidden, 1, cfg.c_sem);
  return layout;
}

ConstView ModelParams::tensor(const std::string& name) const {
  const TensorDesc& t = layout.find(name);
  return {data.data() + t.offset, t.rows, t.cols};
}

View ModelParams::tensor(const std::string& name) {
  const TensorDesc& t = layout.find(name);
  return {data.data() + t.offset, t.rows, t.cols};
}

ModelParams make_params(const ModelConfig& cfg) {
  ModelParams p;
  p.cfg = cfg;
  p.layout = model_layout(cfg);
  p.data.assign(p.layout.total, 0.0);
  return p;
}

namespace {

template <typename Params>
void glorot_init(Params& p, std::uint64_t seed) {
  Rng rng(seed);
  for (const TensorDesc& t : p.layout.tensors) {
    if (t.name.size() >= 2 && t.name.compare(t.name.size() - 2, 2, ".w") == 0) {
      const double lim = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
      for (std::size_t i = 0; i < t.count(); ++i) p.data[t.offset + i] = rng.uniform(-lim, lim);
    }
    // biases stay zero
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = make_params(cfg);
  glorot_init(p, seed);
  if (cfg.score_prior > 0.0 && cfg.score_prior < 1.0) {
    const View b = p.tensor("score.out.b");
    b.d[0] = std::log(cfg.score_prior / (1.0 - cfg.score_prior));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Dense layer primitives
// ---------------------------------------------------------------------------

namespace {

Mat linear_forward(const Mat& in, ConstView w, ConstView b) {
  Mat out(in.rows(), w.cols);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double* orow = out.row(r);
    std::memcpy(orow, b.d, w.cols * sizeof(double));
    const double* irow = in.row(r);
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double a = irow[i];
      if (a == 0.0) continue;  // relu sparsity
      const double* wrow = w.row(i);
      for (std::size_t c = 0; c < w.cols; ++c) orow[c] += a * wrow[c];
    }
  }
  return out;
}

void relu_inplace(Mat& m) {
  for (double& v : m.data())
    if (v < 0.0) v = 0.0;
}

void sigmoid_inplace(Mat& m) {
  for (double& v : m.data()) v = 1.0 / (1.0 + std::exp(-v));
}

/// d <- d .* relu'(act), with act the post-activation values.
void relu_backward_inplace(const Mat& act, Mat& d) {
  const auto& a = act.data();
  auto& g = d.data();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (a[i] <= 0.0) g[i] = 0.0;
}

/// d <- d .* s(1-s), with s the post-sigmoid values.
void sigmoid_backward_inplace(const Mat& s, Mat& d) {
  const auto& a = s.data();
  auto& g = d.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= a[i] * (1.0 - a[i]);
}

/// Accumulates dw/db and optionally writes din (set, not accumulate).
void linear_backward(const Mat& in, ConstView w, const Mat& dout, View dw, View db, Mat* din) {
  for (std::size_t r = 0; r < in.rows(); ++r) {
    const double* drow = dout.row(r);
    for (std::size_t c = 0; c < w.cols; ++c) db.d[c] += drow[c];
    const double* irow = in.row(r);
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double a = irow[i];
      if (a == 0.0) continue;
      double* dwrow = dw.row(i);
      for (std::size_t c = 0; c < w.cols; ++c) dwrow[c] += a * drow[c];
    }
  }
  if (din) {
    *din = Mat(in.rows(), w.rows);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      const double* drow = dout.row(r);
      double* orow = din->row(r);
      for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wrow = w.row(i);
        double acc = 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) acc += drow[c] * wrow[c];
        orow[i] = acc;
      }
    }
  }
}

void accumulate(Mat& into, const Mat& from) {
  auto& a = into.data();
  const auto& b = from.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Shared feature network
// ---------------------------------------------------------------------------

struct FeatureCache {
  Mat x;                       // N x 3
  std::vector<Mat> acts;       // post-relu activations per feature layer
  std::vector<int> pool_argmax;  // winning row per channel of the last layer
  Mat combined_in;             // N x 2w: [local | pooled context]
  Mat f_l;                     // N x feature_dim, post-relu
};

struct ForwardCache {
  FeatureCache feat;
  std::vector<Mat> flatten_hidden;
  std::array<std::vector<Mat>, 3> project_hidden;
  Mat score_ctx;
  std::vector<std::vector<int>> score_selected;
  std::vector<Mat> score_hidden;
  std::vector<Mat> sem_hidden;
};

namespace {

template <typename Params>
FeatureCache feature_forward(const Params& p, const std::vector<int>& widths,
                             const PointCloud& cloud) {
  const std::size_t n = cloud.size();
  FeatureCache c;
  c.x = backbone_inputs(cloud, p.cfg.local_stats, p.cfg.local_stat_k);

  const Mat* in = &c.x;
  for (std::size_t l = 1; l < widths.size(); ++l) {
    const std::string base = "feature." + std::to_string(l - 1);
    Mat h = linear_forward(*in, p.tensor(base + ".w"), p.tensor(base + ".b"));
    relu_inplace(h);
    c.acts.push_back(std::move(h));
    in = &c.acts.back();
  }

  const Mat& last = c.acts.back();
  const std::size_t w = last.cols();
  std::vector<double> pooled(w, 0.0);
  c.pool_argmax.assign(w, 0);
  if (p.cfg.global_context) {
    for (std::size_t ch = 0; ch < w; ++ch) {
      double best = last(0, ch);
      int arg = 0;
      for (std::size_t r = 1; r < n; ++r)
        if (last(r, ch) > best) {  // strict: first maximum wins ties
          best = last(r, ch);
          arg = static_cast<int>(r);
        }
      pooled[ch] = best;
      c.pool_argmax[ch] = arg;
    }
  }

  c.combined_in = Mat(n, 2 * w);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = c.combined_in.row(r);
    std::memcpy(row, last.row(r), w * sizeof(double));
    std::memcpy(row + w, pooled.data(), w * sizeof(double));
  }

  c.f_l = linear_forward(c.combined_in, p.tensor("combine.w"), p.tensor("combine.b"));
  relu_inplace(c.f_l);
  return c;
}

/// Backward through combine + pooled context + per-point MLP. d_f_l is the
/// accumulated gradient at the feature output.
template <typename Params, typename Grads>
void feature_backward(const Params& p, const std::vector<int>& widths, const FeatureCache& c,
                      Mat d_f_l, Grads& g) {
  relu_backward_inplace(c.f_l, d_f_l);
  Mat d_combined;
  linear_backward(c.combined_in, p.tensor("combine.w"), d_f_l, g.tensor("combine.w"),
                  g.tensor("combine.b"), &d_combined);

  const Mat& last = c.acts.back();
  const std::size_t w = last.cols();
  Mat d_last(last.rows(), w);
  for (std::size_t r = 0; r < last.rows(); ++r)
    std::memcpy(d_last.row(r), d_combined.row(r), w * sizeof(double));
  // The pooled context routes gradient to the argmax point per channel.
  if (p.cfg.global_context) {
    for (std::size_t ch = 0; ch < w; ++ch) {
      double acc = 0.0;
      for (std::size_t r = 0; r < last.rows(); ++r) acc += d_combined(r, w + ch);
      d_last(c.pool_argmax[ch], ch) += acc;
    }
  }

  Mat d = std::move(d_last);
  for (int l = static_cast<int>(widths.size()) - 2; l >= 0; --l) {
    const std::string base = "feature." + std::to_string(l);
    relu_backward_inplace(c.acts[l], d);
    const Mat& in = (l == 0) ? c.x : c.acts[l - 1];
    Mat d_in;
    linear_backward(in, p.tensor(base + ".w"), d, g.tensor(base + ".w"), g.tensor(base + ".b"),
                    l > 0 ? &d_in : nullptr);
    d = std::move(d_in);
  }
}

template <typename Params>
Mat head_forward(const Params& p, const std::string& prefix, int hidden_layers, const Mat& input,
                 std::vector<Mat>& hidden, bool sigmoid_out) {
  const Mat* in = &input;
  for (int i = 0; i < hidden_layers; ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    Mat h = linear_forward(*in, p.tensor(base + ".w"), p.tensor(base + ".b"));
    relu_inplace(h);
    hidden.push_back(std::move(h));
    in = &hidden.back();
  }
  Mat out = linear_forward(*in, p.tensor(prefix + ".out.w"), p.tensor(prefix + ".out.b"));
  if (sigmoid_out) sigmoid_inplace(out);
  return out;
}

/// dout is consumed; the gradient w.r.t. the head input is accumulated into
/// d_input.
template <typename Params, typename Grads>
void head_backward(const Params& p, const std::string& prefix, int hidden_layers, const Mat& input,
                   const std::vector<Mat>& hidden, const Mat& out, Mat dout, bool sigmoid_out,
                   Grads& g, Mat& d_input) {
  if (sigmoid_out) sigmoid_backward_inplace(out, dout);
  Mat d;
  linear_backward(hidden.back(), p.tensor(prefix + ".out.w"), dout, g.tensor(prefix + ".out.w"),
                  g.tensor(prefix + ".out.b"), &d);
  for (int i = hidden_layers - 1; i >= 0; --i) {
    const std::string base = prefix + "." + std::to_string(i);
    relu_backward_inplace(hidden[i], d);
    const Mat& in = (i == 0) ? input : hidden[i - 1];
    Mat d_in;
    linear_backward(in, p.tensor(base + ".w"), d, g.tensor(base + ".w"), g.tensor(base + ".b"),
                    &d_in);
    d = std::move(d_in);
  }
  accumulate(d_input, d);
}

}  // namespace

// ---------------------------------------------------------------------------
// Score-head context pooling
// ---------------------------------------------------------------------------

Mat score_head_context(const Mat& point_features, const PointCloud& cloud, const CubeGrid& grid,
                       int k, std::vector<std::vector<int>>* selected) {
  const std::size_t n = cloud.size();
  if (n == 0) throw DataError("empty cloud");
  if (k < 1) throw DomainError("k must be >= 1");
  const int cells = grid.cell_count();
  const std::size_t dim = point_features.cols();
  const int take = static_cast<int>(std::min<std::size_t>(k, n));

  Mat ctx(cells, dim);
  if (selected) selected->assign(cells, {});

  std::vector<std::pair<double, int>> dist(n);
  for (int flat = 0; flat < cells; ++flat) {
    const Vec3 center = cube_center(unflatten_index(flat, grid.n_s), grid.n_s);
    for (std::size_t i = 0; i < n; ++i)
      dist[i] = {squared_norm(cloud.positions[i] - center), static_cast<int>(i)};
    // Ties broken by the smaller point index via pair ordering.
    std::nth_element(dist.begin(), dist.begin() + (take - 1), dist.end());
    std::vector<int> idx(take);
    for (int j = 0; j < take; ++j) idx[j] = dist[j].second;
    std::sort(idx.begin(), idx.end());

    double* crow = ctx.row(flat);
    for (int p : idx) {
      const double* frow = point_features.row(p);
      for (std::size_t c = 0; c < dim; ++c) crow[c] += frow[c];
    }
    const double inv = 1.0 / take;
    for (std::size_t c = 0; c < dim; ++c) crow[c] *= inv;
    if (selected) (*selected)[flat] = std::move(idx);
  }
  return ctx;
}

Mat score_head_geometry(const PointCloud& cloud, const CubeGrid& grid,
                        const std::vector<std::vector<int>>& selected) {
  const int cells = grid.cell_count();
  if (static_cast<int>(selected.size()) != cells)
    throw DataError("selection does not match the grid");
  Mat geom(cells, 4);
  for (int flat = 0; flat < cells; ++flat) {
    const Vec3 center = cube_center(unflatten_index(flat, grid.n_s), grid.n_s);
    Vec3 mean{};
    double d2 = 0.0;
    for (int p : selected[flat]) {
      const Vec3 off = cloud.positions[p] - center;
      mean = mean + off;
      d2 += squared_norm(off);
    }
    const double inv = 1.0 / static_cast<double>(selected[flat].size());
    geom(flat, 0) = mean.x * inv;
    geom(flat, 1) = mean.y * inv;
    geom(flat, 2) = mean.z * inv;
    geom(flat, 3) = std::sqrt(d2 * inv);
  }
  return geom;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

std::size_t ForwardOutputs::head_output_bytes() const {
  return category_scores.size_bytes() + axis_scores_x.size_bytes() + axis_scores_y.size_bytes() +
         axis_scores_z.size_bytes() + cube_scores.size() * sizeof(double) +
         semantic_logits.size_bytes();
}

ForwardOutputs forward(const ModelParams& params, const PointCloud& cloud, const CubeGrid& grid) {
  if (grid.n_s != params.cfg.n_s)
    throw ConfigError("grid resolution does not match the model configuration");
  cloud.validate();

  auto cache = std::make_shared<ForwardCache>();
  cache->feat = feature_forward(params, params.cfg.feature_widths, cloud);

  ForwardOutputs out;
  out.point_features = cache->feat.f_l;

  if (params.cfg.paradigm == Paradigm::Flatten) {
    out.category_scores = head_forward(params, "flat", params.cfg.flatten_head_layers,
                                       cache->feat.f_l, cache->flatten_hidden, true);
  } else {
    const char* prefixes[3] = {"projx", "projy", "projz"};
    Mat* outs[3] = {&out.axis_scores_x, &out.axis_scores_y, &out.axis_scores_z};
    for (int a = 0; a < 3; ++a)
      *outs[a] = head_forward(params, prefixes[a], params.cfg.project_head_layers,
                              cache->feat.f_l, cache->project_hidden[a], true);
  }

  {
    const Mat ctx = score_head_context(cache->feat.f_l, cloud, grid, params.cfg.score_k,
                                       &cache->score_selected);
    const Mat geom = score_head_geometry(cloud, grid, cache->score_selected);
    cache->score_ctx = Mat(ctx.rows(), ctx.cols() + geom.cols());
    for (std::size_t j = 0; j < ctx.rows(); ++j) {
      std::memcpy(cache->score_ctx.row(j), ctx.row(j), ctx.cols() * sizeof(double));
      std::memcpy(cache->score_ctx.row(j) + ctx.cols(), geom.row(j),
                  geom.cols() * sizeof(double));
    }
  }
  Mat score = head_forward(params, "score", params.cfg.score_head_layers, cache->score_ctx,
                           cache->score_hidden, true);
  out.cube_scores.assign(score.data().begin(), score.data().end());

  out.semantic_logits =
      head_forward(params, "sem", 1, cache->feat.f_l, cache->sem_hidden, false);

  out.cache = std::move(cache);
  return out;
}

ParamGrads backward(const ModelParams& params, const PointCloud& cloud, const CubeGrid& grid,
                    const ForwardOutputs& outputs, const OutputGrads& grads) {
  (void)cloud;  // geometry is baked into the cached top-k selections
  if (!outputs.cache) throw Error("forward cache missing; cannot run backward");
  const ForwardCache& cache = *outputs.cache;
  ParamGrads g = make_params(params.cfg);

  Mat d_f_l(cache.feat.f_l.rows(), cache.feat.f_l.cols());

  if (params.cfg.paradigm == Paradigm::Flatten) {
    if (!grads.d_category.empty())
      head_backward(params, "flat", params.cfg.flatten_head_layers, cache.feat.f_l,
                    cache.flatten_hidden, outputs.category_scores, grads.d_category, true, g,
                    d_f_l);
  } else {
    const char* prefixes[3] = {"projx", "projy", "projz"};
    const Mat* outs[3] = {&outputs.axis_scores_x, &outputs.axis_scores_y, &outputs.axis_scores_z};
    const Mat* douts[3] = {&grads.d_axis_x, &grads.d_axis_y, &grads.d_axis_z};
    for (int a = 0; a < 3; ++a) {
      if (douts[a]->empty()) continue;
      head_backward(params, prefixes[a], params.cfg.project_head_layers, cache.feat.f_l,
                    cache.project_hidden[a], *outs[a], *douts[a], true, g, d_f_l);
    }
  }

  if (!grads.d_cube_scores.empty()) {
    const int cells = grid.cell_count();
    Mat score_out(cells, 1);
    Mat d_score(cells, 1);
    for (int j = 0; j < cells; ++j) {
      score_out(j, 0) = outputs.cube_scores[j];
      d_score(j, 0) = grads.d_cube_scores[j];
    }
    Mat d_ctx(cache.score_ctx.rows(), cache.score_ctx.cols());
    head_backward(params, "score", params.cfg.score_head_layers, cache.score_ctx,
                  cache.score_hidden, score_out, std::move(d_score), true, g, d_ctx);
    // Average pooling routes each cube's gradient to its selected points; the
    // trailing local-frame channels are parameter-free constants.
    for (int j = 0; j < cells; ++j) {
      const auto& sel = cache.score_selected[j];
      const double inv = 1.0 / static_cast<double>(sel.size());
      const double* crow = d_ctx.row(j);
      for (int p : sel) {
        double* frow = d_f_l.row(p);
        for (std::size_t c = 0; c < d_f_l.cols(); ++c) frow[c] += inv * crow[c];
      }
    }
  }

  if (!grads.d_semantic.empty())
    head_backward(params, "sem", 1, cache.feat.f_l, cache.sem_hidden, outputs.semantic_logits,
                  grads.d_semantic, false, g, d_f_l);

  feature_backward(params, params.cfg.feature_widths, cache.feat, std::move(d_f_l), g);
  return g;
}

// ---------------------------------------------------------------------------
// Baseline arm
// ---------------------------------------------------------------------------

void BaselineConfig::validate() const {
  if (feature_widths.size() < 2 || feature_widths.front() != input_channels())
    throw ConfigError("first feature width must match the input channels (3, or 7 with local stats)");
  if (feature_dim < 1 || embed_dim < 1 || head_hidden < 1)
    throw ConfigError("bad baseline dimensions");
  if (local_stat_k < 1) throw ConfigError("neighborhood sizes must be >= 1");
}

TensorLayout baseline_layout(const BaselineConfig& cfg) {
  cfg.validate();
  TensorLayout layout;
  add_feature_net(layout, cfg.feature_widths, cfg.feature_dim);
  add_chain(layout, "embed", cfg.feature_dim, cfg.head_hidden, 1, cfg.embed_dim);
  return layout;
}

ConstView BaselineParams::tensor(const std::string& name) const {
  const TensorDesc& t = layout.find(name);
  return {data.data() + t.offset, t.rows, t.cols};
}

View BaselineParams::tensor(const std::string& name) {
  const TensorDesc& t = layout.find(name);
  return {data.data() + t.offset, t.rows, t.cols};
}

BaselineParams make_baseline_params(const BaselineConfig& cfg) {
  BaselineParams p;
  p.cfg = cfg;
  p.layout = baseline_layout(cfg);
  p.data.assign(p.layout.total, 0.0);
  return p;
}

BaselineParams init_baseline_params(const BaselineConfig& cfg, std::uint64_t seed) {
  BaselineParams p = make_baseline_params(cfg);
  glorot_init(p, seed);
  return p;
}

BaselineOutputs baseline_forward(const BaselineParams& params, const PointCloud& cloud) {
  cloud.validate();
  auto cache = std::make_shared<ForwardCache>();
  cache->feat = feature_forward(params, params.cfg.feature_widths, cloud);
  BaselineOutputs out;
  out.embeddings = head_forward(params, "embed", 1, cache->feat.f_l, cache->sem_hidden, false);
  out.cache = std::move(cache);
  return out;
}

BaselineParams baseline_backward(const BaselineParams& params, const PointCloud& cloud,
                                 const BaselineOutputs& outputs, const Mat& d_embeddings) {
  (void)cloud;
  if (!outputs.cache) throw Error("forward cache missing; cannot run backward");
  const ForwardCache& cache = *outputs.cache;
  BaselineParams g = make_baseline_params(params.cfg);
  Mat d_f_l(cache.feat.f_l.rows(), cache.feat.f_l.cols());
  head_backward(params, "embed", 1, cache.feat.f_l, cache.sem_hidden, outputs.embeddings,
                d_embeddings, false, g, d_f_l);
  feature_backward(params, params.cfg.feature_widths, cache.feat, std::move(d_f_l), g);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'U', 'B', 'E', 'S', 'E', 'G', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void put_f64(std::string& out, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void put_doubles(std::string& out, const std::vector<double>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

struct Reader {
  std::string bytes;
  std::size_t pos = 0;

  void need(std::size_t n) {
    if (pos + n > bytes.size()) throw DataError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  }
  double f64() {
    need(8);
    double v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  void doubles(std::vector<double>& v, std::size_t n) {
    need(n * sizeof(double));
    v.resize(n);
    std::memcpy(v.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
  }
};

template <typename Params>
void put_tensors_and_adam(std::string& out, const Params& params,
                          const std::optional<AdamState>& adam, std::uint64_t step,
                          std::uint64_t epoch) {
  put_u64(out, step);
  put_u64(out, epoch);
  put_u32(out, static_cast<std::uint32_t>(params.layout.tensors.size()));
  for (const TensorDesc& t : params.layout.tensors) {
    put_string(out, t.name);
    put_u64(out, t.rows);
    put_u64(out, t.cols);
    out.append(reinterpret_cast<const char*>(params.data.data() + t.offset),
               t.count() * sizeof(double));
  }
  out.push_back(adam ? 1 : 0);
  if (adam) {
    if (adam->m.size() != params.data.size() || adam->v.size() != params.data.size())
      throw Error("adam state does not match parameter layout");
    put_u64(out, adam->t);
    put_doubles(out, adam->m);
    put_doubles(out, adam->v);
  }
}

template <typename Params>
void read_tensors_and_adam(Reader& r, Params& params, std::optional<AdamState>& adam,
                           std::uint64_t& step, std::uint64_t& epoch) {
  step = r.u64();
  epoch = r.u64();
  const std::uint32_t count = r.u32();
  if (count != params.layout.tensors.size())
    throw DataError("checkpoint tensor count does not match its configuration");
  for (const TensorDesc& t : params.layout.tensors) {
    const std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (name != t.name || rows != t.rows || cols != t.cols)
      throw DataError("checkpoint tensor '" + name + "' does not match its configuration");
    r.need(t.count() * sizeof(double));
    std::memcpy(params.data.data() + t.offset, r.bytes.data() + r.pos,
                t.count() * sizeof(double));
    r.pos += t.count() * sizeof(double);
  }
  r.need(1);
  const bool has_adam = r.bytes[r.pos++] != 0;
  if (has_adam) {
    AdamState st;
    st.t = r.u64();
    r.doubles(st.m, params.data.size());
    r.doubles(st.v, params.data.size());
    adam = std::move(st);
  }
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

Reader open_checkpoint(const std::filesystem::path& path, std::uint32_t expected_kind) {
  Reader r{read_file(path)};
  r.need(8);
  if (std::memcmp(r.bytes.data(), kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  r.pos = 8;
  const std::uint32_t kind = r.u32();
  if (kind != expected_kind) throw DataError("checkpoint kind mismatch: " + path.string());
  return r;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out(kMagic, 8);
  put_u32(out, 0);  // kind: model
  const ModelConfig& c = ckpt.params.cfg;
  put_u32(out, c.paradigm == Paradigm::Flatten ? 0 : 1);
  put_u32(out, static_cast<std::uint32_t>(c.n_s));
  put_u32(out, static_cast<std::uint32_t>(c.feature_dim));
  put_u32(out, static_cast<std::uint32_t>(c.c_sem));
  put_u32(out, static_cast<std::uint32_t>(c.head_hidden));
  put_u32(out, static_cast<std::uint32_t>(c.flatten_head_layers));
  put_u32(out, static_cast<std::uint32_t>(c.project_head_layers));
  put_u32(out, static_cast<std::uint32_t>(c.score_head_layers));
  put_u32(out, static_cast<std::uint32_t>(c.score_k));
  put_u32(out, c.local_stats ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(c.local_stat_k));
  put_u32(out, c.global_context ? 1 : 0);
  put_f64(out, c.score_prior);
  put_u32(out, static_cast<std::uint32_t>(c.feature_widths.size()));
  for (int w : c.feature_widths) put_u32(out, static_cast<std::uint32_t>(w));
  put_tensors_and_adam(out, ckpt.params, ckpt.adam, ckpt.step, ckpt.epoch);
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r = open_checkpoint(path, 0);
  ModelConfig c;
  c.paradigm = r.u32() == 0 ? Paradigm::Flatten : Paradigm::Project;
  c.n_s = static_cast<int>(r.u32());
  c.feature_dim = static_cast<int>(r.u32());
  c.c_sem = static_cast<int>(r.u32());
  c.head_hidden = static_cast<int>(r.u32());
  c.flatten_head_layers = static_cast<int>(r.u32());
  c.project_head_layers = static_cast<int>(r.u32());
  c.score_head_layers = static_cast<int>(r.u32());
  c.score_k = static_cast<int>(r.u32());
  c.local_stats = r.u32() != 0;
  c.local_stat_k = static_cast<int>(r.u32());
  c.global_context = r.u32() != 0;
  c.score_prior = r.f64();
  const std::uint32_t nw = r.u32();
  c.feature_widths.clear();
  for (std::uint32_t i = 0; i < nw; ++i) c.feature_widths.push_back(static_cast<int>(r.u32()));

  Checkpoint ckpt;
  ckpt.params = make_params(c);
  read_tensors_and_adam(r, ckpt.params, ckpt.adam, ckpt.step, ckpt.epoch);
  return ckpt;
}

void save_baseline_checkpoint(const std::filesystem::path& path, const BaselineCheckpoint& ckpt) {
  std::string out(kMagic, 8);
  put_u32(out, 1);  // kind: baseline
  const BaselineConfig& c = ckpt.params.cfg;
  put_u32(out, static_cast<std::uint32_t>(c.feature_dim));
  put_u32(out, static_cast<std::uint32_t>(c.embed_dim));
  put_u32(out, static_cast<std::uint32_t>(c.head_hidden));
  put_u32(out, c.local_stats ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(c.local_stat_k));
  put_u32(out, c.global_context ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(c.feature_widths.size()));
  for (int w : c.feature_widths) put_u32(out, static_cast<std::uint32_t>(w));
  put_tensors_and_adam(out, ckpt.params, ckpt.adam, ckpt.step, ckpt.epoch);
  write_file(path, out);
}

BaselineCheckpoint load_baseline_checkpoint(const std::filesystem::path& path) {
  Reader r = open_checkpoint(path, 1);
  BaselineConfig c;
  c.feature_dim = static_cast<int>(r.u32());
  c.embed_dim = static_cast<int>(r.u32());
  c.head_hidden = static_cast<int>(r.u32());
  c.local_stats = r.u32() != 0;
  c.local_stat_k = static_cast<int>(r.u32());
  c.global_context = r.u32() != 0;
  const std::uint32_t nw = r.u32();
  c.feature_widths.clear();
  for (std::uint32_t i = 0; i < nw; ++i) c.feature_widths.push_back(static_cast<int>(r.u32()));

  BaselineCheckpoint ckpt;
  ckpt.params = make_baseline_params(c);
  read_tensors_and_adam(r, ckpt.params, ckpt.adam, ckpt.step, ckpt.epoch);
  return ckpt;
}

}  // namespace cubeseg
