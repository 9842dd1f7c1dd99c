#include "curvecov/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "curvecov/parallel.hpp"

namespace curvecov {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

Vector vec_row_major(const Matrix& m) {
  Vector v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v(i * m.cols() + j) = m(i, j);
  return v;
}

Matrix mat_row_major(const Vector& v, int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = v(i * cols + j);
  return m;
}

Matrix gauss_matrix(Rng& rng, int rows, int cols, double scale) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

// -------- ablation --------

Ablation ablation_from_string(const std::string& name) {
  if (name == "none") return Ablation::kNone;
  if (name == "reweight-only") return Ablation::kReweightOnly;
  if (name == "no-volatility") return Ablation::kNoVolatility;
  if (name == "no-rewiring") return Ablation::kNoRewiring;
  if (name == "diag-only") return Ablation::kDiagOnly;
  throw std::invalid_argument("unknown ablation: " + name);
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kReweightOnly: return "reweight-only";
    case Ablation::kNoVolatility: return "no-volatility";
    case Ablation::kNoRewiring: return "no-rewiring";
    case Ablation::kDiagOnly: return "diag-only";
  }
  return "none";
}

bool uses_reweighting(Ablation a) {
  return a == Ablation::kNone || a == Ablation::kReweightOnly ||
         a == Ablation::kNoVolatility;
}

bool trains_projection(Ablation a) { return a == Ablation::kNone; }

bool uses_volatility(Ablation a) {
  return a == Ablation::kNone || a == Ablation::kReweightOnly;
}

// -------- config / params --------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (max_epochs < 1) throw std::invalid_argument("max epochs must be positive");
  if (max_steps < 1) throw std::invalid_argument("max steps must be positive");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("gradient clip must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be nonnegative");
  if (window < 1) throw std::invalid_argument("window must be positive");
  if (rank < 1) throw std::invalid_argument("rank must be positive");
  if (mixtures < 1) throw std::invalid_argument("mixture count must be positive");
  if (lag < 1) throw std::invalid_argument("lag must be positive");
  if (hidden < 1) throw std::invalid_argument("hidden size must be positive");
  if (batch_windows < 1) throw std::invalid_argument("batch size must be positive");
  if (!(length_scale_step > 0.0))
    throw std::invalid_argument("length-scale step must be positive");
  if (val_interval < 1) throw std::invalid_argument("validation interval must be positive");
}

ModelParams init_params(int nodes, const TrainConfig& config, Rng& rng) {
  config.validate();
  if (nodes < 1) throw std::invalid_argument("node count must be positive");
  ModelParams p;
  p.nodes = nodes;
  p.lag = config.lag;
  p.hidden = config.hidden;
  p.rank = config.rank;
  p.mixtures = config.mixtures;

  const int in = nodes * config.lag;
  p.backbone.weight = gauss_matrix(rng, config.hidden, in, 1.0 / std::sqrt(double(in)));
  p.backbone.bias = Vector::Zero(config.hidden);
  const double hs = 1.0 / std::sqrt(double(config.hidden));
  p.head_mu.weight = gauss_matrix(rng, nodes, config.hidden, hs);
  p.head_mu.bias = Vector::Zero(nodes);
  p.head_factor.weight = gauss_matrix(rng, nodes * config.rank, config.hidden, 0.1 * hs);
  p.head_factor.bias = 0.1 * vec_row_major(gauss_matrix(rng, nodes, config.rank, 1.0));
  p.head_logdiag.weight = gauss_matrix(rng, nodes, config.hidden, 0.1 * hs);
  p.head_logdiag.bias = Vector::Zero(nodes);
  p.head_logits.weight = gauss_matrix(rng, config.mixtures, config.hidden, 0.1 * hs);
  p.head_logits.bias = Vector::Zero(config.mixtures);

  p.spatial.alpha = 0.01;
  p.spatial.beta = 1.0;
  p.spatial.sigma_min = kProjectionFloor;
  p.spatial.kappa0 = 0.0;
  p.spatial.tau = 5.0;
  p.spatial.lambda = 1.0;
  p.spatial.projection = gauss_matrix(rng, nodes, config.rank, 1.0);
  return p;
}

Vector encode(const ModelParams& params, const Matrix& history) {
  if (history.rows() != params.lag || history.cols() != params.nodes)
    throw std::invalid_argument("history length mismatch");
  Vector input(params.lag * params.nodes);
  for (int s = 0; s < params.lag; ++s)
    for (int i = 0; i < params.nodes; ++i) input(s * params.nodes + i) = history(s, i);
  return (params.backbone.weight * input + params.backbone.bias).array().tanh();
}

HeadsOut heads(const ModelParams& params, const Vector& h) {
  if (h.size() != params.hidden) throw std::invalid_argument("hidden state size mismatch");
  HeadsOut out;
  out.mu = params.head_mu(h);
  out.factor = mat_row_major(params.head_factor(h), params.nodes, params.rank);
  out.logdiag = params.head_logdiag(h);
  out.diag = out.logdiag.array().exp() + kDiagFloor;
  out.logits = params.head_logits(h);
  return out;
}

// -------- graph sequences --------

GraphSequence::GraphSequence(WeightedGraph base, bool dynamic, uint64_t seed)
    : base_(std::move(base)), dynamic_(dynamic), seed_(seed) {
  base_kappas_ = std::make_shared<const std::vector<EdgeCurvature>>(edge_curvatures(base_));
}

WeightedGraph GraphSequence::snapshot(long t) const {
  if (!dynamic_) return base_;
  Matrix w = base_.weights;
  for (int i = 0; i < base_.n; ++i)
    for (int j = i + 1; j < base_.n; ++j)
      if (w(i, j) > kSupportThreshold) {
        const double factor =
            0.8 + 0.4 * unit_hash(seed_, static_cast<uint64_t>(t), static_cast<uint64_t>(i),
                                  static_cast<uint64_t>(j));
        w(i, j) *= factor;
        w(j, i) = w(i, j);
      }
  return WeightedGraph{base_.n, std::move(w)};
}

SpatialContext GraphSequence::window_context(long t_begin, long t_end) const {
  if (t_begin > t_end) throw std::invalid_argument("empty snapshot window");
  SpatialContext ctx;
  if (!dynamic_) {
    ctx.averaged = base_;
    ctx.kappas = base_kappas_;
    return ctx;
  }
  std::vector<Matrix> batch;
  batch.reserve(static_cast<size_t>(t_end - t_begin + 1));
  for (long t = t_begin; t <= t_end; ++t) batch.push_back(snapshot(t).weights);
  ctx.averaged = symmetrize(batch_average(batch));

  // Multiplicative positive factors keep the support identical to the base
  // graph, so the cached combinatorial curvature applies; recompute otherwise.
  bool same_support = ctx.averaged.edge_count() == static_cast<int>(base_kappas_->size());
  if (same_support)
    for (const EdgeCurvature& e : *base_kappas_)
      if (!ctx.averaged.has_edge(e.i, e.j)) {
        same_support = false;
        break;
      }
  if (same_support)
    ctx.kappas = base_kappas_;
  else
    ctx.kappas =
        std::make_shared<const std::vector<EdgeCurvature>>(edge_curvatures(ctx.averaged));
  return ctx;
}

WindowData make_window(const Matrix& values, const GraphSequence& graphs, long end, int window,
                       int lag) {
  const long first = first_window_end(window, lag);
  if (end < first || end >= values.rows())
    throw std::invalid_argument("window end outside valid range");
  WindowData win;
  win.end = end;
  win.targets = values.middleRows(end - window + 1, window);
  win.lags.reserve(window);
  for (int k = 0; k < window; ++k) {
    const long step = end - window + 1 + k;
    win.lags.push_back(values.middleRows(step - lag, lag));
  }
  win.graph = graphs.window_context(end - window + 1, end);
  return win;
}

// -------- window objective --------

namespace {

struct SpatialBuild {
  WeightedGraph rewired;
  Matrix lap;
  SpatialFactor factor;
  CurvatureReport report;  // empty when reweighting is off
};

SpatialBuild build_spatial(const SpatialContext& ctx, const SpatialFactorParams& sp,
                           bool use_reweighting) {
  SpatialBuild out;
  if (use_reweighting) {
    out.report = score_curvatures(*ctx.kappas, sp.kappa0, sp.tau);
    out.rewired = reweight(ctx.averaged, out.report, sp.lambda);
  } else {
    out.rewired = ctx.averaged;
  }
  out.lap = laplacian(out.rewired);
  out.factor = spatial_factor(out.lap, sp);
  return out;
}

struct WindowForward {
  std::vector<Vector> input;  // flattened lag windows
  std::vector<Vector> h;
  std::vector<HeadsOut> out;
  Vector eta;   // DN
  Vector dbat;  // DN
  Vector mix_weights;
  Matrix cmat;
  SpatialBuild spatial;
};

WindowForward run_forward(const ModelParams& p, const KernelBank& bank, const WindowData& win,
                          Ablation ablation) {
  const int d = static_cast<int>(win.lags.size());
  const int n = p.nodes;
  WindowForward f;
  f.input.resize(d);
  f.h.resize(d);
  f.out.resize(d);
  f.eta.resize(d * n);
  f.dbat.resize(d * n);
  for (int k = 0; k < d; ++k) {
    f.h[k] = encode(p, win.lags[k]);
    f.input[k].resize(p.lag * n);
    for (int s = 0; s < p.lag; ++s)
      for (int i = 0; i < n; ++i) f.input[k](s * n + i) = win.lags[k](s, i);
    f.out[k] = heads(p, f.h[k]);
    f.eta.segment(k * n, n) = win.targets.row(k).transpose() - f.out[k].mu;
    f.dbat.segment(k * n, n) = f.out[k].diag;
  }
  if (ablation == Ablation::kDiagOnly) return f;

  f.mix_weights = softmax(f.out[d - 1].logits);
  f.cmat = Matrix::Zero(d, d);
  for (int m = 0; m < bank.mixtures; ++m) f.cmat += f.mix_weights(m) * bank.kernels[m];
  f.spatial = build_spatial(win.graph, p.spatial, uses_reweighting(ablation));
  return f;
}

BatchCovariance forward_covariance(const WindowForward& f) {
  std::vector<Matrix> blocks;
  blocks.reserve(f.out.size());
  for (const HeadsOut& o : f.out) blocks.push_back(o.factor);
  return assemble(std::move(blocks), f.cmat, f.spatial.factor.covariance, f.dbat);
}

double diag_only_nll(const WindowForward& f) {
  double value = 0.0;
  for (Eigen::Index i = 0; i < f.eta.size(); ++i) {
    const double dd = f.dbat(i);
    value += 0.5 * (kLog2Pi + std::log(dd) + f.eta(i) * f.eta(i) / dd);
  }
  return value;
}

}  // namespace

double window_nll(const ModelParams& params, const KernelBank& bank, const WindowData& win,
                  Ablation ablation) {
  if (static_cast<int>(win.lags.size()) != bank.window)
    throw std::invalid_argument("window length does not match kernel bank");
  WindowForward f = run_forward(params, bank, win, ablation);
  if (ablation == Ablation::kDiagOnly) return diag_only_nll(f);
  return nll(forward_covariance(f), f.eta);
}

ParamGradient ParamGradient::zeros_like(const ModelParams& p) {
  ParamGradient g;
  g.backbone_w = Matrix::Zero(p.backbone.weight.rows(), p.backbone.weight.cols());
  g.backbone_b = Vector::Zero(p.backbone.bias.size());
  g.mu_w = Matrix::Zero(p.head_mu.weight.rows(), p.head_mu.weight.cols());
  g.mu_b = Vector::Zero(p.head_mu.bias.size());
  g.factor_w = Matrix::Zero(p.head_factor.weight.rows(), p.head_factor.weight.cols());
  g.factor_b = Vector::Zero(p.head_factor.bias.size());
  g.logdiag_w = Matrix::Zero(p.head_logdiag.weight.rows(), p.head_logdiag.weight.cols());
  g.logdiag_b = Vector::Zero(p.head_logdiag.bias.size());
  g.logits_w = Matrix::Zero(p.head_logits.weight.rows(), p.head_logits.weight.cols());
  g.logits_b = Vector::Zero(p.head_logits.bias.size());
  g.projection = Matrix::Zero(p.spatial.projection.rows(), p.spatial.projection.cols());
  return g;
}

void ParamGradient::accumulate(const ParamGradient& o) {
  backbone_w += o.backbone_w;
  backbone_b += o.backbone_b;
  mu_w += o.mu_w;
  mu_b += o.mu_b;
  factor_w += o.factor_w;
  factor_b += o.factor_b;
  logdiag_w += o.logdiag_w;
  logdiag_b += o.logdiag_b;
  logits_w += o.logits_w;
  logits_b += o.logits_b;
  alpha += o.alpha;
  beta += o.beta;
  kappa0 += o.kappa0;
  tau += o.tau;
  lambda += o.lambda;
  projection += o.projection;
}

void ParamGradient::scale(double factor) {
  backbone_w *= factor;
  backbone_b *= factor;
  mu_w *= factor;
  mu_b *= factor;
  factor_w *= factor;
  factor_b *= factor;
  logdiag_w *= factor;
  logdiag_b *= factor;
  logits_w *= factor;
  logits_b *= factor;
  alpha *= factor;
  beta *= factor;
  kappa0 *= factor;
  tau *= factor;
  lambda *= factor;
  projection *= factor;
}

double window_nll_grad(const ModelParams& p, const KernelBank& bank, const WindowData& win,
                       Ablation ablation, ParamGradient& grad) {
  if (static_cast<int>(win.lags.size()) != bank.window)
    throw std::invalid_argument("window length does not match kernel bank");
  const int d = static_cast<int>(win.lags.size());
  const int n = p.nodes;
  const int r = p.rank;
  const int m = p.mixtures;

  WindowForward f = run_forward(p, bank, win, ablation);
  grad = ParamGradient::zeros_like(p);

  std::vector<Vector> g_mu(d), g_z(d);
  std::vector<Matrix> g_factor(d);
  Vector g_logits = Vector::Zero(m);
  double value = 0.0;

  if (ablation == Ablation::kDiagOnly) {
    value = diag_only_nll(f);
    for (int k = 0; k < d; ++k) {
      g_mu[k].resize(n);
      g_z[k].resize(n);
      g_factor[k] = Matrix::Zero(n, r);
      for (int i = 0; i < n; ++i) {
        const double dd = f.dbat(k * n + i);
        const double e = f.eta(k * n + i);
        g_mu[k](i) = -e / dd;
        const double g_d = 0.5 * (1.0 / dd - e * e / (dd * dd));
        g_z[k](i) = g_d * std::exp(f.out[k].logdiag(i));
      }
    }
  } else {
    const NllGradients ng = nll_with_gradients(forward_covariance(f), f.eta);
    value = ng.value;

    for (int k = 0; k < d; ++k) {
      g_mu[k] = -ng.d_eta.segment(k * n, n);
      g_factor[k] = ng.d_blocks[k];
      g_z[k] =
          ng.d_diag.segment(k * n, n).cwiseProduct(f.out[k].logdiag.array().exp().matrix());
    }

    // mixture logits through the softmax
    Vector g_w(m);
    for (int j = 0; j < m; ++j)
      g_w(j) = (ng.d_temporal.array() * bank.kernels[j].array()).sum();
    const double pivot = f.mix_weights.dot(g_w);
    g_logits = f.mix_weights.cwiseProduct(g_w - Vector::Constant(m, pivot));

    // spatial factor chain: G = Q^{-1}
    const Matrix& g_mat = f.spatial.factor.covariance;
    const Matrix g_q = -g_mat * ng.d_spatial * g_mat;
    grad.alpha = g_q.trace();
    grad.beta = (g_q.array() * f.spatial.factor.projected_laplacian.array()).sum();
    const Matrix g_lr = p.spatial.beta * g_q;
    const Matrix& phat = f.spatial.factor.normalized_projection;
    const Matrix g_phat = f.spatial.lap * phat * (g_lr + g_lr.transpose());
    const Matrix g_lap = phat * g_lr * phat.transpose();

    // column normalization of the projection
    for (int c = 0; c < r; ++c) {
      const double norm = p.spatial.projection.col(c).norm();
      const Vector pc = phat.col(c);
      const Vector gp = g_phat.col(c);
      grad.projection.col(c) = (gp - pc * pc.dot(gp)) / norm;
    }

    // reweighting chain: W' = W (1 + lambda b), b = softplus(tau (kappa0 - kappa))
    if (uses_reweighting(ablation)) {
      for (const EdgeCurvature& e : f.spatial.report.edges) {
        const double g_w_edge =
            g_lap(e.i, e.i) + g_lap(e.j, e.j) - g_lap(e.i, e.j) - g_lap(e.j, e.i);
        const double w0 = win.graph.averaged.weights(e.i, e.j);
        grad.lambda += g_w_edge * w0 * e.score;
        const double g_b = g_w_edge * w0 * p.spatial.lambda;
        const double sig = sigmoid(p.spatial.tau * (p.spatial.kappa0 - e.kappa));
        grad.kappa0 += g_b * sig * p.spatial.tau;
        grad.tau += g_b * sig * (p.spatial.kappa0 - e.kappa);
      }
    }
  }

  // heads and backbone, shared by every variant
  for (int k = 0; k < d; ++k) {
    const Vector g_fvec = vec_row_major(g_factor[k]);
    Vector g_h = p.head_mu.weight.transpose() * g_mu[k] +
                 p.head_factor.weight.transpose() * g_fvec +
                 p.head_logdiag.weight.transpose() * g_z[k];
    if (k == d - 1 && ablation != Ablation::kDiagOnly)
      g_h += p.head_logits.weight.transpose() * g_logits;

    grad.mu_w += g_mu[k] * f.h[k].transpose();
    grad.mu_b += g_mu[k];
    grad.factor_w += g_fvec * f.h[k].transpose();
    grad.factor_b += g_fvec;
    grad.logdiag_w += g_z[k] * f.h[k].transpose();
    grad.logdiag_b += g_z[k];
    if (k == d - 1 && ablation != Ablation::kDiagOnly) {
      grad.logits_w += g_logits * f.h[k].transpose();
      grad.logits_b += g_logits;
    }

    const Vector g_pre = (1.0 - f.h[k].array().square()).matrix().cwiseProduct(g_h);
    grad.backbone_w += g_pre * f.input[k].transpose();
    grad.backbone_b += g_pre;
  }
  return value;
}

// -------- parameter vector plumbing --------

namespace {

struct Segment {
  const char* name;
  long offset;
  long rows;
  long cols;  // 0 for vectors / scalars
};

template <typename ParamsT, typename Fn>
void visit_segments(ParamsT& p, Fn&& fn) {
  long off = 0;
  auto mat = [&](const char* name, auto& m) {
    fn(Segment{name, off, m.rows(), m.cols()}, m.data(), static_cast<long>(m.size()));
    off += m.size();
  };
  auto vec = [&](const char* name, auto& v) {
    fn(Segment{name, off, v.size(), 0}, v.data(), static_cast<long>(v.size()));
    off += v.size();
  };
  auto scalar = [&](const char* name, double& s) {
    fn(Segment{name, off, 1, 0}, &s, 1);
    ++off;
  };
  mat("backbone.weight", p.backbone.weight);
  vec("backbone.bias", p.backbone.bias);
  mat("head_mu.weight", p.head_mu.weight);
  vec("head_mu.bias", p.head_mu.bias);
  mat("head_factor.weight", p.head_factor.weight);
  vec("head_factor.bias", p.head_factor.bias);
  mat("head_logdiag.weight", p.head_logdiag.weight);
  vec("head_logdiag.bias", p.head_logdiag.bias);
  mat("head_logits.weight", p.head_logits.weight);
  vec("head_logits.bias", p.head_logits.bias);
  scalar("spatial.alpha", p.spatial.alpha);
  scalar("spatial.beta", p.spatial.beta);
  scalar("spatial.kappa0", p.spatial.kappa0);
  scalar("spatial.tau", p.spatial.tau);
  scalar("spatial.lambda", p.spatial.lambda);
  mat("spatial.projection", p.spatial.projection);
}

}  // namespace

long parameter_count(const ModelParams& p) {
  long count = 0;
  visit_segments(const_cast<ModelParams&>(p),
                 [&](const Segment&, const double*, long size) { count += size; });
  return count;
}

Vector flatten_parameters(const ModelParams& p) {
  Vector theta(parameter_count(p));
  visit_segments(const_cast<ModelParams&>(p),
                 [&](const Segment& s, const double* data, long size) {
                   for (long i = 0; i < size; ++i) theta(s.offset + i) = data[i];
                 });
  return theta;
}

void unflatten_parameters(ModelParams& p, const Vector& theta) {
  if (theta.size() != parameter_count(p))
    throw std::invalid_argument("parameter vector size mismatch");
  visit_segments(p, [&](const Segment& s, double* data, long size) {
    for (long i = 0; i < size; ++i) data[i] = theta(s.offset + i);
  });
}

Vector flatten_gradient(const ModelParams& p, const ParamGradient& g) {
  // mirror the parameter layout through a shadow copy
  ModelParams shadow = p;
  shadow.backbone.weight = g.backbone_w;
  shadow.backbone.bias = g.backbone_b;
  shadow.head_mu.weight = g.mu_w;
  shadow.head_mu.bias = g.mu_b;
  shadow.head_factor.weight = g.factor_w;
  shadow.head_factor.bias = g.factor_b;
  shadow.head_logdiag.weight = g.logdiag_w;
  shadow.head_logdiag.bias = g.logdiag_b;
  shadow.head_logits.weight = g.logits_w;
  shadow.head_logits.bias = g.logits_b;
  shadow.spatial.alpha = g.alpha;
  shadow.spatial.beta = g.beta;
  shadow.spatial.kappa0 = g.kappa0;
  shadow.spatial.tau = g.tau;
  shadow.spatial.lambda = g.lambda;
  shadow.spatial.projection = g.projection;
  return flatten_parameters(shadow);
}

std::string parameter_name(const ModelParams& p, long index) {
  std::string out = "unknown";
  visit_segments(const_cast<ModelParams&>(p),
                 [&](const Segment& s, const double*, long size) {
                   if (index < s.offset || index >= s.offset + size) return;
                   const long local = index - s.offset;
                   if (s.cols > 0) {
                     // Eigen column-major layout
                     out = std::string(s.name) + "(" + std::to_string(local % s.rows) + "," +
                           std::to_string(local / s.rows) + ")";
                   } else if (s.rows > 1) {
                     out = std::string(s.name) + "(" + std::to_string(local) + ")";
                   } else {
                     out = s.name;
                   }
                 });
  return out;
}

Vector gradient_mask(const ModelParams& p, Ablation ablation) {
  Vector mask = Vector::Ones(parameter_count(p));
  visit_segments(const_cast<ModelParams&>(p),
                 [&](const Segment& s, const double*, long size) {
                   const std::string name = s.name;
                   auto block = [&]() {
                     for (long i = 0; i < size; ++i) mask(s.offset + i) = 0.0;
                   };
                   if (!trains_projection(ablation) && name == "spatial.projection") block();
                   if (!uses_reweighting(ablation) &&
                       (name == "spatial.kappa0" || name == "spatial.tau" ||
                        name == "spatial.lambda"))
                     block();
                   if (ablation == Ablation::kDiagOnly &&
                       (name.rfind("spatial.", 0) == 0 ||
                        name.rfind("head_factor.", 0) == 0 ||
                        name.rfind("head_logits.", 0) == 0))
                     block();
                 });
  return mask;
}

// -------- training --------

namespace {

void project_constraints(ModelParams& p) {
  p.spatial.alpha = std::max(p.spatial.alpha, 1e-6);
  p.spatial.beta = std::max(p.spatial.beta, 0.0);
  p.spatial.tau = std::max(p.spatial.tau, 1e-3);
  p.spatial.lambda = std::max(p.spatial.lambda, 0.0);
}

Vector residual_variance(const ModelParams& p, const Matrix& values, long begin, long end) {
  Vector acc = Vector::Zero(p.nodes);
  long count = 0;
  for (long s = begin; s < end; ++s) {
    const Vector h = encode(p, values.middleRows(s - p.lag, p.lag));
    const Vector mu = p.head_mu(h);
    const Vector eta = values.row(s).transpose() - mu;
    acc += eta.cwiseProduct(eta);
    ++count;
  }
  if (count == 0) return Vector::Ones(p.nodes);
  Vector var = acc / static_cast<double>(count);
  return var.cwiseMax(1e-8);
}

}  // namespace

double mean_window_nll(const ModelParams& params, const KernelBank& bank, const Matrix& values,
                       const GraphSequence& graphs, long begin, long end, Ablation ablation) {
  const long first = first_window_end(bank.window, params.lag);
  const long lo = std::max(first, begin);
  if (lo >= end) throw std::invalid_argument("no valid windows in range");
  const long count = end - lo;
  std::vector<double> vals(count);
  std::vector<std::exception_ptr> errs(count);
#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (long k = 0; k < count; ++k) {
    try {
      WindowData w = make_window(values, graphs, lo + k, bank.window, params.lag);
      vals[k] = window_nll(params, bank, w, ablation);
    } catch (...) {
      errs[k] = std::current_exception();
    }
  }
  for (long k = 0; k < count; ++k)
    if (errs[k]) std::rethrow_exception(errs[k]);
  double sum = 0.0;
  for (double v : vals) sum += v;
  return sum / static_cast<double>(count);
}

FitResult fit(const Matrix& values, const GraphSequence& graphs, const TrainConfig& config) {
  config.validate();
  const long total_rows = values.rows();
  const int nodes = static_cast<int>(values.cols());
  const auto [n1, n2] = chronological_bounds(total_rows);
  const long first = first_window_end(config.window, config.lag);
  if (first >= n1) throw std::invalid_argument("train split too short for lag and window");
  if (n1 >= n2) throw std::invalid_argument("validation split empty");
  const long train_count = n1 - first;

  Rng rng_init(config.seed, 1);
  Rng rng_batch(config.seed, 2);
  ModelParams params = init_params(nodes, config, rng_init);
  const KernelBank bank =
      build_kernel_bank(config.window, config.mixtures, config.length_scale_step);
  const Vector mask = gradient_mask(params, config.ablation);

  FitResult result;
  auto validate_now = [&]() {
    return mean_window_nll(params, bank, values, graphs, n1, n2, config.ablation);
  };
  double best_val = validate_now();
  result.params = params;
  result.best_val_nll = best_val;
  result.trace.push_back({0, std::numeric_limits<double>::quiet_NaN(), best_val, best_val});

  const long steps_per_epoch =
      std::max<long>(1, (train_count + config.batch_windows - 1) / config.batch_windows);
  const long total_steps = std::min<long>(config.max_steps, steps_per_epoch * config.max_epochs);
  const int b = config.batch_windows;

  std::vector<long> ends(b);
  std::vector<ParamGradient> grads(b);
  std::vector<double> vals(b);

  for (long step = 1; step <= total_steps; ++step) {
    for (int k = 0; k < b; ++k) ends[k] = first + rng_batch.uniform_index(train_count);

    std::vector<std::exception_ptr> errs(b);
#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
    for (int k = 0; k < b; ++k) {
      try {
        WindowData w = make_window(values, graphs, ends[k], config.window, config.lag);
        vals[k] = window_nll_grad(params, bank, w, config.ablation, grads[k]);
      } catch (...) {
        errs[k] = std::current_exception();
      }
    }
    for (int k = 0; k < b; ++k)
      if (errs[k]) std::rethrow_exception(errs[k]);

    double batch_nll = 0.0;
    for (int k = 0; k < b; ++k) batch_nll += vals[k];
    batch_nll /= b;
    if (!std::isfinite(batch_nll))
      throw FitDivergence("training diverged at step " + std::to_string(step), params);

    ParamGradient total = ParamGradient::zeros_like(params);
    for (int k = 0; k < b; ++k) total.accumulate(grads[k]);
    total.scale(1.0 / b);

    Vector flat = flatten_gradient(params, total).cwiseProduct(mask);
    if (!flat.allFinite()) {
      long bad = 0;
      for (long i = 0; i < flat.size(); ++i)
        if (!std::isfinite(flat(i))) {
          bad = i;
          break;
        }
      throw std::runtime_error("non-finite gradient for parameter " +
                               parameter_name(params, bad));
    }
    const double norm = flat.norm();
    if (norm > config.grad_clip) flat *= config.grad_clip / norm;

    Vector theta = flatten_parameters(params);
    theta -= config.learning_rate * (flat + config.weight_decay * theta.cwiseProduct(mask));
    unflatten_parameters(params, theta);
    project_constraints(params);

    TraceRow row{step, batch_nll, std::numeric_limits<double>::quiet_NaN(), best_val};
    if (step % config.val_interval == 0 || step == total_steps) {
      const double val = validate_now();
      if (!std::isfinite(val))
        throw FitDivergence("validation diverged at step " + std::to_string(step),
                            result.params);
      row.val_nll = val;
      if (val < best_val) {
        best_val = val;
        result.params = params;
      }
      row.best_val = best_val;
    }
    result.trace.push_back(row);
  }

  result.best_val_nll = best_val;
  result.params.train_residual_var =
      residual_variance(result.params, values, config.lag, n1);
  return result;
}

// -------- checkpoints --------

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.size();
  if (rows == 0) return Matrix(0, 0);
  const auto cols = j.at(0).size();
  Matrix m(rows, cols);
  for (size_t i = 0; i < rows; ++i)
    for (size_t c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
  return m;
}

nlohmann::json vector_json(const Vector& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Vector vector_from_json(const nlohmann::json& j) {
  Vector v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

nlohmann::json affine_json(const AffineMap& a) {
  return {{"weight", matrix_json(a.weight)}, {"bias", vector_json(a.bias)}};
}

AffineMap affine_from_json(const nlohmann::json& j) {
  return {matrix_from_json(j.at("weight")), vector_from_json(j.at("bias"))};
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& p, const TrainConfig& c) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = {{"learning_rate", c.learning_rate},
                 {"max_epochs", c.max_epochs},
                 {"max_steps", c.max_steps},
                 {"grad_clip", c.grad_clip},
                 {"weight_decay", c.weight_decay},
                 {"window", c.window},
                 {"rank", c.rank},
                 {"mixtures", c.mixtures},
                 {"lag", c.lag},
                 {"hidden", c.hidden},
                 {"batch_windows", c.batch_windows},
                 {"length_scale_step", c.length_scale_step},
                 {"seed", c.seed},
                 {"val_interval", c.val_interval},
                 {"ablation", to_string(c.ablation)}};
  j["model"] = {{"nodes", p.nodes},
                {"lag", p.lag},
                {"hidden", p.hidden},
                {"rank", p.rank},
                {"mixtures", p.mixtures},
                {"backbone", affine_json(p.backbone)},
                {"head_mu", affine_json(p.head_mu)},
                {"head_factor", affine_json(p.head_factor)},
                {"head_logdiag", affine_json(p.head_logdiag)},
                {"head_logits", affine_json(p.head_logits)},
                {"spatial",
                 {{"alpha", p.spatial.alpha},
                  {"beta", p.spatial.beta},
                  {"sigma_min", p.spatial.sigma_min},
                  {"kappa0", p.spatial.kappa0},
                  {"tau", p.spatial.tau},
                  {"lambda", p.spatial.lambda},
                  {"projection", matrix_json(p.spatial.projection)}}},
                {"train_residual_var", vector_json(p.train_residual_var)}};

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version");

  Checkpoint ck;
  const auto& c = j.at("config");
  ck.config.learning_rate = c.at("learning_rate").get<double>();
  ck.config.max_epochs = c.at("max_epochs").get<int>();
  ck.config.max_steps = c.at("max_steps").get<long>();
  ck.config.grad_clip = c.at("grad_clip").get<double>();
  ck.config.weight_decay = c.at("weight_decay").get<double>();
  ck.config.window = c.at("window").get<int>();
  ck.config.rank = c.at("rank").get<int>();
  ck.config.mixtures = c.at("mixtures").get<int>();
  ck.config.lag = c.at("lag").get<int>();
  ck.config.hidden = c.at("hidden").get<int>();
  ck.config.batch_windows = c.at("batch_windows").get<int>();
  ck.config.length_scale_step = c.at("length_scale_step").get<double>();
  ck.config.seed = c.at("seed").get<uint64_t>();
  ck.config.val_interval = c.at("val_interval").get<int>();
  ck.config.ablation = ablation_from_string(c.at("ablation").get<std::string>());

  const auto& m = j.at("model");
  ck.params.nodes = m.at("nodes").get<int>();
  ck.params.lag = m.at("lag").get<int>();
  ck.params.hidden = m.at("hidden").get<int>();
  ck.params.rank = m.at("rank").get<int>();
  ck.params.mixtures = m.at("mixtures").get<int>();
  ck.params.backbone = affine_from_json(m.at("backbone"));
  ck.params.head_mu = affine_from_json(m.at("head_mu"));
  ck.params.head_factor = affine_from_json(m.at("head_factor"));
  ck.params.head_logdiag = affine_from_json(m.at("head_logdiag"));
  ck.params.head_logits = affine_from_json(m.at("head_logits"));
  const auto& sp = m.at("spatial");
  ck.params.spatial.alpha = sp.at("alpha").get<double>();
  ck.params.spatial.beta = sp.at("beta").get<double>();
  ck.params.spatial.sigma_min = sp.at("sigma_min").get<double>();
  ck.params.spatial.kappa0 = sp.at("kappa0").get<double>();
  ck.params.spatial.tau = sp.at("tau").get<double>();
  ck.params.spatial.lambda = sp.at("lambda").get<double>();
  ck.params.spatial.projection = matrix_from_json(sp.at("projection"));
  ck.params.train_residual_var = vector_from_json(m.at("train_residual_var"));
  return ck;
}

}  // namespace curvecov
