#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvecov/covariance.hpp"
#include "curvecov/graph.hpp"
#include "curvecov/rng.hpp"

namespace curvecov {

// Ablation ladder. Each variant toggles which mechanisms are active during
// training (reweighting, projection learning) and inference (volatility).
enum class Ablation {
  kNone,          // full model
  kReweightOnly,  // curvature reweighting + volatility, projection frozen
  kNoVolatility,  // curvature reweighting only, projection frozen
  kNoRewiring,    // raw Laplacian, projection frozen, no volatility
  kDiagOnly,      // diagonal head, independent sampling (naive baseline)
};

Ablation ablation_from_string(const std::string& name);
std::string to_string(Ablation a);
bool uses_reweighting(Ablation a);
bool trains_projection(Ablation a);
bool uses_volatility(Ablation a);

struct AffineMap {
  Matrix weight;
  Vector bias;
  Vector operator()(const Vector& x) const { return weight * x + bias; }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int max_epochs = 100;
  long max_steps = 10000;
  double grad_clip = 10.0;
  double weight_decay = 1e-8;
  int window = 12;         // D, batch horizon
  int rank = 10;           // R
  int mixtures = 4;        // M
  int lag = 12;            // P
  int hidden = 40;         // H
  int batch_windows = 20;  // windows per gradient step
  double length_scale_step = 1.0;
  uint64_t seed = 42;
  int val_interval = 25;
  Ablation ablation = Ablation::kNone;

  void validate() const;
};

struct ModelParams {
  int nodes = 0, lag = 0, hidden = 0, rank = 0, mixtures = 0;
  AffineMap backbone;      // (N*P) -> H, tanh activation
  AffineMap head_mu;       // H -> N
  AffineMap head_factor;   // H -> N*R, reshaped row-major to N x R
  AffineMap head_logdiag;  // H -> N; d = exp(.) + kDiagFloor
  AffineMap head_logits;   // H -> M
  SpatialFactorParams spatial;
  Vector train_residual_var;  // per node, fills the volatility tracker
};

ModelParams init_params(int nodes, const TrainConfig& config, Rng& rng);

struct HeadsOut {
  Vector mu;       // N
  Matrix factor;   // N x R
  Vector diag;     // N, strictly positive
  Vector logdiag;  // raw pre-floor head output
  Vector logits;   // M
};

// h = tanh(W vec(history) + b); history rows are the P observations ending
// one step before the prediction target, oldest first.
Vector encode(const ModelParams& params, const Matrix& history);
HeadsOut heads(const ModelParams& params, const Vector& h);

// -------- graph snapshots --------

// Averaged window graph plus its cached per-edge curvature. The curvature is
// combinatorial (support only), so it is shared across windows whose support
// matches the base graph.
struct SpatialContext {
  WeightedGraph averaged;
  std::shared_ptr<const std::vector<EdgeCurvature>> kappas;
};

// Provides per-step graph snapshots. In dynamic mode each edge weight is
// scaled by a seeded factor in [0.8, 1.2], independent per (step, edge).
class GraphSequence {
 public:
  GraphSequence(WeightedGraph base, bool dynamic, uint64_t seed);

  const WeightedGraph& base() const { return base_; }
  WeightedGraph snapshot(long t) const;
  SpatialContext window_context(long t_begin, long t_end) const;

 private:
  WeightedGraph base_;
  bool dynamic_ = false;
  uint64_t seed_ = 0;
  std::shared_ptr<const std::vector<EdgeCurvature>> base_kappas_;
};

// -------- window objective --------

struct WindowData {
  long end = 0;              // data index of the last window step
  Matrix targets;            // D x N
  std::vector<Matrix> lags;  // D lag windows, each P x N
  SpatialContext graph;
};

WindowData make_window(const Matrix& values, const GraphSequence& graphs, long end,
                       int window, int lag);

// Smallest valid window end index for the given sizes.
inline long first_window_end(int window, int lag) { return lag + window - 1; }

struct ParamGradient {
  Matrix backbone_w, mu_w, factor_w, logdiag_w, logits_w;
  Vector backbone_b, mu_b, factor_b, logdiag_b, logits_b;
  double alpha = 0.0, beta = 0.0, kappa0 = 0.0, tau = 0.0, lambda = 0.0;
  Matrix projection;

  static ParamGradient zeros_like(const ModelParams& p);
  void accumulate(const ParamGradient& other);
  void scale(double factor);
};

// NLL of the stacked window residuals under the batch Gaussian model.
double window_nll(const ModelParams& params, const KernelBank& bank, const WindowData& win,
                  Ablation ablation = Ablation::kNone);

// Same value plus exact analytic gradients for every trainable parameter
// (curvature values are combinatorial and enter as constants).
double window_nll_grad(const ModelParams& params, const KernelBank& bank, const WindowData& win,
                       Ablation ablation, ParamGradient& grad);

// -------- parameter vector plumbing --------

// Fixed flattening order shared by the optimizer, the finite-difference
// harness, and checkpoints. sigma_min is fixed and excluded.
long parameter_count(const ModelParams& p);
Vector flatten_parameters(const ModelParams& p);
void unflatten_parameters(ModelParams& p, const Vector& theta);
Vector flatten_gradient(const ModelParams& p, const ParamGradient& g);
std::string parameter_name(const ModelParams& p, long index);
// 1 where the ablation trains the coordinate, else 0.
Vector gradient_mask(const ModelParams& p, Ablation ablation);

// -------- training --------

struct TraceRow {
  long step = 0;
  double train_nll = 0.0;
  double val_nll = std::numeric_limits<double>::quiet_NaN();
  double best_val = 0.0;
};

struct FitResult {
  ModelParams params;  // best-validation parameters
  std::vector<TraceRow> trace;
  double best_val_nll = 0.0;
};

class FitDivergence : public std::runtime_error {
 public:
  FitDivergence(const std::string& msg, ModelParams last)
      : std::runtime_error(msg), last_good(std::move(last)) {}
  ModelParams last_good;
};

// Joint gradient descent on all windows of the chronological train split,
// with best-validation selection on the middle split.
FitResult fit(const Matrix& values, const GraphSequence& graphs, const TrainConfig& config);

// Mean NLL over every valid window ending inside [begin, end).
double mean_window_nll(const ModelParams& params, const KernelBank& bank, const Matrix& values,
                       const GraphSequence& graphs, long begin, long end, Ablation ablation);

// -------- checkpoints --------

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const TrainConfig& config);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace curvecov
