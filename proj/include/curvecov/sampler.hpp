#pragma once

#include <string>
#include <vector>

#include "curvecov/forecaster.hpp"

namespace curvecov {

// Per-node EWMA of squared one-step residuals: s2 <- rho s2 + (1-rho) r^2.
struct VolatilityTracker {
  Vector s2;
  double rho = 0.94;

  void update(const Vector& residual);
};

// Splits an SPD covariance into marginal scales and a unit-diagonal
// correlation matrix: cov = diag(scale) * corr * diag(scale).
struct CorrelationParts {
  Vector scale;  // sqrt of the diagonal
  Matrix corr;
};

CorrelationParts correlation_decompose(const Matrix& cov);

// Volatility-adapted residual draw:
//   mu_cond + diag(sqrt(s2)) * chol(corr) * xi.
// The square root of the correlation is its lower Cholesky factor.
Vector refined_sample(const Vector& mu_cond, const Matrix& corr,
                      const VolatilityTracker& tracker, const Vector& xi);

// Hot-loop variant with the Cholesky factor and scales precomputed.
Vector refined_sample_prefactored(const Vector& mu_cond, const Matrix& corr_chol,
                                  const Vector& scale, const Vector& xi);

struct ForecastEnsemble {
  std::vector<Matrix> samples;  // S matrices, each Q x N
  long origin = 0;              // data index of the last observed row

  int count() const { return static_cast<int>(samples.size()); }
  int horizon() const { return samples.empty() ? 0 : static_cast<int>(samples[0].rows()); }
  int nodes() const { return samples.empty() ? 0 : static_cast<int>(samples[0].cols()); }
};

struct RolloutConfig {
  int horizon = 12;   // Q
  int samples = 100;  // S
  uint64_t seed = 42;
  double volatility_decay = 0.94;  // rho
  bool zero_noise = false;         // test hook: forces xi = 0
  long origin = -1;                // -1 means the last row of the data
};

// Multi-step forecast by conditional-Gaussian residual refinement. Observed
// residuals fill the conditioning window at the start of the horizon and
// sampled residuals take over inside it; the volatility tracker is frozen
// during the horizon. Deterministic per seed, paths independent.
ForecastEnsemble rollout(const ModelParams& params, const KernelBank& bank,
                         const Matrix& values, const GraphSequence& graphs,
                         const RolloutConfig& config, Ablation ablation = Ablation::kNone);

// Long-format CSV: header "sample,step,node,value" with absolute step index.
void save_ensemble_csv(const ForecastEnsemble& ens, const std::string& path);
ForecastEnsemble load_ensemble_csv(const std::string& path);

// Compact binary layout: magic "CCEN", u32 version, i64 origin/S/Q/N,
// then S*Q*N native little-endian doubles in (sample, step, node) order.
void save_ensemble_binary(const ForecastEnsemble& ens, const std::string& path);
ForecastEnsemble load_ensemble_binary(const std::string& path);

}  // namespace curvecov
