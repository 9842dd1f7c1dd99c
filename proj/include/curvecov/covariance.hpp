#pragma once

#include <vector>

#include "curvecov/common.hpp"

namespace curvecov {

// Bank of fixed squared-exponential temporal kernels on the window grid,
// lengthscales m * length_scale_step for m = 1..M. All unit diagonal, PSD.
struct KernelBank {
  int window = 0;     // D
  int mixtures = 0;   // M
  double length_scale_step = 1.0;
  std::vector<Matrix> kernels;
};

KernelBank build_kernel_bank(int window, int mixtures, double length_scale_step);

// C = sum_m softmax(logits)_m * K_m; unit diagonal, PSD.
Matrix mixture_correlation(const KernelBank& bank, const Vector& logits);

// Parameters of the curvature-aware spatial factor covariance.
struct SpatialFactorParams {
  double alpha = 0.01;
  double beta = 1.0;
  double sigma_min = kProjectionFloor;  // fixed jitter, not trained
  double kappa0 = 0.0;
  double tau = 5.0;
  double lambda = 1.0;
  Matrix projection;  // Pi, N x R; P = colnorm(Pi)

  void validate() const;
};

struct SpatialFactor {
  Matrix covariance;            // G = Q^{-1}, R x R SPD
  Matrix precision;             // Q = (alpha + sigma_min) I + beta * L^(R)
  Matrix normalized_projection; // P-hat, N x R, unit columns
  Matrix projected_laplacian;   // L^(R) = P-hat^T L' P-hat
};

// Builds G from a rewired Laplacian (Algorithm steps after the reweighting).
SpatialFactor spatial_factor(const Matrix& rewired_laplacian, const SpatialFactorParams& params);

// Implicit batch covariance
//   Sigma = blkdiag(L_1..L_D) (C (x) G) blkdiag(L_1..L_D)^T + diag(d),
// never densified on the main path.
struct BatchCovariance {
  std::vector<Matrix> blocks;  // D factors, each N x R
  Matrix temporal;             // C, D x D
  Matrix spatial;              // G, R x R
  Vector diag;                 // d, length D*N, strictly positive

  int steps() const { return static_cast<int>(blocks.size()); }
  int nodes() const { return blocks.empty() ? 0 : static_cast<int>(blocks.front().rows()); }
  int rank() const { return blocks.empty() ? 0 : static_cast<int>(blocks.front().cols()); }
  int dim() const { return steps() * nodes(); }

  Matrix dense() const;  // test / debug only
};

BatchCovariance assemble(std::vector<Matrix> blocks, Matrix temporal, Matrix spatial, Vector diag);

// Negative log-likelihood of eta under N(0, Sigma), evaluated through the
// Woodbury identity and the matrix determinant lemma; cost is dominated by
// one (DR)^3 factorization instead of (DN)^3.
double nll(const BatchCovariance& cov, const Vector& eta);

// Matrix-calculus adjoints of nll with respect to every field of the
// covariance; the forecaster chains these into model parameters.
struct NllGradients {
  double value = 0.0;
  Vector d_eta;                  // dNLL/d eta = Sigma^{-1} eta
  std::vector<Matrix> d_blocks;  // dNLL/d L_s
  Matrix d_temporal;             // dNLL/d C
  Matrix d_spatial;              // dNLL/d G
  Vector d_diag;                 // dNLL/d d
};

NllGradients nll_with_gradients(const BatchCovariance& cov, const Vector& eta);

// Dense reference: materializes Sigma and evaluates the same quantity by
// Cholesky. Serial oracle for the Woodbury path. `max_dim` guards memory;
// the benchmark raises it deliberately.
double nll_dense_oracle(const BatchCovariance& cov, const Vector& eta, int max_dim = 2000);

// Gaussian conditioning of the last window step on the D-1 preceding ones.
struct Conditional {
  Vector mean;  // N
  Matrix cov;   // N x N SPD
};

// eta_obs stacks the observed residuals of the first D-1 steps. Uses
// Woodbury solves against Sigma_11; falls back to the dense path when the
// middle factorization fails and N*(D-1) <= 2000.
Conditional conditional_next_step(const BatchCovariance& cov, const Vector& eta_obs);

// Dense conditioning oracle.
Conditional conditional_next_step_dense(const BatchCovariance& cov, const Vector& eta_obs,
                                        int max_dim = 2000);

}  // namespace curvecov
