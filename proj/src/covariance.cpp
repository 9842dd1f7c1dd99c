#include "curvecov/covariance.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace curvecov {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

Vector apply_u(const std::vector<Matrix>& blocks, const Vector& v) {
  const int d = static_cast<int>(blocks.size());
  const int n = static_cast<int>(blocks.front().rows());
  const int r = static_cast<int>(blocks.front().cols());
  Vector out(d * n);
  for (int s = 0; s < d; ++s) out.segment(s * n, n) = blocks[s] * v.segment(s * r, r);
  return out;
}

Vector apply_ut(const std::vector<Matrix>& blocks, const Vector& v) {
  const int d = static_cast<int>(blocks.size());
  const int n = static_cast<int>(blocks.front().rows());
  const int r = static_cast<int>(blocks.front().cols());
  Vector out(d * r);
  for (int s = 0; s < d; ++s) out.segment(s * r, r) = blocks[s].transpose() * v.segment(s * n, n);
  return out;
}

// Shared factorization state of the Woodbury evaluation.
struct WoodburyCore {
  int d = 0, n = 0, r = 0;
  Vector dinv;          // 1/d, length DN
  Matrix b;             // U^T D^{-1} U, block diagonal, DR x DR
  Matrix middle;        // M = C^{-1} (x) G^{-1} + B
  Eigen::LLT<Matrix> middle_llt;
  double logdet = 0.0;  // log|Sigma|
};

WoodburyCore factor(const BatchCovariance& cov) {
  WoodburyCore core;
  core.d = cov.steps();
  core.n = cov.nodes();
  core.r = cov.rank();
  core.dinv = cov.diag.cwiseInverse();

  Eigen::LLT<Matrix> c_llt(cov.temporal);
  if (c_llt.info() != Eigen::Success)
    throw std::runtime_error("temporal correlation matrix not positive definite");
  Eigen::LLT<Matrix> g_llt(cov.spatial);
  if (g_llt.info() != Eigen::Success)
    throw std::runtime_error("spatial factor covariance not positive definite");
  const double logdet_c = 2.0 * c_llt.matrixLLT().diagonal().array().log().sum();
  const double logdet_g = 2.0 * g_llt.matrixLLT().diagonal().array().log().sum();
  const Matrix c_inv = c_llt.solve(Matrix::Identity(core.d, core.d));
  const Matrix g_inv = g_llt.solve(Matrix::Identity(core.r, core.r));

  core.b = Matrix::Zero(core.d * core.r, core.d * core.r);
  for (int s = 0; s < core.d; ++s) {
    const auto dinv_s = core.dinv.segment(s * core.n, core.n);
    core.b.block(s * core.r, s * core.r, core.r, core.r) =
        cov.blocks[s].transpose() * dinv_s.asDiagonal() * cov.blocks[s];
  }

  core.middle = kronecker(c_inv, g_inv) + core.b;
  core.middle_llt.compute(core.middle);
  if (core.middle_llt.info() != Eigen::Success)
    throw std::runtime_error("indefinite middle matrix");
  const double logdet_m = 2.0 * core.middle_llt.matrixLLT().diagonal().array().log().sum();

  // determinant lemma with |C (x) G| = |C|^R |G|^D
  core.logdet = logdet_m + core.r * logdet_c + core.d * logdet_g +
                cov.diag.array().log().sum();
  return core;
}

Vector sigma_solve(const WoodburyCore& core, const BatchCovariance& cov, const Vector& x) {
  const Vector t = core.dinv.cwiseProduct(x);
  const Vector z = core.middle_llt.solve(apply_ut(cov.blocks, t));
  return t - core.dinv.cwiseProduct(apply_u(cov.blocks, z));
}

}  // namespace

KernelBank build_kernel_bank(int window, int mixtures, double length_scale_step) {
  if (window < 1) throw std::invalid_argument("window length must be at least 1");
  if (mixtures < 1) throw std::invalid_argument("mixture count must be at least 1");
  if (!(length_scale_step > 0.0))
    throw std::invalid_argument("length-scale step must be positive");
  KernelBank bank{window, mixtures, length_scale_step, {}};
  bank.kernels.reserve(mixtures);
  for (int m = 1; m <= mixtures; ++m) {
    const double ls = m * length_scale_step;
    Matrix k(window, window);
    for (int s = 0; s < window; ++s)
      for (int u = 0; u < window; ++u) {
        const double delta = static_cast<double>(s - u);
        k(s, u) = std::exp(-delta * delta / (2.0 * ls * ls));
      }
    bank.kernels.push_back(std::move(k));
  }
  return bank;
}

Matrix mixture_correlation(const KernelBank& bank, const Vector& logits) {
  if (logits.size() != bank.mixtures)
    throw std::invalid_argument("logit count does not match kernel bank");
  if (!logits.allFinite()) throw std::invalid_argument("non-finite logit");
  const Vector w = softmax(logits);
  Matrix c = Matrix::Zero(bank.window, bank.window);
  for (int m = 0; m < bank.mixtures; ++m) c += w(m) * bank.kernels[m];
  return c;
}

void SpatialFactorParams::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (beta < 0.0) throw std::invalid_argument("beta must be nonnegative");
  if (!(sigma_min > 0.0)) throw std::invalid_argument("sigma_min must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
  if (projection.size() == 0) throw std::invalid_argument("projection must be nonempty");
}

SpatialFactor spatial_factor(const Matrix& rewired_laplacian, const SpatialFactorParams& params) {
  params.validate();
  const int r = static_cast<int>(params.projection.cols());
  if (params.projection.rows() != rewired_laplacian.rows())
    throw std::invalid_argument("projection rows do not match Laplacian");

  SpatialFactor out;
  out.normalized_projection = params.projection;
  for (int c = 0; c < r; ++c) {
    const double norm = out.normalized_projection.col(c).norm();
    if (norm < 1e-300) throw std::invalid_argument("degenerate projection");
    out.normalized_projection.col(c) /= norm;
  }

  Matrix lr = out.normalized_projection.transpose() * rewired_laplacian *
              out.normalized_projection;
  out.projected_laplacian = 0.5 * (lr + lr.transpose());
  out.precision = (params.alpha + params.sigma_min) * Matrix::Identity(r, r) +
                  params.beta * out.projected_laplacian;

  Eigen::LLT<Matrix> llt(out.precision);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("spatial precision not positive definite");
  Matrix g = llt.solve(Matrix::Identity(r, r));
  out.covariance = 0.5 * (g + g.transpose());
  return out;
}

BatchCovariance assemble(std::vector<Matrix> blocks, Matrix temporal, Matrix spatial,
                         Vector diag) {
  if (blocks.empty()) throw std::invalid_argument("dimension mismatch: no factor blocks");
  const auto n = blocks.front().rows();
  const auto r = blocks.front().cols();
  if (n < 1 || r < 1) throw std::invalid_argument("dimension mismatch: empty factor block");
  for (const Matrix& b : blocks)
    if (b.rows() != n || b.cols() != r) throw std::invalid_argument("dimension mismatch");
  const auto d = static_cast<Eigen::Index>(blocks.size());
  if (temporal.rows() != d || temporal.cols() != d)
    throw std::invalid_argument("dimension mismatch: temporal correlation");
  if (spatial.rows() != r || spatial.cols() != r)
    throw std::invalid_argument("dimension mismatch: spatial factor");
  if (!is_symmetric(temporal, 1e-9)) throw std::invalid_argument("temporal matrix not symmetric");
  if (!is_symmetric(spatial, 1e-9)) throw std::invalid_argument("spatial matrix not symmetric");
  if (diag.size() != d * n) throw std::invalid_argument("dimension mismatch: diagonal");
  if (!(diag.minCoeff() > 0.0)) throw std::invalid_argument("nonpositive d entry");
  return BatchCovariance{std::move(blocks), std::move(temporal), std::move(spatial),
                         std::move(diag)};
}

Matrix BatchCovariance::dense() const {
  const int d = steps(), n = nodes();
  Matrix sigma(d * n, d * n);
  for (int s = 0; s < d; ++s) {
    const Matrix ls_g = blocks[s] * spatial;
    for (int u = 0; u < d; ++u)
      sigma.block(s * n, u * n, n, n) = temporal(s, u) * ls_g * blocks[u].transpose();
  }
  sigma += Matrix(diag.asDiagonal());
  return 0.5 * (sigma + sigma.transpose());
}

double nll(const BatchCovariance& cov, const Vector& eta) {
  if (eta.size() != cov.dim()) throw std::invalid_argument("residual length mismatch");
  const WoodburyCore core = factor(cov);
  const Vector alpha = sigma_solve(core, cov, eta);
  const double quad = eta.dot(alpha);
  return 0.5 * (cov.dim() * kLog2Pi + core.logdet + quad);
}

NllGradients nll_with_gradients(const BatchCovariance& cov, const Vector& eta) {
  if (eta.size() != cov.dim()) throw std::invalid_argument("residual length mismatch");
  const int d = cov.steps(), n = cov.nodes(), r = cov.rank();
  const WoodburyCore core = factor(cov);

  NllGradients g;
  g.d_eta = sigma_solve(core, cov, eta);  // alpha
  g.value = 0.5 * (cov.dim() * kLog2Pi + core.logdet + eta.dot(g.d_eta));

  const Matrix minv = core.middle_llt.solve(Matrix::Identity(d * r, d * r));
  const Vector ut_alpha = apply_ut(cov.blocks, g.d_eta);

  // dNLL/dK = (U^T Sigma^{-1} U - (U^T a)(U^T a)^T) / 2
  const Matrix s_uu = core.b - core.b * minv * core.b;
  const Matrix a_k = 0.5 * (s_uu - ut_alpha * ut_alpha.transpose());

  g.d_temporal.resize(d, d);
  g.d_spatial = Matrix::Zero(r, r);
  for (int s = 0; s < d; ++s)
    for (int u = 0; u < d; ++u) {
      const auto block = a_k.block(s * r, u * r, r, r);
      g.d_temporal(s, u) = (block.array() * cov.spatial.array()).sum();
      g.d_spatial += cov.temporal(s, u) * block;
    }

  // dNLL/dd_i = (diag(Sigma^{-1})_i - alpha_i^2) / 2
  g.d_diag.resize(d * n);
  for (int s = 0; s < d; ++s) {
    const auto mss = minv.block(s * r, s * r, r, r);
    for (int i = 0; i < n; ++i) {
      const int idx = s * n + i;
      const auto row = cov.blocks[s].row(i);
      const double corr = row * mss * row.transpose();
      const double diag_inv = core.dinv(idx) - core.dinv(idx) * core.dinv(idx) * corr;
      g.d_diag(idx) = 0.5 * (diag_inv - g.d_eta(idx) * g.d_eta(idx));
    }
  }

  // dNLL/dU = (Sigma^{-1} - a a^T) U K, taken block-diagonally for the L_s.
  // V = Sigma^{-1} U = D^{-1}U - D^{-1}U M^{-1} B, computed blockwise.
  Matrix w0 = Matrix::Zero(d * n, d * r);  // D^{-1} U
  for (int s = 0; s < d; ++s)
    w0.block(s * n, s * r, n, r) =
        core.dinv.segment(s * n, n).asDiagonal() * cov.blocks[s];
  const Matrix minv_b = minv * core.b;
  Matrix v = w0;
  for (int s = 0; s < d; ++s)
    v.middleRows(s * n, n) -= w0.block(s * n, s * r, n, r) * minv_b.middleRows(s * r, r);

  const Matrix k = kronecker(cov.temporal, cov.spatial);
  const Vector k_ut_alpha = k * ut_alpha;
  g.d_blocks.resize(d);
  for (int s = 0; s < d; ++s) {
    g.d_blocks[s] = v.middleRows(s * n, n) * k.middleCols(s * r, r) -
                    g.d_eta.segment(s * n, n) * k_ut_alpha.segment(s * r, r).transpose();
  }
  return g;
}

double nll_dense_oracle(const BatchCovariance& cov, const Vector& eta, int max_dim) {
  const int dim = cov.dim();
  if (dim > max_dim) throw std::invalid_argument("dense oracle dimension cap exceeded");
  if (eta.size() != dim) throw std::invalid_argument("residual length mismatch");
  const Matrix sigma = cov.dense();
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("densified covariance not positive definite");
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double quad = eta.dot(llt.solve(eta));
  return 0.5 * (dim * kLog2Pi + logdet + quad);
}

Conditional conditional_next_step(const BatchCovariance& cov, const Vector& eta_obs) {
  const int d = cov.steps(), n = cov.nodes(), r = cov.rank();
  if (d == 1) {
    if (eta_obs.size() != 0)
      throw std::invalid_argument("no observed steps expected for a one-step window");
    Matrix s22 = cov.temporal(0, 0) * cov.blocks[0] * cov.spatial * cov.blocks[0].transpose();
    s22 += Matrix(cov.diag.asDiagonal());
    return {Vector::Zero(n), 0.5 * (s22 + s22.transpose())};
  }
  if (eta_obs.size() != static_cast<Eigen::Index>(d - 1) * n)
    throw std::invalid_argument("observed residual length mismatch");

  const Matrix& lf = cov.blocks[d - 1];
  const Vector c_f = cov.temporal.col(d - 1).head(d - 1);
  const double c_ff = cov.temporal(d - 1, d - 1);
  const Vector d_past = cov.diag.head((d - 1) * n);
  const Vector d_fut = cov.diag.tail(n);

  // Sigma_11 is itself low-rank-plus-diagonal with the leading temporal block.
  std::vector<Matrix> past_blocks(cov.blocks.begin(), cov.blocks.end() - 1);
  BatchCovariance past{past_blocks, cov.temporal.topLeftCorner(d - 1, d - 1), cov.spatial,
                       d_past};

  try {
    const WoodburyCore core = factor(past);

    // mu = Sigma_21 Sigma_11^{-1} eta_obs
    const Vector y = sigma_solve(core, past, eta_obs);
    const Vector uty = apply_ut(past.blocks, y);
    Vector acc = Vector::Zero(r);
    for (int u = 0; u < d - 1; ++u) acc += c_f(u) * uty.segment(u * r, r);
    Conditional out;
    out.mean = lf * (cov.spatial * acc);

    // Sigma_12 = U~ (c_f (x) G) L_f^T, solved column-block by column-block.
    const Matrix g_lf_t = cov.spatial * lf.transpose();  // R x N
    Matrix s12((d - 1) * n, n);
    for (int u = 0; u < d - 1; ++u)
      s12.middleRows(u * n, n) = c_f(u) * past.blocks[u] * g_lf_t;

    // X = Sigma_11^{-1} Sigma_12 via the same Woodbury solve, matrix form.
    Matrix t = core.dinv.asDiagonal() * s12;
    Matrix utt((d - 1) * r, n);
    for (int u = 0; u < d - 1; ++u)
      utt.middleRows(u * r, r) = past.blocks[u].transpose() * t.middleRows(u * n, n);
    const Matrix z = core.middle_llt.solve(utt);
    Matrix x = t;
    for (int u = 0; u < d - 1; ++u)
      x.middleRows(u * n, n) -=
          core.dinv.segment(u * n, n).asDiagonal() * (past.blocks[u] * z.middleRows(u * r, r));

    // Sigma_21 X = L_f (c_f^T (x) G) U~^T X
    Matrix w = Matrix::Zero(r, n);
    for (int u = 0; u < d - 1; ++u)
      w += c_f(u) * (past.blocks[u].transpose() * x.middleRows(u * n, n));
    const Matrix correction = lf * (cov.spatial * w);

    Matrix s22 = c_ff * lf * cov.spatial * lf.transpose();
    s22 += Matrix(d_fut.asDiagonal());
    Matrix cond = s22 - correction;
    out.cov = 0.5 * (cond + cond.transpose());
    return out;
  } catch (const std::runtime_error&) {
    if ((d - 1) * n <= 2000) return conditional_next_step_dense(cov, eta_obs);
    throw std::runtime_error("Sigma11 solve failure");
  }
}

Conditional conditional_next_step_dense(const BatchCovariance& cov, const Vector& eta_obs,
                                        int max_dim) {
  const int d = cov.steps(), n = cov.nodes();
  const int past_dim = (d - 1) * n;
  if (past_dim > max_dim) throw std::invalid_argument("dense conditioning cap exceeded");
  if (eta_obs.size() != past_dim) throw std::invalid_argument("observed residual length mismatch");

  const Matrix sigma = cov.dense();
  if (d == 1) return {Vector::Zero(n), sigma};
  const Matrix s11 = sigma.topLeftCorner(past_dim, past_dim);
  const Matrix s21 = sigma.bottomLeftCorner(n, past_dim);
  const Matrix s22 = sigma.bottomRightCorner(n, n);
  Eigen::LLT<Matrix> llt(s11);
  if (llt.info() != Eigen::Success) throw std::runtime_error("Sigma11 solve failure");
  Conditional out;
  out.mean = s21 * llt.solve(eta_obs);
  Matrix cond = s22 - s21 * llt.solve(s21.transpose());
  out.cov = 0.5 * (cond + cond.transpose());
  return out;
}

}  // namespace curvecov
