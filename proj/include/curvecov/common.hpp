#pragma once

#include <utility>

#include <Eigen/Dense>

namespace curvecov {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Edge is present iff weight exceeds this threshold (curvature is combinatorial).
inline constexpr double kSupportThreshold = 1e-12;

// Floor added to exp(log-variance) head outputs; keeps per-node variances positive.
inline constexpr double kDiagFloor = 1e-6;

// Fixed jitter sigma_min on the spatial precision diagonal; not trained.
inline constexpr double kProjectionFloor = 1e-4;

double softplus(double x);
double sigmoid(double x);
Vector softmax(const Vector& logits);

// Dense Kronecker product, block (i,j) of the result equals a(i,j)*b.
Matrix kronecker(const Matrix& a, const Matrix& b);

// log|A| of a symmetric positive definite matrix via Cholesky.
// Throws std::runtime_error(context) when the factorization fails.
double cholesky_logdet(const Matrix& a, const char* context);

bool is_symmetric(const Matrix& a, double tol = 1e-12);

// Boundaries of a chronological split by the floor-of-cumulative-fraction
// rule: rows [0,n1) train, [n1,n2) validation, [n2,total) test.
std::pair<long, long> chronological_bounds(long total, double f1 = 0.7, double f2 = 0.1);

}  // namespace curvecov
