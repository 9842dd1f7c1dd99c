#include "curvecov/common.hpp"

#include <cmath>
#include <stdexcept>

namespace curvecov {

double softplus(double x) {
  // log(1 + e^x) without overflow on either tail
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) throw std::invalid_argument("softmax of empty vector");
  const double m = logits.maxCoeff();
  Vector w = (logits.array() - m).exp();
  return w / w.sum();
}

Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

double cholesky_logdet(const Matrix& a, const char* context) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw std::runtime_error(context);
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

bool is_symmetric(const Matrix& a, double tol) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

std::pair<long, long> chronological_bounds(long total, double f1, double f2) {
  const long n1 = static_cast<long>(std::floor(f1 * static_cast<double>(total)));
  const long n2 = static_cast<long>(std::floor((f1 + f2) * static_cast<double>(total)));
  return {n1, n2};
}

}  // namespace curvecov
