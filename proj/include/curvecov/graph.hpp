#pragma once

#include <string>
#include <utility>
#include <vector>

#include "curvecov/common.hpp"

namespace curvecov {

// Symmetric nonnegative weighted graph over n nodes, dense storage,
// zero diagonal. Dense is deliberate: the artifact targets N up to ~10^3
// and the property suites want exact full spectra.
struct WeightedGraph {
  int n = 0;
  Matrix weights;  // n x n

  static WeightedGraph from_weights(Matrix w);  // validates invariants

  bool has_edge(int i, int j, double threshold = kSupportThreshold) const {
    return i != j && weights(i, j) > threshold;
  }
  int edge_count(double threshold = kSupportThreshold) const;
  Vector degrees() const { return weights.rowwise().sum(); }
};

struct EdgeCurvature {
  int i = 0, j = 0;    // i < j
  double kappa = 0.0;  // Balanced Forman curvature on the support graph
  double score = 0.0;  // b = softplus(tau * (kappa0 - kappa))
};

struct CurvatureReport {
  std::vector<EdgeCurvature> edges;
  double kappa0 = 0.0;
  double tau = 1.0;
};

struct DiagnosticsReport {
  double kirchhoff_before = 0.0, kirchhoff_after = 0.0;
  double lambda_top_before = 0.0, lambda_top_after = 0.0;  // lambda_{n-1}
  struct CutPair {
    std::string id;
    double phi_before = 0.0, phi_after = 0.0;
  };
  std::vector<CutPair> conductance_pairs;
  struct Ratios {
    // Percentages; improvement shows up as a value below 100.
    double kirchhoff_pct = 100.0;    // 100 * K(W') / K(W)
    double lambda_top_pct = 100.0;   // 100 * lambda_before / lambda_after
    double conductance_pct = 100.0;  // mean over cuts of 100 * phi_before / phi_after
  } ratios;

  std::string to_json() const;
};

// -------- Algorithm building blocks --------

// Entrywise mean of a nonempty batch of equally shaped adjacency matrices.
Matrix batch_average(const std::vector<Matrix>& adjacencies);

// W = (A + A^T)/2 with the diagonal zeroed; rejects negative entries.
WeightedGraph symmetrize(const Matrix& a);

// Unnormalised Laplacian L = diag(W 1) - W.
Matrix laplacian(const WeightedGraph& g);

// Balanced Forman curvature of edge (i,j) on the unweighted support of g.
// Fast path (bitset neighborhood intersections); used inside the parallel
// per-edge kernel.
double balanced_forman_curvature(const WeightedGraph& g, int i, int j,
                                 double support_threshold = kSupportThreshold);

// Reference implementation: exhaustive triangle / 4-cycle enumeration.
// Kept independent of the bitset path; this is the correctness oracle.
double balanced_forman_brute(const WeightedGraph& g, int i, int j,
                             double support_threshold = kSupportThreshold);

// Curvature of every support edge (i < j). `parallel` toggles the OpenMP
// per-edge kernel; both paths return identical values.
std::vector<EdgeCurvature> edge_curvatures(const WeightedGraph& g,
                                           double support_threshold = kSupportThreshold,
                                           bool parallel = true);
std::vector<EdgeCurvature> edge_curvatures_serial(const WeightedGraph& g,
                                                  double support_threshold = kSupportThreshold);

// b_ij = softplus(tau * (kappa0 - kappa_ij)) for every support edge.
CurvatureReport bottleneck_scores(const WeightedGraph& g, double kappa0, double tau,
                                  double support_threshold = kSupportThreshold);

// Score edges from precomputed curvatures (hot path during training, where
// kappa is cached per support and only kappa0/tau/lambda move).
CurvatureReport score_curvatures(std::vector<EdgeCurvature> kappas, double kappa0, double tau);

// W'_ij = W_ij * (1 + lambda * b_ij); sparsity pattern and symmetry preserved.
WeightedGraph reweight(const WeightedGraph& g, const CurvatureReport& report, double lambda);

// -------- Spectral / conductance diagnostics --------

// Ascending eigenvalues of a symmetric matrix.
Vector spectrum(const Matrix& symmetric);

// Scaled Kirchhoff index: sum over the N-1 nonzero Laplacian eigenvalues of
// 1/lambda_k. Throws "graph disconnected" when more than one eigenvalue is
// numerically zero.
double scaled_kirchhoff(const Matrix& lap);

bool is_connected(const WeightedGraph& g);

// phi(S) = cut(S) / min(vol(S), vol(V\S)).
double cut_conductance(const WeightedGraph& g, const std::vector<int>& subset);

// Exhaustive Cheeger constant over all 2^(N-1)-1 nontrivial cuts (N <= 20).
// Ties break toward the lexicographically smallest subset mask.
std::pair<double, std::vector<int>> cheeger_brute(const WeightedGraph& g, bool parallel = true);

// Before/after measures for a rewired graph (entrywise >= the original).
DiagnosticsReport diagnostics(const WeightedGraph& g, const WeightedGraph& rewired,
                              const std::vector<std::vector<int>>& cuts);

// -------- Serialization --------

// Edge-list CSV: header "i,j,w", 0-based ids, one undirected edge (i<j) per row.
void save_graph_csv(const WeightedGraph& g, const std::string& path);
WeightedGraph load_graph_csv(const std::string& path);

std::string curvature_report_json(const CurvatureReport& report);

}  // namespace curvecov
