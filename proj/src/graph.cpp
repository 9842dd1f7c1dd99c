#include "curvecov/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "curvecov/parallel.hpp"

namespace curvecov {

namespace {

// Unweighted support of a graph as per-node bitsets; curvature is purely
// combinatorial, so all neighborhood queries run on these.
struct Support {
  int n = 0;
  int words = 0;
  std::vector<uint64_t> bits;
  std::vector<int> degree;

  Support(const WeightedGraph& g, double threshold) : n(g.n), words((g.n + 63) / 64) {
    bits.assign(static_cast<size_t>(n) * words, 0);
    degree.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i != j && g.weights(i, j) > threshold) {
          bits[static_cast<size_t>(i) * words + j / 64] |= (uint64_t{1} << (j % 64));
          ++degree[i];
        }
      }
    }
  }

  const uint64_t* row(int i) const { return bits.data() + static_cast<size_t>(i) * words; }
  bool adjacent(int i, int j) const {
    return (row(i)[j / 64] >> (j % 64)) & 1u;
  }
};

struct BfcCounts {
  int deg_i = 0, deg_j = 0;
  long triangles = 0;
  long squares_i = 0, squares_j = 0;  // |#sq^i|, |#sq^j|
  long gamma_max = 0;                 // max 4-cycles through a single node
};

// Shared between the fast path and the brute-force oracle so that equal
// counts give bit-identical curvature.
double bfc_from_counts(const BfcCounts& c) {
  const double dmax = std::max(c.deg_i, c.deg_j);
  const double dmin = std::min(c.deg_i, c.deg_j);
  double kappa = 2.0 / c.deg_i + 2.0 / c.deg_j - 2.0;
  if (c.triangles > 0) {
    kappa += 2.0 * static_cast<double>(c.triangles) / dmax +
             static_cast<double>(c.triangles) / dmin;
  }
  if (c.gamma_max > 0) {
    kappa += static_cast<double>(c.squares_i + c.squares_j) /
             (static_cast<double>(c.gamma_max) * dmax);
  }
  return kappa;
}

int popcount_and(const uint64_t* a, const uint64_t* b, int words) {
  int c = 0;
  for (int w = 0; w < words; ++w) c += __builtin_popcountll(a[w] & b[w]);
  return c;
}

BfcCounts bfc_counts_fast(const Support& s, int i, int j) {
  BfcCounts c;
  c.deg_i = s.degree[i];
  c.deg_j = s.degree[j];
  const uint64_t* ni = s.row(i);
  const uint64_t* nj = s.row(j);
  c.triangles = popcount_and(ni, nj, s.words);

  // Candidate k on i's side: k ~ i, k !~ j, k != j (k != i is automatic).
  // A node k contributes one 4-cycle i-k-w-j per partner
  // w in N(k) ∩ N(j) \ (N(i) ∪ {i}).
  std::vector<uint64_t> cand(s.words), partner(s.words);
  auto side = [&](int a, int b, long& squares, long& gmax) {
    const uint64_t* na = s.row(a);
    const uint64_t* nb = s.row(b);
    for (int w = 0; w < s.words; ++w) cand[w] = na[w] & ~nb[w];
    cand[b / 64] &= ~(uint64_t{1} << (b % 64));
    for (int w = 0; w < s.words; ++w) {
      uint64_t m = cand[w];
      while (m) {
        const int k = w * 64 + __builtin_ctzll(m);
        m &= m - 1;
        const uint64_t* nk = s.row(k);
        long cnt = 0;
        for (int v = 0; v < s.words; ++v) {
          uint64_t p = nk[v] & nb[v] & ~na[v];
          if (v == a / 64) p &= ~(uint64_t{1} << (a % 64));
          cnt += __builtin_popcountll(p);
        }
        if (cnt > 0) {
          ++squares;
          gmax = std::max(gmax, cnt);
        }
      }
    }
  };
  side(i, j, c.squares_i, c.gamma_max);
  side(j, i, c.squares_j, c.gamma_max);
  return c;
}

void require_edge(const WeightedGraph& g, int i, int j, double threshold) {
  if (i < 0 || j < 0 || i >= g.n || j >= g.n || !g.has_edge(i, j, threshold))
    throw std::invalid_argument("not an edge");
}

}  // namespace

WeightedGraph WeightedGraph::from_weights(Matrix w) {
  if (w.rows() != w.cols()) throw std::invalid_argument("weights must be square");
  const int n = static_cast<int>(w.rows());
  const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
  if (w.minCoeff() < -1e-12 * scale) throw std::invalid_argument("negative weight");
  if ((w - w.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw std::invalid_argument("weights must be symmetric");
  // canonicalize: exact symmetry, clipped negatives, zero diagonal
  for (int i = 0; i < n; ++i) {
    w(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      double v = std::max(0.0, w(i, j));
      w(i, j) = v;
      w(j, i) = v;
    }
  }
  return WeightedGraph{n, std::move(w)};
}

int WeightedGraph::edge_count(double threshold) const {
  int c = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (weights(i, j) > threshold) ++c;
  return c;
}

Matrix batch_average(const std::vector<Matrix>& adjacencies) {
  if (adjacencies.empty()) throw std::invalid_argument("empty batch");
  const auto rows = adjacencies.front().rows();
  const auto cols = adjacencies.front().cols();
  Matrix sum = Matrix::Zero(rows, cols);
  for (const Matrix& a : adjacencies) {
    if (a.rows() != rows || a.cols() != cols)
      throw std::invalid_argument("shape mismatch in batch");
    sum += a;
  }
  return sum / static_cast<double>(adjacencies.size());
}

WeightedGraph symmetrize(const Matrix& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("adjacency must be square");
  if (a.minCoeff() < 0.0) throw std::invalid_argument("negative weight");
  Matrix w = 0.5 * (a + a.transpose());
  w.diagonal().setZero();
  return WeightedGraph::from_weights(std::move(w));
}

Matrix laplacian(const WeightedGraph& g) {
  Matrix l = -g.weights;
  l.diagonal() = g.weights.rowwise().sum();
  return l;
}

double balanced_forman_curvature(const WeightedGraph& g, int i, int j, double threshold) {
  require_edge(g, i, j, threshold);
  Support s(g, threshold);
  return bfc_from_counts(bfc_counts_fast(s, i, j));
}

double balanced_forman_brute(const WeightedGraph& g, int i, int j, double threshold) {
  require_edge(g, i, j, threshold);
  const int n = g.n;
  auto adj = [&](int a, int b) { return a != b && g.weights(a, b) > threshold; };

  BfcCounts c;
  for (int k = 0; k < n; ++k) {
    if (adj(i, k)) ++c.deg_i;
    if (adj(j, k)) ++c.deg_j;
    if (adj(i, k) && adj(j, k)) ++c.triangles;
  }
  // Enumerate every diagonal-free 4-cycle i-k-w-j and tally per node.
  std::vector<long> through(n, 0);
  std::vector<char> on_side_i(n, 0), on_side_j(n, 0);
  for (int k = 0; k < n; ++k) {
    if (!adj(i, k) || k == j || adj(j, k)) continue;
    for (int w = 0; w < n; ++w) {
      if (!adj(j, w) || w == i || adj(i, w)) continue;
      if (adj(k, w)) {
        ++through[k];
        ++through[w];
        on_side_i[k] = 1;
        on_side_j[w] = 1;
      }
    }
  }
  for (int k = 0; k < n; ++k) {
    c.squares_i += on_side_i[k];
    c.squares_j += on_side_j[k];
    c.gamma_max = std::max(c.gamma_max, through[k]);
  }
  return bfc_from_counts(c);
}

std::vector<EdgeCurvature> edge_curvatures(const WeightedGraph& g, double threshold,
                                           bool parallel) {
  Support s(g, threshold);
  std::vector<EdgeCurvature> edges;
  for (int i = 0; i < g.n; ++i)
    for (int j = i + 1; j < g.n; ++j)
      if (g.weights(i, j) > threshold) edges.push_back({i, j, 0.0, 0.0});

  const auto m = static_cast<long>(edges.size());
  if (parallel) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (long e = 0; e < m; ++e)
      edges[e].kappa = bfc_from_counts(bfc_counts_fast(s, edges[e].i, edges[e].j));
  } else {
    for (long e = 0; e < m; ++e)
      edges[e].kappa = bfc_from_counts(bfc_counts_fast(s, edges[e].i, edges[e].j));
  }
  return edges;
}

std::vector<EdgeCurvature> edge_curvatures_serial(const WeightedGraph& g, double threshold) {
  std::vector<EdgeCurvature> edges;
  for (int i = 0; i < g.n; ++i)
    for (int j = i + 1; j < g.n; ++j)
      if (g.weights(i, j) > threshold)
        edges.push_back({i, j, balanced_forman_brute(g, i, j, threshold), 0.0});
  return edges;
}

CurvatureReport score_curvatures(std::vector<EdgeCurvature> kappas, double kappa0, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  for (EdgeCurvature& e : kappas) e.score = softplus(tau * (kappa0 - e.kappa));
  return CurvatureReport{std::move(kappas), kappa0, tau};
}

CurvatureReport bottleneck_scores(const WeightedGraph& g, double kappa0, double tau,
                                  double threshold) {
  return score_curvatures(edge_curvatures(g, threshold), kappa0, tau);
}

WeightedGraph reweight(const WeightedGraph& g, const CurvatureReport& report, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
  // The report must list exactly the support edges of g.
  size_t idx = 0;
  for (int i = 0; i < g.n; ++i) {
    for (int j = i + 1; j < g.n; ++j) {
      if (!(g.weights(i, j) > kSupportThreshold)) continue;
      if (idx >= report.edges.size() || report.edges[idx].i != i || report.edges[idx].j != j)
        throw std::invalid_argument("curvature report does not match edge set");
      ++idx;
    }
  }
  if (idx != report.edges.size())
    throw std::invalid_argument("curvature report does not match edge set");

  Matrix w = g.weights;
  for (const EdgeCurvature& e : report.edges) {
    const double v = g.weights(e.i, e.j) * (1.0 + lambda * e.score);
    w(e.i, e.j) = v;
    w(e.j, e.i) = v;
  }
  return WeightedGraph{g.n, std::move(w)};
}

Vector spectrum(const Matrix& symmetric) {
  if (!is_symmetric(symmetric, 1e-10)) throw std::invalid_argument("matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetric, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw std::runtime_error("eigensolver failed");
  return solver.eigenvalues();
}

double scaled_kirchhoff(const Matrix& lap) {
  const int n = static_cast<int>(lap.rows());
  if (n <= 1) return 0.0;
  const Vector eigs = spectrum(lap);
  const double lmax = eigs(n - 1);
  if (lmax <= 0.0 || eigs(1) <= 1e-8 * lmax) throw std::runtime_error("graph disconnected");
  double k = 0.0;
  for (int i = 1; i < n; ++i) k += 1.0 / eigs(i);
  return k;
}

bool is_connected(const WeightedGraph& g) {
  if (g.n <= 1) return true;
  const Vector eigs = spectrum(laplacian(g));
  const double lmax = eigs(g.n - 1);
  return lmax > 0.0 && eigs(1) > 1e-8 * lmax;
}

double cut_conductance(const WeightedGraph& g, const std::vector<int>& subset) {
  if (subset.empty()) throw std::invalid_argument("trivial cut");
  std::vector<char> in(g.n, 0);
  for (int v : subset) {
    if (v < 0 || v >= g.n) throw std::invalid_argument("cut node out of range");
    if (in[v]) throw std::invalid_argument("duplicate node in cut");
    in[v] = 1;
  }
  if (static_cast<int>(subset.size()) == g.n) throw std::invalid_argument("trivial cut");

  double vol_s = 0.0, vol_rest = 0.0, cut = 0.0;
  for (int i = 0; i < g.n; ++i) {
    const double deg = g.weights.row(i).sum();
    (in[i] ? vol_s : vol_rest) += deg;
    if (in[i])
      for (int j = 0; j < g.n; ++j)
        if (!in[j]) cut += g.weights(i, j);
  }
  const double m = std::min(vol_s, vol_rest);
  if (m <= 0.0) return 0.0;  // zero-volume side implies zero cut
  return cut / m;
}

std::pair<double, std::vector<int>> cheeger_brute(const WeightedGraph& g, bool parallel) {
  if (g.n > 20) throw std::invalid_argument("too large for brute force");
  if (g.n < 2) throw std::invalid_argument("trivial cut");

  const Vector deg = g.degrees();
  const double vol_total = deg.sum();
  const uint32_t total = uint32_t{1} << (g.n - 1);

  // S always contains node 0; masks enumerate nodes 1..n-1. mask == total-1
  // would make S = V, so the loop stops before it: 2^(n-1)-1 nontrivial cuts.
  auto eval_mask = [&](uint32_t mask) {
    std::vector<int> s{0};
    for (int k = 1; k < g.n; ++k)
      if (mask & (uint32_t{1} << (k - 1))) s.push_back(k);
    double vol_s = 0.0, inner = 0.0;
    for (size_t a = 0; a < s.size(); ++a) {
      vol_s += deg(s[a]);
      for (size_t b = 0; b < s.size(); ++b) inner += g.weights(s[a], s[b]);
    }
    const double cut = vol_s - inner;
    const double m = std::min(vol_s, vol_total - vol_s);
    return m <= 0.0 ? 0.0 : cut / m;
  };

  uint32_t best_mask = 0;
  double best_phi = eval_mask(0);

  if (parallel) {
    const int nt = thread_count();
    std::vector<double> thread_phi(nt, std::numeric_limits<double>::infinity());
    std::vector<uint32_t> thread_mask(nt, 0);
#pragma omp parallel num_threads(nt)
    {
#ifdef _OPENMP
      const int tid = omp_get_thread_num();
#else
      const int tid = 0;
#endif
#pragma omp for schedule(static)
      for (int64_t m = 1; m < static_cast<int64_t>(total) - 1; ++m) {
        const double phi = eval_mask(static_cast<uint32_t>(m));
        if (phi < thread_phi[tid] ||
            (phi == thread_phi[tid] && static_cast<uint32_t>(m) < thread_mask[tid])) {
          thread_phi[tid] = phi;
          thread_mask[tid] = static_cast<uint32_t>(m);
        }
      }
    }
    for (int t = 0; t < nt; ++t) {
      if (thread_phi[t] < best_phi ||
          (thread_phi[t] == best_phi && thread_mask[t] < best_mask)) {
        best_phi = thread_phi[t];
        best_mask = thread_mask[t];
      }
    }
  } else {
    for (int64_t m = 1; m < static_cast<int64_t>(total) - 1; ++m) {
      const double phi = eval_mask(static_cast<uint32_t>(m));
      if (phi < best_phi) {
        best_phi = phi;
        best_mask = static_cast<uint32_t>(m);
      }
    }
  }

  std::vector<int> argmin{0};
  for (int k = 1; k < g.n; ++k)
    if (best_mask & (uint32_t{1} << (k - 1))) argmin.push_back(k);
  // Recompute through the public path so callers see consistent arithmetic.
  return {cut_conductance(g, argmin), std::move(argmin)};
}

DiagnosticsReport diagnostics(const WeightedGraph& g, const WeightedGraph& rewired,
                              const std::vector<std::vector<int>>& cuts) {
  if (g.n != rewired.n) throw std::invalid_argument("node count mismatch");
  if (g.n < 2) throw std::invalid_argument("diagnostics require at least two nodes");
  const double scale = std::max(1.0, rewired.weights.cwiseAbs().maxCoeff());
  if (((rewired.weights - g.weights).minCoeff()) < -1e-12 * scale)
    throw std::invalid_argument("rewired graph must dominate original");

  DiagnosticsReport rep;
  const Matrix l_before = laplacian(g);
  const Matrix l_after = laplacian(rewired);
  rep.kirchhoff_before = scaled_kirchhoff(l_before);
  rep.kirchhoff_after = scaled_kirchhoff(l_after);
  rep.lambda_top_before = spectrum(l_before)(g.n - 2);  // lambda_{n-1}, second largest
  rep.lambda_top_after = spectrum(l_after)(g.n - 2);

  rep.ratios.kirchhoff_pct = 100.0 * rep.kirchhoff_after / rep.kirchhoff_before;
  rep.ratios.lambda_top_pct =
      rep.lambda_top_after > 0.0 ? 100.0 * rep.lambda_top_before / rep.lambda_top_after : 100.0;

  double pct_sum = 0.0;
  int pct_count = 0;
  for (size_t c = 0; c < cuts.size(); ++c) {
    DiagnosticsReport::CutPair pair;
    pair.id = "S" + std::to_string(c);
    pair.phi_before = cut_conductance(g, cuts[c]);
    pair.phi_after = cut_conductance(rewired, cuts[c]);
    pct_sum += pair.phi_after > 0.0 ? 100.0 * pair.phi_before / pair.phi_after : 100.0;
    ++pct_count;
    rep.conductance_pairs.push_back(std::move(pair));
  }
  rep.ratios.conductance_pct = pct_count > 0 ? pct_sum / pct_count : 100.0;
  return rep;
}

std::string DiagnosticsReport::to_json() const {
  nlohmann::json j;
  j["kirchhoff_before"] = kirchhoff_before;
  j["kirchhoff_after"] = kirchhoff_after;
  j["lambda_top_before"] = lambda_top_before;
  j["lambda_top_after"] = lambda_top_after;
  j["conductance_pairs"] = nlohmann::json::array();
  for (const CutPair& p : conductance_pairs)
    j["conductance_pairs"].push_back(
        {{"id", p.id}, {"phi_before", p.phi_before}, {"phi_after", p.phi_after}});
  j["ratios"] = {{"kirchhoff_pct", ratios.kirchhoff_pct},
                 {"lambda_top_pct", ratios.lambda_top_pct},
                 {"conductance_pct", ratios.conductance_pct}};
  return j.dump(2);
}

std::string curvature_report_json(const CurvatureReport& report) {
  nlohmann::json j;
  j["params"] = {{"kappa0", report.kappa0}, {"tau", report.tau}};
  j["edges"] = nlohmann::json::array();
  for (const EdgeCurvature& e : report.edges)
    j["edges"].push_back({{"i", e.i}, {"j", e.j}, {"kappa", e.kappa}, {"b", e.score}});
  return j.dump(2);
}

void save_graph_csv(const WeightedGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "i,j,w\n";
  char buf[40];
  for (int i = 0; i < g.n; ++i) {
    for (int j = i + 1; j < g.n; ++j) {
      if (g.weights(i, j) > kSupportThreshold) {
        std::snprintf(buf, sizeof(buf), "%.17g", g.weights(i, j));
        out << i << ',' << j << ',' << buf << '\n';
      }
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

WeightedGraph load_graph_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty graph file: " + path);

  struct Row {
    int i, j;
    double w;
  };
  std::vector<Row> rows;
  int max_id = -1;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
      throw std::runtime_error("malformed graph row " + std::to_string(lineno));
    try {
      Row r{std::stoi(a), std::stoi(b), std::stod(c)};
      if (r.i < 0 || r.j < 0 || r.i == r.j || r.w < 0.0)
        throw std::invalid_argument("bad edge");
      max_id = std::max({max_id, r.i, r.j});
      rows.push_back(r);
    } catch (const std::exception&) {
      throw std::runtime_error("malformed graph row " + std::to_string(lineno));
    }
  }
  if (max_id < 0) throw std::runtime_error("graph file has no edges: " + path);
  Matrix w = Matrix::Zero(max_id + 1, max_id + 1);
  for (const Row& r : rows) {
    w(r.i, r.j) = r.w;
    w(r.j, r.i) = r.w;
  }
  return WeightedGraph::from_weights(std::move(w));
}

}  // namespace curvecov
