#include "curvecov/dataio.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "curvecov/rng.hpp"

namespace curvecov {

void SynthConfig::validate() const {
  if (nodes < 2) throw std::invalid_argument("need at least 2 nodes");
  if (steps < 1) throw std::invalid_argument("need at least 1 step");
  if (!(std::abs(ar_coeff) < 1.0)) throw std::invalid_argument("|phi| must be below 1");
  if (!(spatial_a > 0.0)) throw std::invalid_argument("spatial_a must be positive");
  if (spatial_b < 0.0) throw std::invalid_argument("spatial_b must be nonnegative");
  if (seasonal_period < 1) throw std::invalid_argument("seasonal period must be positive");
  if (obs_noise < 0.0) throw std::invalid_argument("obs noise must be nonnegative");
}

WeightedGraph build_graph_from_coords(const Matrix& coords) {
  const int n = static_cast<int>(coords.rows());
  if (n < 2) throw std::invalid_argument("need at least 2 coordinates");
  if (coords.cols() != 2) throw std::invalid_argument("coords must be N x 2");

  Matrix dist(n, n);
  double mean = 0.0;
  long pairs = 0;
  for (int i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      const double d = (coords.row(i) - coords.row(j)).norm();
      dist(i, j) = d;
      dist(j, i) = d;
      mean += d;
      ++pairs;
    }
  }
  mean /= static_cast<double>(pairs);
  double var = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) var += (dist(i, j) - mean) * (dist(i, j) - mean);
  var /= static_cast<double>(pairs);
  const double sigma = std::sqrt(var);
  if (!(sigma > 0.0)) throw std::invalid_argument("degenerate coordinates");

  Matrix w = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double a = std::exp(-dist(i, j) * dist(i, j) / (2.0 * sigma * sigma));
      if (a >= 0.1) {  // threshold keeps the boundary value
        w(i, j) = a;
        w(j, i) = a;
      }
    }
  return WeightedGraph::from_weights(std::move(w));
}

SynthOutput synth_generate(const SynthConfig& config) {
  config.validate();
  const int n = config.nodes;

  // resample coordinates until the kernel graph is connected
  WeightedGraph graph;
  Matrix coords(n, 2);
  bool found = false;
  for (int attempt = 0; attempt < 16 && !found; ++attempt) {
    Rng rng(config.seed + 1000003ULL * static_cast<uint64_t>(attempt), 11);
    for (int i = 0; i < n; ++i) {
      coords(i, 0) = rng.uniform();
      coords(i, 1) = rng.uniform();
    }
    try {
      graph = build_graph_from_coords(coords);
      found = is_connected(graph);
    } catch (const std::invalid_argument&) {
      found = false;
    }
  }
  if (!found) throw std::runtime_error("failed to sample a connected graph");

  // Sigma* = (a I + b L)^{-1} + obs^2 I
  const Matrix lap = laplacian(graph);
  const Matrix precision =
      config.spatial_a * Matrix::Identity(n, n) + config.spatial_b * lap;
  Eigen::LLT<Matrix> prec_llt(precision);
  if (prec_llt.info() != Eigen::Success)
    throw std::runtime_error("ground-truth precision not positive definite");
  Matrix noise_cov = prec_llt.solve(Matrix::Identity(n, n));
  noise_cov += config.obs_noise * config.obs_noise * Matrix::Identity(n, n);
  noise_cov = 0.5 * (noise_cov + noise_cov.transpose());
  Eigen::LLT<Matrix> cov_llt(noise_cov);
  if (cov_llt.info() != Eigen::Success)
    throw std::runtime_error("ground-truth covariance not positive definite");
  const Matrix chol = cov_llt.matrixL();

  auto seasonal = [&](long t) {
    return config.seasonal_amplitude *
           std::sin(2.0 * std::numbers::pi * static_cast<double>(t) /
                    static_cast<double>(config.seasonal_period));
  };

  Rng noise_rng(config.seed, 13);
  Matrix values(config.steps, n);
  Vector state = Vector::Zero(n);  // x_t - seasonal(t)
  for (long t = 0; t < config.steps; ++t) {
    Vector z(n);
    for (int i = 0; i < n; ++i) z(i) = noise_rng.normal();
    const Vector eps = chol * z;
    state = (t == 0 ? eps : Vector(config.ar_coeff * state + eps));
    values.row(t) = (state.array() + seasonal(t)).transpose();
  }

  SynthOutput out;
  out.data.values = std::move(values);
  out.data.coords = coords;
  out.data.name = "synthetic";
  out.data.frequency = "step";
  out.noise_cov = std::move(noise_cov);
  out.graph = std::move(graph);
  return out;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty dataset file: " + path);

  // header: t,node_0,...,node_{N-1}
  long cols = 0;
  {
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) ++cols;
  }
  if (cols < 2) throw std::runtime_error("dataset header needs at least one node column");
  const long n = cols - 1;

  std::vector<std::vector<double>> rows;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<double> row;
    row.reserve(n);
    long idx = 0;
    while (std::getline(ss, cell, ',')) {
      if (idx > 0) {
        if (cell.empty())
          throw std::runtime_error("missing cell in row " + std::to_string(lineno));
        try {
          size_t used = 0;
          const double v = std::stod(cell, &used);
          if (used != cell.size()) throw std::invalid_argument("trailing characters");
          row.push_back(v);
        } catch (const std::exception&) {
          throw std::runtime_error("non-numeric cell in row " + std::to_string(lineno));
        }
      }
      ++idx;
    }
    if (idx != cols)
      throw std::runtime_error("ragged row " + std::to_string(lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("dataset has no rows: " + path);

  Dataset ds;
  ds.values.resize(static_cast<long>(rows.size()), n);
  for (size_t r = 0; r < rows.size(); ++r)
    for (long c = 0; c < n; ++c) ds.values(static_cast<long>(r), c) = rows[r][c];
  ds.name = path;
  return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << 't';
  for (int i = 0; i < ds.nodes(); ++i) out << ",node_" << i;
  out << '\n';
  char buf[40];
  for (long t = 0; t < ds.length(); ++t) {
    out << t;
    for (int i = 0; i < ds.nodes(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.values(t, i));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::array<Dataset, 3> chronological_split(const Dataset& ds, double f_train, double f_val,
                                           double f_test) {
  if (!(f_train > 0.0) || !(f_val > 0.0) || !(f_test > 0.0))
    throw std::invalid_argument("split fractions must be positive");
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1");
  const long t = ds.length();
  const auto [n1, n2] = chronological_bounds(t, f_train, f_val);
  if (n1 < 1 || n2 <= n1 || t <= n2) throw std::invalid_argument("empty split");

  auto slice = [&](long begin, long end) {
    Dataset out;
    out.values = ds.values.middleRows(begin, end - begin);
    out.coords = ds.coords;
    out.name = ds.name;
    out.frequency = ds.frequency;
    return out;
  };
  return {slice(0, n1), slice(n1, n2), slice(n2, t)};
}

}  // namespace curvecov
