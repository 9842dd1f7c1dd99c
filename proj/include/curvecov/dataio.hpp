#pragma once

#include <array>
#include <optional>
#include <string>

#include "curvecov/graph.hpp"

namespace curvecov {

struct Dataset {
  Matrix values;                  // T x N
  std::optional<Matrix> coords;   // N x 2
  std::string name;
  std::string frequency;

  long length() const { return values.rows(); }
  int nodes() const { return static_cast<int>(values.cols()); }
};

// Synthetic spatio-temporal generator. The noise covariance mirrors the
// model family at full rank: Sigma* = (a I + b L)^{-1} + obs_noise^2 I with
// L the Laplacian of the sampled geometric graph.
struct SynthConfig {
  int nodes = 20;
  long steps = 3000;
  uint64_t seed = 42;
  double ar_coeff = 0.7;          // phi, |phi| < 1
  double spatial_a = 1.0;         // a > 0
  double spatial_b = 4.0;         // b >= 0
  double seasonal_amplitude = 1.0;
  int seasonal_period = 24;
  double obs_noise = 0.05;

  void validate() const;
};

struct SynthOutput {
  Dataset data;
  Matrix noise_cov;  // ground-truth Sigma*
  WeightedGraph graph;
};

// Thresholded Gaussian kernel on pairwise Euclidean distances:
// A_ij = exp(-d_ij^2 / (2 sigma^2)) kept when >= 0.1, sigma the standard
// deviation of all pairwise distances.
WeightedGraph build_graph_from_coords(const Matrix& coords);

// x_t = seasonal(t) + phi (x_{t-1} - seasonal(t-1)) + eps_t, eps ~ N(0, Sigma*).
// Coordinates resample (bounded retries) until the graph is connected.
SynthOutput synth_generate(const SynthConfig& config);

// Wide CSV: header "t,node_0,...,node_{N-1}", one chronological row per step.
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& ds, const std::string& path);

// Contiguous prefix/middle/suffix split by floor on cumulative boundaries.
std::array<Dataset, 3> chronological_split(const Dataset& ds, double f_train = 0.7,
                                           double f_val = 0.1, double f_test = 0.2);

}  // namespace curvecov
