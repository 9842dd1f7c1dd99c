// Benchmark comparing the OpenMP kernels against their serial reference
// implementations, and the Woodbury likelihood against the dense oracle.

#include <chrono>
#include <cstdio>
#include <vector>

#include "curvecov/covariance.hpp"
#include "curvecov/dataio.hpp"
#include "curvecov/graph.hpp"
#include "curvecov/metrics.hpp"
#include "curvecov/parallel.hpp"
#include "curvecov/rng.hpp"

using namespace curvecov;

namespace {

template <typename Fn>
double time_ms(Fn&& fn, int reps = 3) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const auto stop = std::chrono::steady_clock::now();
    best = std::min(best,
                    std::chrono::duration<double, std::milli>(stop - start).count());
  }
  return best;
}

void row(const char* name, double serial_ms, double fast_ms) {
  std::printf("%-34s %12.2f %12.2f %9.2fx\n", name, serial_ms, fast_ms,
              serial_ms / fast_ms);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", thread_count());
  std::printf("%-34s %12s %12s %10s\n", "kernel", "serial ms", "fast ms", "speedup");

  Rng rng(1234);

  {
    SynthConfig cfg;
    cfg.nodes = 220;
    cfg.steps = 4;
    SynthOutput synth = synth_generate(cfg);
    const WeightedGraph& g = synth.graph;
    std::vector<EdgeCurvature> serial_out, fast_out;
    const double s = time_ms([&] { serial_out = edge_curvatures_serial(g); }, 1);
    const double f = time_ms([&] { fast_out = edge_curvatures(g); });
    row("balanced Forman curvature", s, f);
  }

  {
    Rng grng(77);
    Matrix w = Matrix::Zero(18, 18);
    for (int i = 0; i < 18; ++i)
      for (int j = i + 1; j < 18; ++j)
        if (grng.uniform() < 0.3) {
          w(i, j) = grng.uniform(0.5, 1.5);
          w(j, i) = w(i, j);
        }
    for (int i = 0; i + 1 < 18; ++i)
      if (w(i, i + 1) == 0) {
        w(i, i + 1) = 1.0;
        w(i + 1, i) = 1.0;
      }
    WeightedGraph g = WeightedGraph::from_weights(std::move(w));
    const double s = time_ms([&] { cheeger_brute(g, false); });
    const double f = time_ms([&] { cheeger_brute(g, true); });
    row("Cheeger cut enumeration (N=18)", s, f);
  }

  {
    // Table-3 scale likelihood: N=200, D=12, R=10
    const int n = 200, d = 12, r = 10;
    std::vector<Matrix> blocks(d, Matrix(n, r));
    for (Matrix& b : blocks)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) b(i, j) = 0.3 * rng.normal();
    KernelBank bank = build_kernel_bank(d, 4, 1.0);
    Vector logits = Vector::Zero(4);
    Matrix c = mixture_correlation(bank, logits);
    Matrix a(r, r);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) a(i, j) = rng.normal();
    Matrix gmat = a * a.transpose() / r + 0.2 * Matrix::Identity(r, r);
    Vector diag(d * n);
    for (int i = 0; i < d * n; ++i) diag(i) = rng.uniform(0.5, 2.0);
    BatchCovariance cov = assemble(blocks, c, gmat, diag);
    Vector eta(d * n);
    for (int i = 0; i < d * n; ++i) eta(i) = rng.normal();

    const double s = time_ms([&] { nll_dense_oracle(cov, eta, 1 << 20); });
    const double f = time_ms([&] { nll(cov, eta); });
    row("batch NLL (N=200, D=12, R=10)", s, f);
  }

  {
    // per-cell CRPS over an ensemble: pairwise serial vs sorted parallel
    const int s_count = 400, q = 12, n = 40;
    ForecastEnsemble ens;
    ens.origin = 0;
    ens.samples.assign(s_count, Matrix(q, n));
    for (Matrix& m : ens.samples)
      for (int a = 0; a < q; ++a)
        for (int b = 0; b < n; ++b) m(a, b) = rng.normal();
    Matrix actuals(q, n);
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < n; ++b) actuals(a, b) = rng.normal();
    const double s = time_ms([&] { evaluate_serial(ens, actuals); });
    const double f = time_ms([&] { evaluate(ens, actuals); });
    row("ensemble evaluation", s, f);
  }

  return 0;
}
