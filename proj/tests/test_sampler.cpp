#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "curvecov/dataio.hpp"
#include "curvecov/sampler.hpp"
#include "test_support.hpp"

using namespace curvecov;
using namespace curvecov::testing;

TEST_CASE("volatility tracker update rule") {
  VolatilityTracker t;
  t.s2 = Vector::Ones(2);

  SUBCASE("rho = 0 keeps only the newest residual") {
    t.rho = 0.0;
    Vector r(2);
    r << 2.0, -3.0;
    t.update(r);
    CHECK(t.s2(0) == 4.0);
    CHECK(t.s2(1) == 9.0);
  }

  SUBCASE("zero residual shrinks by rho") {
    t.rho = 0.9;
    t.update(Vector::Zero(2));
    CHECK(t.s2(0) == doctest::Approx(0.9));
  }

  SUBCASE("scalar arithmetic case") {
    t.rho = 0.9;
    Vector r(2);
    r << 2.0, 2.0;
    t.update(r);
    CHECK(t.s2(0) == doctest::Approx(1.3));  // 0.9 + 0.1 * 4
  }

  SUBCASE("recursion matches the closed form") {
    Rng rng(5);
    const double rho = 0.83;
    VolatilityTracker tr;
    tr.rho = rho;
    tr.s2 = Vector::Constant(1, 0.7);
    std::vector<double> r2;
    for (int k = 0; k < 40; ++k) {
      Vector r(1);
      r(0) = rng.normal();
      r2.push_back(r(0) * r(0));
      tr.update(r);
    }
    // s2_t = rho^t s2_0 + (1 - rho) sum_{k<t} rho^k r2_{t-k}
    double closed = std::pow(rho, 40) * 0.7;
    for (int k = 0; k < 40; ++k) closed += (1.0 - rho) * std::pow(rho, k) * r2[39 - k];
    CHECK(std::abs(tr.s2(0) - closed) <= 1e-10 * std::max(1.0, closed));
  }
}

TEST_CASE("correlation decomposition") {
  SUBCASE("diagonal covariance gives identity correlation") {
    Matrix cov = Vector::LinSpaced(3, 1.0, 3.0).asDiagonal();
    CorrelationParts parts = correlation_decompose(cov);
    CHECK(max_abs_diff(parts.corr, Matrix::Identity(3, 3)) == 0.0);
  }

  SUBCASE("hand case") {
    Matrix cov(2, 2);
    cov << 4.0, 2.0, 2.0, 4.0;
    CorrelationParts parts = correlation_decompose(cov);
    CHECK(parts.scale(0) == doctest::Approx(2.0));
    CHECK(parts.corr(0, 1) == doctest::Approx(0.5));
    CHECK(parts.corr(0, 0) == 1.0);
  }

  SUBCASE("reconstruction identity on random SPD matrices") {
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
      Matrix a(4, 4);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) a(i, j) = rng.normal();
      Matrix cov = a * a.transpose() + 0.5 * Matrix::Identity(4, 4);
      CorrelationParts parts = correlation_decompose(cov);
      Matrix back = parts.scale.asDiagonal() * parts.corr * parts.scale.asDiagonal();
      CHECK(max_abs_diff(back, cov) <= 1e-12 * cov.cwiseAbs().maxCoeff());
      CHECK(parts.corr.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    }
  }

  Matrix bad(2, 2);
  bad << 0.0, 0.0, 0.0, 1.0;
  CHECK_THROWS_AS(correlation_decompose(bad), std::invalid_argument);
}

TEST_CASE("refined sample") {
  Rng rng(11);
  const int n = 4;
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  Matrix cov = a * a.transpose() + Matrix::Identity(n, n);
  CorrelationParts parts = correlation_decompose(cov);
  VolatilityTracker tracker;
  tracker.s2 = Vector::LinSpaced(n, 0.5, 2.0);
  Vector mu(n);
  for (int i = 0; i < n; ++i) mu(i) = rng.normal();

  SUBCASE("zero noise returns the conditional mean") {
    CHECK((refined_sample(mu, parts.corr, tracker, Vector::Zero(n)) - mu)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }

  SUBCASE("identity correlation and unit scale add the noise directly") {
    VolatilityTracker unit;
    unit.s2 = Vector::Ones(n);
    Vector xi(n);
    for (int i = 0; i < n; ++i) xi(i) = rng.normal();
    CHECK((refined_sample(mu, Matrix::Identity(n, n), unit, xi) - (mu + xi))
              .cwiseAbs()
              .maxCoeff() <= 1e-15);
  }

  SUBCASE("the map is affine in the noise (superposition)") {
    Vector x1(n), x2(n);
    for (int i = 0; i < n; ++i) {
      x1(i) = rng.normal();
      x2(i) = rng.normal();
    }
    const Vector f0 = refined_sample(mu, parts.corr, tracker, Vector::Zero(n));
    const Vector f1 = refined_sample(mu, parts.corr, tracker, x1);
    const Vector f2 = refined_sample(mu, parts.corr, tracker, x2);
    const Vector f12 = refined_sample(mu, parts.corr, tracker, x1 + x2);
    CHECK(((f12 - f0) - ((f1 - f0) + (f2 - f0))).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("Monte Carlo moments: mean mu, cov D^1/2 R D^1/2, marginal std from tracker") {
    const int draws = 200000;
    Eigen::LLT<Matrix> llt(parts.corr);
    REQUIRE(llt.info() == Eigen::Success);
    const Matrix chol = llt.matrixL();
    const Vector scale = tracker.s2.cwiseSqrt();

    Vector mean = Vector::Zero(n);
    Matrix second = Matrix::Zero(n, n);
    Rng noise(777);
    for (int k = 0; k < draws; ++k) {
      Vector xi(n);
      for (int i = 0; i < n; ++i) xi(i) = noise.normal();
      const Vector x = refined_sample_prefactored(mu, chol, scale, xi) - mu;
      mean += x;
      second += x * x.transpose();
    }
    mean /= draws;
    Matrix cov_emp = second / draws - mean * mean.transpose();
    const Matrix target =
        scale.asDiagonal() * parts.corr * scale.asDiagonal();

    for (int i = 0; i < n; ++i) {
      CHECK(std::abs(mean(i)) <= 3.0 * std::sqrt(target(i, i) / draws));
      // marginal std equals the tracker scale, not the conditional one
      CHECK(std::abs(std::sqrt(cov_emp(i, i)) - scale(i)) <= 0.01 * scale(i));
      for (int j = 0; j < n; ++j) {
        const double band = 3.0 * std::sqrt((target(i, i) * target(j, j) +
                                             target(i, j) * target(i, j)) /
                                            draws);
        CHECK(std::abs(cov_emp(i, j) - target(i, j)) <= band);
      }
    }
  }
}

namespace {

struct RolloutFixture {
  SynthOutput synth;
  TrainConfig config;
  ModelParams params;
  KernelBank bank;

  RolloutFixture() {
    SynthConfig sc;
    sc.nodes = 5;
    sc.steps = 120;
    sc.seed = 17;
    synth = synth_generate(sc);
    config.window = 3;
    config.rank = 2;
    config.mixtures = 2;
    config.lag = 4;
    config.hidden = 6;
    Rng rng(3);
    params = init_params(sc.nodes, config, rng);
    params.train_residual_var = Vector::Constant(sc.nodes, 0.8);
    bank = build_kernel_bank(config.window, config.mixtures, 1.0);
  }
};

}  // namespace

TEST_CASE("rollout determinism and zero-noise trajectory") {
  RolloutFixture fx;
  GraphSequence graphs(fx.synth.graph, true, 17);

  RolloutConfig rc;
  rc.horizon = 5;
  rc.samples = 3;
  rc.seed = 99;

  ForecastEnsemble a = rollout(fx.params, fx.bank, fx.synth.data.values, graphs, rc);
  ForecastEnsemble b = rollout(fx.params, fx.bank, fx.synth.data.values, graphs, rc);
  REQUIRE(a.count() == b.count());
  for (int s = 0; s < a.count(); ++s)
    CHECK((a.samples[s] - b.samples[s]).cwiseAbs().maxCoeff() == 0.0);

  rc.seed = 100;
  ForecastEnsemble c = rollout(fx.params, fx.bank, fx.synth.data.values, graphs, rc);
  CHECK((a.samples[0] - c.samples[0]).cwiseAbs().maxCoeff() > 0.0);

  SUBCASE("zero noise equals the conditional-mean recursion") {
    rc.samples = 1;
    rc.zero_noise = true;
    ForecastEnsemble zn = rollout(fx.params, fx.bank, fx.synth.data.values, graphs, rc);

    // independent reconstruction with library pieces
    const ModelParams& p = fx.params;
    const Matrix& values = fx.synth.data.values;
    const long origin = values.rows() - 1;
    const int d = fx.config.window, n = p.nodes, lag = p.lag;
    Matrix history(values.rows() + rc.horizon, n);
    history.topRows(values.rows()) = values;

    std::vector<Vector> residuals;
    std::vector<HeadsOut> heads_cache;
    for (long s = origin - d + 2; s <= origin; ++s) {
      HeadsOut o = heads(p, encode(p, values.middleRows(s - lag, lag)));
      residuals.push_back(values.row(s).transpose() - o.mu);
    }
    for (int q = 1; q <= rc.horizon; ++q) {
      const long step = origin + q;
      std::vector<HeadsOut> outs;
      std::vector<Matrix> blocks;
      Vector dbat(d * n);
      for (int k = 0; k < d; ++k) {
        const long s = step - d + 1 + k;
        outs.push_back(heads(p, encode(p, history.middleRows(s - lag, lag))));
        blocks.push_back(outs.back().factor);
        dbat.segment(k * n, n) = outs.back().diag;
      }
      SpatialContext ctx = graphs.window_context(step - d + 1, step);
      CurvatureReport rep = score_curvatures(*ctx.kappas, p.spatial.kappa0, p.spatial.tau);
      Matrix lap = laplacian(reweight(ctx.averaged, rep, p.spatial.lambda));
      SpatialFactor f = spatial_factor(lap, p.spatial);
      Matrix cmat = mixture_correlation(fx.bank, outs.back().logits);
      BatchCovariance cov = assemble(blocks, cmat, f.covariance, dbat);
      Vector eta_obs((d - 1) * n);
      for (int k = 0; k + 1 < d; ++k)
        eta_obs.segment(k * n, n) = residuals[residuals.size() - (d - 1) + k];
      Conditional cond = conditional_next_step(cov, eta_obs);
      const Vector draw = outs.back().mu + cond.mean;
      CHECK((zn.samples[0].row(q - 1).transpose() - draw).cwiseAbs().maxCoeff() <= 1e-12);
      history.row(step) = draw.transpose();
      residuals.push_back(cond.mean);
    }
  }
}

TEST_CASE("rollout on a diagonal model matches N(mu, tracker) marginals") {
  RolloutFixture fx;
  // zero factor head: the window covariance is diagonal
  fx.params.head_factor.weight.setZero();
  fx.params.head_factor.bias.setZero();
  GraphSequence graphs(fx.synth.graph, false, 17);

  RolloutConfig rc;
  rc.horizon = 1;
  rc.samples = 20000;
  rc.seed = 5;
  ForecastEnsemble ens = rollout(fx.params, fx.bank, fx.synth.data.values, graphs, rc);

  // expected marginal: mean mu(step), std = tracker scale after the observed pass
  const ModelParams& p = fx.params;
  const Matrix& values = fx.synth.data.values;
  const long origin = values.rows() - 1;
  VolatilityTracker tracker;
  tracker.rho = rc.volatility_decay;
  tracker.s2 = p.train_residual_var;
  for (long s = p.lag; s <= origin; ++s) {
    HeadsOut o = heads(p, encode(p, values.middleRows(s - p.lag, p.lag)));
    tracker.update(values.row(s).transpose() - o.mu);
  }
  HeadsOut next = heads(p, encode(p, values.middleRows(origin + 1 - p.lag, p.lag)));

  for (int i = 0; i < p.nodes; ++i) {
    std::vector<double> draws(rc.samples);
    double mean = 0.0;
    for (int s = 0; s < rc.samples; ++s) {
      draws[s] = ens.samples[s](0, i);
      mean += draws[s];
    }
    mean /= rc.samples;
    double var = 0.0;
    for (double v : draws) var += (v - mean) * (v - mean);
    var /= rc.samples;
    const double sd = std::sqrt(tracker.s2(i));
    CHECK(std::abs(mean - next.mu(i)) <= 4.0 * sd / std::sqrt(double(rc.samples)));
    CHECK(std::abs(std::sqrt(var) - sd) <= 0.03 * sd);
  }
}

TEST_CASE("ensemble serialization round trips") {
  Rng rng(23);
  ForecastEnsemble ens;
  ens.origin = 57;
  ens.samples.assign(4, Matrix(3, 2));
  for (Matrix& m : ens.samples)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) m(i, j) = rng.normal();

  save_ensemble_csv(ens, "test_ens.csv");
  ForecastEnsemble csv = load_ensemble_csv("test_ens.csv");
  CHECK(csv.origin == ens.origin);
  REQUIRE(csv.count() == ens.count());
  for (int s = 0; s < ens.count(); ++s)
    CHECK((csv.samples[s] - ens.samples[s]).cwiseAbs().maxCoeff() == 0.0);

  save_ensemble_binary(ens, "test_ens.bin");
  ForecastEnsemble bin = load_ensemble_binary("test_ens.bin");
  CHECK(bin.origin == ens.origin);
  for (int s = 0; s < ens.count(); ++s)
    CHECK((bin.samples[s] - ens.samples[s]).cwiseAbs().maxCoeff() == 0.0);

  std::remove("test_ens.csv");
  std::remove("test_ens.bin");
}
