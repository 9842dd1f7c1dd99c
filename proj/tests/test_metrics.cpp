#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "curvecov/metrics.hpp"
#include "curvecov/rng.hpp"

using namespace curvecov;

TEST_CASE("sample CRPS hand cases") {
  CHECK(crps_samples({1.0, 1.0, 1.0}, 1.0) == 0.0);
  CHECK(crps_samples({0.0, 2.0}, 1.0) == 0.5);  // 1 - 0.5 * 1
  CHECK(crps_samples_pairwise({0.0, 2.0}, 1.0) == 0.5);
  CHECK_THROWS_AS(crps_samples({1.0}, 0.0), std::invalid_argument);

  // sorted fast path equals the pairwise reference
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> xs(64);
    for (double& x : xs) x = rng.normal();
    const double y = rng.normal();
    CHECK(crps_samples(xs, y) ==
          doctest::Approx(crps_samples_pairwise(xs, y)).epsilon(1e-12));
  }
}

TEST_CASE("Gaussian CRPS closed form") {
  // at y = mu: sigma (2 phi(0) - 1/sqrt(pi)) ~= 0.2337 sigma
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == doctest::Approx(0.23369497725510).epsilon(1e-10));
  CHECK(crps_gaussian(2.0, 3.0, 2.0) ==
        doctest::Approx(3.0 * 0.23369497725510).epsilon(1e-10));

  // degenerate-forecast limit: sigma -> 0 gives |y - mu|
  CHECK(crps_gaussian(1.0, 1e-12, 3.0) == doctest::Approx(2.0).epsilon(1e-9));

  // translation invariance
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const double mu = rng.normal(), sigma = 0.5 + rng.uniform(), y = rng.normal();
    const double c = rng.normal();
    CHECK(crps_gaussian(mu + c, sigma, y + c) ==
          doctest::Approx(crps_gaussian(mu, sigma, y)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(crps_gaussian(0.0, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("sample CRPS converges to the Gaussian closed form") {
  Rng rng(7);
  const int s = 100000;
  std::vector<double> xs(s);
  for (double& x : xs) x = rng.normal();
  const double sampled = crps_samples(xs, 0.0);
  const double exact = crps_gaussian(0.0, 1.0, 0.0);
  CHECK(std::abs(sampled - exact) <= 0.01 * exact);
  CHECK(std::abs(sampled - 0.2337) <= 0.01);
}

TEST_CASE("CRPS invariances") {
  Rng rng(9);
  std::vector<double> xs(40);
  for (double& x : xs) x = rng.normal();
  const double y = rng.normal();
  const double base = crps_samples(xs, y);
  CHECK(base >= 0.0);

  // translation invariance and positive homogeneity of degree 1
  const double shift = rng.normal();
  const double scale = 0.1 + 2.0 * rng.uniform();
  std::vector<double> shifted(xs), scaled(xs);
  for (double& x : shifted) x += shift;
  for (double& x : scaled) x *= scale;
  CHECK(crps_samples(shifted, y + shift) == doctest::Approx(base).epsilon(1e-12));
  CHECK(crps_samples(scaled, y * scale) == doctest::Approx(scale * base).epsilon(1e-12));

  // zero iff the forecast is a point mass at y
  CHECK(crps_samples({y, y, y, y}, y) == 0.0);
  CHECK(crps_samples({y, y + 1e-3}, y) > 0.0);
}

TEST_CASE("pinball loss") {
  // at q = 0.5 the pinball loss is half the absolute error
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    const double y = rng.normal(), pred = rng.normal();
    CHECK(pinball_loss(0.5, y, pred) == doctest::Approx(0.5 * std::abs(y - pred)));
  }
  CHECK(pinball_loss(0.9, 1.0, 0.0) == doctest::Approx(0.9));
  CHECK(pinball_loss(0.9, 0.0, 1.0) == doctest::Approx(0.1));
}

TEST_CASE("empirical quantile interpolation") {
  std::vector<double> xs{3.0, 1.0, 2.0};
  CHECK(empirical_quantile(xs, 0.0) == 1.0);
  CHECK(empirical_quantile(xs, 1.0) == 3.0);
  CHECK(empirical_quantile(xs, 0.5) == 2.0);
  CHECK(empirical_quantile(xs, 0.25) == doctest::Approx(1.5));
}

namespace {

ForecastEnsemble gaussian_ensemble(Rng& rng, int s, int q, int n, const Matrix& mu,
                                   const Matrix& sigma) {
  ForecastEnsemble ens;
  ens.origin = 0;
  ens.samples.assign(s, Matrix(q, n));
  for (int k = 0; k < s; ++k)
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < n; ++b)
        ens.samples[k](a, b) = mu(a, b) + sigma(a, b) * rng.normal();
  return ens;
}

}  // namespace

TEST_CASE("evaluate") {
  SUBCASE("perfect deterministic forecast scores zero") {
    Matrix actuals(2, 3);
    actuals << 1, 2, 3, 4, 5, 6;
    ForecastEnsemble ens;
    ens.origin = 9;
    ens.samples.assign(8, actuals);
    EvalReport rep = evaluate(ens, actuals);
    CHECK(rep.crps_mean == 0.0);
    CHECK(rep.crps_sum == 0.0);
    CHECK(rep.mae == 0.0);
    for (const auto& [level, loss] : rep.quantile_loss) CHECK(loss == 0.0);
    CHECK(rep.all_finite());
  }

  SUBCASE("single cell reduces to crps_samples") {
    Rng rng(13);
    ForecastEnsemble ens;
    ens.origin = 0;
    ens.samples.assign(32, Matrix(1, 1));
    std::vector<double> draws(32);
    for (int k = 0; k < 32; ++k) {
      draws[k] = rng.normal();
      ens.samples[k](0, 0) = draws[k];
    }
    Matrix actual(1, 1);
    actual << 0.4;
    EvalReport rep = evaluate(ens, actual);
    CHECK(rep.crps_mean == doctest::Approx(crps_samples(draws, 0.4)).epsilon(1e-12));
    CHECK(rep.crps_sum ==
          doctest::Approx(crps_samples(draws, 0.4) / 0.4).epsilon(1e-12));
  }

  SUBCASE("Gaussian ensemble cross-checks the closed form per cell") {
    Rng rng(17);
    const int s = 20000, q = 2, n = 3;
    Matrix mu(q, n), sigma(q, n), actuals(q, n);
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < n; ++b) {
        mu(a, b) = rng.normal();
        sigma(a, b) = 0.5 + rng.uniform();
        actuals(a, b) = mu(a, b) + sigma(a, b) * rng.normal();
      }
    ForecastEnsemble ens = gaussian_ensemble(rng, s, q, n, mu, sigma);
    EvalReport rep = evaluate(ens, actuals);

    double expected_total = 0.0, denom = 0.0;
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < n; ++b) {
        expected_total += crps_gaussian(mu(a, b), sigma(a, b), actuals(a, b));
        denom += std::abs(actuals(a, b));
      }
    CHECK(rep.crps_mean ==
          doctest::Approx(expected_total / (q * n)).epsilon(0.05));
    CHECK(rep.crps_sum == doctest::Approx(expected_total / denom).epsilon(0.05));
  }

  SUBCASE("parallel evaluation equals the serial reference") {
    Rng rng(19);
    Matrix mu = Matrix::Zero(12, 4), sigma = Matrix::Constant(12, 4, 1.0);
    ForecastEnsemble ens = gaussian_ensemble(rng, 64, 12, 4, mu, sigma);
    Matrix actuals(12, 4);
    for (int a = 0; a < 12; ++a)
      for (int b = 0; b < 4; ++b) actuals(a, b) = rng.normal();
    EvalReport fast = evaluate(ens, actuals, true);
    EvalReport slow = evaluate_serial(ens, actuals);
    CHECK(fast.crps_mean == doctest::Approx(slow.crps_mean).epsilon(1e-12));
    CHECK(fast.crps_sum == doctest::Approx(slow.crps_sum).epsilon(1e-12));
    CHECK(fast.mae == slow.mae);
    REQUIRE(fast.horizons.size() == 3);  // steps 3, 6, 12 present when Q >= 12
    CHECK(fast.horizons[0].step == 3);
    CHECK(fast.horizons[2].step == 12);
    for (size_t h = 0; h < 3; ++h)
      CHECK(fast.horizons[h].crps_mean ==
            doctest::Approx(slow.horizons[h].crps_mean).epsilon(1e-12));
  }

  SUBCASE("shape mismatch is rejected") {
    ForecastEnsemble ens;
    ens.samples.assign(4, Matrix::Zero(2, 3));
    CHECK_THROWS_AS(evaluate(ens, Matrix::Zero(3, 3)), std::invalid_argument);
  }

  SUBCASE("json report carries the metric fields") {
    Matrix actuals = Matrix::Constant(1, 2, 1.0);
    ForecastEnsemble ens;
    ens.samples.assign(4, actuals);
    EvalReport rep = evaluate(ens, actuals);
    const std::string js = rep.to_json();
    for (const char* key : {"crps_mean", "crps_sum", "mae", "ql", "horizons"})
      CHECK(js.find(key) != std::string::npos);
  }
}
