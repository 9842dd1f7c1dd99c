#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

#include "curvecov/dataio.hpp"
#include "curvecov/forecaster.hpp"
#include "curvecov/sampler.hpp"
#include "test_support.hpp"

using namespace curvecov;
using namespace curvecov::testing;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.window = 2;
  c.rank = 2;
  c.mixtures = 2;
  c.lag = 3;
  c.hidden = 4;
  c.batch_windows = 4;
  c.max_epochs = 2;
  c.max_steps = 20;
  c.val_interval = 5;
  return c;
}

Matrix random_values(Rng& rng, long t, int n, double scale = 1.0) {
  Matrix v(t, n);
  for (long i = 0; i < t; ++i)
    for (int j = 0; j < n; ++j) v(i, j) = scale * rng.normal();
  return v;
}

double fd_relative_error(const ModelParams& params, const KernelBank& bank,
                         const WindowData& win, Ablation ablation, long& worst_index) {
  ParamGradient grad;
  window_nll_grad(params, bank, win, ablation, grad);
  const Vector analytic = flatten_gradient(params, grad);
  const Vector mask = gradient_mask(params, ablation);

  ModelParams probe = params;
  Vector theta = flatten_parameters(params);
  const double h = 1e-5;
  double worst = 0.0;
  worst_index = -1;
  for (long i = 0; i < theta.size(); ++i) {
    if (mask(i) == 0.0) continue;
    Vector up = theta, dn = theta;
    up(i) += h;
    dn(i) -= h;
    unflatten_parameters(probe, up);
    const double f_up = window_nll(probe, bank, win, ablation);
    unflatten_parameters(probe, dn);
    const double f_dn = window_nll(probe, bank, win, ablation);
    const double fd = (f_up - f_dn) / (2.0 * h);
    const double rel =
        std::abs(analytic(i) - fd) / std::max({1.0, std::abs(fd), std::abs(analytic(i))});
    if (rel > worst) {
      worst = rel;
      worst_index = i;
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("encode and heads basics") {
  TrainConfig c = small_config();
  Rng rng(3);
  ModelParams p = init_params(3, c, rng);

  SUBCASE("zero backbone gives zero latent state") {
    p.backbone.weight.setZero();
    p.backbone.bias.setZero();
    Matrix hist = Matrix::Ones(c.lag, 3);
    CHECK(encode(p, hist).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("scalar case reduces to tanh") {
    TrainConfig c1 = small_config();
    c1.lag = 1;
    c1.hidden = 1;
    Rng r1(4);
    ModelParams q = init_params(1, c1, r1);
    q.backbone.weight(0, 0) = 1.0;
    q.backbone.bias(0) = 0.0;
    Matrix hist(1, 1);
    hist << 0.37;
    CHECK(encode(q, hist)(0) == doctest::Approx(std::tanh(0.37)));
  }

  SUBCASE("matches an independent recomputation") {
    Matrix hist = random_values(rng, c.lag, 3);
    Vector input(c.lag * 3);
    for (int s = 0; s < c.lag; ++s)
      for (int i = 0; i < 3; ++i) input(s * 3 + i) = hist(s, i);
    Vector expect = (p.backbone.weight * input + p.backbone.bias).array().tanh();
    CHECK((encode(p, hist) - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("zero latent state returns head biases") {
    HeadsOut out = heads(p, Vector::Zero(c.hidden));
    CHECK((out.mu - p.head_mu.bias).cwiseAbs().maxCoeff() == 0.0);
    for (int i = 0; i < 3; ++i)
      CHECK(out.diag(i) ==
            doctest::Approx(std::exp(p.head_logdiag.bias(i)) + kDiagFloor));
  }

  SUBCASE("head covariance is positive definite") {
    Vector h(c.hidden);
    for (int i = 0; i < c.hidden; ++i) h(i) = rng.normal();
    HeadsOut out = heads(p, h);
    Matrix sigma = out.factor * out.factor.transpose();
    sigma += Matrix(out.diag.asDiagonal());
    CHECK(Eigen::LLT<Matrix>(sigma).info() == Eigen::Success);
  }

  CHECK_THROWS_AS(encode(p, Matrix::Zero(1, 3)), std::invalid_argument);
}

TEST_CASE("window NLL closed forms") {
  TrainConfig c = small_config();
  Rng rng(9);
  const int n = 4;
  WeightedGraph g = random_graph(rng, n, 0.6);
  GraphSequence graphs(g, false, 1);
  Matrix values = random_values(rng, 30, n);
  KernelBank bank = build_kernel_bank(c.window, c.mixtures, 1.0);

  SUBCASE("perfect mean with identity diagonal covariance") {
    ModelParams p = init_params(n, c, rng);
    p.backbone.weight.setZero();
    p.backbone.bias.setZero();
    p.head_mu.bias.setZero();
    p.head_factor.weight.setZero();
    p.head_factor.bias.setZero();
    // d = exp(z) + floor == 1 requires z = log(1 - floor)
    p.head_logdiag.weight.setZero();
    p.head_logdiag.bias.setConstant(std::log(1.0 - kDiagFloor));
    Matrix zeros = Matrix::Zero(30, n);
    WindowData win = make_window(zeros, graphs, 10, c.window, c.lag);
    const double expect = 0.5 * c.window * n * std::log(2.0 * std::numbers::pi);
    CHECK(window_nll(p, bank, win) == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("one-step window matches the static covariance directly") {
    TrainConfig c1 = c;
    c1.window = 1;
    KernelBank bank1 = build_kernel_bank(1, c1.mixtures, 1.0);
    ModelParams p = init_params(n, c1, rng);
    WindowData win = make_window(values, graphs, 9, 1, c1.lag);
    const Vector h = encode(p, win.lags[0]);
    const HeadsOut out = heads(p, h);
    const Vector eta = win.targets.row(0).transpose() - out.mu;

    const CurvatureReport rep =
        score_curvatures(*win.graph.kappas, p.spatial.kappa0, p.spatial.tau);
    const Matrix lap = laplacian(reweight(win.graph.averaged, rep, p.spatial.lambda));
    const SpatialFactor f = spatial_factor(lap, p.spatial);
    const Matrix c0 = mixture_correlation(bank1, out.logits);
    Matrix sigma = c0(0, 0) * out.factor * f.covariance * out.factor.transpose();
    sigma += Matrix(out.diag.asDiagonal());
    Eigen::LLT<Matrix> llt(sigma);
    const double expect = 0.5 * (n * std::log(2.0 * std::numbers::pi) +
                                 2.0 * Matrix(llt.matrixLLT()).diagonal().array().log().sum() +
                                 eta.dot(llt.solve(eta)));
    CHECK(window_nll(p, bank1, win) == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("analytic gradients match finite differences") {
  Rng rng(41);
  for (int trial = 0; trial < 4; ++trial) {
    TrainConfig c = small_config();
    const int n = 3 + static_cast<int>(rng.uniform_index(3));
    WeightedGraph g = random_graph(rng, n, 0.5);
    GraphSequence graphs(g, true, 5 + trial);
    Matrix values = random_values(rng, 25, n);
    KernelBank bank = build_kernel_bank(c.window, c.mixtures, 1.0);
    ModelParams p = init_params(n, c, rng);
    WindowData win = make_window(values, graphs, 12 + trial, c.window, c.lag);

    long worst_index = -1;
    const double err = fd_relative_error(p, bank, win, Ablation::kNone, worst_index);
    INFO("worst parameter: ",
         worst_index >= 0 ? parameter_name(p, worst_index) : "none");
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("gradients for ablated variants") {
  Rng rng(43);
  TrainConfig c = small_config();
  const int n = 4;
  WeightedGraph g = random_graph(rng, n, 0.5);
  GraphSequence graphs(g, true, 11);
  Matrix values = random_values(rng, 25, n);
  KernelBank bank = build_kernel_bank(c.window, c.mixtures, 1.0);
  ModelParams p = init_params(n, c, rng);
  WindowData win = make_window(values, graphs, 11, c.window, c.lag);

  for (Ablation abl : {Ablation::kNoRewiring, Ablation::kDiagOnly}) {
    long worst_index = -1;
    const double err = fd_relative_error(p, bank, win, abl, worst_index);
    INFO("ablation ", to_string(abl), " worst parameter: ",
         worst_index >= 0 ? parameter_name(p, worst_index) : "none");
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("diag-only mean gradient follows the hand formula") {
  // With zero weights, mu = bias and d ~= 1: dNLL/dmu = sum_k (mu - x_k)/d.
  TrainConfig c = small_config();
  c.window = 2;
  Rng rng(51);
  const int n = 2;
  ModelParams p = init_params(n, c, rng);
  p.backbone.weight.setZero();
  p.backbone.bias.setZero();
  p.head_mu.weight.setZero();
  p.head_mu.bias << 0.25, -0.5;
  p.head_logdiag.weight.setZero();
  p.head_logdiag.bias.setConstant(std::log(1.0 - kDiagFloor));

  WeightedGraph g = complete_graph(n);
  GraphSequence graphs(g, false, 1);
  Matrix values = Matrix::Zero(20, n);
  values.setConstant(1.0);
  KernelBank bank = build_kernel_bank(c.window, c.mixtures, 1.0);
  WindowData win = make_window(values, graphs, 8, c.window, c.lag);

  ParamGradient grad;
  window_nll_grad(p, bank, win, Ablation::kDiagOnly, grad);
  for (int i = 0; i < n; ++i)
    CHECK(grad.mu_b(i) ==
          doctest::Approx(2.0 * (p.head_mu.bias(i) - 1.0)).epsilon(1e-9));

  // doubling the residual doubles the mean gradient
  Matrix values2 = Matrix::Zero(20, n);
  values2.setConstant(2.0 - p.head_mu.bias(0));
  ModelParams p0 = p;
  p0.head_mu.bias.setZero();
  Matrix base = Matrix::Constant(20, n, 1.0);
  WindowData win1 = make_window(base, graphs, 8, c.window, c.lag);
  ParamGradient g1;
  window_nll_grad(p0, bank, win1, Ablation::kDiagOnly, g1);
  Matrix twice = Matrix::Constant(20, n, 2.0);
  WindowData win2 = make_window(twice, graphs, 8, c.window, c.lag);
  ParamGradient g2;
  window_nll_grad(p0, bank, win2, Ablation::kDiagOnly, g2);
  for (int i = 0; i < n; ++i)
    CHECK(g2.mu_b(i) == doctest::Approx(2.0 * g1.mu_b(i)).epsilon(1e-9));
}

TEST_CASE("a constructed stationary slice has zero mean-gradient") {
  TrainConfig c = small_config();
  c.window = 1;
  Rng rng(53);
  const int n = 2;
  ModelParams p = init_params(n, c, rng);
  p.backbone.weight.setZero();
  p.backbone.bias.setZero();
  p.head_mu.weight.setZero();
  p.head_mu.bias.setConstant(3.7);  // exactly the data value

  WeightedGraph g = complete_graph(n);
  GraphSequence graphs(g, false, 1);
  Matrix values = Matrix::Constant(20, n, 3.7);
  KernelBank bank = build_kernel_bank(1, c.mixtures, 1.0);
  WindowData win = make_window(values, graphs, 6, 1, c.lag);

  ParamGradient grad;
  window_nll_grad(p, bank, win, Ablation::kNone, grad);
  CHECK(grad.mu_b.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("curvature report ignores the projection") {
  Rng rng(61);
  WeightedGraph g = random_graph(rng, 8, 0.5);
  GraphSequence graphs(g, true, 3);
  SpatialContext ctx = graphs.window_context(4, 7);
  CurvatureReport a = score_curvatures(*ctx.kappas, 0.1, 4.0);
  // perturbing projection-like parameters cannot touch kappa
  CurvatureReport b = score_curvatures(*ctx.kappas, 0.1, 4.0);
  REQUIRE(a.edges.size() == b.edges.size());
  for (size_t e = 0; e < a.edges.size(); ++e) {
    CHECK(a.edges[e].kappa == b.edges[e].kappa);
    CHECK(a.edges[e].score == b.edges[e].score);
  }
}

TEST_CASE("fit on a constant dataset recovers the constant") {
  const int n = 2;
  const double target = 3.7;
  Matrix values = Matrix::Constant(80, n, target);
  WeightedGraph g = complete_graph(n);
  GraphSequence graphs(g, false, 1);

  TrainConfig c;
  c.window = 1;
  c.rank = 1;
  c.mixtures = 1;
  c.lag = 2;
  c.hidden = 4;
  c.batch_windows = 4;
  c.learning_rate = 0.03;
  c.max_epochs = 100;
  c.max_steps = 800;
  c.val_interval = 10;
  c.seed = 5;

  FitResult result = fit(values, graphs, c);
  CHECK(result.best_val_nll < result.trace.front().best_val + 1e-12);
  CHECK(result.best_val_nll < result.trace.front().val_nll);

  const Vector h = encode(result.params, Matrix::Constant(c.lag, n, target));
  const HeadsOut out = heads(result.params, h);
  for (int i = 0; i < n; ++i) CHECK(std::abs(out.mu(i) - target) < 1e-3);

  // best-so-far column never increases
  double prev = result.trace.front().best_val;
  for (const TraceRow& row : result.trace) {
    CHECK(row.best_val <= prev + 1e-15);
    prev = row.best_val;
  }
}

TEST_CASE("fit beats the diagonal ablation on spatially correlated data") {
  int wins = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig sc;
    sc.nodes = 8;
    sc.steps = 400;
    sc.seed = 100 + seed;
    sc.spatial_b = 4.0;
    SynthOutput synth = synth_generate(sc);
    GraphSequence graphs(synth.graph, true, sc.seed);

    TrainConfig c;
    c.window = 2;
    c.rank = 2;
    c.mixtures = 2;
    c.lag = 4;
    c.hidden = 8;
    c.batch_windows = 8;
    c.learning_rate = 0.01;
    c.max_steps = 150;
    c.max_epochs = 10;
    c.val_interval = 15;
    c.seed = seed;

    TrainConfig diag = c;
    diag.ablation = Ablation::kDiagOnly;

    FitResult full = fit(synth.data.values, graphs, c);
    FitResult only_diag = fit(synth.data.values, graphs, diag);
    if (full.best_val_nll <= only_diag.best_val_nll) ++wins;
  }
  CHECK(wins >= 4);
}

TEST_CASE("training is deterministic per seed") {
  Rng rng(71);
  SynthConfig sc;
  sc.nodes = 6;
  sc.steps = 200;
  sc.seed = 9;
  SynthOutput synth = synth_generate(sc);
  GraphSequence graphs(synth.graph, true, 9);

  TrainConfig c = small_config();
  c.max_steps = 30;
  c.seed = 23;

  FitResult a = fit(synth.data.values, graphs, c);
  FitResult b = fit(synth.data.values, graphs, c);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    // bit-identical trace, NaN slots included
    CHECK(std::memcmp(&a.trace[i].train_nll, &b.trace[i].train_nll, sizeof(double)) == 0);
    CHECK(std::memcmp(&a.trace[i].val_nll, &b.trace[i].val_nll, sizeof(double)) == 0);
    CHECK(a.trace[i].best_val == b.trace[i].best_val);
  }
  CHECK((flatten_parameters(a.params) - flatten_parameters(b.params)).cwiseAbs().maxCoeff() ==
        0.0);
}

TEST_CASE("checkpoints reload bit-exactly") {
  Rng rng(81);
  SynthConfig sc;
  sc.nodes = 5;
  sc.steps = 150;
  sc.seed = 31;
  SynthOutput synth = synth_generate(sc);
  GraphSequence graphs(synth.graph, true, 31);
  TrainConfig c = small_config();
  c.max_steps = 10;
  FitResult result = fit(synth.data.values, graphs, c);

  const std::string path = "test_checkpoint_roundtrip.json";
  save_checkpoint(path, result.params, c);
  Checkpoint ck = load_checkpoint(path);
  CHECK((flatten_parameters(ck.params) - flatten_parameters(result.params))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((ck.params.train_residual_var - result.params.train_residual_var)
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(ck.config.window == c.window);
  CHECK(ck.config.seed == c.seed);

  // loaded params reproduce forecasts bit-exactly
  KernelBank bank = build_kernel_bank(c.window, c.mixtures, c.length_scale_step);
  RolloutConfig rc;
  rc.horizon = 4;
  rc.samples = 5;
  rc.seed = 77;
  ForecastEnsemble ens1 = rollout(result.params, bank, synth.data.values, graphs, rc);
  ForecastEnsemble ens2 = rollout(ck.params, bank, synth.data.values, graphs, rc);
  for (int s = 0; s < ens1.count(); ++s)
    CHECK((ens1.samples[s] - ens2.samples[s]).cwiseAbs().maxCoeff() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("parameter names resolve") {
  TrainConfig c = small_config();
  Rng rng(91);
  ModelParams p = init_params(3, c, rng);
  CHECK(parameter_name(p, 0) == "backbone.weight(0,0)");
  const long total = parameter_count(p);
  CHECK(parameter_name(p, total - 1) != "unknown");
  // spatial scalars sit between the heads and the projection
  bool found_tau = false;
  for (long i = 0; i < total; ++i)
    if (parameter_name(p, i) == "spatial.tau") found_tau = true;
  CHECK(found_tau);
}
