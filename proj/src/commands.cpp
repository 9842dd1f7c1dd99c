#include "curvecov/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "curvecov/metrics.hpp"
#include "curvecov/rng.hpp"
#include "curvecov/sampler.hpp"

namespace curvecov {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw std::invalid_argument("output directory required");
  fs::create_directories(dir);
}

std::string join(const std::string& dir, const std::string& file) {
  return (fs::path(dir) / file).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

void cmd_gen(const GenOptions& opt) {
  opt.synth.validate();
  ensure_dir(opt.out_dir);
  std::cout << "[gen] nodes=" << opt.synth.nodes << " steps=" << opt.synth.steps
            << " seed=" << opt.synth.seed << " phi=" << opt.synth.ar_coeff
            << " a=" << opt.synth.spatial_a << " b=" << opt.synth.spatial_b
            << " amplitude=" << opt.synth.seasonal_amplitude
            << " period=" << opt.synth.seasonal_period << " obs_noise=" << opt.synth.obs_noise
            << " out=" << opt.out_dir << "\n";

  SynthOutput synth = synth_generate(opt.synth);
  save_csv(synth.data, join(opt.out_dir, "dataset.csv"));
  save_graph_csv(synth.graph, join(opt.out_dir, "graph.csv"));

  nlohmann::json truth;
  truth["nodes"] = opt.synth.nodes;
  truth["steps"] = opt.synth.steps;
  truth["seed"] = opt.synth.seed;
  truth["phi"] = opt.synth.ar_coeff;
  truth["spatial_a"] = opt.synth.spatial_a;
  truth["spatial_b"] = opt.synth.spatial_b;
  truth["seasonal_amplitude"] = opt.synth.seasonal_amplitude;
  truth["seasonal_period"] = opt.synth.seasonal_period;
  truth["obs_noise"] = opt.synth.obs_noise;
  truth["noise_cov"] = matrix_json(synth.noise_cov);
  write_text(join(opt.out_dir, "truth.json"), truth.dump(1));

  std::cout << "[gen] wrote dataset.csv graph.csv truth.json (T=" << synth.data.length()
            << ", N=" << synth.data.nodes() << ", edges=" << synth.graph.edge_count() << ")\n";
}

void cmd_rewire_report(const RewireReportOptions& opt) {
  std::cout << "[rewire-report] graph=" << opt.graph_path << " kappa0=" << opt.kappa0
            << " tau=" << opt.tau << " lambda=" << opt.lambda << " seed=" << opt.seed
            << " out=" << opt.out_path << "\n";
  WeightedGraph g = load_graph_csv(opt.graph_path);
  if (!is_connected(g)) throw std::runtime_error("graph disconnected");

  CurvatureReport report = bottleneck_scores(g, opt.kappa0, opt.tau);
  WeightedGraph rewired = reweight(g, report, opt.lambda);

  std::vector<std::vector<int>> cuts;
  if (g.n <= 20) {
    cuts.push_back(cheeger_brute(g).second);
  } else {
    Rng rng(opt.seed, 23);
    for (int k = 0; k < 10; ++k) {
      std::vector<int> order(g.n);
      for (int i = 0; i < g.n; ++i) order[i] = i;
      for (int i = g.n - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_index(i + 1)]);
      cuts.emplace_back(order.begin(), order.begin() + g.n / 2);
    }
  }
  DiagnosticsReport diag = diagnostics(g, rewired, cuts);

  nlohmann::json out = nlohmann::json::parse(diag.to_json());
  out["curvature"] = nlohmann::json::parse(curvature_report_json(report));
  if (!opt.out_path.empty()) write_text(opt.out_path, out.dump(2));

  char line[160];
  std::printf("%-28s %14s %14s %10s\n", "measure", "before", "after", "ratio %");
  std::snprintf(line, sizeof(line), "%-28s %14.6f %14.6f %10.2f", "scaled Kirchhoff index",
                diag.kirchhoff_before, diag.kirchhoff_after, diag.ratios.kirchhoff_pct);
  std::printf("%s\n", line);
  std::snprintf(line, sizeof(line), "%-28s %14.6f %14.6f %10.2f", "lambda_{n-1}",
                diag.lambda_top_before, diag.lambda_top_after, diag.ratios.lambda_top_pct);
  std::printf("%s\n", line);
  for (const auto& p : diag.conductance_pairs) {
    const double pct = p.phi_after > 0.0 ? 100.0 * p.phi_before / p.phi_after : 100.0;
    std::snprintf(line, sizeof(line), "conductance %-16s %14.6f %14.6f %10.2f", p.id.c_str(),
                  p.phi_before, p.phi_after, pct);
    std::printf("%s\n", line);
  }
}

void cmd_train(const TrainOptions& opt) {
  opt.config.validate();
  ensure_dir(opt.out_dir);
  std::cout << "[train] data=" << opt.data_path << " graph=" << opt.graph_path
            << " out=" << opt.out_dir << " seed=" << opt.config.seed
            << " window=" << opt.config.window << " rank=" << opt.config.rank
            << " mixtures=" << opt.config.mixtures << " lag=" << opt.config.lag
            << " hidden=" << opt.config.hidden << " lr=" << opt.config.learning_rate
            << " epochs=" << opt.config.max_epochs << " max_steps=" << opt.config.max_steps
            << " batch=" << opt.config.batch_windows << " clip=" << opt.config.grad_clip
            << " weight_decay=" << opt.config.weight_decay
            << " ablate=" << to_string(opt.config.ablation)
            << " dynamic_graph=" << (opt.dynamic_graph ? 1 : 0) << "\n";

  Dataset data = load_csv(opt.data_path);
  WeightedGraph graph = load_graph_csv(opt.graph_path);
  if (graph.n != data.nodes())
    throw std::invalid_argument("graph node count does not match dataset");
  GraphSequence graphs(graph, opt.dynamic_graph, opt.config.seed);

  FitResult result = fit(data.values, graphs, opt.config);
  save_checkpoint(join(opt.out_dir, "checkpoint.json"), result.params, opt.config);

  std::ofstream trace(join(opt.out_dir, "loss_trace.csv"));
  if (!trace) throw std::runtime_error("cannot open loss trace output");
  trace << "step,train_nll,val_nll,best_val\n";
  char buf[128];
  for (const TraceRow& row : result.trace) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g", row.step, row.train_nll,
                  row.val_nll, row.best_val);
    trace << buf << '\n';
  }
  if (!trace) throw std::runtime_error("write failed: loss trace");

  std::cout << "[train] best validation NLL " << result.best_val_nll << " after "
            << (result.trace.size() - 1) << " steps\n";
}

void cmd_forecast(const ForecastOptions& opt) {
  std::cout << "[forecast] checkpoint=" << opt.checkpoint_path << " data=" << opt.data_path
            << " graph=" << opt.graph_path << " out=" << opt.out_path
            << " horizon=" << opt.horizon << " samples=" << opt.samples
            << " seed=" << opt.seed << " origin=" << opt.origin
            << " rho=" << opt.volatility_decay
            << " ablate=" << (opt.ablate_override.empty() ? "(checkpoint)" : opt.ablate_override)
            << " dynamic_graph=" << (opt.dynamic_graph ? 1 : 0) << "\n";

  Checkpoint ck = load_checkpoint(opt.checkpoint_path);
  Dataset data = load_csv(opt.data_path);
  WeightedGraph graph = load_graph_csv(opt.graph_path);
  if (graph.n != data.nodes())
    throw std::invalid_argument("graph node count does not match dataset");
  GraphSequence graphs(graph, opt.dynamic_graph, ck.config.seed);
  const KernelBank bank =
      build_kernel_bank(ck.config.window, ck.config.mixtures, ck.config.length_scale_step);

  Ablation ablation = ck.config.ablation;
  if (!opt.ablate_override.empty()) ablation = ablation_from_string(opt.ablate_override);

  RolloutConfig rc;
  rc.horizon = opt.horizon;
  rc.samples = opt.samples;
  rc.seed = opt.seed;
  rc.volatility_decay = opt.volatility_decay;
  rc.origin = opt.origin >= 0 ? opt.origin : chronological_bounds(data.length()).second - 1;

  ForecastEnsemble ens = rollout(ck.params, bank, data.values, graphs, rc, ablation);
  if (opt.out_path.empty()) throw std::invalid_argument("output path required");
  save_ensemble_csv(ens, opt.out_path);
  if (!opt.binary_out_path.empty()) save_ensemble_binary(ens, opt.binary_out_path);

  std::cout << "[forecast] wrote " << ens.count() << " paths x " << ens.horizon()
            << " steps x " << ens.nodes() << " nodes from origin " << ens.origin << "\n";
}

void cmd_eval(const EvalOptions& opt) {
  std::cout << "[eval] ensemble=" << opt.ensemble_path << " data=" << opt.data_path
            << " out=" << opt.out_path << "\n";
  ForecastEnsemble ens;
  if (opt.ensemble_path.size() > 4 &&
      opt.ensemble_path.substr(opt.ensemble_path.size() - 4) == ".bin")
    ens = load_ensemble_binary(opt.ensemble_path);
  else
    ens = load_ensemble_csv(opt.ensemble_path);

  Dataset data = load_csv(opt.data_path);
  if (ens.nodes() != data.nodes())
    throw std::invalid_argument("ensemble node count does not match dataset");
  if (ens.origin + ens.horizon() >= data.length())
    throw std::invalid_argument("ensemble horizon extends past the dataset");
  const Matrix actuals = data.values.middleRows(ens.origin + 1, ens.horizon());

  EvalReport report = evaluate(ens, actuals);
  if (!opt.out_path.empty()) write_text(opt.out_path, report.to_json());
  std::cout << report.table();
  if (!report.all_finite()) throw std::runtime_error("evaluation produced non-finite metrics");
}

}  // namespace curvecov
