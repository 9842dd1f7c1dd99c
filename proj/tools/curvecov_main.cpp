#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "curvecov/commands.hpp"

using namespace curvecov;

int main(int argc, char** argv) {
  CLI::App app{"curvecov: curvature-aware probabilistic spatio-temporal forecasting"};
  app.require_subcommand(1);

  const std::vector<std::string> ablate_choices = {"none", "no-rewiring", "no-volatility",
                                                   "reweight-only"};

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset, graph and truth");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--nodes", gen.synth.nodes, "node count");
  gen_cmd->add_option("--steps", gen.synth.steps, "time steps");
  gen_cmd->add_option("--seed", gen.synth.seed, "seed");
  gen_cmd->add_option("--phi", gen.synth.ar_coeff, "AR(1) coefficient");
  gen_cmd->add_option("--spatial-a", gen.synth.spatial_a, "noise precision diagonal");
  gen_cmd->add_option("--spatial-b", gen.synth.spatial_b, "noise precision Laplacian weight");
  gen_cmd->add_option("--amplitude", gen.synth.seasonal_amplitude, "seasonal amplitude");
  gen_cmd->add_option("--period", gen.synth.seasonal_period, "seasonal period");
  gen_cmd->add_option("--obs-noise", gen.synth.obs_noise, "observation noise scale");

  RewireReportOptions rep;
  auto* rep_cmd =
      app.add_subcommand("rewire-report", "graph measures before/after curvature reweighting");
  rep_cmd->add_option("--graph", rep.graph_path, "graph edge-list CSV")->required();
  rep_cmd->add_option("--out", rep.out_path, "JSON report path");
  rep_cmd->add_option("--kappa0", rep.kappa0, "curvature threshold");
  rep_cmd->add_option("--tau", rep.tau, "bottleneck sensitivity");
  rep_cmd->add_option("--lambda", rep.lambda, "reweighting strength");
  rep_cmd->add_option("--seed", rep.seed, "seed for bisection cuts");

  TrainOptions train;
  bool train_static = false;
  auto* train_cmd = app.add_subcommand("train", "fit the forecaster on a dataset");
  train_cmd->add_option("--data", train.data_path, "dataset CSV")->required();
  train_cmd->add_option("--graph", train.graph_path, "graph CSV")->required();
  train_cmd->add_option("--out", train.out_dir, "output directory")->required();
  train_cmd->add_option("--seed", train.config.seed, "seed");
  train_cmd->add_option("--window", train.config.window, "batch horizon D");
  train_cmd->add_option("--rank", train.config.rank, "low-rank dimension R");
  train_cmd->add_option("--mixtures", train.config.mixtures, "kernel mixture count M");
  train_cmd->add_option("--lag", train.config.lag, "lag window P");
  train_cmd->add_option("--hidden", train.config.hidden, "hidden width H");
  train_cmd->add_option("--lr", train.config.learning_rate, "learning rate");
  train_cmd->add_option("--epochs", train.config.max_epochs, "max epochs");
  train_cmd->add_option("--max-steps", train.config.max_steps, "max gradient steps");
  train_cmd->add_option("--batch", train.config.batch_windows, "windows per gradient step");
  train_cmd->add_option("--clip", train.config.grad_clip, "gradient clip");
  train_cmd->add_option("--weight-decay", train.config.weight_decay, "weight decay");
  train_cmd->add_option("--val-interval", train.config.val_interval, "validation interval");
  std::string train_ablate = "none";
  train_cmd->add_option("--ablate", train_ablate, "ablation variant")
      ->check(CLI::IsMember(ablate_choices));
  train_cmd->add_flag("--static-graph", train_static, "disable dynamic graph snapshots");

  ForecastOptions fc;
  bool fc_static = false;
  auto* fc_cmd = app.add_subcommand("forecast", "sample forecast ensembles from a checkpoint");
  fc_cmd->add_option("--checkpoint", fc.checkpoint_path, "checkpoint JSON")->required();
  fc_cmd->add_option("--data", fc.data_path, "dataset CSV")->required();
  fc_cmd->add_option("--graph", fc.graph_path, "graph CSV")->required();
  fc_cmd->add_option("--out", fc.out_path, "ensemble CSV path")->required();
  fc_cmd->add_option("--bin-out", fc.binary_out_path, "optional compact binary path");
  fc_cmd->add_option("--horizon", fc.horizon, "forecast horizon Q");
  fc_cmd->add_option("--samples", fc.samples, "sample paths S");
  fc_cmd->add_option("--seed", fc.seed, "seed");
  fc_cmd->add_option("--origin", fc.origin, "forecast origin row (default: end of validation)");
  fc_cmd->add_option("--rho", fc.volatility_decay, "volatility EWMA decay");
  fc_cmd->add_option("--ablate", fc.ablate_override, "override checkpoint ablation")
      ->check(CLI::IsMember(ablate_choices));
  fc_cmd->add_flag("--static-graph", fc_static, "disable dynamic graph snapshots");

  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "score an ensemble against actuals");
  ev_cmd->add_option("--ensemble", ev.ensemble_path, "ensemble CSV or .bin")->required();
  ev_cmd->add_option("--data", ev.data_path, "dataset CSV")->required();
  ev_cmd->add_option("--out", ev.out_path, "report JSON path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) {
      cmd_gen(gen);
    } else if (rep_cmd->parsed()) {
      cmd_rewire_report(rep);
    } else if (train_cmd->parsed()) {
      train.config.ablation = ablation_from_string(train_ablate);
      train.dynamic_graph = !train_static;
      cmd_train(train);
    } else if (fc_cmd->parsed()) {
      fc.dynamic_graph = !fc_static;
      cmd_forecast(fc);
    } else if (ev_cmd->parsed()) {
      cmd_eval(ev);
    }
  } catch (const std::exception& e) {
    std::cerr << "error in " << app.get_subcommands().front()->get_name() << ": " << e.what()
              << "\n";
    return 1;
  }
  return 0;
}
