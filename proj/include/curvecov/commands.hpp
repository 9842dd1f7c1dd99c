#pragma once

#include <cstdint>
#include <string>

#include "curvecov/dataio.hpp"
#include "curvecov/forecaster.hpp"

namespace curvecov {

// Command implementations behind the CLI; kept in the library so tests can
// drive them in-process. All throw on failure; the CLI maps that to a
// nonzero exit. Every command echoes its resolved configuration to stdout.

struct GenOptions {
  std::string out_dir;
  SynthConfig synth;
};
void cmd_gen(const GenOptions& opt);

struct RewireReportOptions {
  std::string graph_path;
  std::string out_path;  // JSON report
  double kappa0 = 0.0;
  double tau = 5.0;
  double lambda = 1.0;
  uint64_t seed = 42;  // drives the balanced bisections for N > 20
};
void cmd_rewire_report(const RewireReportOptions& opt);

struct TrainOptions {
  std::string data_path;
  std::string graph_path;
  std::string out_dir;  // checkpoint.json + loss_trace.csv
  TrainConfig config;
  bool dynamic_graph = true;
};
void cmd_train(const TrainOptions& opt);

struct ForecastOptions {
  std::string checkpoint_path;
  std::string data_path;
  std::string graph_path;
  std::string out_path;         // ensemble CSV
  std::string binary_out_path;  // optional compact binary
  int horizon = 12;
  int samples = 100;
  uint64_t seed = 42;
  long origin = -1;  // -1: last validation row, so the horizon covers test data
  double volatility_decay = 0.94;
  std::string ablate_override;  // empty: use the checkpoint's setting
  bool dynamic_graph = true;
};
void cmd_forecast(const ForecastOptions& opt);

struct EvalOptions {
  std::string ensemble_path;  // CSV or .bin
  std::string data_path;
  std::string out_path;  // report JSON
};
void cmd_eval(const EvalOptions& opt);

}  // namespace curvecov
