#pragma once

#include <string>
#include <vector>

#include "curvecov/common.hpp"
#include "curvecov/sampler.hpp"

namespace curvecov {

// Sample CRPS with the standard kernel sign:
//   mean |X_s - y| - (1/2) mean_{s,s'} |X_s - X_{s'}|,
// the pair mean running over all S^2 ordered pairs. Computed in O(S log S)
// through the order-statistics identity.
double crps_samples(const std::vector<double>& samples, double y);

// O(S^2) direct pair enumeration; serial reference for the sorted path.
double crps_samples_pairwise(const std::vector<double>& samples, double y);

// Closed-form CRPS of a Gaussian forecast: sigma [z(2Phi(z)-1) + 2phi(z) - 1/sqrt(pi)].
double crps_gaussian(double mu, double sigma, double y);

struct EvalReport {
  double crps_mean = 0.0;
  double crps_sum = 0.0;  // sum of cell CRPS normalized by sum |actual|
  double mae = 0.0;       // ensemble-mean absolute error
  std::vector<std::pair<double, double>> quantile_loss;  // (level, normalized pinball)
  struct HorizonRow {
    int step = 0;
    double crps_mean = 0.0;
    double crps_sum = 0.0;
    double mae = 0.0;
  };
  std::vector<HorizonRow> horizons;  // lead times 3/6/12 when the horizon allows

  bool all_finite() const;
  std::string to_json() const;
  std::string table() const;
};

// Per-(step,node) sample CRPS plus aggregate quantile and point metrics.
EvalReport evaluate(const ForecastEnsemble& ensemble, const Matrix& actuals,
                    bool parallel = true);

// Serial reference built on the pairwise CRPS estimator.
EvalReport evaluate_serial(const ForecastEnsemble& ensemble, const Matrix& actuals);

// Empirical quantile with linear interpolation between order statistics.
double empirical_quantile(std::vector<double> samples, double level);

// Pinball loss rho_q(y, yhat) = max(q (y - yhat), (q - 1)(y - yhat)).
double pinball_loss(double level, double actual, double predicted);

}  // namespace curvecov
