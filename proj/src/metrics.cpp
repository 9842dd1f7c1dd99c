#include "curvecov/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "curvecov/parallel.hpp"

namespace curvecov {

namespace {

constexpr double kInvSqrtPi = 0.5641895835477562869480794515607726;

double normal_cdf(double z) { return 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

struct CellMetrics {
  double crps = 0.0;
  double abs_err = 0.0;  // |ensemble mean - actual|
  double q50 = 0.0, q90 = 0.0;
};

template <typename CrpsFn>
EvalReport evaluate_impl(const ForecastEnsemble& ens, const Matrix& actuals, bool parallel,
                         CrpsFn&& cell_crps) {
  const int s = ens.count(), q = ens.horizon(), n = ens.nodes();
  if (actuals.rows() != q || actuals.cols() != n)
    throw std::invalid_argument("actuals shape does not match ensemble");
  if (s < 1) throw std::invalid_argument("empty ensemble");

  std::vector<CellMetrics> cells(static_cast<size_t>(q) * n);
  const long total = static_cast<long>(q) * n;

  auto work = [&](long cell) {
    const int step = static_cast<int>(cell / n);
    const int node = static_cast<int>(cell % n);
    std::vector<double> draws(s);
    double mean = 0.0;
    for (int k = 0; k < s; ++k) {
      draws[k] = ens.samples[k](step, node);
      mean += draws[k];
    }
    mean /= s;
    CellMetrics& c = cells[cell];
    const double y = actuals(step, node);
    c.crps = cell_crps(draws, y);
    c.abs_err = std::abs(mean - y);
    c.q50 = empirical_quantile(draws, 0.5);
    c.q90 = empirical_quantile(draws, 0.9);
  };

  if (parallel) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (long cell = 0; cell < total; ++cell) work(cell);
  } else {
    for (long cell = 0; cell < total; ++cell) work(cell);
  }

  auto aggregate = [&](int step_lo, int step_hi) {
    double crps_total = 0.0, abs_actual = 0.0, mae = 0.0, ql50 = 0.0, ql90 = 0.0;
    long count = 0;
    for (int step = step_lo; step < step_hi; ++step)
      for (int node = 0; node < n; ++node) {
        const CellMetrics& c = cells[static_cast<size_t>(step) * n + node];
        const double y = actuals(step, node);
        crps_total += c.crps;
        abs_actual += std::abs(y);
        mae += c.abs_err;
        ql50 += pinball_loss(0.5, y, c.q50);
        ql90 += pinball_loss(0.9, y, c.q90);
        ++count;
      }
    // all-zero actuals: leave the aggregates unnormalized instead of 0/0
    const double denom = abs_actual > 0.0 ? abs_actual : 1.0;
    EvalReport::HorizonRow row;
    row.crps_mean = crps_total / count;
    row.crps_sum = crps_total / denom;
    row.mae = mae / count;
    return std::tuple{row, ql50 / denom, ql90 / denom};
  };

  EvalReport rep;
  auto [all, ql50, ql90] = aggregate(0, q);
  rep.crps_mean = all.crps_mean;
  rep.crps_sum = all.crps_sum;
  rep.mae = all.mae;
  rep.quantile_loss = {{0.5, ql50}, {0.9, ql90}};
  if (q >= 12) {
    for (int lead : {3, 6, 12}) {
      auto [row, a, b] = aggregate(lead - 1, lead);
      row.step = lead;
      rep.horizons.push_back(row);
    }
  }
  return rep;
}

}  // namespace

double crps_samples(const std::vector<double>& samples, double y) {
  const size_t s = samples.size();
  if (s < 2) throw std::invalid_argument("need at least 2 samples");
  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  double term1 = 0.0;
  for (double x : sorted) term1 += std::abs(x - y);
  term1 /= static_cast<double>(s);
  // sum over ordered pairs |x_i - x_j| = 2 sum_k (2k - s + 1) x_(k)
  double pair_sum = 0.0;
  for (size_t k = 0; k < s; ++k)
    pair_sum += (2.0 * static_cast<double>(k) - static_cast<double>(s) + 1.0) * sorted[k];
  const double term2 = 2.0 * pair_sum / (static_cast<double>(s) * static_cast<double>(s));
  return term1 - 0.5 * term2;
}

double crps_samples_pairwise(const std::vector<double>& samples, double y) {
  const size_t s = samples.size();
  if (s < 2) throw std::invalid_argument("need at least 2 samples");
  double term1 = 0.0, term2 = 0.0;
  for (double x : samples) term1 += std::abs(x - y);
  for (double a : samples)
    for (double b : samples) term2 += std::abs(a - b);
  return term1 / s - 0.5 * term2 / (static_cast<double>(s) * static_cast<double>(s));
}

double crps_gaussian(double mu, double sigma, double y) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - kInvSqrtPi);
}

double empirical_quantile(std::vector<double> samples, double level) {
  if (samples.empty()) throw std::invalid_argument("empty sample set");
  if (level < 0.0 || level > 1.0) throw std::invalid_argument("quantile level out of range");
  std::sort(samples.begin(), samples.end());
  const double pos = level * static_cast<double>(samples.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  if (lo + 1 >= samples.size()) return samples.back();
  const double frac = pos - static_cast<double>(lo);
  return samples[lo] + frac * (samples[lo + 1] - samples[lo]);
}

double pinball_loss(double level, double actual, double predicted) {
  const double diff = actual - predicted;
  return std::max(level * diff, (level - 1.0) * diff);
}

EvalReport evaluate(const ForecastEnsemble& ens, const Matrix& actuals, bool parallel) {
  return evaluate_impl(ens, actuals, parallel,
                       [](const std::vector<double>& d, double y) { return crps_samples(d, y); });
}

EvalReport evaluate_serial(const ForecastEnsemble& ens, const Matrix& actuals) {
  return evaluate_impl(ens, actuals, false, [](const std::vector<double>& d, double y) {
    return crps_samples_pairwise(d, y);
  });
}

bool EvalReport::all_finite() const {
  bool ok = std::isfinite(crps_mean) && std::isfinite(crps_sum) && std::isfinite(mae);
  for (const auto& [level, loss] : quantile_loss) ok = ok && std::isfinite(loss);
  for (const auto& h : horizons)
    ok = ok && std::isfinite(h.crps_mean) && std::isfinite(h.crps_sum) && std::isfinite(h.mae);
  return ok;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["crps_mean"] = crps_mean;
  j["crps_sum"] = crps_sum;
  j["mae"] = mae;
  nlohmann::json ql = nlohmann::json::object();
  for (const auto& [level, loss] : quantile_loss) {
    std::ostringstream key;
    key << "q" << level;
    ql[key.str()] = loss;
  }
  j["ql"] = ql;
  j["horizons"] = nlohmann::json::array();
  for (const auto& h : horizons)
    j["horizons"].push_back({{"step", h.step},
                             {"crps_mean", h.crps_mean},
                             {"crps_sum", h.crps_sum},
                             {"mae", h.mae}});
  return j.dump(2);
}

std::string EvalReport::table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %12s %12s %12s\n", "scope", "crps_mean", "crps_sum",
                "mae");
  out << line;
  std::snprintf(line, sizeof(line), "%-12s %12.6f %12.6f %12.6f\n", "all", crps_mean, crps_sum,
                mae);
  out << line;
  for (const auto& h : horizons) {
    std::snprintf(line, sizeof(line), "step %-7d %12.6f %12.6f %12.6f\n", h.step, h.crps_mean,
                  h.crps_sum, h.mae);
    out << line;
  }
  for (const auto& [level, loss] : quantile_loss) {
    std::snprintf(line, sizeof(line), "QL%-10.2f %12.6f\n", level, loss);
    out << line;
  }
  return out.str();
}

}  // namespace curvecov
