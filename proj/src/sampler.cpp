#include "curvecov/sampler.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "curvecov/parallel.hpp"

namespace curvecov {

void VolatilityTracker::update(const Vector& residual) {
  if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("rho must lie in [0, 1)");
  if (s2.size() != residual.size()) throw std::invalid_argument("tracker size mismatch");
  s2 = rho * s2 + (1.0 - rho) * residual.cwiseProduct(residual);
}

CorrelationParts correlation_decompose(const Matrix& cov) {
  if (cov.rows() != cov.cols()) throw std::invalid_argument("covariance must be square");
  const int n = static_cast<int>(cov.rows());
  CorrelationParts parts;
  parts.scale.resize(n);
  for (int i = 0; i < n; ++i) {
    if (!(cov(i, i) > 0.0)) throw std::invalid_argument("nonpositive covariance diagonal");
    parts.scale(i) = std::sqrt(cov(i, i));
  }
  const Vector inv = parts.scale.cwiseInverse();
  parts.corr = inv.asDiagonal() * cov * inv.asDiagonal();
  parts.corr.diagonal().setOnes();
  parts.corr = 0.5 * (parts.corr + parts.corr.transpose());
  return parts;
}

Vector refined_sample_prefactored(const Vector& mu_cond, const Matrix& corr_chol,
                                  const Vector& scale, const Vector& xi) {
  return mu_cond + scale.cwiseProduct(corr_chol * xi);
}

Vector refined_sample(const Vector& mu_cond, const Matrix& corr,
                      const VolatilityTracker& tracker, const Vector& xi) {
  Eigen::LLT<Matrix> llt(corr);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("conditional correlation not positive definite");
  const Vector scale = tracker.s2.cwiseSqrt();
  return refined_sample_prefactored(mu_cond, Matrix(llt.matrixL()), scale, xi);
}

namespace {

struct ObservedState {
  std::vector<HeadsOut> heads_by_step;  // index s - lag
  long first_step = 0;
  VolatilityTracker tracker;
};

ObservedState prepare_observed(const ModelParams& p, const Matrix& values, long origin,
                               double rho) {
  ObservedState st;
  st.first_step = p.lag;
  st.heads_by_step.reserve(origin - p.lag + 1);
  for (long s = p.lag; s <= origin; ++s) {
    const Vector h = encode(p, values.middleRows(s - p.lag, p.lag));
    st.heads_by_step.push_back(heads(p, h));
  }
  st.tracker.rho = rho;
  if (p.train_residual_var.size() == p.nodes)
    st.tracker.s2 = p.train_residual_var;
  else {
    // fresh models: start from the observed mean square residual
    Vector acc = Vector::Constant(p.nodes, 1e-8);
    for (long s = p.lag; s <= origin; ++s) {
      const Vector eta =
          values.row(s).transpose() - st.heads_by_step[s - p.lag].mu;
      acc += eta.cwiseProduct(eta);
    }
    st.tracker.s2 = acc / std::max<long>(1, origin - p.lag + 1);
  }
  for (long s = p.lag; s <= origin; ++s) {
    const Vector eta = values.row(s).transpose() - st.heads_by_step[s - p.lag].mu;
    st.tracker.update(eta);
  }
  return st;
}

}  // namespace

ForecastEnsemble rollout(const ModelParams& p, const KernelBank& bank, const Matrix& values,
                         const GraphSequence& graphs, const RolloutConfig& config,
                         Ablation ablation) {
  if (config.horizon < 1) throw std::invalid_argument("horizon must be positive");
  if (config.samples < 1) throw std::invalid_argument("sample count must be positive");
  const int n = p.nodes;
  const int d = bank.window;
  const int q_len = config.horizon;
  const long origin = config.origin < 0 ? values.rows() - 1 : config.origin;
  if (origin >= values.rows()) throw std::invalid_argument("origin beyond available data");
  if (origin < first_window_end(d, p.lag))
    throw std::invalid_argument("history too short for lag and window");

  const bool diag_only = ablation == Ablation::kDiagOnly;
  const bool volatility = uses_volatility(ablation);

  const ObservedState observed = prepare_observed(p, values, origin, config.volatility_decay);
  const Vector tracker_scale = observed.tracker.s2.cwiseSqrt();

  // graph windows for each horizon step, shared across paths
  std::vector<SpatialContext> contexts;
  contexts.reserve(q_len);
  for (int q = 1; q <= q_len; ++q)
    contexts.push_back(graphs.window_context(origin + q - d + 1, origin + q));

  ForecastEnsemble ens;
  ens.origin = origin;
  ens.samples.assign(config.samples, Matrix::Zero(q_len, n));

  std::vector<std::exception_ptr> errs(config.samples);
#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (int path = 0; path < config.samples; ++path) {
    try {
      Rng rng(config.seed, 7000 + static_cast<uint64_t>(path));
      // local history: rows origin-lag-d+2 .. origin+q_len
      const long hist_base = origin - p.lag - d + 2;
      Matrix history(p.lag + d - 1 + q_len, n);
      for (long s = hist_base; s <= origin; ++s)
        history.row(s - hist_base) = values.row(s);

      // residuals of the D-1 most recent steps (observed at the start)
      std::vector<Vector> residuals;
      residuals.reserve(d);
      for (long s = origin - d + 2; s <= origin; ++s)
        residuals.push_back(values.row(s).transpose() -
                            observed.heads_by_step[s - observed.first_step].mu);

      std::vector<HeadsOut> horizon_heads;
      horizon_heads.reserve(q_len);

      for (int q = 1; q <= q_len; ++q) {
        const long step = origin + q;
        const Matrix lag_slice = history.middleRows(step - p.lag - hist_base, p.lag);
        const HeadsOut now = heads(p, encode(p, lag_slice));

        Vector xi = Vector::Zero(n);
        if (!config.zero_noise)
          for (int i = 0; i < n; ++i) xi(i) = rng.normal();

        Vector draw(n);
        if (diag_only) {
          draw = now.mu + now.diag.cwiseSqrt().cwiseProduct(xi);
        } else {
          // window covariance over steps step-d+1 .. step
          std::vector<Matrix> blocks(d);
          Vector dbat(d * n);
          for (int k = 0; k < d; ++k) {
            const long s = step - d + 1 + k;
            const HeadsOut* out;
            if (s <= origin)
              out = &observed.heads_by_step[s - observed.first_step];
            else if (s < step)
              out = &horizon_heads[s - origin - 1];
            else
              out = &now;
            blocks[k] = out->factor;
            dbat.segment(k * n, n) = out->diag;
          }
          const Matrix cmat = mixture_correlation(bank, now.logits);
          SpatialFactorParams sp = p.spatial;
          Matrix lap;
          if (uses_reweighting(ablation)) {
            const CurvatureReport rep =
                score_curvatures(*contexts[q - 1].kappas, sp.kappa0, sp.tau);
            lap = laplacian(reweight(contexts[q - 1].averaged, rep, sp.lambda));
          } else {
            lap = laplacian(contexts[q - 1].averaged);
          }
          const SpatialFactor factor = spatial_factor(lap, sp);
          const BatchCovariance cov = assemble(std::move(blocks), cmat, factor.covariance, dbat);

          Vector eta_obs(static_cast<Eigen::Index>(d - 1) * n);
          for (int k = 0; k + 1 < d; ++k)
            eta_obs.segment(k * n, n) = residuals[residuals.size() - (d - 1) + k];
          const Conditional cond = conditional_next_step(cov, eta_obs);

          Vector refined;
          if (volatility) {
            const CorrelationParts parts = correlation_decompose(cond.cov);
            Eigen::LLT<Matrix> llt(parts.corr);
            if (llt.info() != Eigen::Success)
              throw std::runtime_error("conditional correlation not positive definite");
            refined = refined_sample_prefactored(cond.mean, Matrix(llt.matrixL()),
                                                 tracker_scale, xi);
          } else {
            Eigen::LLT<Matrix> llt(cond.cov);
            if (llt.info() != Eigen::Success)
              throw std::runtime_error("conditional covariance not positive definite");
            refined = cond.mean + Matrix(llt.matrixL()) * xi;
          }
          draw = now.mu + refined;
          residuals.push_back(refined);
        }

        if (!draw.allFinite())
          throw std::runtime_error("non-finite sample at step " + std::to_string(q));
        history.row(step - hist_base) = draw.transpose();
        ens.samples[path].row(q - 1) = draw.transpose();
        horizon_heads.push_back(now);
      }
    } catch (...) {
      errs[path] = std::current_exception();
    }
  }
  for (int path = 0; path < config.samples; ++path)
    if (errs[path]) std::rethrow_exception(errs[path]);
  return ens;
}

// -------- serialization --------

void save_ensemble_csv(const ForecastEnsemble& ens, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "sample,step,node,value\n";
  char buf[40];
  for (int s = 0; s < ens.count(); ++s)
    for (int q = 0; q < ens.horizon(); ++q)
      for (int i = 0; i < ens.nodes(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", ens.samples[s](q, i));
        out << s << ',' << (ens.origin + 1 + q) << ',' << i << ',' << buf << '\n';
      }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ForecastEnsemble load_ensemble_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty ensemble file: " + path);

  struct Row {
    int sample;
    long step;
    int node;
    double value;
  };
  std::vector<Row> rows;
  int max_sample = -1, max_node = -1;
  long min_step = std::numeric_limits<long>::max(), max_step = std::numeric_limits<long>::min();
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c, v;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c, ',') ||
        !std::getline(ss, v))
      throw std::runtime_error("malformed ensemble row " + std::to_string(lineno));
    try {
      Row r{std::stoi(a), std::stol(b), std::stoi(c), std::stod(v)};
      max_sample = std::max(max_sample, r.sample);
      max_node = std::max(max_node, r.node);
      min_step = std::min(min_step, r.step);
      max_step = std::max(max_step, r.step);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw std::runtime_error("malformed ensemble row " + std::to_string(lineno));
    }
  }
  if (rows.empty()) throw std::runtime_error("ensemble file has no rows: " + path);

  ForecastEnsemble ens;
  ens.origin = min_step - 1;
  const int q_len = static_cast<int>(max_step - min_step + 1);
  ens.samples.assign(max_sample + 1, Matrix::Zero(q_len, max_node + 1));
  for (const Row& r : rows)
    ens.samples[r.sample](r.step - min_step, r.node) = r.value;
  return ens;
}

void save_ensemble_binary(const ForecastEnsemble& ens, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  const char magic[4] = {'C', 'C', 'E', 'N'};
  const uint32_t version = 1;
  const int64_t origin = ens.origin, s = ens.count(), q = ens.horizon(), n = ens.nodes();
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&origin), sizeof origin);
  out.write(reinterpret_cast<const char*>(&s), sizeof s);
  out.write(reinterpret_cast<const char*>(&q), sizeof q);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (const Matrix& m : ens.samples)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ForecastEnsemble load_ensemble_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  uint32_t version = 0;
  int64_t origin = 0, s = 0, q = 0, n = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || std::memcmp(magic, "CCEN", 4) != 0 || version != 1)
    throw std::runtime_error("not an ensemble binary: " + path);
  in.read(reinterpret_cast<char*>(&origin), sizeof origin);
  in.read(reinterpret_cast<char*>(&s), sizeof s);
  in.read(reinterpret_cast<char*>(&q), sizeof q);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || s < 1 || q < 1 || n < 1) throw std::runtime_error("corrupt ensemble binary");
  ForecastEnsemble ens;
  ens.origin = origin;
  ens.samples.assign(s, Matrix::Zero(q, n));
  for (int64_t k = 0; k < s; ++k)
    for (int64_t r = 0; r < q; ++r)
      for (int64_t c = 0; c < n; ++c) {
        double v;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        ens.samples[k](r, c) = v;
      }
  if (!in) throw std::runtime_error("corrupt ensemble binary");
  return ens;
}

}  // namespace curvecov
