#include "calibra/simgen.h"

#include <cmath>
#include <limits>

#include "calibra/errors.h"
#include "calibra/matching.h"
#include "calibra/parallel.h"

namespace calibra {
namespace {

double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

// Linear predictor of level 1 against level 0.
double logit_ps(SimCase c, const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  if (c == SimCase::Case1) return 0.5 * z(0) - 0.5 * z(1) + 0.5 * z(2) - 0.5 * z(3) + 0.5 * z(4);
  return -1.0 + z(0) - 0.5 * z(1) * z(1) + std::fabs(z(2)) - 0.5 * z(3) * z(4);
}

}  // namespace

std::string case_name(SimCase c) {
  switch (c) {
    case SimCase::Case1: return "Case1";
    case SimCase::Case2: return "Case2";
    case SimCase::Case3: return "Case3";
  }
  return "Case1";
}

SimCase parse_case(const std::string& name) {
  if (name == "Case1" || name == "case1" || name == "1") return SimCase::Case1;
  if (name == "Case2" || name == "case2" || name == "2") return SimCase::Case2;
  if (name == "Case3" || name == "case3" || name == "3") return SimCase::Case3;
  throw ValidationError("unknown simulation case: " + name);
}

void check_scenario(const Scenario& s) {
  if (s.p < 5) throw ValidationError("scenario needs p >= 5");
  if (s.n < 100) throw ValidationError("scenario needs n >= 100");
  if (s.levels != 2 && s.levels != 3) throw ValidationError("scenario levels must be 2 or 3");
  if (!(s.aux_multiplier >= 0.0)) throw ValidationError("aux multiplier must be non-negative");
  if (s.runs < 1) throw ValidationError("scenario needs at least one run");
}

Eigen::MatrixXd gen_covariates(int n, int p, Rng& rng) {
  std::normal_distribution<double> nd;
  const double a = std::sqrt(0.5);
  Eigen::MatrixXd z(n, p);
  for (int i = 0; i < n; ++i) {
    const double f = nd(rng);
    for (int j = 0; j < p; ++j) z(i, j) = a * f + a * nd(rng);
  }
  return z;
}

double true_ps(SimCase c, const Eigen::Ref<const Eigen::RowVectorXd>& z) { return sigmoid(logit_ps(c, z)); }

Eigen::VectorXd true_ps_levels(SimCase c, const Eigen::Ref<const Eigen::RowVectorXd>& z, int levels) {
  const double eta = logit_ps(c, z);
  Eigen::VectorXd p(levels);
  if (levels == 2) {
    p(1) = sigmoid(eta);
    p(0) = 1.0 - p(1);
    return p;
  }
  const double m = std::fabs(eta);
  const double e0 = std::exp(-m), e1 = std::exp(eta - m), e2 = std::exp(-eta - m);
  p << e0, e1, e2;
  return p / (e0 + e1 + e2);
}

double true_cm(SimCase c, int x, const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  const double slope = 0.5 * x + 1.0;
  if (c != SimCase::Case3) return 0.5 * x + (z(0) + z(1) + z(2) + z(3) + z(4)) * slope;
  // 0.5 * {Z1 + 0.5 Z2^2 + Z2 Z3 + Z3 + I(Z4 > 0.3) + Z4 I(Z5 > 0)}, scaled by (0.5x + 1).
  const double inner = z(0) + 0.5 * z(1) * z(1) + z(1) * z(2) + z(2) + (z(3) > 0.3 ? 1.0 : 0.0) +
                       (z(4) > 0.0 ? z(3) : 0.0);
  return 0.5 * x + 0.5 * inner * slope;
}

SimStudy gen_study(const Scenario& s, Rng& rng) {
  check_scenario(s);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> unif;
  auto draw_level = [&](const Eigen::VectorXd& probs) {
    const double u = unif(rng);
    double acc = 0.0;
    for (Eigen::Index k = 0; k + 1 < probs.size(); ++k) {
      acc += probs(k);
      if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(probs.size() - 1);
  };

  SimStudy out;
  MainDataset& main = out.main;
  main.z = gen_covariates(s.n, s.p, rng);
  main.y.resize(s.n);
  main.x.resize(static_cast<std::size_t>(s.n));
  out.true_ps.resize(s.n, s.levels);
  out.true_cm.resize(s.n, s.levels);
  for (int i = 0; i < s.n; ++i) {
    const Eigen::VectorXd probs = true_ps_levels(s.sim_case, main.z.row(i), s.levels);
    out.true_ps.row(i) = probs.transpose();
    for (int k = 0; k < s.levels; ++k) out.true_cm(i, k) = true_cm(s.sim_case, k, main.z.row(i));
    const int x = draw_level(probs);
    main.x[static_cast<std::size_t>(i)] = x;
    main.y(i) = out.true_cm(i, x) + nd(rng);
  }
  for (int j = 0; j < s.p; ++j) main.column_names.push_back("z" + std::to_string(j + 1));
  main.coding = LevelCoding::identity(s.levels);

  const int m = static_cast<int>(std::floor(s.aux_multiplier * s.n));
  AuxDataset& aux = out.aux;
  Eigen::MatrixXd za = gen_covariates(m, s.p, rng);
  if (s.covariate_shift != 0.0) {
    za.leftCols(2).array() += s.covariate_shift;
    za.rightCols(s.p - 2).array() += 2.0 * s.covariate_shift / 3.0;
  }
  aux.y.resize(m);
  aux.x.resize(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const int x = draw_level(true_ps_levels(s.sim_case, za.row(i), s.levels));
    aux.x[static_cast<std::size_t>(i)] = x;
    aux.y(i) = true_cm(s.sim_case, x, za.row(i)) + nd(rng) + s.hetero_shift;
  }
  aux.shared = za.leftCols(2);
  aux.shared_names = {"z1", "z2"};
  return out;
}

OracleTruth true_tau_oracle(SimCase c, int x, long long draws, Rng& rng) {
  if (draws < 2) throw ValidationError("oracle needs at least two draws");
  // Only Z1..Z5 enter the outcome model.
  const long long block = 100000;
  long double sum = 0.0L, sumsq = 0.0L;
  for (long long done = 0; done < draws; done += block) {
    const int b = static_cast<int>(std::min(block, draws - done));
    const Eigen::MatrixXd z = gen_covariates(b, 5, rng);
    for (int i = 0; i < b; ++i) {
      const double v = true_cm(c, x, z.row(i));
      sum += v;
      sumsq += static_cast<long double>(v) * v;
    }
  }
  const long double n = static_cast<long double>(draws);
  const long double mean = sum / n;
  const long double var = (sumsq - n * mean * mean) / (n - 1);
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(var / n))};
}

const MethodSummary& MonteCarloTable::find(int level, const std::string& method) const {
  for (const auto& r : rows)
    if (r.level == level && r.method == method) return r;
  throw ValidationError("no Monte Carlo summary for " + method + " at level " + std::to_string(level));
}

MonteCarloTable run_monte_carlo(const Scenario& s, const StudyConfig& config,
                                const MonteCarloOptions& options) {
  check_scenario(s);
  check_config(config);
  MonteCarloTable table;
  table.scenario = s;
  if (options.truth) {
    if (static_cast<int>(options.truth->size()) != s.levels)
      throw ValidationError("truth must list one value per exposure level");
    table.truth = *options.truth;
    table.truth_se.assign(table.truth.size(), 0.0);
  } else {
    for (int k = 0; k < s.levels; ++k) {
      Rng rng = make_rng(s.seed, 0xFFFF0000ULL + static_cast<std::uint64_t>(k));
      const OracleTruth t = true_tau_oracle(s.sim_case, k, options.oracle_draws, rng);
      table.truth.push_back(t.value);
      table.truth_se.push_back(t.se);
    }
  }

  const auto runs = static_cast<std::size_t>(s.runs);
  table.replicates.assign(runs, {});
  std::vector<std::vector<std::string>> names(runs);
  StudyConfig inner = config;
  inner.threads = 1;
  const int workers = options.threads > 0 ? options.threads : config.threads;

  parallel_for(runs, workers, [&](std::size_t r) {
    ReplicateRecord& rec = table.replicates[r];
    try {
      Rng rng = make_rng(s.seed, r);
      const SimStudy study = gen_study(s, rng);
      StudyConfig cfg = inner;
      cfg.seed = derive_seed(config.seed, r);
      CrossFitOptions opts;
      opts.lenient = true;
      AuxDataset matched;
      if (options.match_ratio > 0) {
        matched = match_auxiliary(study.main, study.aux, options.match_ratio, derive_seed(cfg.seed, 77));
        opts.extra_aux.emplace_back("matched", &matched);
      }
      CrossFitResult fit = cross_fit_estimate(study.main, study.aux, cfg, opts);
      if (options.bootstrap) bootstrap_inference(study.main, study.aux, cfg, fit, opts);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      for (const auto& e : fit.estimates) {
        names[r].push_back(e.method);
        rec.tau.push_back(e.tau);
        rec.bsd.push_back(e.bsd.value_or(nan));
        rec.ci_low.push_back(e.ci_low.value_or(nan));
        rec.ci_high.push_back(e.ci_high.value_or(nan));
      }
    } catch (const std::exception& e) {
      rec = ReplicateRecord{};
      rec.error = e.what();
    }
  });

  std::size_t ref = runs;
  for (std::size_t r = 0; r < runs; ++r)
    if (table.replicates[r].error.empty()) {
      ref = r;
      break;
    }
  if (ref == runs) throw ValidationError("every Monte Carlo replicate failed: " + table.replicates[0].error);
  const std::size_t slots = names[ref].size();
  const std::size_t per_level = slots / static_cast<std::size_t>(s.levels);
  for (std::size_t k = 0; k < per_level; ++k) table.methods.push_back(names[ref][k]);

  for (std::size_t k = 0; k < slots; ++k) {
    MethodSummary row;
    row.method = names[ref][k];
    row.level = static_cast<int>(k / per_level);
    row.truth = table.truth[static_cast<std::size_t>(row.level)];
    double sum = 0.0, bsd_sum = 0.0;
    int bsd_count = 0, covered = 0, ci_count = 0;
    for (const auto& rec : table.replicates) {
      if (!rec.error.empty() || !std::isfinite(rec.tau[k])) {
        ++row.failures;
        continue;
      }
      ++row.count;
      sum += rec.tau[k];
      if (std::isfinite(rec.bsd[k])) {
        bsd_sum += rec.bsd[k];
        ++bsd_count;
        ++ci_count;
        if (rec.ci_low[k] <= row.truth && row.truth <= rec.ci_high[k]) ++covered;
      }
    }
    if (row.count > 0) {
      const double mean = sum / row.count;
      row.bias = mean - row.truth;
      double ss = 0.0;
      for (const auto& rec : table.replicates)
        if (rec.error.empty() && std::isfinite(rec.tau[k])) ss += (rec.tau[k] - mean) * (rec.tau[k] - mean);
      row.mcsd = row.count > 1 ? std::sqrt(ss / (row.count - 1)) : 0.0;
    }
    if (bsd_count > 0) row.mean_bsd = bsd_sum / bsd_count;
    if (ci_count > 0) row.coverage = static_cast<double>(covered) / ci_count;
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace calibra
