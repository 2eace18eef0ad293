#include "calibra/estimators.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "calibra/errors.h"
#include "calibra/parallel.h"
#include "calibra/rng.h"

namespace calibra {
namespace {

constexpr double kCertificate = 1e-6;

std::vector<Eigen::Index> group_rows(std::span<const int> x, int level) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] == level) rows.push_back(static_cast<Eigen::Index>(i));
  return rows;
}

bool is_constant(const Eigen::VectorXd& v) {
  if (v.size() == 0) return true;
  const double scale = std::max(1.0, v.cwiseAbs().maxCoeff());
  return v.maxCoeff() - v.minCoeff() <= 1e-12 * scale;
}

// Solves the calibration problem on G after removing zero, constant and
// collinear columns.
ElSolution calibrate(const Eigen::MatrixXd& G, const ElOptions& options, std::vector<int>& kept,
                     std::vector<int>& dropped) {
  ColumnFilter filter = drop_collinear_columns(G, 1e-12, true);
  if (filter.kept.size() == 1 && is_constant(filter.matrix.col(0))) {
    filter.kept.clear();
    filter.matrix.resize(G.rows(), 0);
  }
  kept = filter.kept;
  dropped.clear();
  for (int j = 0; j < static_cast<int>(G.cols()); ++j)
    if (std::find(kept.begin(), kept.end(), j) == kept.end()) dropped.push_back(j);
  ElSolution sol = solve_el(filter.matrix, 1.0, options);
  if (filter.matrix.cols() > 0) {
    const double cert = (filter.matrix.transpose() * sol.weights).cwiseAbs().maxCoeff();
    if (!(cert <= kCertificate))
      throw ConvexHullViolation("calibration moment certificate failed (" + std::to_string(cert) + ")");
  }
  return sol;
}

double n_eff(const Eigen::VectorXd& w) {
  const double s = w.sum();
  return s * s / w.squaredNorm();
}

void check_aligned(const Eigen::VectorXd& y, std::span<const int> x, const CandidatePredictions& preds) {
  if (static_cast<Eigen::Index>(x.size()) != y.size() || y.size() != preds.rows())
    throw ValidationError("outcome, exposure and candidate predictions are not aligned");
}

}  // namespace

LevelEstimate raw_mean(const MainDataset& main, int level) {
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < main.size(); ++i)
    if (main.x[i] == level) {
      s += main.y(static_cast<Eigen::Index>(i));
      ++count;
    }
  if (count == 0) throw ValidationError("exposure level " + std::to_string(level) + " has no units");
  LevelEstimate est;
  est.level = level;
  est.method = "Raw";
  est.tau = s / static_cast<double>(count);
  est.halves = {est.tau, est.tau};
  est.n_eff = static_cast<double>(count);
  return est;
}

double aiptw(const Eigen::VectorXd& y, std::span<const int> x, const Eigen::VectorXd& ps,
             const Eigen::VectorXd& mu, int level) {
  const Eigen::Index n = y.size();
  if (static_cast<Eigen::Index>(x.size()) != n || ps.size() != n || mu.size() != n)
    throw ValidationError("aiptw inputs are not aligned");
  if (n == 0) throw ValidationError("aiptw needs at least one unit");
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double pi = ps(i);
    if (!(pi > 0.0 && pi < 1.0)) throw ValidationError("propensity score outside (0, 1)");
    const double ind = x[static_cast<std::size_t>(i)] == level ? 1.0 : 0.0;
    s += ind / pi * y(i) - (ind - pi) / pi * mu(i);
  }
  return s / static_cast<double>(n);
}

Eigen::MatrixXd build_g(const CandidatePredictions& preds, int level,
                        std::span<const Eigen::Index> group) {
  const Eigen::MatrixXd& ps = preds.ps.at(static_cast<std::size_t>(level));
  const Eigen::MatrixXd& cm = preds.cm.at(static_cast<std::size_t>(level));
  const Eigen::Index j1 = ps.cols(), j2 = cm.cols();
  const Eigen::RowVectorXd ps_bar = ps.colwise().mean();
  const Eigen::RowVectorXd cm_bar = cm.colwise().mean();
  Eigen::MatrixXd g(static_cast<Eigen::Index>(group.size()), j1 + j2);
  for (std::size_t r = 0; r < group.size(); ++r) {
    const auto i = group[r];
    const auto row = static_cast<Eigen::Index>(r);
    g.row(row).head(j1) = ps.row(i) - ps_bar;
    g.row(row).tail(j2) = cm.row(i) - cm_bar;
  }
  return g;
}

Eigen::MatrixXd build_g_star(const CandidatePredictions& preds, const Eigen::VectorXd& scores,
                             int level, std::span<const Eigen::Index> group) {
  const Eigen::MatrixXd& ps = preds.ps.at(static_cast<std::size_t>(level));
  const Eigen::MatrixXd& cm = preds.cm.at(static_cast<std::size_t>(level));
  if (scores.size() != cm.rows()) throw ValidationError("integration scores are not aligned to predictions");
  const Eigen::Index j1 = ps.cols(), j2 = cm.cols();
  const Eigen::RowVectorXd ps_bar = ps.colwise().mean();
  const Eigen::MatrixXd weighted = scores.asDiagonal() * cm;
  const Eigen::RowVectorXd weighted_bar = weighted.colwise().mean();
  const Eigen::RowVectorXd eta = cm.colwise().mean();
  Eigen::MatrixXd g(static_cast<Eigen::Index>(group.size()), j1 + j2);
  for (std::size_t r = 0; r < group.size(); ++r) {
    const auto i = group[r];
    const auto row = static_cast<Eigen::Index>(r);
    g.row(row).head(j1) = ps.row(i) - ps_bar;
    g.row(row).tail(j2) = weighted.row(i) - weighted_bar + (1.0 - scores(i)) * eta;
  }
  return g;
}

CalibratedEstimate cml(const Eigen::VectorXd& y, std::span<const int> x,
                       const CandidatePredictions& preds, int level, const ElOptions& options) {
  check_aligned(y, x, preds);
  const auto group = group_rows(x, level);
  if (group.empty()) throw ValidationError("exposure level " + std::to_string(level) + " has no evaluation units");
  CalibratedEstimate est;
  const ElSolution sol = calibrate(build_g(preds, level, group), options, est.kept_columns, est.dropped_columns);
  est.weights = sol.weights;
  est.iterations = sol.iterations;
  double num = 0.0, den = 0.0;
  for (std::size_t r = 0; r < group.size(); ++r) {
    const double w = sol.weights(static_cast<Eigen::Index>(r));
    num += w * y(group[r]);
    den += w;
  }
  est.tau = num / den;
  est.n_eff = n_eff(sol.weights);
  return est;
}

CalibratedEstimate cmlib(const Eigen::VectorXd& y, std::span<const int> x,
                         const CandidatePredictions& preds, const Eigen::VectorXd& scores,
                         int level, const ElOptions& options) {
  check_aligned(y, x, preds);
  const auto group = group_rows(x, level);
  if (group.empty()) throw ValidationError("exposure level " + std::to_string(level) + " has no evaluation units");
  CalibratedEstimate est;
  const ElSolution sol =
      calibrate(build_g_star(preds, scores, level, group), options, est.kept_columns, est.dropped_columns);
  est.iterations = sol.iterations;
  est.weights = sol.weights;
  Eigen::VectorXd combined(static_cast<Eigen::Index>(group.size()));
  double num = 0.0, den = 0.0;
  for (std::size_t r = 0; r < group.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    const double w = scores(group[r]) * sol.weights(row);
    combined(row) = w;
    num += w * y(group[r]);
    den += w;
  }
  est.tau = num / den;
  est.n_eff = n_eff(combined);
  return est;
}

namespace {

int theta_dim(int levels, WorkingFunction form) { return form == WorkingFunction::FormI ? 1 : levels; }

// Row i of the working function design: (1, I(X=1), ..., I(X=L)).
Eigen::RowVectorXd design_row(int level, int levels) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(levels);
  row(0) = 1.0;
  if (level > 0) row(level) = 1.0;
  return row;
}

}  // namespace

Eigen::VectorXd integration_theta(const MainDataset& main, const AuxDataset& aux, WorkingFunction form) {
  const std::size_t n = main.size(), N = n + aux.size();
  if (N < 2) throw ValidationError("integration needs at least two pooled units");
  if (form == WorkingFunction::FormI) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < main.y.size(); ++i) s += main.y(i);
    for (Eigen::Index i = 0; i < aux.y.size(); ++i) s += aux.y(i);
    return Eigen::VectorXd::Constant(1, s / static_cast<double>(N));
  }
  const int k = main.levels();
  if (k < 2) throw RankDeficiency("working function design is rank deficient: a single exposure level");
  Eigen::MatrixXd D(static_cast<Eigen::Index>(N), k);
  Eigen::VectorXd y(static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < n; ++i) {
    D.row(static_cast<Eigen::Index>(i)) = design_row(main.x[i], k);
    y(static_cast<Eigen::Index>(i)) = main.y(static_cast<Eigen::Index>(i));
  }
  for (std::size_t i = 0; i < aux.size(); ++i) {
    D.row(static_cast<Eigen::Index>(n + i)) = design_row(aux.x[i], k);
    y(static_cast<Eigen::Index>(n + i)) = aux.y(static_cast<Eigen::Index>(i));
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(D);
  qr.setThreshold(1e-12);
  if (qr.rank() < k) throw RankDeficiency("working function design is rank deficient: an exposure level has no pooled units");
  return qr.solve(y);
}

IntegrationResult integration_scores(const MainDataset& main, const AuxDataset& aux,
                                     const Eigen::VectorXd& theta, WorkingFunction form,
                                     const ElOptions& options) {
  const std::size_t n = main.size(), N = n + aux.size();
  const int d = theta_dim(main.levels(), form);
  if (theta.size() != d) throw ValidationError("working function parameter has the wrong length");
  IntegrationResult out;
  out.theta = theta;
  if (aux.empty()) {
    out.scores = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    out.dual = Eigen::VectorXd::Zero(2 * d);
    return out;
  }
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N), 2 * d);
  auto fill = [&](Eigen::Index i, double y, int level, bool is_main) {
    Eigen::RowVectorXd h(d);
    if (form == WorkingFunction::FormI) {
      h(0) = y - theta(0);
    } else {
      const Eigen::RowVectorXd row = design_row(level, d);
      h = row * (y - row.dot(theta));
    }
    H.row(i).segment(is_main ? 0 : d, d) = h;
  };
  for (std::size_t i = 0; i < n; ++i)
    fill(static_cast<Eigen::Index>(i), main.y(static_cast<Eigen::Index>(i)), main.x[i], true);
  for (std::size_t i = 0; i < aux.size(); ++i)
    fill(static_cast<Eigen::Index>(n + i), aux.y(static_cast<Eigen::Index>(i)), aux.x[i], false);

  ColumnFilter filter = drop_collinear_columns(H, 1e-12, false);
  if (filter.kept.size() == 1 && filter.matrix.col(0).cwiseAbs().maxCoeff() == 0.0) {
    filter.kept.clear();
    filter.matrix.resize(H.rows(), 0);
  }
  ElSolution sol;
  try {
    sol = solve_el(filter.matrix, static_cast<double>(N), options);
  } catch (const ConvexHullViolation& e) {
    throw ConvexHullViolation(std::string("auxiliary data incompatible with main data moments: ") + e.what());
  }
  if (filter.matrix.cols() > 0) {
    const double cert = (filter.matrix.transpose() * sol.weights).cwiseAbs().maxCoeff();
    if (!(cert <= kCertificate * static_cast<double>(N)))
      throw ConvexHullViolation("auxiliary data incompatible with main data moments: certificate " +
                                std::to_string(cert));
  }
  out.scores = sol.weights;
  out.dual = Eigen::VectorXd::Zero(2 * d);
  for (std::size_t k = 0; k < filter.kept.size(); ++k)
    out.dual(filter.kept[k]) = sol.dual(static_cast<Eigen::Index>(k));
  out.kept_columns = filter.kept;
  out.iterations = sol.iterations;
  out.max_constraint_violation = sol.max_constraint_violation;
  return out;
}

std::array<std::vector<std::size_t>, 2> stratified_halves(std::span<const int> x, int levels,
                                                          std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 2> halves;
  Rng rng = make_rng(seed, 0);
  // Alternate which half receives the odd unit so half sizes stay balanced.
  int odd = 0;
  for (int k = 0; k < levels; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] == k) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t first = members.size() / 2 + ((members.size() % 2 == 1 && odd++ % 2 == 0) ? 1 : 0);
    halves[0].insert(halves[0].end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(first));
    halves[1].insert(halves[1].end(), members.begin() + static_cast<std::ptrdiff_t>(first), members.end());
  }
  std::sort(halves[0].begin(), halves[0].end());
  std::sort(halves[1].begin(), halves[1].end());
  return halves;
}

const LevelEstimate& CrossFitResult::find(int level, const std::string& method) const {
  for (const auto& e : estimates)
    if (e.level == level && e.method == method) return e;
  throw ValidationError("no estimate for method " + method + " at level " + std::to_string(level));
}

namespace {

struct AiptwPair {
  std::size_t ps = 0;
  std::size_t cm = 0;
  std::string name;
};

std::vector<AiptwPair> aiptw_pairs(const StudyConfig& config) {
  std::vector<AiptwPair> pairs;
  std::vector<bool> used(config.cm_candidates.size(), false);
  for (std::size_t a = 0; a < config.ps_candidates.size(); ++a) {
    const auto fam = family_of(config.ps_candidates[a].kind);
    for (std::size_t b = 0; b < config.cm_candidates.size(); ++b) {
      if (used[b] || family_of(config.cm_candidates[b].kind) != fam) continue;
      used[b] = true;
      std::string name = "AIPTW." + family_tag(fam);
      int dup = 0;
      for (const auto& p : pairs)
        if (p.name.rfind(name, 0) == 0) ++dup;
      if (dup > 0) name += std::to_string(dup + 1);
      pairs.push_back({a, b, name});
      break;
    }
  }
  return pairs;
}

std::string half_context(int level_code, int half) {
  return "exposure level " + std::to_string(level_code) + ", evaluation half " + std::to_string(half + 1);
}

}  // namespace

std::vector<std::string> aiptw_methods(const StudyConfig& config) {
  std::vector<std::string> names;
  for (const auto& p : aiptw_pairs(config)) names.push_back(p.name);
  return names;
}

CrossFitResult cross_fit_estimate(const MainDataset& main, const AuxDataset& aux,
                                  const StudyConfig& config, const CrossFitOptions& options) {
  check_config(config);
  const int levels = main.levels();
  const ElOptions el{config.el_tolerance, config.el_max_iter, 30};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CrossFitResult out;
  const double N = static_cast<double>(main.size() + aux.size());
  out.rho = 1.0 - static_cast<double>(main.size()) / N;

  // Integration scores on the full data: the primary aux set first, then
  // any extra sets. A failed set leaves its CMLIB column NaN when lenient.
  std::vector<std::pair<std::string, const AuxDataset*>> sets{{"CMLIB", &aux}};
  for (const auto& [name, set] : options.extra_aux) sets.emplace_back("CMLIB." + name, set);
  std::vector<std::optional<Eigen::VectorXd>> main_scores(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    try {
      const Eigen::VectorXd theta = integration_theta(main, *sets[s].second, config.working_function);
      IntegrationResult ir = integration_scores(main, *sets[s].second, theta, config.working_function, el);
      main_scores[s] = ir.scores.head(static_cast<Eigen::Index>(main.size()));
      if (s == 0) out.integration = std::move(ir);
    } catch (const ConvexHullViolation& e) {
      if (!options.lenient) throw;
      out.warnings.push_back(sets[s].first + ": " + e.what());
    } catch (const RankDeficiency& e) {
      if (!options.lenient) throw;
      out.warnings.push_back(sets[s].first + ": " + e.what());
    }
  }

  out.halves = stratified_halves(main.x, levels, derive_seed(config.seed, 1));
  const auto pairs = aiptw_pairs(config);
  const std::size_t cml_slot = 1 + pairs.size();
  const std::size_t per_level = cml_slot + 1 + sets.size();
  out.estimates.resize(static_cast<std::size_t>(levels) * per_level);
  for (int k = 0; k < levels; ++k) {
    auto* slot = &out.estimates[static_cast<std::size_t>(k) * per_level];
    slot[0] = raw_mean(main, k);
    for (std::size_t a = 0; a < pairs.size(); ++a) slot[1 + a].method = pairs[a].name;
    slot[cml_slot].method = "CML";
    for (std::size_t s = 0; s < sets.size(); ++s) slot[cml_slot + 1 + s].method = sets[s].first;
    for (std::size_t s = 1; s < per_level; ++s) {
      slot[s].level = k;
      if (s >= cml_slot) slot[s].n_eff = 0.0;
    }
  }

  for (int h = 0; h < 2; ++h) {
    const auto hu = static_cast<std::size_t>(h);
    const auto& eval = out.halves[hu];
    const auto& train = out.halves[1 - hu];
    CandidateSet cand = assemble_candidates(main, config, train, eval, derive_seed(config.seed, 10 + hu),
                                            options.frozen ? &(*options.frozen)[hu] : nullptr);
    out.tuning[hu] = std::move(cand.tuning);
    const auto& preds = cand.predictions;
    for (const auto& w : preds.warnings) out.warnings.push_back("half " + std::to_string(h + 1) + ": " + w);
    const MainDataset part = main.subset(eval);

    for (int k = 0; k < levels; ++k) {
      auto* slot = &out.estimates[static_cast<std::size_t>(k) * per_level];
      const auto ku = static_cast<std::size_t>(k);
      for (std::size_t a = 0; a < pairs.size(); ++a)
        slot[1 + a].halves[hu] = aiptw(part.y, part.x, preds.ps[ku].col(static_cast<Eigen::Index>(pairs[a].ps)),
                                       preds.cm[ku].col(static_cast<Eigen::Index>(pairs[a].cm)), k);
      const int code = static_cast<int>(main.coding.codes[ku]);

      auto record = [&](LevelEstimate& target, const std::string& method, auto&& solve) {
        try {
          const CalibratedEstimate r = solve();
          target.halves[hu] = r.tau;
          *target.n_eff += r.n_eff;
          if (!r.dropped_columns.empty()) {
            std::ostringstream msg;
            msg << method << " " << half_context(code, h) << ": dropped constraint column(s)";
            for (int j : r.dropped_columns) msg << ' ' << j;
            out.diagnostics.push_back(msg.str());
          }
        } catch (const ConvexHullViolation& e) {
          if (!options.lenient) throw ConvexHullViolation(half_context(code, h) + ": " + e.what());
          target.halves[hu] = nan;
          out.warnings.push_back(method + " " + half_context(code, h) + ": " + e.what());
        } catch (const RankDeficiency& e) {
          if (!options.lenient) throw RankDeficiency(half_context(code, h) + ": " + e.what());
          target.halves[hu] = nan;
          out.warnings.push_back(method + " " + half_context(code, h) + ": " + e.what());
        }
      };
      record(slot[cml_slot], "CML", [&] { return cml(part.y, part.x, preds, k, el); });
      for (std::size_t s = 0; s < sets.size(); ++s) {
        auto& target = slot[cml_slot + 1 + s];
        if (!main_scores[s]) {
          target.halves[hu] = nan;
          continue;
        }
        Eigen::VectorXd scores(static_cast<Eigen::Index>(eval.size()));
        for (std::size_t r = 0; r < eval.size(); ++r)
          scores(static_cast<Eigen::Index>(r)) = (*main_scores[s])(static_cast<Eigen::Index>(eval[r]));
        record(target, sets[s].first, [&] { return cmlib(part.y, part.x, preds, scores, k, el); });
      }
    }
  }
  for (auto& e : out.estimates)
    if (e.method != "Raw") e.tau = 0.5 * (e.halves[0] + e.halves[1]);
  return out;
}

void apply_normal_inference(LevelEstimate& estimate, double bsd) {
  estimate.bsd = bsd;
  estimate.ci_low = estimate.tau - 1.96 * bsd;
  estimate.ci_high = estimate.tau + 1.96 * bsd;
  if (bsd > 0.0)
    estimate.p_value = std::erfc(std::fabs(estimate.tau / bsd) / std::sqrt(2.0));
  else
    estimate.p_value = estimate.tau == 0.0 ? 1.0 : 0.0;
}

BootstrapSummary bootstrap_inference(const MainDataset& main, const AuxDataset& aux,
                                     const StudyConfig& config, CrossFitResult& point,
                                     const CrossFitOptions& options) {
  if (config.bootstrap_reps < 2) throw ValidationError("bootstrap needs at least 2 replicates");
  const auto reps = static_cast<std::size_t>(config.bootstrap_reps);
  BootstrapSummary summary;
  summary.requested = config.bootstrap_reps;
  summary.replicates.assign(reps, {});
  std::vector<std::string> reasons(reps);
  const std::array<TuningRecord, 2> frozen = point.tuning;

  auto resample = [](const AuxDataset& set, Rng& rng) {
    std::vector<std::size_t> rows(set.size());
    if (!set.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
      for (auto& r : rows) r = pick(rng);
    }
    return set.subset(rows);
  };

  parallel_for(reps, config.threads, [&](std::size_t b) {
    Rng rng = make_rng(config.seed, 1'000'000 + b);
    std::uniform_int_distribution<std::size_t> pick_main(0, main.size() - 1);
    std::vector<std::size_t> rows(main.size());
    for (auto& r : rows) r = pick_main(rng);
    const AuxDataset aux_b = resample(aux, rng);
    std::vector<AuxDataset> extra_b;
    extra_b.reserve(options.extra_aux.size());
    for (const auto& extra : options.extra_aux) extra_b.push_back(resample(*extra.second, rng));
    CrossFitOptions opts;
    opts.frozen = &frozen;
    opts.lenient = options.lenient;
    for (std::size_t e = 0; e < extra_b.size(); ++e)
      opts.extra_aux.emplace_back(options.extra_aux[e].first, &extra_b[e]);
    StudyConfig rep = config;
    rep.seed = derive_seed(config.seed, 2'000'000 + b);
    try {
      const MainDataset m = main.subset(rows);
      for (auto c : m.level_counts())
        if (c < kMinUnitsPerLevel) throw ValidationError("resample left an exposure level too small");
      const CrossFitResult r = cross_fit_estimate(m, aux_b, rep, opts);
      std::vector<double> values;
      values.reserve(r.estimates.size());
      for (const auto& e : r.estimates) values.push_back(e.tau);
      summary.replicates[b] = std::move(values);
    } catch (const std::exception& e) {
      reasons[b] = e.what();
    }
  });

  for (std::size_t b = 0; b < reps; ++b) {
    if (summary.replicates[b].empty()) {
      ++summary.failed;
      summary.failure_reasons.push_back("replicate " + std::to_string(b) + ": " + reasons[b]);
    } else {
      ++summary.succeeded;
    }
  }
  if (summary.succeeded == 0) throw ConvexHullViolation("all bootstrap replicates failed");
  summary.unreliable = summary.failed * 10 > summary.requested;

  for (std::size_t k = 0; k < point.estimates.size(); ++k) {
    double mean = 0.0;
    int count = 0;
    for (const auto& r : summary.replicates)
      if (!r.empty() && std::isfinite(r[k])) {
        mean += r[k];
        ++count;
      }
    if (count < 2) continue;
    mean /= count;
    double ss = 0.0;
    for (const auto& r : summary.replicates)
      if (!r.empty() && std::isfinite(r[k])) ss += (r[k] - mean) * (r[k] - mean);
    apply_normal_inference(point.estimates[k], std::sqrt(ss / (count - 1)));
  }
  return summary;
}

InfluenceOracle influence_variance(const MainDataset& main, const Eigen::VectorXd& true_ps,
                                   const Eigen::VectorXd& true_mu, int level, double tau) {
  const auto n = static_cast<Eigen::Index>(main.size());
  if (true_ps.size() != n || true_mu.size() != n) throw ValidationError("true nuisances are not aligned");
  InfluenceOracle out;
  out.f.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ind = main.x[static_cast<std::size_t>(i)] == level ? 1.0 : 0.0;
    const double pi = true_ps(i);
    out.f(i) = ind / pi * main.y(i) - (ind - pi) / pi * true_mu(i) - tau;
  }
  out.sigma2 = out.f.squaredNorm() / static_cast<double>(n);
  return out;
}

}  // namespace calibra
