#include <algorithm>
#include <cmath>
#include <vector>

#include "calibra/estimators.h"
#include "calibra/simgen.h"
#include "doctest.h"

using namespace calibra;

namespace {

// Single-candidate predictions built from the true nuisance functions.
CandidatePredictions true_candidates(const SimStudy& st) {
  CandidatePredictions preds;
  for (Eigen::Index x = 0; x < st.true_ps.cols(); ++x) {
    preds.ps.push_back(st.true_ps.col(x));
    preds.cm.push_back(st.true_cm.col(x));
  }
  return preds;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double e : v) s += e;
  return s / static_cast<double>(v.size());
}

double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double e : v) s += (e - m) * (e - m);
  return s / static_cast<double>(v.size() - 1);
}

// Anderson-Darling statistic with estimated mean and variance, including the
// small-sample correction (1 + 0.75/n + 2.25/n^2).
double anderson_darling(std::vector<double> v) {
  const double m = mean(v), sd = std::sqrt(variance(v));
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  double a = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double lo = 0.5 * std::erfc(-(v[i] - m) / sd / std::sqrt(2.0));
    const double hi = 0.5 * std::erfc(-(v[v.size() - 1 - i] - m) / sd / std::sqrt(2.0));
    a += (2.0 * static_cast<double>(i) + 1.0) * (std::log(lo) + std::log1p(-hi));
  }
  const double a2 = -n - a / n;
  return a2 * (1.0 + 0.75 / n + 2.25 / (n * n));
}

}  // namespace

TEST_CASE("Anderson-Darling reference values") {
  // Exact normal quantiles give a tiny statistic; a uniform sample a large one.
  std::vector<double> q, u;
  for (int i = 1; i <= 200; ++i) {
    const double pr = (i - 0.5) / 200.0;
    double lo = -10, hi = 10;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      (0.5 * std::erfc(-mid / std::sqrt(2.0)) < pr ? lo : hi) = mid;
    }
    q.push_back(lo);
    u.push_back(pr);
  }
  CHECK(anderson_darling(q) < 0.1);
  CHECK(anderson_darling(u) > 1.035);
}

TEST_CASE("AIPTW with true nuisances is unbiased") {
  Scenario s;
  s.n = 1000;
  std::vector<double> est;
  for (int r = 0; r < 100; ++r) {
    Rng rng = make_rng(31, static_cast<std::uint64_t>(r));
    const SimStudy st = gen_study(s, rng);
    est.push_back(aiptw(st.main.y, st.main.x, st.true_ps.col(1), st.true_cm.col(1), 1));
  }
  const double se = std::sqrt(variance(est) / 100.0);
  CHECK(std::fabs(mean(est) - 0.5) < 3.0 * se);
}

TEST_CASE("influence function has mean zero") {
  Scenario s;
  s.n = 20000;
  Rng rng(41);
  const SimStudy st = gen_study(s, rng);
  for (int x = 0; x < 2; ++x) {
    const auto inf = influence_variance(st.main, st.true_ps.col(x), st.true_cm.col(x), x, x == 1 ? 0.5 : 0.0);
    const double sd = std::sqrt(inf.sigma2);
    CHECK(std::fabs(inf.f.mean()) < 3.0 * sd / std::sqrt(20000.0));
  }
}

TEST_CASE("standardized CML estimates are normal and match the influence variance") {
  Scenario s;
  s.n = 2000;
  const int reps = 400;
  std::vector<double> scaled, sigma2;
  for (int r = 0; r < reps; ++r) {
    Rng rng = make_rng(51, static_cast<std::uint64_t>(r));
    const SimStudy st = gen_study(s, rng);
    const auto preds = true_candidates(st);
    const double tau = cml(st.main.y, st.main.x, preds, 1).tau;
    scaled.push_back(std::sqrt(2000.0) * (tau - 0.5));
    sigma2.push_back(influence_variance(st.main, st.true_ps.col(1), st.true_cm.col(1), 1, 0.5).sigma2);
  }
  // Critical value of the corrected statistic at the 1% level.
  CHECK(anderson_darling(scaled) < 1.035);
  const double ratio = variance(scaled) / mean(sigma2);
  CHECK(ratio >= 0.8);
  CHECK(ratio <= 1.25);
}

TEST_CASE("information borrowing reduces variance, more so with more auxiliary data") {
  auto run = [](double aux_multiplier) {
    Scenario s;
    s.n = 500;
    s.aux_multiplier = aux_multiplier;
    std::vector<double> a, b;
    for (int r = 0; r < 200; ++r) {
      Rng rng = make_rng(61, static_cast<std::uint64_t>(r));
      const SimStudy st = gen_study(s, rng);
      const auto preds = true_candidates(st);
      const Eigen::VectorXd theta = integration_theta(st.main, st.aux, WorkingFunction::FormI);
      const auto integ = integration_scores(st.main, st.aux, theta, WorkingFunction::FormI);
      const Eigen::VectorXd scores = integ.scores.head(500);
      a.push_back(cml(st.main.y, st.main.x, preds, 1).tau);
      b.push_back(cmlib(st.main.y, st.main.x, preds, scores, 1).tau);
    }
    return variance(b) / variance(a);
  };
  const double small = run(2.0);
  const double large = run(10.0);
  MESSAGE("variance ratio CMLIB/CML: aux 2n " << small << ", aux 10n " << large);
  CHECK(small < 1.0);
  CHECK(large < small);
}
