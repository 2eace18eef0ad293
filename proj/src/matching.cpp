#include "calibra/matching.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "calibra/errors.h"
#include "calibra/rng.h"

namespace calibra {
namespace {

double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

double smd(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() < 2 || b.size() < 2) return 0.0;
  const double ma = a.mean(), mb = b.mean();
  const double va = (a.array() - ma).square().sum() / static_cast<double>(a.size() - 1);
  const double vb = (b.array() - mb).square().sum() / static_cast<double>(b.size() - 1);
  const double pooled = std::sqrt(0.5 * (va + vb));
  return pooled > 0.0 ? (ma - mb) / pooled : 0.0;
}

}  // namespace

MembershipScores fit_membership_scores(const Eigen::MatrixXd& main_shared,
                                       const Eigen::MatrixXd& aux_shared) {
  if (main_shared.cols() != aux_shared.cols())
    throw ValidationError("shared covariates differ between main and auxiliary data");
  if (main_shared.rows() == 0 || aux_shared.rows() == 0)
    throw ValidationError("matching needs units in both datasets");
  const Eigen::Index n = main_shared.rows(), m = aux_shared.rows(), N = n + m;
  Eigen::MatrixXd pooled(N, main_shared.cols());
  pooled << main_shared, aux_shared;

  MembershipScores out;
  for (Eigen::Index j = 0; j < pooled.cols(); ++j)
    if (pooled.col(j).maxCoeff() - pooled.col(j).minCoeff() > 1e-12 * std::max(1.0, pooled.col(j).cwiseAbs().maxCoeff()))
      out.used_columns.push_back(static_cast<int>(j));
  const auto q = static_cast<Eigen::Index>(out.used_columns.size());
  Eigen::MatrixXd X(N, q + 1);
  X.col(0).setOnes();
  for (Eigen::Index k = 0; k < q; ++k) {
    const Eigen::VectorXd c = pooled.col(out.used_columns[static_cast<std::size_t>(k)]);
    const double mu = c.mean();
    const double sd = std::sqrt((c.array() - mu).square().mean());
    X.col(k + 1) = (c.array() - mu) / sd;
  }
  Eigen::VectorXd r(N);
  r.head(n).setOnes();
  r.tail(m).setZero();

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q + 1);
  beta(0) = std::log(static_cast<double>(n) / static_cast<double>(m));
  auto deviance = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = X * b;
    double d = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double e = eta(i);
      const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
      d += log1pexp - r(i) * e;
    }
    return d;
  };
  double dev = deviance(beta);
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd p(N), w(N);
    for (Eigen::Index i = 0; i < N; ++i) {
      p(i) = sigmoid(eta(i));
      w(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd grad = X.transpose() * (r - p);
    if (grad.cwiseAbs().maxCoeff() < 1e-10 * static_cast<double>(N)) break;
    Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X;
    H.diagonal().array() += 1e-12;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    double t = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      const Eigen::VectorXd trial = beta + t * step;
      const double d = deviance(trial);
      if (d <= dev) {
        beta = trial;
        moved = dev - d > 1e-14 * std::max(1.0, dev);
        dev = d;
        break;
      }
    }
    if (!moved) break;
  }
  // A near-zero deviance or exploding slopes means R is predictable from
  // the covariates.
  if (dev < 1e-6 * static_cast<double>(N) || (q > 0 && beta.tail(q).cwiseAbs().maxCoeff() > 30.0))
    throw ValidationError(
        "membership model separates main and auxiliary data; nearest-neighbour matching without "
        "overlap is meaningless");
  out.coef = beta;
  const Eigen::VectorXd eta = X * beta;
  out.main_logit = eta.head(n);
  out.aux_logit = eta.tail(m);
  return out;
}

MatchResult nn_match(const MembershipScores& scores, int ratio, std::uint64_t seed,
                     const Eigen::MatrixXd& main_shared, const Eigen::MatrixXd& aux_shared,
                     const std::vector<std::string>& names, std::optional<double> caliper) {
  if (ratio < 1) throw ValidationError("match ratio must be at least 1");
  const auto n = static_cast<std::size_t>(scores.main_logit.size());
  const auto m = static_cast<std::size_t>(scores.aux_logit.size());
  MatchResult out;
  out.ratio = ratio;
  out.membership_scores.resize(static_cast<Eigen::Index>(n + m));
  for (std::size_t i = 0; i < n; ++i)
    out.membership_scores(static_cast<Eigen::Index>(i)) = sigmoid(scores.main_logit(static_cast<Eigen::Index>(i)));
  for (std::size_t i = 0; i < m; ++i)
    out.membership_scores(static_cast<Eigen::Index>(n + i)) = sigmoid(scores.aux_logit(static_cast<Eigen::Index>(i)));
  if (m < static_cast<std::size_t>(ratio) * n)
    out.warnings.push_back("auxiliary data has " + std::to_string(m) + " units, fewer than ratio x main = " +
                           std::to_string(static_cast<std::size_t>(ratio) * n) + "; matching is partial");

  std::set<std::pair<double, std::size_t>> pool;
  for (std::size_t i = 0; i < m; ++i) pool.emplace(scores.aux_logit(static_cast<Eigen::Index>(i)), i);
  std::vector<std::size_t> order(n);
  std::size_t unmatched = 0;
  for (int pass = 0; pass < ratio && !pool.empty(); ++pass) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(pass));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      if (pool.empty()) break;
      const double s = scores.main_logit(static_cast<Eigen::Index>(i));
      auto hi = pool.lower_bound({s, 0});
      auto best = pool.end();
      if (hi != pool.end()) best = hi;
      if (hi != pool.begin()) {
        auto lo = std::prev(hi);
        if (best == pool.end() || s - lo->first <= best->first - s) best = lo;
      }
      if (caliper && std::fabs(best->first - s) > *caliper) {
        ++unmatched;
        continue;
      }
      out.kept_aux_indices.push_back(best->second);
      pool.erase(best);
    }
  }
  if (unmatched > 0)
    out.warnings.push_back(std::to_string(unmatched) + " match attempt(s) exceeded the caliper");
  std::sort(out.kept_aux_indices.begin(), out.kept_aux_indices.end());

  if (main_shared.cols() == aux_shared.cols()) {
    const Eigen::MatrixXd kept = aux_shared(
        Eigen::Map<const Eigen::Array<std::size_t, Eigen::Dynamic, 1>>(out.kept_aux_indices.data(),
                                                                        static_cast<Eigen::Index>(out.kept_aux_indices.size()))
            .cast<Eigen::Index>(),
        Eigen::all);
    for (Eigen::Index j = 0; j < main_shared.cols(); ++j) {
      BalanceRow row;
      row.name = static_cast<std::size_t>(j) < names.size() ? names[static_cast<std::size_t>(j)]
                                                             : "shared" + std::to_string(j + 1);
      row.smd_before = smd(main_shared.col(j), aux_shared.col(j));
      row.smd_after = smd(main_shared.col(j), kept.col(j));
      out.balance.push_back(row);
    }
  }
  return out;
}

Eigen::MatrixXd shared_columns(const MainDataset& main, const std::vector<std::string>& names) {
  Eigen::MatrixXd out(main.z.rows(), static_cast<Eigen::Index>(names.size()));
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = std::find(main.column_names.begin(), main.column_names.end(), names[k]);
    if (it == main.column_names.end())
      throw ValidationError("matching column " + names[k] + " is not a main-data covariate");
    out.col(static_cast<Eigen::Index>(k)) = main.z.col(it - main.column_names.begin());
  }
  return out;
}

AuxDataset match_auxiliary(const MainDataset& main, const AuxDataset& aux, int ratio,
                           std::uint64_t seed, const std::vector<std::string>& names,
                           MatchResult* result) {
  const std::vector<std::string> cols = names.empty() ? aux.shared_names : names;
  if (cols.empty()) throw ValidationError("matching needs covariates observed in both datasets");
  Eigen::MatrixXd aux_shared(static_cast<Eigen::Index>(aux.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const auto it = std::find(aux.shared_names.begin(), aux.shared_names.end(), cols[k]);
    if (it == aux.shared_names.end())
      throw ValidationError("matching column " + cols[k] + " is not present in the auxiliary data");
    aux_shared.col(static_cast<Eigen::Index>(k)) = aux.shared.col(it - aux.shared_names.begin());
  }
  const Eigen::MatrixXd main_shared = shared_columns(main, cols);
  const MembershipScores scores = fit_membership_scores(main_shared, aux_shared);
  MatchResult res = nn_match(scores, ratio, seed, main_shared, aux_shared, cols);
  AuxDataset matched = aux.subset(res.kept_aux_indices);
  if (result) *result = std::move(res);
  return matched;
}

}  // namespace calibra
