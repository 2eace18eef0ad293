#include <algorithm>
#include <cmath>
#include <limits>

#include "calibra/errors.h"
#include "calibra/learners.h"

namespace calibra::learn {
namespace {

double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

double base_score(const Eigen::VectorXd& t, std::span<const int> rows, BoostLoss loss) {
  double s = 0.0;
  for (int r : rows) s += t(r);
  const double mean = s / static_cast<double>(rows.size());
  if (loss == BoostLoss::Squared) return mean;
  const double p = std::clamp(mean, 1e-6, 1.0 - 1e-6);
  return std::log(p / (1.0 - p));
}

double point_loss(double target, double score, BoostLoss loss) {
  if (loss == BoostLoss::Squared) return (target - score) * (target - score);
  // Binomial deviance, computed stably from the logit.
  const double m = std::max(0.0, score);
  const double log1pexp = m + std::log(std::exp(-m) + std::exp(score - m));
  return 2.0 * (log1pexp - target * score);
}

// One boosting round over `rows`; updates `score` for every row of `data`.
trees::Tree boost_round(const trees::BinnedMatrix& data, const trees::FeatureBins& bins,
                        const Eigen::VectorXd& t, std::span<const int> rows,
                        Eigen::VectorXd& score, BoostLoss loss, const LearnerSpec& spec) {
  const auto n = static_cast<std::size_t>(data.rows);
  std::vector<double> resid(n, 0.0), hess(n, 1.0);
  for (int r : rows) {
    if (loss == BoostLoss::Squared) {
      resid[static_cast<std::size_t>(r)] = t(r) - score(r);
    } else {
      const double p = sigmoid(score(r));
      resid[static_cast<std::size_t>(r)] = t(r) - p;
      hess[static_cast<std::size_t>(r)] = p * (1.0 - p);
    }
  }
  trees::GrowParams params;
  params.max_depth = spec.depth;
  params.min_leaf = spec.min_leaf;
  const trees::LeafValue leaf = [&](std::span<const int> leaf_rows) {
    double num = 0.0, den = 0.0;
    for (int r : leaf_rows) {
      num += resid[static_cast<std::size_t>(r)];
      den += hess[static_cast<std::size_t>(r)];
    }
    return num / std::max(den, 1e-12);
  };
  trees::Tree tree = trees::grow(data, bins, std::vector<int>(rows.begin(), rows.end()), resid, 1,
                                 params, nullptr, leaf);
  for (int i = 0; i < data.rows; ++i) score(i) += spec.shrinkage * tree.predict_binned(data, i);
  return tree;
}

}  // namespace

Eigen::VectorXd BoostedEnsemble::score(const Eigen::MatrixXd& z) const {
  Eigen::VectorXd out = Eigen::VectorXd::Constant(z.rows(), base);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Eigen::RowVectorXd row = z.row(i);
    double s = 0.0;
    for (const auto& tree : trees) s += tree.predict(row);
    out(i) += shrinkage * s;
  }
  return out;
}

Eigen::VectorXd BoostedRegressor::predict(const Eigen::MatrixXd& z) const {
  return ensemble.score(z);
}

Eigen::MatrixXd BoostedClassifier::predict_proba(const Eigen::MatrixXd& z) const {
  Eigen::MatrixXd prob(z.rows(), levels);
  if (levels == 2) {
    const Eigen::VectorXd s = ensembles.at(0).score(z);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      prob(i, 1) = sigmoid(s(i));
      prob(i, 0) = 1.0 - prob(i, 1);
    }
    return prob;
  }
  for (int k = 0; k < levels; ++k) {
    const Eigen::VectorXd s = ensembles.at(static_cast<std::size_t>(k)).score(z);
    for (Eigen::Index i = 0; i < z.rows(); ++i) prob(i, k) = sigmoid(s(i));
  }
  for (Eigen::Index i = 0; i < z.rows(); ++i) prob.row(i) /= prob.row(i).sum();
  return prob;
}

BoostFit fit_boosting(const LearnerSpec& spec, const Eigen::MatrixXd& z, const Eigen::VectorXd& t,
                      BoostLoss loss, std::optional<int> rounds, std::uint64_t seed) {
  const int n = static_cast<int>(z.rows());
  const auto bins = trees::FeatureBins::fit(z, spec.max_bins);
  const auto data = trees::BinnedMatrix::encode(z, bins);
  BoostFit fit;

  if (!rounds) {
    const int folds = std::min(spec.cv_folds, n);
    const auto labels = fold_labels(static_cast<std::size_t>(n), folds, seed);
    std::vector<std::vector<int>> train(static_cast<std::size_t>(folds)), valid(static_cast<std::size_t>(folds));
    for (int i = 0; i < n; ++i)
      for (int f = 0; f < folds; ++f)
        (labels[static_cast<std::size_t>(i)] == f ? valid : train)[static_cast<std::size_t>(f)].push_back(i);
    std::vector<Eigen::VectorXd> score(static_cast<std::size_t>(folds));
    auto cv_loss = [&] {
      double total = 0.0;
      for (int f = 0; f < folds; ++f)
        for (int r : valid[static_cast<std::size_t>(f)])
          total += point_loss(t(r), score[static_cast<std::size_t>(f)](r), loss);
      return total / n;
    };
    for (int f = 0; f < folds; ++f)
      score[static_cast<std::size_t>(f)] =
          Eigen::VectorXd::Constant(n, base_score(t, train[static_cast<std::size_t>(f)], loss));
    double best = cv_loss();
    int best_round = 0;
    for (int r = 1; r <= spec.max_trees; ++r) {
      for (int f = 0; f < folds; ++f)
        boost_round(data, bins, t, train[static_cast<std::size_t>(f)], score[static_cast<std::size_t>(f)], loss, spec);
      const double l = cv_loss();
      if (l < best - 1e-12 * std::fabs(best)) {
        best = l;
        best_round = r;
      } else if (r - best_round >= spec.early_stop_rounds) {
        break;
      }
    }
    rounds = best_round;
    fit.cv_score = best;
  }

  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  fit.rounds = *rounds;
  fit.ensemble.base = base_score(t, all, loss);
  fit.ensemble.shrinkage = spec.shrinkage;
  Eigen::VectorXd score = Eigen::VectorXd::Constant(n, fit.ensemble.base);
  fit.ensemble.trees.reserve(static_cast<std::size_t>(fit.rounds));
  for (int r = 0; r < fit.rounds; ++r)
    fit.ensemble.trees.push_back(boost_round(data, bins, t, all, score, loss, spec));
  return fit;
}

}  // namespace calibra::learn
