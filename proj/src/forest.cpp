#include <algorithm>
#include <cmath>

#include "calibra/errors.h"
#include "calibra/learners.h"

namespace calibra::learn {
namespace {

std::vector<int> bootstrap_rows(int n, Rng& rng) {
  std::uniform_int_distribution<int> draw(0, n - 1);
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (auto& r : rows) r = draw(rng);
  return rows;
}

int resolve_mtry(const LearnerSpec& spec, int p, bool classification) {
  if (spec.mtry > 0) return std::min(spec.mtry, p);
  const double m = classification ? std::ceil(std::sqrt(static_cast<double>(p)))
                                  : std::ceil(static_cast<double>(p) / 3.0);
  return std::clamp(static_cast<int>(m), 1, std::max(1, p));
}

}  // namespace

ForestClassifier fit_forest_classifier(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                       std::span<const int> x, int levels, std::uint64_t seed) {
  ForestClassifier model;
  model.kind = LearnerKind::RandomForest;
  model.levels = levels;
  model.covariates = static_cast<int>(z.cols());
  const int n = static_cast<int>(z.rows());
  const auto bins = trees::FeatureBins::fit(z, spec.max_bins);
  const auto data = trees::BinnedMatrix::encode(z, bins);
  // Binary: the level-1 indicator alone gives the same split ranking as
  // the full one-hot target.
  const int width = levels == 2 ? 1 : levels;
  std::vector<double> onehot(static_cast<std::size_t>(n) * static_cast<std::size_t>(width), 0.0);
  for (int i = 0; i < n; ++i) {
    const int v = x[static_cast<std::size_t>(i)];
    if (width == 1) onehot[static_cast<std::size_t>(i)] = v;
    else onehot[static_cast<std::size_t>(i) * static_cast<std::size_t>(width) + static_cast<std::size_t>(v)] = 1.0;
  }

  trees::GrowParams params;
  params.min_leaf = spec.min_leaf;
  params.mtry = resolve_mtry(spec, model.covariates, true);
  std::vector<double> votes(static_cast<std::size_t>(levels));
  const trees::LeafValue majority = [&](std::span<const int> rows) {
    std::fill(votes.begin(), votes.end(), 0.0);
    for (int r : rows) votes[static_cast<std::size_t>(x[static_cast<std::size_t>(r)])] += 1.0;
    return static_cast<double>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  };
  model.trees.reserve(static_cast<std::size_t>(spec.n_trees));
  for (int t = 0; t < spec.n_trees; ++t) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(t));
    auto rows = bootstrap_rows(n, rng);
    model.trees.push_back(trees::grow(data, bins, std::move(rows), onehot, width, params, &rng, majority));
  }
  return model;
}

Eigen::MatrixXd ForestClassifier::predict_proba(const Eigen::MatrixXd& z) const {
  Eigen::MatrixXd prob = Eigen::MatrixXd::Zero(z.rows(), levels);
  const Eigen::MatrixXd zr = z;  // row access into a dense copy
  for (Eigen::Index i = 0; i < zr.rows(); ++i) {
    const Eigen::RowVectorXd row = zr.row(i);
    for (const auto& tree : trees) prob(i, static_cast<Eigen::Index>(tree.predict(row))) += 1.0;
  }
  return prob / static_cast<double>(trees.size());
}

Eigen::VectorXd ForestClassifier::tree_votes(std::size_t t, const Eigen::MatrixXd& z) const {
  Eigen::VectorXd out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out(i) = trees.at(t).predict(z.row(i));
  return out;
}

ForestRegressor fit_forest_regressor(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                     const Eigen::VectorXd& y, std::uint64_t seed) {
  ForestRegressor model;
  model.kind = LearnerKind::RandomForest;
  model.covariates = static_cast<int>(z.cols());
  const int n = static_cast<int>(z.rows());
  const auto bins = trees::FeatureBins::fit(z, spec.max_bins);
  const auto data = trees::BinnedMatrix::encode(z, bins);
  const std::vector<double> target(y.data(), y.data() + y.size());

  trees::GrowParams params;
  params.min_leaf = spec.min_leaf;
  params.mtry = resolve_mtry(spec, model.covariates, false);
  const trees::LeafValue mean = [&](std::span<const int> rows) {
    double s = 0.0;
    for (int r : rows) s += target[static_cast<std::size_t>(r)];
    return s / static_cast<double>(rows.size());
  };
  model.trees.reserve(static_cast<std::size_t>(spec.n_trees));
  for (int t = 0; t < spec.n_trees; ++t) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(t));
    auto rows = bootstrap_rows(n, rng);
    model.trees.push_back(trees::grow(data, bins, std::move(rows), target, 1, params, &rng, mean));
  }
  return model;
}

Eigen::VectorXd ForestRegressor::predict(const Eigen::MatrixXd& z) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Eigen::RowVectorXd row = z.row(i);
    double s = 0.0;
    for (const auto& tree : trees) s += tree.predict(row);
    out(i) = s / static_cast<double>(trees.size());
  }
  return out;
}

Eigen::VectorXd ForestRegressor::tree_predictions(std::size_t t, const Eigen::MatrixXd& z) const {
  Eigen::VectorXd out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out(i) = trees.at(t).predict(z.row(i));
  return out;
}

}  // namespace calibra::learn
