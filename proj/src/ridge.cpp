#include <algorithm>
#include <cmath>
#include <limits>

#include "calibra/errors.h"
#include "calibra/learners.h"

namespace calibra::learn {

Standardizer Standardizer::fit(const Eigen::MatrixXd& z) {
  Standardizer s;
  const double n = static_cast<double>(z.rows());
  s.mean = z.colwise().mean();
  s.scale.resize(z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double var = (z.col(j).array() - s.mean(j)).square().sum() / n;
    const double sd = std::sqrt(var);
    s.scale(j) = sd > 1e-12 * (1.0 + std::fabs(s.mean(j))) ? sd : 1.0;
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& z) const {
  return (z.rowwise() - mean).array().rowwise() / scale.array();
}

Eigen::VectorXd RidgeRegression::predict(const Eigen::MatrixXd& z) const {
  return (standardizer.apply(z) * beta).array() + intercept;
}

RidgeRegression fit_ridge(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double lambda) {
  RidgeRegression model;
  model.standardizer = Standardizer::fit(z);
  const Eigen::MatrixXd X = model.standardizer.apply(z);
  const double n = static_cast<double>(z.rows());
  const double ybar = y.mean();
  Eigen::MatrixXd A = X.transpose() * X / n;
  A.diagonal().array() += lambda;
  const Eigen::VectorXd b = X.transpose() * (y.array() - ybar).matrix() / n;
  model.beta = A.ldlt().solve(b);
  model.intercept = ybar;
  return model;
}

namespace {

// Stable softmax with reference level 0 (linear predictor fixed at zero).
Eigen::MatrixXd softmax_ref(const Eigen::MatrixXd& eta) {
  const Eigen::Index n = eta.rows(), k1 = eta.cols();
  Eigen::MatrixXd prob(n, k1 + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = 0.0;
    for (Eigen::Index k = 0; k < k1; ++k) mx = std::max(mx, eta(i, k));
    double denom = std::exp(-mx);
    prob(i, 0) = denom;
    for (Eigen::Index k = 0; k < k1; ++k) {
      prob(i, k + 1) = std::exp(eta(i, k) - mx);
      denom += prob(i, k + 1);
    }
    prob.row(i) /= denom;
  }
  return prob;
}

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd out(X.rows(), X.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(X.cols()) = X;
  return out;
}

double multinomial_loss(const Eigen::MatrixXd& Xt, std::span<const int> x, const Eigen::MatrixXd& B,
                        double lambda) {
  const Eigen::MatrixXd eta = Xt * B;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    double mx = 0.0;
    for (Eigen::Index k = 0; k < eta.cols(); ++k) mx = std::max(mx, eta(i, k));
    double denom = std::exp(-mx);
    for (Eigen::Index k = 0; k < eta.cols(); ++k) denom += std::exp(eta(i, k) - mx);
    const int xi = x[static_cast<std::size_t>(i)];
    const double own = xi == 0 ? 0.0 : eta(i, xi - 1);
    loss -= own - mx - std::log(denom);
  }
  loss /= static_cast<double>(eta.rows());
  loss += 0.5 * lambda * B.bottomRows(B.rows() - 1).squaredNorm();
  return loss;
}

}  // namespace

Eigen::MatrixXd RidgeMultinomial::predict_proba(const Eigen::MatrixXd& z) const {
  return softmax_ref(with_intercept(standardizer.apply(z)) * coef);
}

RidgeMultinomial fit_ridge_multinomial(const Eigen::MatrixXd& z, std::span<const int> x, int levels,
                                       double lambda, const Eigen::MatrixXd* warm_start) {
  RidgeMultinomial model;
  model.levels = levels;
  model.covariates = static_cast<int>(z.cols());
  model.standardizer = Standardizer::fit(z);
  const Eigen::MatrixXd Xt = with_intercept(model.standardizer.apply(z));
  const Eigen::Index n = Xt.rows(), d = Xt.cols(), k1 = levels - 1;
  const double nd = static_cast<double>(n);

  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(d, k1);
  if (warm_start && warm_start->rows() == d && warm_start->cols() == k1) {
    B = *warm_start;
  } else {
    // Intercepts at the log frequency ratios.
    std::vector<double> freq(static_cast<std::size_t>(levels), 0.0);
    for (int v : x) freq[static_cast<std::size_t>(v)] += 1.0;
    for (Eigen::Index k = 0; k < k1; ++k)
      B(0, k) = std::log(std::max(freq[static_cast<std::size_t>(k + 1)], 0.5) /
                         std::max(freq[0], 0.5));
  }
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, k1 + 1);
  for (Eigen::Index i = 0; i < n; ++i) Y(i, x[static_cast<std::size_t>(i)]) = 1.0;

  double loss = multinomial_loss(Xt, x, B, lambda);
  const Eigen::Index dim = d * k1;
  for (int it = 0; it < 100; ++it) {
    const Eigen::MatrixXd P = softmax_ref(Xt * B);
    Eigen::VectorXd grad(dim);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
    for (Eigen::Index k = 0; k < k1; ++k) {
      Eigen::VectorXd gk = Xt.transpose() * (P.col(k + 1) - Y.col(k + 1)) / nd;
      gk.tail(d - 1) += lambda * B.col(k).tail(d - 1);
      grad.segment(k * d, d) = gk;
      for (Eigen::Index l = k; l < k1; ++l) {
        Eigen::VectorXd w = -P.col(k + 1).cwiseProduct(P.col(l + 1));
        if (l == k) w += P.col(k + 1);
        const Eigen::MatrixXd block = Xt.transpose() * w.asDiagonal() * Xt / nd;
        H.block(k * d, l * d, d, d) = block;
        if (l != k) H.block(l * d, k * d, d, d) = block.transpose();
      }
      H.block(k * d + 1, k * d + 1, d - 1, d - 1).diagonal().array() += lambda;
    }
    if (grad.cwiseAbs().maxCoeff() < 1e-10) break;
    // Small ridge on the whole Hessian guards the unpenalized intercepts.
    H.diagonal().array() += 1e-12;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    if (!step.allFinite()) break;
    double t = 1.0, trial_loss = loss;
    Eigen::MatrixXd trial;
    bool improved = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      trial = B - t * Eigen::Map<const Eigen::MatrixXd>(step.data(), d, k1);
      trial_loss = multinomial_loss(Xt, x, trial, lambda);
      if (trial_loss <= loss) {
        improved = true;
        break;
      }
    }
    if (!improved) break;
    B = trial;
    const double drop = loss - trial_loss;
    loss = trial_loss;
    if (drop <= 1e-15 * (1.0 + std::fabs(loss))) break;
  }
  model.coef = B;
  return model;
}

std::vector<int> fold_labels(std::size_t n, int folds, std::uint64_t seed) {
  std::vector<int> labels(n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < n; ++k) labels[order[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  return labels;
}

}  // namespace calibra::learn
