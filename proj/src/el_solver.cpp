#include "calibra/el_solver.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "calibra/errors.h"

namespace calibra {
namespace {

struct DualEval {
  double objective = 0.0;       // -sum log*(1 + lambda'g)
  Eigen::VectorXd gradient;     // of objective
  Eigen::MatrixXd hessian;      // of objective, positive definite
  double min_z = 0.0;
};

DualEval evaluate(const Eigen::MatrixXd& G, const Eigen::VectorXd& lambda, double eps,
                  bool with_hessian) {
  const Eigen::Index m = G.rows(), q = G.cols();
  DualEval ev;
  ev.gradient = Eigen::VectorXd::Zero(q);
  if (with_hessian) ev.hessian = Eigen::MatrixXd::Zero(q, q);
  const Eigen::VectorXd z = (G * lambda).array() + 1.0;
  ev.min_z = z.minCoeff();
  Eigen::VectorXd d1(m), d2(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double zi = z(i);
    if (zi >= eps) {
      ev.objective -= std::log(zi);
      d1(i) = 1.0 / zi;
      d2(i) = 1.0 / (zi * zi);
    } else {
      const double r = zi / eps;
      ev.objective -= std::log(eps) - 1.5 + 2.0 * r - 0.5 * r * r;
      d1(i) = (2.0 - r) / eps;
      d2(i) = 1.0 / (eps * eps);
    }
  }
  ev.gradient = -(G.transpose() * d1);
  if (with_hessian) ev.hessian = G.transpose() * d2.asDiagonal() * G;
  return ev;
}

}  // namespace

double log_star(double z, double eps) {
  if (z >= eps) return std::log(z);
  const double r = z / eps;
  return std::log(eps) - 1.5 + 2.0 * r - 0.5 * r * r;
}

ColumnFilter drop_collinear_columns(const Eigen::MatrixXd& G, double rel_tol,
                                    bool against_intercept) {
  const Eigen::Index m = G.rows(), q = G.cols();
  ColumnFilter out;
  if (q == 0) {
    out.matrix = G;
    return out;
  }
  double max_norm = 0.0;
  for (Eigen::Index j = 0; j < q; ++j) max_norm = std::max(max_norm, G.col(j).norm());

  std::vector<Eigen::VectorXd> basis;
  if (against_intercept && m > 0)
    basis.push_back(Eigen::VectorXd::Constant(m, 1.0 / std::sqrt(static_cast<double>(m))));

  for (Eigen::Index j = 0; j < q; ++j) {
    const double norm = G.col(j).norm();
    if (norm == 0.0) continue;
    Eigen::VectorXd r = G.col(j);
    // Two Gram-Schmidt passes keep the residual accurate near collinearity.
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) r -= b.dot(r) * b;
    const double rn = r.norm();
    if (rn > rel_tol * norm && rn > rel_tol * max_norm) {
      basis.push_back(r / rn);
      out.kept.push_back(static_cast<int>(j));
    }
  }
  if (out.kept.empty()) out.kept.push_back(0);
  out.matrix.resize(m, static_cast<Eigen::Index>(out.kept.size()));
  for (std::size_t k = 0; k < out.kept.size(); ++k)
    out.matrix.col(static_cast<Eigen::Index>(k)) = G.col(out.kept[k]);
  return out;
}

ElSolution solve_el(const Eigen::MatrixXd& G, double total, const ElOptions& options) {
  const Eigen::Index m = G.rows(), q_all = G.cols();
  if (m < 1) throw std::invalid_argument("solve_el: no units");
  if (!G.allFinite()) throw std::invalid_argument("solve_el: non-finite constraint entries");
  if (!(total > 0.0)) throw std::invalid_argument("solve_el: total must be positive");

  // Zero columns impose nothing; solve over the remaining ones.
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < q_all; ++j)
    if (G.col(j).cwiseAbs().maxCoeff() > 0.0) active.push_back(j);
  const auto q = static_cast<Eigen::Index>(active.size());
  if (q >= m && q > 0)
    throw std::invalid_argument("solve_el: need fewer constraints than units (q < m)");

  ElSolution sol;
  sol.dual = Eigen::VectorXd::Zero(q_all);
  const double base = total / static_cast<double>(m);
  if (q == 0) {
    sol.weights = Eigen::VectorXd::Constant(m, base);
    sol.iterations = 1;
    sol.converged = true;
    return sol;
  }

  Eigen::MatrixXd A(m, q);
  for (Eigen::Index k = 0; k < q; ++k) A.col(k) = G.col(active[static_cast<std::size_t>(k)]);

  // Rank check on the scaled columns (scaling does not change the solution).
  Eigen::VectorXd scale(q);
  for (Eigen::Index k = 0; k < q; ++k) scale(k) = A.col(k).norm();
  const Eigen::MatrixXd As = A * scale.cwiseInverse().asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(As);
  qr.setThreshold(1e-12);
  if (qr.rank() < q) {
    std::ostringstream msg;
    msg << "constraint columns are collinear (rank " << qr.rank() << " < " << q << ")";
    throw RankDeficiency(msg.str());
  }

  const double eps = 1.0 / static_cast<double>(m);
  double mass_gap = 0.0;
  auto moment = [&](const Eigen::VectorXd& lambda, Eigen::VectorXd* w) {
    const Eigen::VectorXd z = (As * lambda).array() + 1.0;
    Eigen::VectorXd weights = base * z.cwiseInverse();
    const Eigen::VectorXd mom = A.transpose() * weights;
    mass_gap = std::fabs(weights.sum() - total);
    if (w) *w = std::move(weights);
    return mom.cwiseAbs().maxCoeff();
  };
  const double mass_tol = 1e-8 * total;
  // Rounding floor for the weighted moment sum.
  const double floor_tol =
      64.0 * std::numeric_limits<double>::epsilon() * total * A.cwiseAbs().maxCoeff();
  const double tol = std::max(options.tolerance, floor_tol);

  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(q);
  DualEval ev = evaluate(As, lambda, eps, true);
  double violation = moment(lambda, nullptr);
  int it = 1;
  bool stalled = false;
  double prev_lambda_norm = 0.0;
  int growth_streak = 0;
  while (true) {
    if (violation <= tol && ev.min_z >= eps && mass_gap <= mass_tol) break;
    if (it >= options.max_iter) break;
    const Eigen::VectorXd step = ev.hessian.ldlt().solve(-ev.gradient);
    if (!step.allFinite()) {
      stalled = true;
      break;
    }
    double t = 1.0;
    bool accepted = false;
    DualEval trial;
    Eigen::VectorXd candidate;
    for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
      candidate = lambda + t * step;
      trial = evaluate(As, candidate, eps, false);
      // Near the optimum the objective change drowns in rounding; accept a
      // step that still reduces the moment residual.
      const double slack = 1e-13 * (1.0 + std::fabs(ev.objective));
      if (trial.objective < ev.objective ||
          (trial.objective <= ev.objective + slack && trial.min_z >= eps &&
           moment(candidate, nullptr) < violation)) {
        accepted = true;
        break;
      }
    }
    ++it;
    if (!accepted) {
      stalled = true;
      break;
    }
    lambda = candidate;
    ev = evaluate(As, lambda, eps, true);
    violation = moment(lambda, nullptr);
    const double ln = lambda.norm();
    growth_streak = ln > prev_lambda_norm * (1.0 + 1e-3) ? growth_streak + 1 : 0;
    prev_lambda_norm = ln;
    // The pseudo-log objective is unbounded below when the origin lies
    // outside the hull: the multiplier then grows without bound while the
    // weights collapse toward zero.
    if (growth_streak >= 40) break;
  }

  Eigen::VectorXd weights;
  violation = moment(lambda, &weights);
  sol.iterations = it;
  sol.max_constraint_violation = violation;
  const bool positive = ev.min_z > 0.0;
  // A true EL solution has every weight at most `total`, i.e. z_i >= 1/m;
  // a minimizer in the quadratic region signals an infeasible problem.
  if (!positive || ev.min_z < eps * (1.0 - 1e-9) || violation > 1e-6 || mass_gap > mass_tol ||
      (stalled && violation > std::max(1e-6, 1e3 * tol))) {
    std::ostringstream msg;
    msg << "origin not interior to the convex hull of the constraint rows (m=" << m
        << ", q=" << q << ", violation " << violation << ", iterations " << it << ")";
    throw ConvexHullViolation(msg.str());
  }
  sol.converged = violation <= tol && mass_gap <= mass_tol;
  sol.weights = std::move(weights);
  const Eigen::VectorXd unscaled = lambda.cwiseQuotient(scale);
  for (Eigen::Index k = 0; k < q; ++k) sol.dual(active[static_cast<std::size_t>(k)]) = unscaled(k);
  return sol;
}

}  // namespace calibra
