#pragma once

#include <Eigen/Dense>
#include <vector>

namespace calibra {

struct ElOptions {
  double tolerance = 1e-10;
  int max_iter = 200;
  int max_halvings = 30;
};

// Empirical-likelihood weights maximizing sum(log w) subject to w > 0,
// sum(w) = total and sum(w_i * G_i) = 0.
struct ElSolution {
  Eigen::VectorXd weights;
  Eigen::VectorXd dual;
  int iterations = 0;
  bool converged = false;
  double max_constraint_violation = 0.0;
};

// Solves the profile dual by damped Newton iterations on Owen's
// pseudo-logarithm. Rows of G are units, columns are constraints.
//
// Throws ConvexHullViolation when the origin is not interior to the convex
// hull of the rows, RankDeficiency when nonzero columns are collinear, and
// std::invalid_argument for non-finite input or q >= m. All-zero columns are
// trivially satisfied and carry a zero multiplier.
ElSolution solve_el(const Eigen::MatrixXd& G, double total, const ElOptions& options = {});

// Greedy Gram-Schmidt column filter. A column is kept when its residual
// after projecting out earlier kept columns exceeds rel_tol times both its
// own norm and the largest column norm. With `against_intercept`, the
// constant vector is projected out first, so constant columns are dropped.
// At least one column is always returned.
struct ColumnFilter {
  Eigen::MatrixXd matrix;
  std::vector<int> kept;
};
ColumnFilter drop_collinear_columns(const Eigen::MatrixXd& G, double rel_tol = 1e-12,
                                    bool against_intercept = false);

// Pseudo-logarithm: log(z) for z >= eps, quadratic continuation below.
double log_star(double z, double eps);

}  // namespace calibra
