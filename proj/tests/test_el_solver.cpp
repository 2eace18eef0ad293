#include <cmath>
#include <random>

#include "calibra/el_solver.h"
#include "calibra/errors.h"
#include "doctest.h"
#include "el_oracle.h"

using calibra::ConvexHullViolation;
using calibra::drop_collinear_columns;
using calibra::solve_el;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> v) {
  Eigen::MatrixXd G(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) G(i++, 0) = x;
  return G;
}

}  // namespace

TEST_CASE("all-zero constraints give uniform weights in one iteration") {
  const auto sol = solve_el(Eigen::MatrixXd::Zero(5, 2), 1.0);
  CHECK(sol.converged);
  CHECK(sol.iterations == 1);
  for (double w : sol.weights) CHECK(w == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(sol.dual.isZero());
}

TEST_CASE("two-point solve matches closed form") {
  // w1 + w2 = 1 and -w1 + 3 w2 = 0.
  const auto sol = solve_el(column({-1.0, 3.0}), 1.0);
  CHECK(sol.converged);
  CHECK(sol.weights(0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(sol.weights(1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("centered column needs no reweighting") {
  const auto sol = solve_el(column({-1.0, 1.0}), 1.0);
  CHECK(sol.weights(0) == doctest::Approx(0.5));
  CHECK(sol.weights(1) == doctest::Approx(0.5));
  CHECK(std::fabs(sol.dual(0)) < 1e-14);
}

TEST_CASE("same-sign column is a convex hull violation") {
  CHECK_THROWS_AS(solve_el(column({1.0, 2.0}), 1.0), ConvexHullViolation);
  CHECK_THROWS_AS(solve_el(column({-0.5, -2.0, -1.0}), 3.0), ConvexHullViolation);
}

TEST_CASE("collinear nonzero columns raise RankDeficiency") {
  Eigen::MatrixXd G(4, 2);
  G << -1, -2, 1, 2, 2, 4, -2, -4;
  CHECK_THROWS_AS(solve_el(G, 1.0), calibra::RankDeficiency);
}

TEST_CASE("random q=1 instances agree with the dual grid oracle") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> size(2, 6);
  std::uniform_real_distribution<double> mag(0.2, 3.0), tot(0.5, 5.0);
  for (int rep = 0; rep < 200; ++rep) {
    const int m = size(rng);
    Eigen::MatrixXd G(m, 1);
    for (int i = 0; i < m; ++i) G(i, 0) = (i % 2 == 0 ? -1.0 : 1.0) * mag(rng);
    const double total = tot(rng);
    const auto sol = solve_el(G, total);
    REQUIRE(sol.converged);
    const Eigen::VectorXd oracle = test_oracles::el_grid_oracle(G.col(0), total);
    CHECK((sol.weights - oracle).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((sol.weights.array() > 0).all());
    CHECK(std::fabs(sol.weights.sum() - total) <= 1e-8 * total);
    CHECK(std::fabs(sol.weights.dot(G.col(0))) <= 1e-10);
  }
}

TEST_CASE("perturbing along feasible directions never increases the objective") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  for (int rep = 0; rep < 50; ++rep) {
    const int m = 12, q = 3;
    Eigen::MatrixXd G(m, q);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < q; ++j) G(i, j) = normal(rng);
    G.rowwise() -= G.colwise().mean();
    const auto sol = solve_el(G, 1.0);
    REQUIRE(sol.converged);
    // Null space of the equality constraints [1'; G'].
    Eigen::MatrixXd C(q + 1, m);
    C.row(0).setOnes();
    C.bottomRows(q) = G.transpose();
    const Eigen::MatrixXd null = Eigen::FullPivLU<Eigen::MatrixXd>(C).kernel();
    const double base = sol.weights.array().log().sum();
    for (Eigen::Index k = 0; k < null.cols(); ++k) {
      const Eigen::VectorXd d = null.col(k).normalized() * 1e-4;
      for (double sign : {1.0, -1.0}) {
        const Eigen::VectorXd w = sol.weights + sign * d;
        if ((w.array() <= 0).any()) continue;
        CHECK(w.array().log().sum() <= base + 1e-12);
      }
    }
  }
}

TEST_CASE("column rescaling leaves weights unchanged") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd G(20, 2);
  for (Eigen::Index i = 0; i < G.rows(); ++i) G.row(i) << normal(rng), normal(rng);
  G.rowwise() -= G.colwise().mean();
  G.array() += 0.1;
  const auto a = solve_el(G, 1.0);
  Eigen::MatrixXd H = G;
  H.col(0) *= -250.0;
  H.col(1) *= 1e-3;
  const auto b = solve_el(H, 1.0);
  CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(b.dual(0) == doctest::Approx(a.dual(0) / -250.0).epsilon(1e-8));
}

TEST_CASE("large pooled instance reaches the moment tolerance") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 6.0);
  const int m = 6000;
  Eigen::MatrixXd G(m, 2);
  for (int i = 0; i < m; ++i) {
    const double y = normal(rng) + (i < 2000 ? 0.3 : 0.0);
    G(i, 0) = i < 2000 ? y : 0.0;
    G(i, 1) = i < 2000 ? 0.0 : y;
  }
  const auto sol = solve_el(G, m);
  CHECK(sol.converged);
  CHECK(sol.max_constraint_violation <= 1e-9);
  CHECK(std::fabs(sol.weights.sum() - m) <= 1e-8 * m);
}

TEST_CASE("collinearity filter") {
  Eigen::MatrixXd G(5, 2);
  G.col(0) << 1, -2, 3, 0.5, -1;
  SUBCASE("identical columns keep one") {
    G.col(1) = G.col(0);
    const auto f = drop_collinear_columns(G);
    CHECK(f.kept == std::vector<int>{0});
  }
  SUBCASE("orthogonal columns are all kept") {
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(4, 3);
    CHECK(drop_collinear_columns(I).kept == std::vector<int>{0, 1, 2});
  }
  SUBCASE("scaled copy plus rounding noise is dropped") {
    G.col(1) = 2.0 * G.col(0);
    G(2, 1) += 1e-15;
    CHECK(drop_collinear_columns(G, 1e-12).kept == std::vector<int>{0});
  }
  SUBCASE("constant column dropped only against the intercept") {
    G.col(1).setConstant(0.7);
    CHECK(drop_collinear_columns(G).kept.size() == 2);
    CHECK(drop_collinear_columns(G, 1e-12, true).kept == std::vector<int>{0});
  }
  SUBCASE("all-zero matrix returns a single column") {
    const auto f = drop_collinear_columns(Eigen::MatrixXd::Zero(4, 3));
    CHECK(f.matrix.cols() == 1);
  }
}
