#include <cmath>
#include <random>

#include "calibra/errors.h"
#include "calibra/estimators.h"
#include "calibra/rng.h"
#include "doctest.h"

using namespace calibra;

namespace {

MainDataset make_main(std::vector<double> y, std::vector<int> x, int levels = 2) {
  MainDataset d;
  d.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  d.x = std::move(x);
  d.z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(y.size()), 1);
  d.column_names = {"z1"};
  d.coding = LevelCoding::identity(levels);
  return d;
}

AuxDataset make_aux(std::vector<double> y, std::vector<int> x) {
  AuxDataset a;
  a.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  a.x = std::move(x);
  return a;
}

// Random candidate predictions for two levels over m units.
CandidatePredictions random_preds(Eigen::Index m, int j1, int j2, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::normal_distribution<double> nd;
  CandidatePredictions p;
  p.ps.assign(2, Eigen::MatrixXd(m, j1));
  p.cm.assign(2, Eigen::MatrixXd(m, j2));
  for (Eigen::Index i = 0; i < m; ++i)
    for (int j = 0; j < j1; ++j) {
      p.ps[1](i, j) = u(rng);
      p.ps[0](i, j) = 1.0 - p.ps[1](i, j);
    }
  for (int k = 0; k < 2; ++k)
    for (Eigen::Index i = 0; i < m; ++i)
      for (int j = 0; j < j2; ++j) p.cm[static_cast<std::size_t>(k)](i, j) = nd(rng);
  return p;
}

// Standard normal upper tail by composite Simpson integration of the density.
double normal_upper_tail(double z) {
  const int steps = 20000;
  const double hi = 12.0, h = (hi - z) / steps;
  auto phi = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  double s = phi(z) + phi(hi);
  for (int k = 1; k < steps; ++k) s += (k % 2 ? 4.0 : 2.0) * phi(z + k * h);
  return s * h / 3.0;
}

StudyConfig light_config() {
  StudyConfig c;
  for (auto& s : c.ps_candidates) s.n_trees = 60;
  for (auto& s : c.cm_candidates) s.n_trees = 60;
  return c;
}

MainDataset linear_main(int n, std::uint64_t seed, double noise = 1.0) {
  MainDataset d;
  Rng rng(seed);
  std::normal_distribution<double> nd;
  d.z.resize(n, 3);
  d.y.resize(n);
  d.x.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) d.z(i, j) = nd(rng);
    const double pi = 1.0 / (1.0 + std::exp(-0.7 * d.z(i, 0)));
    const int x = std::uniform_real_distribution<double>()(rng) < pi ? 1 : 0;
    d.x[static_cast<std::size_t>(i)] = x;
    d.y(i) = 0.5 * x + d.z(i, 0) + 0.5 * d.z(i, 1) + noise * nd(rng);
  }
  d.column_names = {"z1", "z2", "z3"};
  d.coding = LevelCoding::identity(2);
  return d;
}

}  // namespace

TEST_CASE("raw mean") {
  const auto d = make_main({1, 2, 3}, {1, 1, 0});
  CHECK(raw_mean(d, 1).tau == 1.5);
  CHECK(raw_mean(d, 0).tau == 3.0);
  const auto c = make_main({4.25, 4.25, 4.25, 4.25}, {0, 1, 0, 1});
  CHECK(raw_mean(c, 1).tau == 4.25);
  CHECK_THROWS_AS(raw_mean(make_main({1, 2}, {0, 0}), 1), ValidationError);
}

TEST_CASE("aiptw hand evaluation") {
  Eigen::VectorXd y(2), ps(2), mu(2);
  y << 2, 0;
  ps << 0.5, 0.5;
  mu << 1, 1;
  const std::vector<int> x{1, 0};
  CHECK(aiptw(y, x, ps, mu, 1) == doctest::Approx(2.0).epsilon(1e-15));
  // Zero outcome model leaves the inverse-probability term only.
  CHECK(aiptw(y, x, ps, Eigen::VectorXd::Zero(2), 1) == doctest::Approx(2.0));
  ps(0) = 0.0;
  CHECK_THROWS_AS(aiptw(y, x, ps, mu, 1), ValidationError);
}

TEST_CASE("calibration constraints") {
  CandidatePredictions p = random_preds(5, 1, 1, 3);
  const std::vector<Eigen::Index> group{0, 2, 4};
  const Eigen::MatrixXd g = build_g(p, 1, group);
  REQUIRE(g.rows() == 3);
  REQUIRE(g.cols() == 2);
  const double ps_bar = p.ps[1].col(0).mean(), cm_bar = p.cm[1].col(0).mean();
  for (int r = 0; r < 3; ++r) {
    CHECK(g(r, 0) == doctest::Approx(p.ps[1](group[static_cast<std::size_t>(r)], 0) - ps_bar));
    CHECK(g(r, 1) == doctest::Approx(p.cm[1](group[static_cast<std::size_t>(r)], 0) - cm_bar));
  }
  p.ps[1].col(0).setConstant(0.3);
  CHECK(build_g(p, 1, group).col(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unit scores leave the constraints unchanged") {
  const CandidatePredictions p = random_preds(40, 3, 3, 5);
  std::vector<Eigen::Index> group;
  for (Eigen::Index i = 0; i < 40; i += 3) group.push_back(i);
  const Eigen::MatrixXd g = build_g(p, 1, group);
  const Eigen::MatrixXd gs = build_g_star(p, Eigen::VectorXd::Ones(40), 1, group);
  CHECK(g == gs);
}

TEST_CASE("modified constraint with a constant outcome model") {
  CandidatePredictions p = random_preds(30, 1, 1, 6);
  const double c = 2.5;
  p.cm[1].setConstant(c);
  Rng rng(8);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Eigen::VectorXd scores(30);
  for (auto& s : scores) s = u(rng);
  const std::vector<Eigen::Index> group{1, 4, 7, 9};
  const Eigen::MatrixXd gs = build_g_star(p, scores, 1, group);
  for (int r = 0; r < 4; ++r) CHECK(gs(r, 1) == doctest::Approx(c * (1.0 - scores.mean())).epsilon(1e-12));
}

TEST_CASE("calibrated estimates") {
  SUBCASE("inactive calibration gives the group mean") {
    CandidatePredictions p = random_preds(12, 2, 2, 9);
    for (auto& m : p.ps) m.setConstant(0.5);
    for (auto& m : p.cm) m.setConstant(1.0);
    Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(12, 0, 11);
    std::vector<int> x(12);
    for (int i = 0; i < 12; ++i) x[static_cast<std::size_t>(i)] = i % 3 == 0;
    const auto est = cml(y, x, p, 1);
    CHECK(est.tau == doctest::Approx((0 + 3 + 6 + 9) / 4.0));
    CHECK(est.kept_columns.empty());
  }
  SUBCASE("convex combination and moment certificate") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Eigen::Index m = 80;
      const CandidatePredictions p = random_preds(m, 3, 3, seed);
      Rng rng(seed + 100);
      std::normal_distribution<double> nd;
      Eigen::VectorXd y(m), scores(m);
      std::vector<int> x(static_cast<std::size_t>(m));
      for (Eigen::Index i = 0; i < m; ++i) {
        y(i) = nd(rng);
        x[static_cast<std::size_t>(i)] = i % 2;
        scores(i) = 0.5 + std::uniform_real_distribution<double>()(rng);
      }
      double lo = 1e300, hi = -1e300;
      for (Eigen::Index i = 1; i < m; i += 2) {
        lo = std::min(lo, y(i));
        hi = std::max(hi, y(i));
      }
      const auto a = cml(y, x, p, 1);
      CHECK(a.tau >= lo);
      CHECK(a.tau <= hi);
      CHECK(a.weights.sum() == doctest::Approx(1.0).epsilon(1e-8));
      CHECK(a.weights.minCoeff() > 0.0);
      const auto b = cmlib(y, x, p, scores, 1);
      CHECK(b.tau >= lo);
      CHECK(b.tau <= hi);
      std::vector<Eigen::Index> group;
      for (Eigen::Index i = 1; i < m; i += 2) group.push_back(i);
      const Eigen::MatrixXd g = build_g(p, 1, group);
      CHECK((g.transpose() * a.weights).cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
  SUBCASE("balanced probe gives near-uniform weights") {
    // Group rows are mirrored around the overall mean, so the uniform
    // weights already satisfy the constraints.
    CandidatePredictions p;
    p.ps.assign(2, Eigen::MatrixXd(8, 1));
    p.cm.assign(2, Eigen::MatrixXd(8, 1));
    p.ps[1].col(0) << 0.3, 0.7, 0.4, 0.6, 0.5, 0.5, 0.2, 0.8;
    p.ps[0] = (1.0 - p.ps[1].array()).matrix();
    p.cm[1].col(0) << -1, 1, 2, -2, 0.5, -0.5, 3, -3;
    p.cm[0] = p.cm[1];
    std::vector<int> x{1, 1, 1, 1, 0, 0, 0, 0};
    const Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(8, 1, 8);
    const auto est = cml(y, x, p, 1);
    CHECK((est.weights.array() - 0.25).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("duplicate outcome candidates collapse") {
    CandidatePredictions p = random_preds(50, 1, 2, 12);
    p.cm[1].col(1) = p.cm[1].col(0);
    Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(50, -1, 1);
    std::vector<int> x(50);
    for (int i = 0; i < 50; ++i) x[static_cast<std::size_t>(i)] = i % 2;
    const auto est = cmlib(y, x, p, Eigen::VectorXd::Ones(50), 1);
    CHECK(est.kept_columns == std::vector<int>{0, 1});
    CHECK(est.dropped_columns == std::vector<int>{2});
  }
}

TEST_CASE("working function parameter") {
  const auto main = make_main({1, 2}, {0, 1});
  const auto aux = make_aux({3, 4}, {0, 1});
  CHECK(integration_theta(main, aux, WorkingFunction::FormI)(0) == 2.5);
  CHECK(integration_theta(main, AuxDataset{}, WorkingFunction::FormI)(0) == 1.5);

  const auto m2 = make_main({1, 3, 10, 12}, {0, 0, 1, 1});
  const auto a2 = make_aux({2, 11, 11}, {0, 1, 1});
  const Eigen::VectorXd t = integration_theta(m2, a2, WorkingFunction::FormII);
  const double a = (1 + 3 + 2) / 3.0, b = (10 + 12 + 11 + 11) / 4.0;
  CHECK(t(0) == doctest::Approx(a).epsilon(1e-13));
  CHECK(t(1) == doctest::Approx(b - a).epsilon(1e-13));

  // Pooled mean to machine precision.
  Rng rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> ym(300), ya(700);
  for (auto& v : ym) v = 5 + nd(rng);
  for (auto& v : ya) v = 5 + nd(rng);
  long double s = 0;
  for (double v : ym) s += v;
  for (double v : ya) s += v;
  const double theta = integration_theta(make_main(ym, std::vector<int>(300, 0), 1),
                                         make_aux(ya, std::vector<int>(700, 0)), WorkingFunction::FormI)(0);
  CHECK(std::fabs(theta - static_cast<double>(s / 1000.0L)) <= 8 * std::numeric_limits<double>::epsilon() * 5);

  CHECK_THROWS_AS(integration_theta(make_main({1, 2}, {0, 0}, 1), AuxDataset{}, WorkingFunction::FormII),
                  RankDeficiency);
}

TEST_CASE("integration scores") {
  SUBCASE("empty auxiliary data gives unit scores") {
    const auto main = make_main({0.3, 1.7, 2.2}, {0, 1, 1});
    const auto r = integration_scores(main, AuxDataset{}, integration_theta(main, {}, WorkingFunction::FormI),
                                      WorkingFunction::FormI);
    CHECK(r.scores == Eigen::VectorXd::Ones(3));
  }
  SUBCASE("hand solve") {
    const auto main = make_main({0, 2}, {0, 1});
    const auto aux = make_aux({1, 1}, {0, 1});
    const Eigen::VectorXd theta = integration_theta(main, aux, WorkingFunction::FormI);
    CHECK(theta(0) == 1.0);
    const auto r = integration_scores(main, aux, theta, WorkingFunction::FormI);
    for (int i = 0; i < 4; ++i) CHECK(r.scores(i) == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("shifted auxiliary mean") {
    Rng rng(5);
    std::normal_distribution<double> nd;
    std::vector<double> ym(100), ya(200);
    for (auto& v : ym) v = nd(rng);
    for (auto& v : ya) v = 0.4 + nd(rng);
    const auto main = make_main(ym, std::vector<int>(100, 0), 1);
    const auto aux = make_aux(ya, std::vector<int>(200, 0));
    const Eigen::VectorXd theta = integration_theta(main, aux, WorkingFunction::FormI);
    const auto r = integration_scores(main, aux, theta, WorkingFunction::FormI);
    CHECK(r.scores.sum() == doctest::Approx(300.0).epsilon(1e-8));
    CHECK(r.scores.minCoeff() > 0.0);
    double main_moment = 0.0, aux_moment = 0.0, weighted_main = 0.0;
    for (int i = 0; i < 100; ++i) {
      main_moment += r.scores(i) * (ym[static_cast<std::size_t>(i)] - theta(0));
      weighted_main += r.scores(i) * ym[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 200; ++i) aux_moment += r.scores(100 + i) * (ya[static_cast<std::size_t>(i)] - theta(0));
    CHECK(std::fabs(main_moment) < 1e-8);
    CHECK(std::fabs(aux_moment) < 1e-8);
    // Weighted main mean moves to theta, above the plain main mean.
    CHECK(weighted_main / r.scores.head(100).sum() == doctest::Approx(theta(0)).epsilon(1e-9));
    CHECK(theta(0) > main.y.mean());
  }
  SUBCASE("form two moments") {
    const auto main = make_main({0, 1, 2, 5, 6, 7}, {0, 0, 0, 1, 1, 1});
    const auto aux = make_aux({0.5, 1.5, 5.5, 7.5}, {0, 0, 1, 1});
    const Eigen::VectorXd theta = integration_theta(main, aux, WorkingFunction::FormII);
    const auto r = integration_scores(main, aux, theta, WorkingFunction::FormII);
    CHECK(r.scores.sum() == doctest::Approx(10.0).epsilon(1e-8));
    Eigen::Vector2d mm = Eigen::Vector2d::Zero();
    for (int i = 0; i < 6; ++i) {
      const double d1 = main.x[static_cast<std::size_t>(i)];
      const double e = main.y(i) - theta(0) - d1 * theta(1);
      mm += r.scores(i) * Eigen::Vector2d(e, d1 * e);
    }
    CHECK(mm.cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("incompatible auxiliary data") {
    const auto main = make_main({0, 1}, {0, 1});
    const auto aux = make_aux({5, 6}, {0, 1});
    const Eigen::VectorXd theta = integration_theta(main, aux, WorkingFunction::FormI);
    try {
      integration_scores(main, aux, theta, WorkingFunction::FormI);
      FAIL("expected a convex hull violation");
    } catch (const ConvexHullViolation& e) {
      CHECK(std::string(e.what()).find("auxiliary data incompatible with main data moments") != std::string::npos);
    }
  }
}

TEST_CASE("normal inference convention") {
  LevelEstimate e;
  e.tau = 0.699;
  apply_normal_inference(e, 0.348);
  CHECK(std::fabs(*e.ci_low - 0.017) <= 0.01);
  CHECK(std::fabs(*e.ci_high - 1.381) <= 0.01);
  CHECK(std::fabs(*e.p_value - 0.044) <= 0.005);
  CHECK(*e.p_value == doctest::Approx(2.0 * normal_upper_tail(0.699 / 0.348)).epsilon(1e-8));
  CHECK(*e.ci_low <= e.tau);
  CHECK(e.tau <= *e.ci_high);

  LevelEstimate c;
  c.tau = 3.0;
  apply_normal_inference(c, 0.0);
  CHECK(*c.ci_low == 3.0);
  CHECK(*c.ci_high == 3.0);
}

TEST_CASE("influence function") {
  const double c = 1.75;
  MainDataset d = make_main(std::vector<double>(6, c), {1, 0, 1, 1, 0, 0});
  const auto oracle = influence_variance(d, Eigen::VectorXd::Constant(6, 0.4), Eigen::VectorXd::Constant(6, c), 1, c);
  CHECK(oracle.f.cwiseAbs().maxCoeff() < 1e-14);
  CHECK(oracle.sigma2 < 1e-28);
}

TEST_CASE("stratified halves") {
  std::vector<int> x(101);
  for (int i = 0; i < 101; ++i) x[static_cast<std::size_t>(i)] = i % 7 == 0 ? 2 : i % 2;
  const auto h = stratified_halves(x, 3, 42);
  CHECK(h[0].size() + h[1].size() == 101);
  CHECK(std::abs(static_cast<long>(h[0].size()) - static_cast<long>(h[1].size())) <= 1);
  std::vector<int> seen(101, 0);
  for (const auto& half : h)
    for (auto i : half) ++seen[i];
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  for (int k = 0; k < 3; ++k) {
    long c0 = 0, c1 = 0;
    for (auto i : h[0]) c0 += x[i] == k;
    for (auto i : h[1]) c1 += x[i] == k;
    CHECK(std::abs(c0 - c1) <= 1);
  }
  CHECK(stratified_halves(x, 3, 42) == h);
  CHECK(stratified_halves(x, 3, 43) != h);
}

TEST_CASE("cross-fit estimate") {
  const MainDataset main = linear_main(240, 17);
  StudyConfig cfg = light_config();
  const auto r = cross_fit_estimate(main, AuxDataset{}, cfg);
  REQUIRE(r.estimates.size() == 2 * 6);
  const std::vector<std::string> methods{"Raw", "AIPTW.Preg", "AIPTW.RF", "AIPTW.GB", "CML", "CMLIB"};
  for (int k = 0; k < 2; ++k)
    for (std::size_t m = 0; m < methods.size(); ++m) {
      CHECK(r.estimates[static_cast<std::size_t>(k) * 6 + m].method == methods[m]);
      CHECK(r.estimates[static_cast<std::size_t>(k) * 6 + m].level == k);
    }

  SUBCASE("empty auxiliary data: CMLIB equals CML bitwise") {
    for (int k = 0; k < 2; ++k) {
      const auto& a = r.find(k, "CML");
      const auto& b = r.find(k, "CMLIB");
      CHECK(std::memcmp(&a.tau, &b.tau, sizeof(double)) == 0);
      CHECK(a.halves == b.halves);
    }
    CHECK(r.integration.scores == Eigen::VectorXd::Ones(240));
    CHECK(r.rho == 0.0);
  }
  SUBCASE("average of halves and convexity") {
    for (const auto& e : r.estimates) {
      if (e.method == "Raw") continue;
      CHECK(e.tau == 0.5 * (e.halves[0] + e.halves[1]));
    }
    for (int h = 0; h < 2; ++h)
      for (int k = 0; k < 2; ++k) {
        double lo = 1e300, hi = -1e300;
        for (auto i : r.halves[static_cast<std::size_t>(h)])
          if (main.x[i] == k) {
            lo = std::min(lo, main.y(static_cast<Eigen::Index>(i)));
            hi = std::max(hi, main.y(static_cast<Eigen::Index>(i)));
          }
        const double v = r.find(k, "CML").halves[static_cast<std::size_t>(h)];
        CHECK(v >= lo);
        CHECK(v <= hi);
      }
  }
  SUBCASE("determinism and frozen replay") {
    const auto again = cross_fit_estimate(main, AuxDataset{}, cfg);
    for (std::size_t i = 0; i < r.estimates.size(); ++i) CHECK(r.estimates[i].tau == again.estimates[i].tau);
    CrossFitOptions opts;
    opts.frozen = &r.tuning;
    const auto frozen = cross_fit_estimate(main, AuxDataset{}, cfg, opts);
    for (std::size_t i = 0; i < r.estimates.size(); ++i) CHECK(r.estimates[i].tau == frozen.estimates[i].tau);
  }
  SUBCASE("auxiliary data and extra sets") {
    Rng rng(2);
    std::normal_distribution<double> nd;
    AuxDataset aux;
    aux.y.resize(480);
    aux.x.resize(480);
    for (int i = 0; i < 480; ++i) {
      aux.x[static_cast<std::size_t>(i)] = i % 2;
      aux.y(i) = 0.5 * (i % 2) + 0.35 * (i % 2 ? 1 : -1) + 1.2 * nd(rng);
    }
    CrossFitOptions opts;
    opts.extra_aux.emplace_back("same", &aux);
    const auto with = cross_fit_estimate(main, aux, cfg, opts);
    CHECK(with.rho == doctest::Approx(2.0 / 3.0));
    CHECK(with.estimates.size() == 2 * 7);
    for (int k = 0; k < 2; ++k) {
      CHECK(with.find(k, "CMLIB.same").tau == with.find(k, "CMLIB").tau);
      CHECK(with.find(k, "CML").tau == r.find(k, "CML").tau);
      CHECK(with.find(k, "CMLIB").tau != r.find(k, "CMLIB").tau);
    }
  }
}

TEST_CASE("three-level cross-fit emits six methods per level") {
  MainDataset main = linear_main(300, 23);
  Rng rng(24);
  for (std::size_t i = 0; i < main.size(); ++i)
    if (std::uniform_real_distribution<double>()(rng) < 0.3) main.x[i] = 2;
  main.coding = LevelCoding::identity(3);
  const auto r = cross_fit_estimate(main, AuxDataset{}, light_config());
  CHECK(r.estimates.size() == 18);
}

TEST_CASE("bootstrap inference") {
  SUBCASE("constant outcome has zero spread") {
    MainDataset main = linear_main(120, 31);
    main.y.setConstant(2.0);
    StudyConfig cfg = light_config();
    cfg.bootstrap_reps = 4;
    auto point = cross_fit_estimate(main, AuxDataset{}, cfg);
    const auto summary = bootstrap_inference(main, AuxDataset{}, cfg, point);
    CHECK(summary.succeeded == 4);
    for (const auto& e : point.estimates) {
      if (e.method.rfind("AIPTW", 0) == 0) continue;
      CHECK(e.tau == doctest::Approx(2.0).epsilon(1e-12));
      CHECK(*e.bsd == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    }
  }
  SUBCASE("thread count does not change the result") {
    const MainDataset main = linear_main(160, 37);
    StudyConfig cfg = light_config();
    cfg.bootstrap_reps = 4;
    cfg.threads = 1;
    auto a = cross_fit_estimate(main, AuxDataset{}, cfg);
    bootstrap_inference(main, AuxDataset{}, cfg, a);
    cfg.threads = 4;
    auto b = cross_fit_estimate(main, AuxDataset{}, cfg);
    bootstrap_inference(main, AuxDataset{}, cfg, b);
    for (std::size_t i = 0; i < a.estimates.size(); ++i) {
      CHECK(*a.estimates[i].bsd == *b.estimates[i].bsd);
      CHECK(*a.estimates[i].ci_low <= a.estimates[i].tau);
    }
  }
  SUBCASE("too few replicates") {
    const MainDataset main = linear_main(120, 41);
    StudyConfig cfg = light_config();
    cfg.bootstrap_reps = 1;
    auto point = cross_fit_estimate(main, AuxDataset{}, cfg);
    CHECK_THROWS_AS(bootstrap_inference(main, AuxDataset{}, cfg, point), ValidationError);
  }
}
