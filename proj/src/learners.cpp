#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "calibra/errors.h"
#include "calibra/learners.h"

namespace calibra {
namespace {

using learn::fold_labels;

struct Folds {
  std::vector<std::vector<Eigen::Index>> train, valid;
};

Folds make_folds(std::size_t n, int folds, std::uint64_t seed) {
  folds = std::max(2, std::min<int>(folds, static_cast<int>(n)));
  const auto labels = fold_labels(n, folds, seed);
  Folds out;
  out.train.resize(static_cast<std::size_t>(folds));
  out.valid.resize(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < n; ++i)
    for (int f = 0; f < folds; ++f)
      (labels[i] == f ? out.valid : out.train)[static_cast<std::size_t>(f)].push_back(
          static_cast<Eigen::Index>(i));
  return out;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& z, const std::vector<Eigen::Index>& rows) {
  return z(rows, Eigen::all);
}

std::size_t argmin(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

// Mean squared CV error per grid point, one eigendecomposition per fold.
std::vector<double> ridge_cv_curve(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                   const Eigen::VectorXd& y, std::uint64_t seed) {
  const auto& grid = spec.lambda_grid;
  std::vector<double> curve(grid.size(), 0.0);
  const Folds folds = make_folds(static_cast<std::size_t>(z.rows()), spec.ridge_cv_folds, seed);
  for (std::size_t f = 0; f < folds.train.size(); ++f) {
    const Eigen::MatrixXd zt = take_rows(z, folds.train[f]);
    const Eigen::VectorXd yt = y(folds.train[f]);
    const auto st = learn::Standardizer::fit(zt);
    const Eigen::MatrixXd X = st.apply(zt);
    const Eigen::MatrixXd Xv = st.apply(take_rows(z, folds.valid[f]));
    const Eigen::VectorXd yv = y(folds.valid[f]);
    const double nt = static_cast<double>(zt.rows());
    const double ybar = yt.mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(X.transpose() * X / nt);
    const Eigen::VectorXd proj =
        eig.eigenvectors().transpose() * (X.transpose() * (yt.array() - ybar).matrix() / nt);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const Eigen::VectorXd coef =
          eig.eigenvectors() * (proj.array() / (eig.eigenvalues().array().max(0.0) + grid[g])).matrix();
      curve[g] += ((Xv * coef).array() + ybar - yv.array()).square().sum();
    }
  }
  for (auto& c : curve) c /= static_cast<double>(z.rows());
  return curve;
}

double multinomial_deviance(const Eigen::MatrixXd& prob, std::span<const int> x) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < prob.rows(); ++i)
    dev -= 2.0 * std::log(std::max(prob(i, x[static_cast<std::size_t>(i)]), 1e-15));
  return dev;
}

// Multinomial deviance per grid point, warm-started from large to small lambda.
std::vector<double> multinomial_cv_curve(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                         std::span<const int> x, int levels, std::uint64_t seed) {
  const auto& grid = spec.lambda_grid;
  std::vector<std::size_t> order(grid.size());
  for (std::size_t g = 0; g < order.size(); ++g) order[g] = g;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return grid[a] > grid[b]; });
  std::vector<double> curve(grid.size(), 0.0);
  const Folds folds = make_folds(static_cast<std::size_t>(z.rows()), spec.ridge_cv_folds, seed);
  for (std::size_t f = 0; f < folds.train.size(); ++f) {
    const Eigen::MatrixXd zt = take_rows(z, folds.train[f]);
    const Eigen::MatrixXd zv = take_rows(z, folds.valid[f]);
    std::vector<int> xt, xv;
    for (auto r : folds.train[f]) xt.push_back(x[static_cast<std::size_t>(r)]);
    for (auto r : folds.valid[f]) xv.push_back(x[static_cast<std::size_t>(r)]);
    Eigen::MatrixXd warm;
    for (std::size_t g : order) {
      const auto model = learn::fit_ridge_multinomial(zt, xt, levels, grid[g], warm.size() ? &warm : nullptr);
      warm = model.coef;
      curve[g] += multinomial_deviance(model.predict_proba(zv), xv);
    }
  }
  for (auto& c : curve) c /= static_cast<double>(z.rows());
  return curve;
}

int rounds_for(const LearnerSpec& spec, std::size_t sub_model) {
  if (spec.fixed_rounds.size() == 1) return spec.fixed_rounds.front();
  return spec.fixed_rounds.at(sub_model);
}

void check_rows(Eigen::Index z_rows, std::size_t other, const char* what) {
  if (static_cast<std::size_t>(z_rows) != other) {
    std::ostringstream msg;
    msg << what << " has " << other << " entries but covariates have " << z_rows << " rows";
    throw ValidationError(msg.str());
  }
}

}  // namespace

LearnerSpec TuningChoice::freeze(LearnerSpec spec) const {
  if (lambda) spec.fixed_lambda = lambda;
  if (!rounds.empty()) spec.fixed_rounds = rounds;
  return spec;
}

std::size_t min_cm_units(int covariates) {
  return std::max<std::size_t>(10, static_cast<std::size_t>(std::ceil(covariates / 10.0)));
}

std::unique_ptr<PsModel> fit_ps(const LearnerSpec& spec, const Eigen::MatrixXd& z_train,
                                std::span<const int> x_train, int levels, std::uint64_t seed) {
  check_spec(spec);
  check_rows(z_train.rows(), x_train.size(), "exposure vector");
  if (levels < 2) throw ValidationError("propensity model needs at least two exposure levels");
  std::vector<std::size_t> counts(static_cast<std::size_t>(levels), 0);
  for (int v : x_train) {
    if (v < 0 || v >= levels) throw ValidationError("exposure level out of range in training rows");
    ++counts[static_cast<std::size_t>(v)];
  }
  for (int k = 0; k < levels; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw ValidationError("exposure level " + std::to_string(k) + " absent from training rows");

  const int p = static_cast<int>(z_train.cols());
  switch (spec.kind) {
    case LearnerKind::RidgeMultinomial: {
      TuningChoice tuning;
      double lambda;
      if (spec.fixed_lambda) {
        lambda = *spec.fixed_lambda;
      } else {
        tuning.cv_curve = multinomial_cv_curve(spec, z_train, x_train, levels, seed);
        const std::size_t best = argmin(tuning.cv_curve);
        lambda = spec.lambda_grid[best];
        tuning.cv_score = tuning.cv_curve[best];
      }
      tuning.lambda = lambda;
      auto model = std::make_unique<learn::RidgeMultinomial>(
          learn::fit_ridge_multinomial(z_train, x_train, levels, lambda));
      model->kind = spec.kind;
      model->tuning = tuning;
      model->covariates = p;
      model->levels = levels;
      return model;
    }
    case LearnerKind::RandomForest: {
      auto model = std::make_unique<learn::ForestClassifier>(
          learn::fit_forest_classifier(spec, z_train, x_train, levels, seed));
      return model;
    }
    case LearnerKind::GradientBoosting: {
      auto model = std::make_unique<learn::BoostedClassifier>();
      model->kind = spec.kind;
      model->covariates = p;
      model->levels = levels;
      const int subs = levels == 2 ? 1 : levels;
      double cv = 0.0;
      for (int s = 0; s < subs; ++s) {
        const int target = levels == 2 ? 1 : s;
        Eigen::VectorXd t(z_train.rows());
        for (Eigen::Index i = 0; i < t.size(); ++i)
          t(i) = x_train[static_cast<std::size_t>(i)] == target ? 1.0 : 0.0;
        std::optional<int> rounds;
        if (!spec.fixed_rounds.empty()) rounds = rounds_for(spec, static_cast<std::size_t>(s));
        auto fit = learn::fit_boosting(spec, z_train, t, learn::BoostLoss::Logistic, rounds,
                                       derive_seed(seed, static_cast<std::uint64_t>(s)));
        model->ensembles.push_back(std::move(fit.ensemble));
        model->tuning.rounds.push_back(fit.rounds);
        cv += fit.cv_score;
      }
      model->tuning.cv_score = cv;
      return model;
    }
    case LearnerKind::RidgeRegression:
      break;
  }
  throw ValidationError("learner " + kind_name(spec.kind) + " cannot fit a propensity model");
}

std::unique_ptr<CmModel> fit_cm(const LearnerSpec& spec, const Eigen::MatrixXd& z_train,
                                const Eigen::VectorXd& y_train, std::span<const int> x_train,
                                int level, std::uint64_t seed) {
  check_spec(spec);
  check_rows(z_train.rows(), x_train.size(), "exposure vector");
  check_rows(z_train.rows(), static_cast<std::size_t>(y_train.size()), "outcome vector");
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < x_train.size(); ++i)
    if (x_train[i] == level) rows.push_back(static_cast<Eigen::Index>(i));
  const int p = static_cast<int>(z_train.cols());
  if (rows.size() < min_cm_units(p)) {
    std::ostringstream msg;
    msg << "exposure level " << level << " has " << rows.size() << " training units; at least "
        << min_cm_units(p) << " required";
    throw ValidationError(msg.str());
  }
  const Eigen::MatrixXd z = take_rows(z_train, rows);
  const Eigen::VectorXd y = y_train(rows);

  std::unique_ptr<CmModel> out;
  switch (spec.kind) {
    case LearnerKind::RidgeRegression: {
      TuningChoice tuning;
      double lambda;
      if (spec.fixed_lambda) {
        lambda = *spec.fixed_lambda;
      } else {
        tuning.cv_curve = ridge_cv_curve(spec, z, y, seed);
        const std::size_t best = argmin(tuning.cv_curve);
        lambda = spec.lambda_grid[best];
        tuning.cv_score = tuning.cv_curve[best];
      }
      tuning.lambda = lambda;
      auto model = std::make_unique<learn::RidgeRegression>(learn::fit_ridge(z, y, lambda));
      model->tuning = tuning;
      out = std::move(model);
      break;
    }
    case LearnerKind::RandomForest:
      out = std::make_unique<learn::ForestRegressor>(learn::fit_forest_regressor(spec, z, y, seed));
      break;
    case LearnerKind::GradientBoosting: {
      std::optional<int> rounds;
      if (!spec.fixed_rounds.empty()) rounds = rounds_for(spec, 0);
      auto fit = learn::fit_boosting(spec, z, y, learn::BoostLoss::Squared, rounds, seed);
      auto model = std::make_unique<learn::BoostedRegressor>();
      model->ensemble = std::move(fit.ensemble);
      model->tuning.rounds = {fit.rounds};
      model->tuning.cv_score = fit.cv_score;
      out = std::move(model);
      break;
    }
    case LearnerKind::RidgeMultinomial:
      throw ValidationError("learner " + kind_name(spec.kind) + " cannot fit a conditional mean");
  }
  out->kind = spec.kind;
  out->covariates = p;
  out->level = level;
  return out;
}

Eigen::MatrixXd predict_ps(const PsModel& model, const Eigen::MatrixXd& z_eval, double clip) {
  if (z_eval.cols() != model.covariates)
    throw ValidationError("prediction matrix has " + std::to_string(z_eval.cols()) +
                          " columns; model was trained on " + std::to_string(model.covariates));
  if (!(clip >= 0.0 && clip < 0.5)) throw ValidationError("ps clip must lie in [0, 0.5)");
  Eigen::MatrixXd prob = model.predict_proba(z_eval).array().max(clip).min(1.0 - clip);
  for (Eigen::Index i = 0; i < prob.rows(); ++i) prob.row(i) /= prob.row(i).sum();
  return prob;
}

Eigen::VectorXd predict_cm(const CmModel& model, const Eigen::MatrixXd& z_eval) {
  if (z_eval.cols() != model.covariates)
    throw ValidationError("prediction matrix has " + std::to_string(z_eval.cols()) +
                          " columns; model was trained on " + std::to_string(model.covariates));
  return model.predict(z_eval);
}

CandidateSet assemble_candidates(const MainDataset& main, const StudyConfig& config,
                                 std::span<const std::size_t> train_idx,
                                 std::span<const std::size_t> eval_idx, std::uint64_t seed,
                                 const TuningRecord* frozen) {
  const int levels = main.levels();
  const MainDataset train = main.subset(train_idx);
  const MainDataset eval = main.subset(eval_idx);
  for (int k = 0; k < levels; ++k) {
    const auto tc = train.level_counts(), ec = eval.level_counts();
    if (tc[static_cast<std::size_t>(k)] == 0 || ec[static_cast<std::size_t>(k)] == 0)
      throw ValidationError("exposure level " + std::to_string(k) +
                            " must occur in both the training and evaluation rows");
  }
  const auto m = static_cast<Eigen::Index>(eval.size());
  const auto j1 = static_cast<Eigen::Index>(config.ps_candidates.size());
  const auto j2 = static_cast<Eigen::Index>(config.cm_candidates.size());
  if (frozen && (frozen->ps.size() != config.ps_candidates.size() ||
                 frozen->cm.size() != config.cm_candidates.size()))
    throw ValidationError("frozen tuning does not match the candidate lists");

  CandidateSet out;
  auto& pred = out.predictions;
  pred.ps.assign(static_cast<std::size_t>(levels), Eigen::MatrixXd(m, j1));
  pred.cm.assign(static_cast<std::size_t>(levels), Eigen::MatrixXd(m, j2));
  pred.ps_specs = config.ps_candidates;
  pred.cm_specs = config.cm_candidates;
  out.tuning.ps.resize(static_cast<std::size_t>(j1));
  out.tuning.cm.assign(static_cast<std::size_t>(j2), std::vector<TuningChoice>(static_cast<std::size_t>(levels)));

  for (Eigen::Index j = 0; j < j1; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const LearnerSpec spec = frozen ? frozen->ps[ju].freeze(config.ps_candidates[ju]) : config.ps_candidates[ju];
    const auto model = fit_ps(spec, train.z, train.x, levels, derive_seed(seed, 100 + ju));
    out.tuning.ps[ju] = model->tuning;
    const Eigen::MatrixXd prob = predict_ps(*model, eval.z, config.ps_clip);
    for (int k = 0; k < levels; ++k) pred.ps[static_cast<std::size_t>(k)].col(j) = prob.col(k);
  }
  for (Eigen::Index j = 0; j < j2; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    for (int k = 0; k < levels; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const LearnerSpec spec =
          frozen ? frozen->cm[ju].at(ku).freeze(config.cm_candidates[ju]) : config.cm_candidates[ju];
      const auto model = fit_cm(spec, train.z, train.y, train.x, k, derive_seed(seed, 1000 + 100 * ju + ku));
      out.tuning.cm[ju][ku] = model->tuning;
      pred.cm[ku].col(j) = predict_cm(*model, eval.z);
    }
  }
  const double sat = ps_saturation(pred, config.ps_clip);
  if (sat > 0.05) {
    std::ostringstream msg;
    msg.precision(3);
    msg << "propensity scores saturated at the clip bounds for " << 100.0 * sat << "% of entries";
    pred.warnings.push_back(msg.str());
  }
  return out;
}

double ps_saturation(const CandidatePredictions& preds, double clip) {
  std::size_t hit = 0, total = 0;
  const double tol = 1e-9;
  for (const auto& mat : preds.ps) {
    total += static_cast<std::size_t>(mat.size());
    for (Eigen::Index i = 0; i < mat.size(); ++i) {
      const double v = mat.data()[i];
      if (v <= clip * (1.0 + tol) + 1e-15 || v >= 1.0 - clip * (1.0 - tol) - 1e-15) ++hit;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace calibra
