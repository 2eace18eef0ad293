#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibra/data.h"
#include "calibra/learner_spec.h"
#include "calibra/trees.h"

namespace calibra {

// Hyperparameters selected during fitting; replaying them into a spec
// freezes the learner (used by bootstrap replicates).
struct TuningChoice {
  std::optional<double> lambda;
  std::vector<int> rounds;  // boosting rounds per binary sub-model
  double cv_score = 0.0;
  std::vector<double> cv_curve;  // ridge: CV loss per grid point

  LearnerSpec freeze(LearnerSpec spec) const;
};

// Propensity model over L+1 exposure levels.
class PsModel {
 public:
  virtual ~PsModel() = default;
  // Raw class probabilities, rows summing to 1.
  virtual Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& z) const = 0;

  LearnerKind kind = LearnerKind::RidgeMultinomial;
  TuningChoice tuning;
  int covariates = 0;
  int levels = 0;
};

// Conditional-mean model for one exposure level.
class CmModel {
 public:
  virtual ~CmModel() = default;
  virtual Eigen::VectorXd predict(const Eigen::MatrixXd& z) const = 0;

  LearnerKind kind = LearnerKind::RidgeRegression;
  TuningChoice tuning;
  int covariates = 0;
  int level = 0;
};

// Fits a multinomial propensity model. Every level must occur in x_train.
std::unique_ptr<PsModel> fit_ps(const LearnerSpec& spec, const Eigen::MatrixXd& z_train,
                                std::span<const int> x_train, int levels, std::uint64_t seed);

// Fits mu_x on the training rows with exposure == level only.
std::unique_ptr<CmModel> fit_cm(const LearnerSpec& spec, const Eigen::MatrixXd& z_train,
                                const Eigen::VectorXd& y_train, std::span<const int> x_train,
                                int level, std::uint64_t seed);

// Smallest subgroup fit_cm accepts for p covariates.
std::size_t min_cm_units(int covariates);

// Probabilities clipped to [clip, 1 - clip] and renormalized across levels.
Eigen::MatrixXd predict_ps(const PsModel& model, const Eigen::MatrixXd& z_eval, double clip);
Eigen::VectorXd predict_cm(const CmModel& model, const Eigen::MatrixXd& z_eval);

// Per-level candidate matrices over an evaluation set: ps[x] is m x J1,
// cm[x] is m x J2.
struct CandidatePredictions {
  std::vector<Eigen::MatrixXd> ps;
  std::vector<Eigen::MatrixXd> cm;
  std::vector<LearnerSpec> ps_specs;
  std::vector<LearnerSpec> cm_specs;
  std::vector<std::string> warnings;

  int levels() const { return static_cast<int>(ps.size()); }
  Eigen::Index rows() const { return ps.empty() ? 0 : ps.front().rows(); }
};

// Tuning selected for one training half: ps[j] and cm[j][level].
struct TuningRecord {
  std::vector<TuningChoice> ps;
  std::vector<std::vector<TuningChoice>> cm;
};

struct CandidateSet {
  CandidatePredictions predictions;
  TuningRecord tuning;
};

// Fits every PS spec once and every CM spec per level on the training
// rows, then predicts on the evaluation rows (in eval_idx order). When
// `frozen` is given its selections replace cross-validation.
CandidateSet assemble_candidates(const MainDataset& main, const StudyConfig& config,
                                 std::span<const std::size_t> train_idx,
                                 std::span<const std::size_t> eval_idx, std::uint64_t seed,
                                 const TuningRecord* frozen = nullptr);

// Fraction of PS entries sitting on the clip bounds.
double ps_saturation(const CandidatePredictions& preds, double clip);

// Concrete learners, exposed for direct use and testing.
namespace learn {

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;
  static Standardizer fit(const Eigen::MatrixXd& z);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& z) const;
};

class RidgeRegression final : public CmModel {
 public:
  Standardizer standardizer;
  Eigen::VectorXd beta;
  double intercept = 0.0;
  Eigen::VectorXd predict(const Eigen::MatrixXd& z) const override;
};

// Penalized least squares on standardized covariates:
// min (1/2n)|y - b0 - X b|^2 + (lambda/2)|b|^2.
RidgeRegression fit_ridge(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double lambda);

class RidgeMultinomial final : public PsModel {
 public:
  Standardizer standardizer;
  Eigen::MatrixXd coef;  // (p + 1) x (K - 1); row 0 holds intercepts; level 0 is the reference
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& z) const override;
};

// Penalized multinomial deviance: -(1/n) sum log p_{i,x_i} + (lambda/2)|B|^2
// (intercepts unpenalized), solved by damped Newton.
RidgeMultinomial fit_ridge_multinomial(const Eigen::MatrixXd& z, std::span<const int> x,
                                       int levels, double lambda,
                                       const Eigen::MatrixXd* warm_start = nullptr);

class ForestClassifier final : public PsModel {
 public:
  std::vector<trees::Tree> trees;
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& z) const override;
  // Class voted by tree t for each row.
  Eigen::VectorXd tree_votes(std::size_t t, const Eigen::MatrixXd& z) const;
};

class ForestRegressor final : public CmModel {
 public:
  std::vector<trees::Tree> trees;
  Eigen::VectorXd predict(const Eigen::MatrixXd& z) const override;
  Eigen::VectorXd tree_predictions(std::size_t t, const Eigen::MatrixXd& z) const;
};

ForestClassifier fit_forest_classifier(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                       std::span<const int> x, int levels, std::uint64_t seed);
ForestRegressor fit_forest_regressor(const LearnerSpec& spec, const Eigen::MatrixXd& z,
                                     const Eigen::VectorXd& y, std::uint64_t seed);

// Additive tree ensemble: base + shrinkage * sum of tree outputs.
struct BoostedEnsemble {
  double base = 0.0;
  double shrinkage = 0.1;
  std::vector<trees::Tree> trees;
  Eigen::VectorXd score(const Eigen::MatrixXd& z) const;
};

class BoostedRegressor final : public CmModel {
 public:
  BoostedEnsemble ensemble;
  Eigen::VectorXd predict(const Eigen::MatrixXd& z) const override;
};

class BoostedClassifier final : public PsModel {
 public:
  // One-vs-rest logit ensembles; a single ensemble for level 1 when binary.
  std::vector<BoostedEnsemble> ensembles;
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& z) const override;
};

enum class BoostLoss { Squared, Logistic };

struct BoostFit {
  BoostedEnsemble ensemble;
  int rounds = 0;
  double cv_score = 0.0;
};

// Fits with `rounds` when given, otherwise picks rounds in [0, max_trees]
// by K-fold CV on the loss.
BoostFit fit_boosting(const LearnerSpec& spec, const Eigen::MatrixXd& z, const Eigen::VectorXd& t,
                      BoostLoss loss, std::optional<int> rounds, std::uint64_t seed);

// Balanced fold labels 0..folds-1 in a seeded random order.
std::vector<int> fold_labels(std::size_t n, int folds, std::uint64_t seed);

}  // namespace learn
}  // namespace calibra
