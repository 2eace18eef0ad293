#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibra/data.h"
#include "calibra/el_solver.h"
#include "calibra/learners.h"

namespace calibra {

// Integration scores p_i over pooled main + auxiliary units, main first.
struct IntegrationResult {
  Eigen::VectorXd theta;
  Eigen::VectorXd scores;
  Eigen::VectorXd dual;
  std::vector<int> kept_columns;  // columns of H retained by the filter
  int iterations = 0;
  double max_constraint_violation = 0.0;
};

struct LevelEstimate {
  int level = 0;
  std::string method;  // Raw, AIPTW.<family>, CML, CMLIB
  double tau = 0.0;
  std::array<double, 2> halves{};  // per-half estimates (Raw: full-sample value twice)
  std::optional<double> bsd;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  std::optional<double> p_value;
  std::optional<double> n_eff;  // 1 / sum of squared normalized weights, summed over halves
};

LevelEstimate raw_mean(const MainDataset& main, int level);

// Doubly robust estimate from one PS column and one CM column for `level`,
// all vectors aligned to the same units.
double aiptw(const Eigen::VectorXd& y, std::span<const int> x, const Eigen::VectorXd& ps,
             const Eigen::VectorXd& mu, int level);

// Calibration constraints for the units in `group`: candidate predictions
// centered at their means over all evaluation rows.
Eigen::MatrixXd build_g(const CandidatePredictions& preds, int level,
                        std::span<const Eigen::Index> group);

// As build_g, with CM columns modified by the main-unit integration scores
// (aligned to the evaluation rows).
Eigen::MatrixXd build_g_star(const CandidatePredictions& preds, const Eigen::VectorXd& scores,
                             int level, std::span<const Eigen::Index> group);

struct CalibratedEstimate {
  double tau = 0.0;
  Eigen::VectorXd weights;  // calibration weights over the group
  std::vector<int> kept_columns;
  std::vector<int> dropped_columns;
  int iterations = 0;
  double n_eff = 0.0;
};

// Weighted group mean with EL calibration weights. Rows of y/x align with
// the prediction rows.
CalibratedEstimate cml(const Eigen::VectorXd& y, std::span<const int> x,
                       const CandidatePredictions& preds, int level, const ElOptions& options = {});

// Doubly weighted estimate sum(p w y) / sum(p w).
CalibratedEstimate cmlib(const Eigen::VectorXd& y, std::span<const int> x,
                         const CandidatePredictions& preds, const Eigen::VectorXd& scores,
                         int level, const ElOptions& options = {});

// Form I: pooled mean. Form II: pooled OLS of y on level indicators with
// intercept, i.e. (mean at level 0, contrasts).
Eigen::VectorXd integration_theta(const MainDataset& main, const AuxDataset& aux,
                                  WorkingFunction form);

// Scores are exactly 1 when the auxiliary data is empty.
IntegrationResult integration_scores(const MainDataset& main, const AuxDataset& aux,
                                     const Eigen::VectorXd& theta, WorkingFunction form,
                                     const ElOptions& options = {});

// Random halves stratified by exposure level, each sorted ascending.
std::array<std::vector<std::size_t>, 2> stratified_halves(std::span<const int> x, int levels,
                                                          std::uint64_t seed);

struct CrossFitResult {
  std::vector<LevelEstimate> estimates;  // per level: Raw, AIPTW.*, CML, CMLIB
  IntegrationResult integration;
  double rho = 0.0;  // 1 - n / N
  std::array<TuningRecord, 2> tuning;  // keyed by evaluation half
  std::array<std::vector<std::size_t>, 2> halves;
  std::vector<std::string> warnings;
  std::vector<std::string> diagnostics;

  const LevelEstimate& find(int level, const std::string& method) const;
};

// Names of the AIPTW baselines: PS and CM candidates paired by family.
std::vector<std::string> aiptw_methods(const StudyConfig& config);

struct CrossFitOptions {
  // Tuning replayed per evaluation half instead of cross-validation.
  const std::array<TuningRecord, 2>* frozen = nullptr;
  // Infeasible calibration yields NaN for that method and level (with a
  // warning) instead of an error.
  bool lenient = false;
  // Additional auxiliary sets, each adding a method "CMLIB.<name>".
  std::vector<std::pair<std::string, const AuxDataset*>> extra_aux;
};

CrossFitResult cross_fit_estimate(const MainDataset& main, const AuxDataset& aux,
                                  const StudyConfig& config, const CrossFitOptions& options = {});

struct BootstrapSummary {
  int requested = 0;
  int succeeded = 0;
  int failed = 0;
  bool unreliable = false;  // more than 10% of replicates failed
  // replicates[b][k]: estimate k of replicate b (empty when it failed).
  std::vector<std::vector<double>> replicates;
  std::vector<std::string> failure_reasons;
};

// Fills bsd, ci and p_value with the normal approximation.
void apply_normal_inference(LevelEstimate& estimate, double bsd);

// Resamples main and aux independently, re-estimates with tuning frozen at
// the point fit, and attaches BSD, 95% CI and p-value to every estimate.
// Extra auxiliary sets in `options` are resampled alongside; `frozen` is
// ignored.
BootstrapSummary bootstrap_inference(const MainDataset& main, const AuxDataset& aux,
                                     const StudyConfig& config, CrossFitResult& point,
                                     const CrossFitOptions& options = {});

struct InfluenceOracle {
  Eigen::VectorXd f;
  double sigma2 = 0.0;
};

// f_i = I(X_i=x) Y_i / pi_i - (I(X_i=x) - pi_i) / pi_i * mu_i - tau.
InfluenceOracle influence_variance(const MainDataset& main, const Eigen::VectorXd& true_ps,
                                   const Eigen::VectorXd& true_mu, int level, double tau);

}  // namespace calibra
