#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calibra/data.h"
#include "calibra/estimators.h"
#include "calibra/rng.h"

namespace calibra {

enum class SimCase { Case1, Case2, Case3 };

std::string case_name(SimCase c);
SimCase parse_case(const std::string& name);

struct Scenario {
  SimCase sim_case = SimCase::Case1;
  int p = 10;
  int n = 500;
  double aux_multiplier = 2.0;
  int levels = 2;  // 3 uses the softmax extension
  // Added to auxiliary outcomes.
  double hetero_shift = 0.0;
  // Mean shift of the auxiliary covariates: +c on Z1 and Z2, +2c/3 on the
  // rest, which keeps the law of (Z3..Zp) given (Z1, Z2) unchanged.
  double covariate_shift = 0.0;
  int runs = 100;
  std::uint64_t seed = 1;
};

// Throws ValidationError unless p >= 5, n >= 100, levels in {2, 3}.
void check_scenario(const Scenario& s);

// Equicorrelated standard normal columns (pairwise correlation 0.5).
Eigen::MatrixXd gen_covariates(int n, int p, Rng& rng);

// Probability of exposure level 1 in the binary design.
double true_ps(SimCase c, const Eigen::Ref<const Eigen::RowVectorXd>& z);
// Level probabilities: binary, or softmax over (0, eta, -eta) for three levels.
Eigen::VectorXd true_ps_levels(SimCase c, const Eigen::Ref<const Eigen::RowVectorXd>& z, int levels);
double true_cm(SimCase c, int x, const Eigen::Ref<const Eigen::RowVectorXd>& z);

struct SimStudy {
  MainDataset main;
  AuxDataset aux;  // shared covariates z1, z2 retained for matching
  Eigen::MatrixXd true_ps;  // n x levels
  Eigen::MatrixXd true_cm;  // n x levels
};

SimStudy gen_study(const Scenario& s, Rng& rng);

struct OracleTruth {
  double value = 0.0;
  double se = 0.0;
};

OracleTruth true_tau_oracle(SimCase c, int x, long long draws, Rng& rng);

struct MonteCarloOptions {
  bool bootstrap = false;
  int match_ratio = 0;  // > 0 adds "CMLIB.matched"
  long long oracle_draws = 4'000'000;
  std::optional<std::vector<double>> truth;  // per level; skips the oracle
  int threads = 0;
};

struct MethodSummary {
  std::string method;
  int level = 0;
  double truth = 0.0;
  double bias = 0.0;
  double mcsd = 0.0;
  std::optional<double> mean_bsd;
  std::optional<double> coverage;
  int count = 0;
  int failures = 0;
};

struct ReplicateRecord {
  std::vector<double> tau;
  std::vector<double> bsd;
  std::vector<double> ci_low;
  std::vector<double> ci_high;
  std::string error;  // whole replicate failed
};

struct MonteCarloTable {
  Scenario scenario;
  std::vector<double> truth;
  std::vector<double> truth_se;
  std::vector<std::string> methods;  // per level, in estimate order
  std::vector<MethodSummary> rows;
  std::vector<ReplicateRecord> replicates;

  const MethodSummary& find(int level, const std::string& method) const;
};

MonteCarloTable run_monte_carlo(const Scenario& s, const StudyConfig& config,
                                const MonteCarloOptions& options = {});

}  // namespace calibra
