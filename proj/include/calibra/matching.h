#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calibra/data.h"

namespace calibra {

// Logistic membership model for R (1 = main, 0 = auxiliary) on the shared
// covariates.
struct MembershipScores {
  Eigen::VectorXd main_logit;
  Eigen::VectorXd aux_logit;
  Eigen::VectorXd coef;  // intercept first, on standardized covariates
  std::vector<int> used_columns;  // non-constant shared columns
};

// Throws ValidationError when the model separates the two datasets.
MembershipScores fit_membership_scores(const Eigen::MatrixXd& main_shared,
                                       const Eigen::MatrixXd& aux_shared);

struct BalanceRow {
  std::string name;
  double smd_before = 0.0;
  double smd_after = 0.0;
};

struct MatchResult {
  std::vector<std::size_t> kept_aux_indices;  // ascending
  Eigen::VectorXd membership_scores;  // probabilities, main units first
  int ratio = 1;
  std::vector<BalanceRow> balance;
  std::vector<std::string> warnings;
};

// Greedy nearest-neighbour matching on the logit scale without
// replacement: k passes over the main units, each in a seeded random
// order. Units farther than `caliper` (logit scale) stay unmatched.
MatchResult nn_match(const MembershipScores& scores, int ratio, std::uint64_t seed,
                     const Eigen::MatrixXd& main_shared, const Eigen::MatrixXd& aux_shared,
                     const std::vector<std::string>& names = {},
                     std::optional<double> caliper = std::nullopt);

// Main-data columns matching the auxiliary shared columns by name.
Eigen::MatrixXd shared_columns(const MainDataset& main, const std::vector<std::string>& names);

// Fits membership scores on `names` (all aux shared columns when empty),
// matches, and returns the matched auxiliary subset.
AuxDataset match_auxiliary(const MainDataset& main, const AuxDataset& aux, int ratio,
                           std::uint64_t seed, const std::vector<std::string>& names = {},
                           MatchResult* result = nullptr);

}  // namespace calibra
