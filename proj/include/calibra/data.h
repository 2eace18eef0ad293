#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibra/learner_spec.h"

namespace calibra {

// Dense exposure coding: level k stands for the k-th smallest observed
// exposure value in the main file.
struct LevelCoding {
  std::vector<long long> codes;

  int levels() const { return static_cast<int>(codes.size()); }
  // Dense level for an original value, or -1 when unknown.
  int encode(long long value) const;
  static LevelCoding identity(int levels);
};

// Complete-case main data: outcome, exposure level in 0..L, confounders.
struct MainDataset {
  Eigen::VectorXd y;
  std::vector<int> x;
  Eigen::MatrixXd z;
  std::vector<std::string> column_names;
  std::string outcome_name = "y";
  std::string exposure_name = "x";
  LevelCoding coding;

  std::size_t size() const { return x.size(); }
  int levels() const { return coding.levels(); }
  int covariates() const { return static_cast<int>(z.cols()); }
  std::vector<std::size_t> level_counts() const;
  MainDataset subset(std::span<const std::size_t> rows) const;
};

// Auxiliary data: outcome and exposure only. `shared` optionally holds
// covariates observed in both datasets, used solely for matching.
struct AuxDataset {
  Eigen::VectorXd y;
  std::vector<int> x;
  Eigen::MatrixXd shared;
  std::vector<std::string> shared_names;

  std::size_t size() const { return x.size(); }
  bool empty() const { return x.empty(); }
  AuxDataset subset(std::span<const std::size_t> rows) const;
};

enum class WorkingFunction { FormI, FormII };

struct StudyConfig {
  int exposure_levels = 0;  // 0: taken from the main data
  std::vector<LearnerSpec> ps_candidates = {LearnerSpec::ridge_ps(), LearnerSpec::forest(),
                                            LearnerSpec::boosting()};
  std::vector<LearnerSpec> cm_candidates = {LearnerSpec::ridge_cm(), LearnerSpec::forest(),
                                            LearnerSpec::boosting()};
  WorkingFunction working_function = WorkingFunction::FormI;
  int bootstrap_reps = 100;
  std::uint64_t seed = 20240601;
  std::optional<int> match_ratio;
  double ps_clip = 1e-3;
  double el_tolerance = 1e-10;
  int el_max_iter = 200;
  int threads = 0;
};

// Throws ValidationError when the configuration is unusable.
void check_config(const StudyConfig& config);

struct LoadWarnings {
  std::vector<std::string> messages;
};

MainDataset load_main_csv(const std::string& path, const std::string& outcome_col,
                          const std::string& exposure_col);

// Exposure values are coded with the main data's coding; a value unseen in
// the main data is an error. Columns listed in `keep_cols` are retained as
// shared covariates; any other extra column is dropped with a warning.
AuxDataset load_aux_csv(const std::string& path, const std::string& outcome_col,
                        const std::string& exposure_col, const LevelCoding& coding,
                        const std::vector<std::string>& keep_cols = {},
                        LoadWarnings* warnings = nullptr);

void write_main_csv(const MainDataset& data, const std::string& path);
void write_aux_csv(const AuxDataset& data, const LevelCoding& coding, const std::string& path,
                   const std::string& outcome_name = "y", const std::string& exposure_name = "x");

struct ValidationReport {
  std::vector<std::size_t> level_counts;
  std::vector<std::size_t> aux_level_counts;
  std::vector<std::string> notes;
  std::vector<std::string> warnings;
};

// Minimum main-data units per exposure level (five per cross-fit half).
inline constexpr std::size_t kMinUnitsPerLevel = 10;

ValidationReport validate_study(const MainDataset& main, const AuxDataset& aux,
                                const StudyConfig& config);

// Structural checks shared by loaders and generators.
void check_main(const MainDataset& main);
void check_aux(const AuxDataset& aux, int levels);

}  // namespace calibra
