#include "calibra/data.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "calibra/csv.h"
#include "calibra/errors.h"
#include "calibra/learners.h"

namespace calibra {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "NAN" || s == "." ||
         s == "null";
}

std::string where(std::size_t row, const std::string& col) {
  return "row " + std::to_string(row) + ", column " + col;
}

double parse_cell(const std::string& raw, std::size_t row, const std::string& col) {
  const std::string s = trim(raw);
  if (is_missing_token(s)) throw IoError("missing value at " + where(row, col));
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw IoError("non-numeric value '" + s + "' at " + where(row, col));
  if (!std::isfinite(v)) throw IoError("missing value at " + where(row, col));
  return v;
}

long long parse_exposure(const std::string& raw, std::size_t row, const std::string& col) {
  const double v = parse_cell(raw, row, col);
  if (v != std::round(v) || std::fabs(v) > 9e15)
    throw ValidationError("exposure must be integer-valued; got " + trim(raw) + " at " +
                          where(row, col));
  return static_cast<long long>(v);
}

}  // namespace

int LevelCoding::encode(long long value) const {
  const auto it = std::lower_bound(codes.begin(), codes.end(), value);
  if (it == codes.end() || *it != value) return -1;
  return static_cast<int>(it - codes.begin());
}

LevelCoding LevelCoding::identity(int levels) {
  LevelCoding c;
  for (int k = 0; k < levels; ++k) c.codes.push_back(k);
  return c;
}

std::vector<std::size_t> MainDataset::level_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(0, levels())), 0);
  for (int v : x) ++counts[static_cast<std::size_t>(v)];
  return counts;
}

MainDataset MainDataset::subset(std::span<const std::size_t> rows) const {
  MainDataset out;
  out.column_names = column_names;
  out.outcome_name = outcome_name;
  out.exposure_name = exposure_name;
  out.coding = coding;
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.z.resize(static_cast<Eigen::Index>(rows.size()), z.cols());
  out.x.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(rows[k]);
    out.y(static_cast<Eigen::Index>(k)) = y(r);
    out.z.row(static_cast<Eigen::Index>(k)) = z.row(r);
    out.x.push_back(x[rows[k]]);
  }
  return out;
}

AuxDataset AuxDataset::subset(std::span<const std::size_t> rows) const {
  AuxDataset out;
  out.shared_names = shared_names;
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.shared.resize(static_cast<Eigen::Index>(rows.size()), shared.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(rows[k]);
    out.y(static_cast<Eigen::Index>(k)) = y(r);
    if (shared.cols() > 0) out.shared.row(static_cast<Eigen::Index>(k)) = shared.row(r);
    out.x.push_back(x[rows[k]]);
  }
  return out;
}

void check_config(const StudyConfig& config) {
  if (config.ps_candidates.empty()) throw ValidationError("at least one PS candidate required");
  if (config.cm_candidates.empty()) throw ValidationError("at least one CM candidate required");
  for (const auto& s : config.ps_candidates) {
    if (s.kind == LearnerKind::RidgeRegression)
      throw ValidationError("ridge_regression is not a propensity-score learner");
    check_spec(s);
  }
  for (const auto& s : config.cm_candidates) {
    if (s.kind == LearnerKind::RidgeMultinomial)
      throw ValidationError("ridge_multinomial is not a conditional-mean learner");
    check_spec(s);
  }
  if (config.bootstrap_reps < 0) throw ValidationError("bootstrap_reps must be >= 0");
  if (!(config.ps_clip > 0.0 && config.ps_clip < 0.5))
    throw ValidationError("ps_clip must lie in (0, 0.5)");
  if (!(config.el_tolerance > 0.0)) throw ValidationError("el_tolerance must be > 0");
  if (config.el_max_iter < 1) throw ValidationError("el_max_iter must be >= 1");
  if (config.match_ratio && *config.match_ratio < 1)
    throw ValidationError("match_ratio must be >= 1");
}

void check_main(const MainDataset& main) {
  const auto n = main.size();
  if (static_cast<std::size_t>(main.y.size()) != n || static_cast<std::size_t>(main.z.rows()) != n)
    throw ValidationError("main data: y, x and z must have the same number of rows");
  const int levels = main.levels();
  if (levels < 2) throw ValidationError("main data: exposure needs at least 2 levels");
  if (n < 2 * static_cast<std::size_t>(levels))
    throw ValidationError("main data: need at least 2(L+1) rows");
  std::vector<std::size_t> counts(static_cast<std::size_t>(levels), 0);
  for (int v : main.x) {
    if (v < 0 || v >= levels) throw ValidationError("main data: exposure level out of range");
    ++counts[static_cast<std::size_t>(v)];
  }
  for (int k = 0; k < levels; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw ValidationError("main data: exposure level " + std::to_string(k) + " never occurs");
  if (!main.y.allFinite() || !main.z.allFinite())
    throw ValidationError("main data: missing or non-finite values");
}

void check_aux(const AuxDataset& aux, int levels) {
  if (static_cast<std::size_t>(aux.y.size()) != aux.size())
    throw ValidationError("aux data: y and x must have equal length");
  if (aux.shared.cols() > 0 && static_cast<std::size_t>(aux.shared.rows()) != aux.size())
    throw ValidationError("aux data: shared covariates misaligned");
  for (int v : aux.x)
    if (v < 0 || v >= levels)
      throw ValidationError("aux data: exposure level absent from main data");
  if (!aux.y.allFinite()) throw ValidationError("aux data: missing or non-finite outcome");
}

MainDataset load_main_csv(const std::string& path, const std::string& outcome_col,
                          const std::string& exposure_col) {
  const CsvTable table = read_csv(path);
  if (table.rows.empty()) throw IoError(path + ": empty file (no data rows)");
  const std::size_t yc = table.column(outcome_col);
  const std::size_t xc = table.column(exposure_col);
  if (yc == xc) throw ValidationError("outcome and exposure columns must differ");

  std::vector<std::size_t> zcols;
  MainDataset data;
  data.outcome_name = outcome_col;
  data.exposure_name = exposure_col;
  for (std::size_t j = 0; j < table.header.size(); ++j) {
    if (j == yc || j == xc) continue;
    zcols.push_back(j);
    data.column_names.push_back(table.header[j]);
  }

  const auto n = table.rows.size();
  data.y.resize(static_cast<Eigen::Index>(n));
  data.z.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(zcols.size()));
  std::vector<long long> raw_x(n);
  std::set<long long> seen;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = table.rows[r];
    const auto ri = static_cast<Eigen::Index>(r);
    data.y(ri) = parse_cell(row[yc], r + 1, table.header[yc]);
    raw_x[r] = parse_exposure(row[xc], r + 1, table.header[xc]);
    seen.insert(raw_x[r]);
    for (std::size_t k = 0; k < zcols.size(); ++k)
      data.z(ri, static_cast<Eigen::Index>(k)) =
          parse_cell(row[zcols[k]], r + 1, table.header[zcols[k]]);
  }
  data.coding.codes.assign(seen.begin(), seen.end());
  data.x.reserve(n);
  for (long long v : raw_x) data.x.push_back(data.coding.encode(v));
  check_main(data);
  return data;
}

AuxDataset load_aux_csv(const std::string& path, const std::string& outcome_col,
                        const std::string& exposure_col, const LevelCoding& coding,
                        const std::vector<std::string>& keep_cols, LoadWarnings* warnings) {
  const CsvTable table = read_csv(path);
  const std::size_t yc = table.column(outcome_col);
  const std::size_t xc = table.column(exposure_col);
  std::vector<std::size_t> kept;
  for (const auto& name : keep_cols) kept.push_back(table.column(name));
  const std::size_t ignored = table.header.size() - 2 - kept.size();
  if (ignored > 0 && warnings)
    warnings->messages.push_back(std::to_string(ignored) + " covariate column" +
                                 (ignored == 1 ? "" : "s") + " ignored");

  AuxDataset aux;
  aux.shared_names = keep_cols;
  const auto n = table.rows.size();
  aux.y.resize(static_cast<Eigen::Index>(n));
  aux.shared.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = table.rows[r];
    const auto ri = static_cast<Eigen::Index>(r);
    aux.y(ri) = parse_cell(row[yc], r + 1, table.header[yc]);
    const long long code = parse_exposure(row[xc], r + 1, table.header[xc]);
    const int level = coding.encode(code);
    if (level < 0)
      throw ValidationError("aux data: exposure level " + std::to_string(code) +
                            " at row " + std::to_string(r + 1) + " is absent from the main data");
    aux.x.push_back(level);
    for (std::size_t k = 0; k < kept.size(); ++k)
      aux.shared(ri, static_cast<Eigen::Index>(k)) =
          parse_cell(row[kept[k]], r + 1, table.header[kept[k]]);
  }
  return aux;
}

void write_main_csv(const MainDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << csv_escape(data.outcome_name) << ',' << csv_escape(data.exposure_name);
  for (const auto& name : data.column_names) out << ',' << csv_escape(name);
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto ri = static_cast<Eigen::Index>(i);
    out << format_double(data.y(ri)) << ',' << data.coding.codes[static_cast<std::size_t>(data.x[i])];
    for (Eigen::Index j = 0; j < data.z.cols(); ++j) out << ',' << format_double(data.z(ri, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_aux_csv(const AuxDataset& data, const LevelCoding& coding, const std::string& path,
                   const std::string& outcome_name, const std::string& exposure_name) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << csv_escape(outcome_name) << ',' << csv_escape(exposure_name);
  for (const auto& name : data.shared_names) out << ',' << csv_escape(name);
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto ri = static_cast<Eigen::Index>(i);
    out << format_double(data.y(ri)) << ',' << coding.codes[static_cast<std::size_t>(data.x[i])];
    for (Eigen::Index j = 0; j < data.shared.cols(); ++j)
      out << ',' << format_double(data.shared(ri, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

ValidationReport validate_study(const MainDataset& main, const AuxDataset& aux,
                                const StudyConfig& config) {
  check_config(config);
  check_main(main);
  check_aux(aux, main.levels());
  if (config.exposure_levels != 0 && config.exposure_levels != main.levels())
    throw ValidationError("configured exposure_levels=" + std::to_string(config.exposure_levels) +
                          " but main data has " + std::to_string(main.levels()));

  ValidationReport report;
  report.level_counts = main.level_counts();
  for (std::size_t k = 0; k < report.level_counts.size(); ++k) {
    if (report.level_counts[k] < kMinUnitsPerLevel)
      throw ValidationError("exposure level " + std::to_string(main.coding.codes[k]) + " has " +
                            std::to_string(report.level_counts[k]) +
                            " main-data units; at least " + std::to_string(kMinUnitsPerLevel) +
                            " required");
  }
  const std::size_t fit_floor = 2 * min_cm_units(main.covariates());
  for (std::size_t k = 0; k < report.level_counts.size(); ++k)
    if (report.level_counts[k] < fit_floor)
      report.warnings.push_back("exposure level " + std::to_string(main.coding.codes[k]) + " has " +
                                std::to_string(report.level_counts[k]) +
                                " main-data units; conditional-mean fits need about " +
                                std::to_string(fit_floor) + " (half per training fold)");
  report.aux_level_counts.assign(report.level_counts.size(), 0);
  for (int v : aux.x) ++report.aux_level_counts[static_cast<std::size_t>(v)];
  if (aux.empty()) report.notes.push_back("auxiliary data empty: CMLIB will equal CML");
  if (config.working_function == WorkingFunction::FormII && !aux.empty()) {
    for (std::size_t k = 0; k < report.aux_level_counts.size(); ++k)
      if (report.aux_level_counts[k] == 0)
        report.warnings.push_back("exposure level " + std::to_string(main.coding.codes[k]) +
                                  " absent from auxiliary data");
  }
  return report;
}

}  // namespace calibra
