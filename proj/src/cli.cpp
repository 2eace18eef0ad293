#include "calibra/cli.h"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "calibra/csv.h"
#include "calibra/errors.h"
#include "calibra/estimators.h"
#include "calibra/matching.h"
#include "calibra/rng.h"

namespace calibra::cli {

namespace {

using json = nlohmann::ordered_json;
using Entries = std::vector<std::pair<std::string, std::string>>;

enum class Type { Int, UInt64, Real, Bool, Text, Choice, List };

struct KeyDef {
  const char* key;
  const char* commands;  // e = estimate, s = simulate, m = match
  Type type;
  bool echoed;
  const char* help;
};

// Defaults come from the library types so the two cannot drift apart.
const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      {"seed", "esm", Type::UInt64, true, "random seed"},
      {"threads", "esm", Type::Int, false, "worker threads (0: CALIBRA_THREADS or all cores)"},
      {"out", "esm", Type::Text, false, "output path (default: stdout)"},
      {"format", "esm", Type::Choice, true, "json | csv | text"},
      {"main", "em", Type::Text, true, "main data CSV"},
      {"aux", "em", Type::Text, true, "auxiliary data CSV"},
      {"outcome", "em", Type::Text, true, "outcome column"},
      {"exposure", "em", Type::Text, true, "exposure column"},
      {"match_ratio", "esm", Type::Int, true, "auxiliary units matched per main unit (0: no matching)"},
      {"match_cols", "em", Type::List, true, "shared covariates used for matching"},
      {"matched_out", "m", Type::Text, false, "write the matched auxiliary data to this CSV"},
      {"exposure_levels", "es", Type::Int, true, "number of exposure levels (0: from data)"},
      {"ps_candidates", "es", Type::List, true, "propensity learners: ridge, forest, boosting"},
      {"cm_candidates", "es", Type::List, true, "outcome learners: ridge, forest, boosting"},
      {"working_function", "es", Type::Choice, true, "I (pooled mean) | II (regression on exposure)"},
      {"bootstrap_reps", "es", Type::Int, true, "bootstrap replicates (0: none)"},
      {"ps_clip", "es", Type::Real, true, "propensity clipping bound"},
      {"el_tolerance", "es", Type::Real, true, "EL constraint tolerance"},
      {"el_max_iter", "es", Type::Int, true, "EL Newton iteration cap"},
      {"forest_trees", "es", Type::Int, true, "trees per random forest"},
      {"forest_mtry", "es", Type::Int, true, "features tried per split (0: default rule)"},
      {"forest_min_leaf", "es", Type::Int, true, "minimum forest leaf size"},
      {"forest_max_bins", "es", Type::Int, true, "histogram bins per feature"},
      {"gb_depth", "es", Type::Int, true, "boosting tree depth"},
      {"gb_shrinkage", "es", Type::Real, true, "boosting learning rate"},
      {"gb_max_trees", "es", Type::Int, true, "boosting round cap"},
      {"gb_cv_folds", "es", Type::Int, true, "boosting CV folds"},
      {"gb_early_stop", "es", Type::Int, true, "boosting early-stopping patience"},
      {"ridge_cv_folds", "es", Type::Int, true, "ridge CV folds"},
      {"lambda_min", "es", Type::Real, true, "smallest ridge penalty"},
      {"lambda_max", "es", Type::Real, true, "largest ridge penalty"},
      {"lambda_count", "es", Type::Int, true, "ridge grid size"},
      {"case", "s", Type::Choice, true, "simulation case: 1 | 2 | 3"},
      {"p", "s", Type::Int, true, "confounders"},
      {"n", "s", Type::Int, true, "main sample size"},
      {"aux_mult", "s", Type::Real, true, "auxiliary size as a multiple of n"},
      {"levels", "s", Type::Int, true, "exposure levels: 2 | 3"},
      {"hetero_shift", "s", Type::Real, true, "shift added to auxiliary outcomes"},
      {"covariate_shift", "s", Type::Real, true, "mean shift of auxiliary covariates"},
      {"runs", "s", Type::Int, true, "Monte Carlo replicates"},
      {"oracle_draws", "s", Type::Int, true, "draws for the truth oracle"},
      {"bootstrap", "s", Type::Bool, true, "bootstrap every replicate"},
  };
  return table;
}

const char* type_name(Type t) {
  switch (t) {
    case Type::Int: return "INT";
    case Type::UInt64: return "U64";
    case Type::Real: return "REAL";
    case Type::Bool: return "";
    case Type::Text: return "TEXT";
    case Type::Choice: return "CHOICE";
    case Type::List: return "LIST";
  }
  return "";
}

const KeyDef* find_key(const std::string& key) {
  for (const auto& k : key_table())
    if (key == k.key) return &k;
  return nullptr;
}

char command_letter(const std::string& command) {
  if (command == "estimate") return 'e';
  if (command == "simulate") return 's';
  if (command == "match") return 'm';
  throw ValidationError("unknown subcommand '" + command + "'");
}

bool applies(const KeyDef& k, const std::string& command) {
  return std::string(k.commands).find(command_letter(command)) != std::string::npos;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::string canonical_learner(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "ridge" || s == "preg") return "ridge";
  if (s == "forest" || s == "rf") return "forest";
  if (s == "boosting" || s == "gb") return "boosting";
  throw ValidationError("unknown learner '" + name + "' (expected ridge, forest or boosting)");
}

// Validates `value` for `k` and returns its canonical text.
std::string canonical(const KeyDef& k, const std::string& raw) {
  const std::string value = trim(raw);
  const std::string key = k.key;
  auto mismatch = [&](const char* what) {
    return ValidationError("key '" + key + "' expects " + what + ", got '" + value + "'");
  };
  switch (k.type) {
    case Type::Int: {
      long long v = 0;
      if (!parse_number(value, v)) throw mismatch("an integer");
      if (key != "oracle_draws" && (v > 2147483647LL || v < -2147483647LL)) throw mismatch("a 32-bit integer");
      return value;
    }
    case Type::UInt64: {
      std::uint64_t v = 0;
      if (!parse_number(value, v)) throw mismatch("an unsigned 64-bit integer");
      return value;
    }
    case Type::Real: {
      double v = 0.0;
      if (!parse_number(value, v) || !std::isfinite(v)) throw mismatch("a real number");
      return value;
    }
    case Type::Bool: {
      std::string s = value;
      std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
      if (s == "true" || s == "1" || s == "yes" || s == "on") return "true";
      if (s == "false" || s == "0" || s == "no" || s == "off") return "false";
      throw mismatch("a boolean");
    }
    case Type::Text:
      return value;
    case Type::List: {
      auto items = split_list(value);
      if (key == "ps_candidates" || key == "cm_candidates")
        for (auto& item : items) item = canonical_learner(item);
      return join(items);
    }
    case Type::Choice:
      if (key == "format") {
        if (value == "json" || value == "csv" || value == "text") return value;
        throw mismatch("json, csv or text");
      }
      if (key == "working_function") {
        if (value == "I" || value == "FormI" || value == "1") return "I";
        if (value == "II" || value == "FormII" || value == "2") return "II";
        throw mismatch("I or II");
      }
      if (key == "case") {
        if (value == "1" || value == "Case1") return "1";
        if (value == "2" || value == "Case2") return "2";
        if (value == "3" || value == "Case3") return "3";
        throw mismatch("1, 2 or 3");
      }
      break;
  }
  return value;
}

int as_int(const RunConfig& rc, const std::string& key) { return std::stoi(rc.get(key)); }
double as_real(const RunConfig& rc, const std::string& key) { return std::stod(rc.get(key)); }

std::string opt_text(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json finite_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string fixed3(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return "-";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s + " " : s + std::string(w - s.size(), ' ');
}

std::string lpad(const std::string& s, std::size_t w) {
  return s.size() >= w ? " " + s : std::string(w - s.size(), ' ') + s;
}

json config_json(const RunConfig& rc) {
  json out = json::object();
  for (const auto& [k, v] : rc.values)
    if (find_key(k)->echoed) out[k] = v;
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_output(const RunConfig& rc, const std::string& text, std::ostream& out) {
  const std::string& path = rc.get("out");
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open output file '" + path + "'");
  f << text;
  if (!f) throw IoError("failed writing output file '" + path + "'");
}

void csv_provenance(std::ostringstream& os, const RunConfig& rc) {
  os << "# schema_version=" << kSchemaVersion << "\n";
  os << "# command=" << rc.command << "\n";
  os << "# config_hash=" << config_hash(rc) << "\n";
  for (const auto& [k, v] : rc.values)
    if (find_key(k)->echoed) os << "# config." << k << "=" << v << "\n";
}

// ---- estimate ------------------------------------------------------------

struct EstimateRecord {
  int level = 0;
  long long exposure_value = 0;
  LevelEstimate est;
};

json tuning_json(const TuningRecord& t, const StudyConfig& cfg) {
  json ps = json::array();
  for (std::size_t j = 0; j < t.ps.size(); ++j) {
    json e{{"learner", kind_name(cfg.ps_candidates[j].kind)}};
    if (t.ps[j].lambda) e["lambda"] = *t.ps[j].lambda;
    if (!t.ps[j].rounds.empty()) e["rounds"] = t.ps[j].rounds;
    ps.push_back(e);
  }
  json cm = json::array();
  for (std::size_t j = 0; j < t.cm.size(); ++j)
    for (std::size_t x = 0; x < t.cm[j].size(); ++x) {
      json e{{"learner", kind_name(cfg.cm_candidates[j].kind)}, {"level", x}};
      if (t.cm[j][x].lambda) e["lambda"] = *t.cm[j][x].lambda;
      if (!t.cm[j][x].rounds.empty()) e["rounds"] = t.cm[j][x].rounds;
      cm.push_back(e);
    }
  return json{{"ps", ps}, {"cm", cm}};
}

int run_estimate(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const StudyConfig cfg = study_config(rc);
  const auto cols = split_list(rc.get("match_cols"));
  const int ratio = as_int(rc, "match_ratio");

  MainDataset main = load_main_csv(rc.get("main"), rc.get("outcome"), rc.get("exposure"));
  AuxDataset aux;
  LoadWarnings load_warnings;
  if (!rc.get("aux").empty())
    aux = load_aux_csv(rc.get("aux"), rc.get("outcome"), rc.get("exposure"), main.coding, cols,
                       &load_warnings);
  const ValidationReport report = validate_study(main, aux, cfg);

  std::vector<std::string> notes = report.notes;
  std::vector<std::string> warnings = load_warnings.messages;
  warnings.insert(warnings.end(), report.warnings.begin(), report.warnings.end());
  const bool has_aux = !aux.empty();
  if (!has_aux) notes.push_back("no auxiliary data: CMLIB rows omitted (CMLIB equals CML)");

  std::optional<MatchResult> match;
  const std::size_t aux_before = aux.size();
  if (ratio > 0 && has_aux) {
    MatchResult res;
    aux = match_auxiliary(main, aux, ratio, derive_seed(cfg.seed, 77), cols, &res);
    warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
    match = std::move(res);
  }

  CrossFitResult point = cross_fit_estimate(main, aux, cfg);
  std::optional<BootstrapSummary> boot;
  if (cfg.bootstrap_reps > 0) boot = bootstrap_inference(main, aux, cfg, point);
  warnings.insert(warnings.end(), point.warnings.begin(), point.warnings.end());
  if (boot && boot->unreliable)
    warnings.push_back("bootstrap unreliable: " + std::to_string(boot->failed) + " of " +
                       std::to_string(boot->requested) + " replicates failed");

  std::vector<EstimateRecord> records;
  for (const auto& e : point.estimates) {
    if (!has_aux && e.method.rfind("CMLIB", 0) == 0) continue;
    records.push_back({e.level, main.coding.codes[static_cast<std::size_t>(e.level)], e});
  }
  const auto n = static_cast<long long>(main.size());
  const auto N = n + static_cast<long long>(aux.size());
  for (const auto& w : warnings) err << "warning: " << w << "\n";

  std::ostringstream os;
  switch (output_format(rc)) {
    case Format::Json: {
      json levels = json::array();
      const auto counts = main.level_counts();
      std::vector<std::size_t> aux_counts(counts.size(), 0);
      for (int v : aux.x) ++aux_counts[static_cast<std::size_t>(v)];
      for (std::size_t k = 0; k < counts.size(); ++k)
        levels.push_back({{"level", k},
                          {"exposure_value", main.coding.codes[k]},
                          {"main_units", counts[k]},
                          {"aux_units", aux_counts[k]}});
      json estimates = json::array();
      for (const auto& r : records)
        estimates.push_back({{"level", r.level},
                             {"exposure_value", r.exposure_value},
                             {"method", r.est.method},
                             {"tau_hat", finite_json(r.est.tau)},
                             {"half_estimates", {finite_json(r.est.halves[0]), finite_json(r.est.halves[1])}},
                             {"bsd", opt_json(r.est.bsd)},
                             {"ci_low", opt_json(r.est.ci_low)},
                             {"ci_high", opt_json(r.est.ci_high)},
                             {"p_value", opt_json(r.est.p_value)},
                             {"n_eff", opt_json(r.est.n_eff)},
                             {"n", n},
                             {"N", N},
                             {"rho_hat", point.rho}});
      json doc{{"schema_version", kSchemaVersion}, {"command", "estimate"}};
      doc["data"] = {{"n", n}, {"N", N}, {"rho_hat", point.rho}, {"levels", levels}};
      doc["estimates"] = estimates;
      std::vector<double> theta(point.integration.theta.data(),
                                point.integration.theta.data() + point.integration.theta.size());
      doc["integration"] = {{"theta", theta},
                            {"iterations", point.integration.iterations},
                            {"max_constraint_violation", point.integration.max_constraint_violation},
                            {"kept_columns", point.integration.kept_columns}};
      if (boot)
        doc["bootstrap"] = {{"requested", boot->requested},
                            {"succeeded", boot->succeeded},
                            {"failed", boot->failed},
                            {"unreliable", boot->unreliable}};
      if (match) {
        json bal = json::array();
        for (const auto& b : match->balance)
          bal.push_back({{"name", b.name}, {"smd_before", b.smd_before}, {"smd_after", b.smd_after}});
        doc["matching"] = {{"ratio", match->ratio},
                           {"aux_before", aux_before},
                           {"aux_after", match->kept_aux_indices.size()},
                           {"balance", bal}};
      }
      doc["notes"] = notes;
      doc["warnings"] = warnings;
      doc["diagnostics"] = point.diagnostics;
      doc["provenance"] = {{"seed", cfg.seed},
                           {"config_hash", config_hash(rc)},
                           {"config", config_json(rc)},
                           {"tuning", {tuning_json(point.tuning[0], cfg), tuning_json(point.tuning[1], cfg)}}};
      os << doc.dump(2) << "\n";
      break;
    }
    case Format::Csv: {
      csv_provenance(os, rc);
      for (const auto& note : notes) os << "# note: " << note << "\n";
      os << "level,exposure_value,method,tau_hat,half1,half2,bsd,ci_low,ci_high,p_value,n_eff,n,N,rho_hat\n";
      for (const auto& r : records)
        os << r.level << "," << r.exposure_value << "," << csv_escape(r.est.method) << ","
           << format_double(r.est.tau) << "," << format_double(r.est.halves[0]) << ","
           << format_double(r.est.halves[1]) << "," << opt_text(r.est.bsd) << "," << opt_text(r.est.ci_low)
           << "," << opt_text(r.est.ci_high) << "," << opt_text(r.est.p_value) << ","
           << opt_text(r.est.n_eff) << "," << n << "," << N << "," << format_double(point.rho) << "\n";
      break;
    }
    case Format::Text: {
      os << "n = " << n << ", N = " << N << ", rho = " << fixed3(point.rho) << "\n";
      for (const auto& note : notes) os << "note: " << note << "\n";
      os << pad("Exposure", 10) << pad("Method", 12) << lpad("Est", 9) << lpad("BSD", 9)
         << lpad("95%LL", 9) << lpad("95%UL", 9) << lpad("P-value", 9) << "\n";
      for (const auto& r : records)
        os << pad(std::to_string(r.exposure_value), 10) << pad(r.est.method, 12) << lpad(fixed3(r.est.tau), 9)
           << lpad(fixed3(r.est.bsd), 9) << lpad(fixed3(r.est.ci_low), 9) << lpad(fixed3(r.est.ci_high), 9)
           << lpad(fixed3(r.est.p_value), 9) << "\n";
      os << "seed " << cfg.seed << ", config " << config_hash(rc) << "\n";
      break;
    }
  }
  write_output(rc, os.str(), out);
  return 0;
}

// ---- simulate ------------------------------------------------------------

int run_simulate(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const StudyConfig cfg = study_config(rc);
  const Scenario sc = scenario(rc);
  MonteCarloOptions opts;
  opts.bootstrap = rc.get("bootstrap") == "true";
  opts.match_ratio = as_int(rc, "match_ratio");
  opts.oracle_draws = std::stoll(rc.get("oracle_draws"));
  opts.threads = cfg.threads;
  if (opts.bootstrap && cfg.bootstrap_reps < 2)
    throw ValidationError("bootstrap=true needs bootstrap_reps >= 2");
  const MonteCarloTable table = run_monte_carlo(sc, cfg, opts);

  int failed = 0;
  for (const auto& r : table.replicates)
    if (!r.error.empty()) ++failed;
  if (failed > 0) err << "warning: " << failed << " replicates failed entirely\n";

  std::ostringstream os;
  switch (output_format(rc)) {
    case Format::Json: {
      json rows = json::array();
      for (const auto& r : table.rows)
        rows.push_back({{"level", r.level},
                        {"method", r.method},
                        {"truth", r.truth},
                        {"bias", r.count > 0 ? json(r.bias) : json(nullptr)},
                        {"mcsd", r.count > 1 ? json(r.mcsd) : json(nullptr)},
                        {"mean_bsd", opt_json(r.mean_bsd)},
                        {"coverage", opt_json(r.coverage)},
                        {"count", r.count},
                        {"failures", r.failures}});
      json truth = json::array();
      for (std::size_t k = 0; k < table.truth.size(); ++k)
        truth.push_back({{"level", k}, {"value", table.truth[k]}, {"se", table.truth_se[k]}});
      json doc{{"schema_version", kSchemaVersion}, {"command", "simulate"}};
      doc["scenario"] = {{"case", case_name(sc.sim_case)}, {"p", sc.p},           {"n", sc.n},
                         {"aux_mult", sc.aux_multiplier},   {"levels", sc.levels}, {"hetero_shift", sc.hetero_shift},
                         {"covariate_shift", sc.covariate_shift}, {"runs", sc.runs}};
      doc["rows"] = rows;
      doc["provenance"] = {{"seed", cfg.seed},
                           {"config_hash", config_hash(rc)},
                           {"config", config_json(rc)},
                           {"truth", truth}};
      os << doc.dump(2) << "\n";
      break;
    }
    case Format::Csv: {
      csv_provenance(os, rc);
      for (std::size_t k = 0; k < table.truth.size(); ++k)
        os << "# truth.level" << k << "=" << format_double(table.truth[k]) << " se=" << format_double(table.truth_se[k])
           << "\n";
      os << "level,method,truth,bias,mcsd,mean_bsd,coverage,count,failures\n";
      for (const auto& r : table.rows)
        os << r.level << "," << csv_escape(r.method) << "," << format_double(r.truth) << ","
           << (r.count > 0 ? format_double(r.bias) : "") << "," << (r.count > 1 ? format_double(r.mcsd) : "")
           << "," << opt_text(r.mean_bsd) << "," << opt_text(r.coverage) << "," << r.count << "," << r.failures
           << "\n";
      break;
    }
    case Format::Text: {
      os << case_name(sc.sim_case) << ", p = " << sc.p << ", n = " << sc.n << ", aux = " << fmt(sc.aux_multiplier)
         << "n, runs = " << sc.runs << "\n";
      os << pad("Level", 7) << pad("Method", 14) << lpad("Truth", 9) << lpad("Bias", 9) << lpad("MCSD", 9)
         << lpad("BSD", 9) << lpad("CP", 9) << lpad("Fail", 6) << "\n";
      for (const auto& r : table.rows) {
        std::optional<double> bias, mcsd;
        if (r.count > 0) bias = r.bias;
        if (r.count > 1) mcsd = r.mcsd;
        os << pad(std::to_string(r.level), 7) << pad(r.method, 14) << lpad(fixed3(r.truth), 9)
           << lpad(fixed3(bias), 9) << lpad(fixed3(mcsd), 9) << lpad(fixed3(r.mean_bsd), 9)
           << lpad(fixed3(r.coverage), 9) << lpad(std::to_string(r.failures), 6) << "\n";
      }
      os << "seed " << cfg.seed << ", config " << config_hash(rc) << "\n";
      break;
    }
  }
  write_output(rc, os.str(), out);
  return 0;
}

// ---- match ---------------------------------------------------------------

int run_match(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto cols = split_list(rc.get("match_cols"));
  const int ratio = as_int(rc, "match_ratio");
  const std::uint64_t seed = std::stoull(rc.get("seed"));
  const MainDataset main = load_main_csv(rc.get("main"), rc.get("outcome"), rc.get("exposure"));
  LoadWarnings lw;
  const AuxDataset aux =
      load_aux_csv(rc.get("aux"), rc.get("outcome"), rc.get("exposure"), main.coding, cols, &lw);
  MatchResult res;
  const AuxDataset matched = match_auxiliary(main, aux, ratio, derive_seed(seed, 77), cols, &res);
  for (const auto& w : lw.messages) err << "warning: " << w << "\n";
  for (const auto& w : res.warnings) err << "warning: " << w << "\n";
  if (!rc.get("matched_out").empty())
    write_aux_csv(matched, main.coding, rc.get("matched_out"), main.outcome_name, main.exposure_name);

  std::ostringstream os;
  switch (output_format(rc)) {
    case Format::Json: {
      json bal = json::array();
      for (const auto& b : res.balance)
        bal.push_back({{"name", b.name}, {"smd_before", b.smd_before}, {"smd_after", b.smd_after}});
      json doc{{"schema_version", kSchemaVersion}, {"command", "match"}};
      doc["n_main"] = main.size();
      doc["n_aux"] = aux.size();
      doc["ratio"] = ratio;
      doc["matched"] = matched.size();
      doc["kept_aux_rows"] = res.kept_aux_indices;
      doc["balance"] = bal;
      doc["warnings"] = res.warnings;
      doc["provenance"] = {{"seed", seed}, {"config_hash", config_hash(rc)}, {"config", config_json(rc)}};
      os << doc.dump(2) << "\n";
      break;
    }
    case Format::Csv: {
      csv_provenance(os, rc);
      os << "# matched=" << matched.size() << " of " << aux.size() << "\n";
      os << "covariate,smd_before,smd_after\n";
      for (const auto& b : res.balance)
        os << csv_escape(b.name) << "," << format_double(b.smd_before) << "," << format_double(b.smd_after) << "\n";
      break;
    }
    case Format::Text: {
      os << "matched " << matched.size() << " of " << aux.size() << " auxiliary units (ratio 1:" << ratio << ")\n";
      os << pad("Covariate", 14) << lpad("SMD before", 12) << lpad("SMD after", 12) << "\n";
      for (const auto& b : res.balance)
        os << pad(b.name, 14) << lpad(fixed3(b.smd_before), 12) << lpad(fixed3(b.smd_after), 12) << "\n";
      break;
    }
  }
  write_output(rc, os.str(), out);
  return 0;
}

}  // namespace

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) throw ValidationError("key '" + key + "' does not apply to '" + command + "'");
  return it->second;
}

std::map<std::string, std::string> default_values(const std::string& command) {
  const StudyConfig sc;
  const Scenario sn;
  const LearnerSpec ls;
  const std::map<std::string, std::string> all = {
      {"seed", std::to_string(sc.seed)},
      {"threads", "0"},
      {"out", ""},
      {"format", "json"},
      {"main", ""},
      {"aux", ""},
      {"outcome", "y"},
      {"exposure", "x"},
      {"match_ratio", command == "match" ? "1" : "0"},
      {"match_cols", ""},
      {"matched_out", ""},
      {"exposure_levels", std::to_string(sc.exposure_levels)},
      {"ps_candidates", "ridge,forest,boosting"},
      {"cm_candidates", "ridge,forest,boosting"},
      {"working_function", "I"},
      {"bootstrap_reps", std::to_string(sc.bootstrap_reps)},
      {"ps_clip", fmt(sc.ps_clip)},
      {"el_tolerance", fmt(sc.el_tolerance)},
      {"el_max_iter", std::to_string(sc.el_max_iter)},
      {"forest_trees", std::to_string(ls.n_trees)},
      {"forest_mtry", std::to_string(ls.mtry)},
      {"forest_min_leaf", std::to_string(ls.min_leaf)},
      {"forest_max_bins", std::to_string(ls.max_bins)},
      {"gb_depth", std::to_string(ls.depth)},
      {"gb_shrinkage", fmt(ls.shrinkage)},
      {"gb_max_trees", std::to_string(ls.max_trees)},
      {"gb_cv_folds", std::to_string(ls.cv_folds)},
      {"gb_early_stop", std::to_string(ls.early_stop_rounds)},
      {"ridge_cv_folds", std::to_string(ls.ridge_cv_folds)},
      {"lambda_min", fmt(ls.lambda_grid.front())},
      {"lambda_max", fmt(ls.lambda_grid.back())},
      {"lambda_count", std::to_string(ls.lambda_grid.size())},
      {"case", "1"},
      {"p", std::to_string(sn.p)},
      {"n", std::to_string(sn.n)},
      {"aux_mult", fmt(sn.aux_multiplier)},
      {"levels", std::to_string(sn.levels)},
      {"hetero_shift", fmt(sn.hetero_shift)},
      {"covariate_shift", fmt(sn.covariate_shift)},
      {"runs", std::to_string(sn.runs)},
      {"oracle_draws", std::to_string(MonteCarloOptions{}.oracle_draws)},
      {"bootstrap", "false"},
  };
  std::map<std::string, std::string> out;
  for (const auto& k : key_table())
    if (applies(k, command)) out[k.key] = all.at(k.key);
  return out;
}

Entries parse_config_text(const std::string& text, const std::string& source) {
  Entries out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ValidationError(where + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError(where + ": empty key");
    if (!seen.insert(key).second) throw ValidationError(where + ": duplicate key '" + key + "'");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

Entries read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

RunConfig resolve_config(const std::string& command, const Entries& file_entries,
                         const Entries& flag_entries) {
  RunConfig rc;
  rc.command = command;
  rc.values = default_values(command);
  for (const Entries* entries : {&file_entries, &flag_entries})
    for (const auto& [key, value] : *entries) {
      const KeyDef* k = find_key(key);
      if (k == nullptr) throw ValidationError("unknown key '" + key + "'");
      if (!applies(*k, command))
        throw ValidationError("key '" + key + "' does not apply to '" + command + "'");
      rc.values[key] = canonical(*k, value);
    }

  if (as_int(rc, "threads") < 0) throw ValidationError("threads must be >= 0");
  const int ratio = as_int(rc, "match_ratio");
  if (ratio < 0) throw ValidationError("match_ratio must be >= 0");
  if (command == "estimate") {
    if (rc.get("main").empty()) throw ValidationError("estimate needs --main");
    const bool cols = !rc.get("match_cols").empty();
    if (cols != (ratio > 0)) throw ValidationError("match_cols and match_ratio must be given together");
    if (ratio > 0 && rc.get("aux").empty()) throw ValidationError("matching needs --aux");
    if (std::stoi(rc.get("bootstrap_reps")) == 1)
      throw ValidationError("bootstrap_reps must be 0 or at least 2");
  }
  if (command == "match") {
    if (rc.get("main").empty() || rc.get("aux").empty()) throw ValidationError("match needs --main and --aux");
    if (rc.get("match_cols").empty()) throw ValidationError("match needs --match-cols");
    if (ratio < 1) throw ValidationError("match ratio must be >= 1");
  }
  if (command != "match") check_config(study_config(rc));
  if (command == "simulate") check_scenario(scenario(rc));
  return rc;
}

StudyConfig study_config(const RunConfig& rc) {
  StudyConfig cfg;
  cfg.seed = std::stoull(rc.get("seed"));
  cfg.threads = as_int(rc, "threads");
  if (rc.command == "match") return cfg;
  cfg.exposure_levels = as_int(rc, "exposure_levels");
  cfg.working_function = rc.get("working_function") == "II" ? WorkingFunction::FormII : WorkingFunction::FormI;
  cfg.bootstrap_reps = as_int(rc, "bootstrap_reps");
  cfg.ps_clip = as_real(rc, "ps_clip");
  cfg.el_tolerance = as_real(rc, "el_tolerance");
  cfg.el_max_iter = as_int(rc, "el_max_iter");
  const int ratio = as_int(rc, "match_ratio");
  if (ratio > 0) cfg.match_ratio = ratio;

  const int lambda_count = as_int(rc, "lambda_count");
  if (lambda_count < 1) throw ValidationError("lambda_count must be >= 1");
  const double lambda_min = as_real(rc, "lambda_min"), lambda_max = as_real(rc, "lambda_max");
  if (!(lambda_min > 0.0 && lambda_max >= lambda_min))
    throw ValidationError("ridge penalties need 0 < lambda_min <= lambda_max");
  auto tune = [&](LearnerSpec s) {
    s.lambda_grid = log_grid(lambda_min, lambda_max, lambda_count);
    s.ridge_cv_folds = as_int(rc, "ridge_cv_folds");
    s.n_trees = as_int(rc, "forest_trees");
    s.mtry = as_int(rc, "forest_mtry");
    s.min_leaf = as_int(rc, "forest_min_leaf");
    s.max_bins = as_int(rc, "forest_max_bins");
    s.depth = as_int(rc, "gb_depth");
    s.shrinkage = as_real(rc, "gb_shrinkage");
    s.max_trees = as_int(rc, "gb_max_trees");
    s.cv_folds = as_int(rc, "gb_cv_folds");
    s.early_stop_rounds = as_int(rc, "gb_early_stop");
    return s;
  };
  auto specs = [&](const std::string& key, bool ps) {
    std::vector<LearnerSpec> out;
    for (const auto& name : split_list(rc.get(key))) {
      if (name == "ridge") out.push_back(tune(ps ? LearnerSpec::ridge_ps() : LearnerSpec::ridge_cm()));
      if (name == "forest") out.push_back(tune(LearnerSpec::forest()));
      if (name == "boosting") out.push_back(tune(LearnerSpec::boosting()));
    }
    return out;
  };
  cfg.ps_candidates = specs("ps_candidates", true);
  cfg.cm_candidates = specs("cm_candidates", false);
  return cfg;
}

Scenario scenario(const RunConfig& rc) {
  Scenario s;
  s.sim_case = parse_case("Case" + rc.get("case"));
  s.p = as_int(rc, "p");
  s.n = as_int(rc, "n");
  s.aux_multiplier = as_real(rc, "aux_mult");
  s.levels = as_int(rc, "levels");
  s.hetero_shift = as_real(rc, "hetero_shift");
  s.covariate_shift = as_real(rc, "covariate_shift");
  s.runs = as_int(rc, "runs");
  s.seed = std::stoull(rc.get("seed"));
  return s;
}

Format output_format(const RunConfig& rc) {
  const std::string& f = rc.get("format");
  if (f == "csv") return Format::Csv;
  if (f == "text") return Format::Text;
  return Format::Json;
}

std::string echo_config(const RunConfig& rc) {
  std::string out;
  for (const auto& [k, v] : rc.values)
    if (find_key(k)->echoed) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& rc) { return hex64(fnv1a(echo_config(rc))); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"calibra: multiply robust causal estimation with information borrowing", "calibra"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "calibra schema " + std::to_string(kSchemaVersion));

  Entries flags;
  std::string config_path;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"estimate", "estimate mean potential outcomes from CSV data"},
      {"simulate", "run a Monte Carlo study"},
      {"match", "match auxiliary to main units and report covariate balance"}};
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "key=value configuration file")->type_name("PATH");
    for (const auto& k : key_table()) {
      if (!applies(k, name)) continue;
      std::string flag = std::string("--") + k.key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      const std::string key = k.key;
      if (k.type == Type::Bool) {
        sub->add_flag_function(flag, [&flags, key](std::int64_t) { flags.emplace_back(key, "true"); }, k.help);
      } else if (name == "match" && key == "match_ratio") {
        sub->add_option_function<std::string>("--ratio,--match-ratio",
                                              [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
                                              k.help)
            ->type_name(type_name(k.type))
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      } else {
        sub->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
                                              k.help)
            ->type_name(type_name(k.type))
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      }
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  std::string command;
  for (const auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    const Entries file = config_path.empty() ? Entries{} : read_config_file(config_path);
    const RunConfig rc = resolve_config(command, file, flags);
    if (command == "estimate") return run_estimate(rc, out, err);
    if (command == "simulate") return run_simulate(rc, out, err);
    return run_match(rc, out, err);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const ConvexHullViolation& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const RankDeficiency& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace calibra::cli
