#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "calibra/data.h"
#include "calibra/simgen.h"

namespace calibra::cli {

inline constexpr int kSchemaVersion = 1;

enum class Format { Json, Csv, Text };

// Fully resolved settings for one subcommand. `values` holds every key that
// applies to the subcommand, defaults included, as canonical text.
struct RunConfig {
  std::string command;
  std::map<std::string, std::string> values;

  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values.count(key) != 0; }
};

// Keys understood by `command`, with their default values.
std::map<std::string, std::string> default_values(const std::string& command);

// key=value lines; '#' starts a comment. Throws ValidationError on syntax
// errors or duplicate keys and IoError when the file cannot be read.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& source);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path);

// Applies file entries, then flag entries, over the defaults. Unknown keys,
// keys belonging to another subcommand and malformed values are errors.
RunConfig resolve_config(const std::string& command,
                         const std::vector<std::pair<std::string, std::string>>& file_entries,
                         const std::vector<std::pair<std::string, std::string>>& flag_entries);

StudyConfig study_config(const RunConfig& rc);
Scenario scenario(const RunConfig& rc);
Format output_format(const RunConfig& rc);

// Keys that do not influence results (threads, output location) are left
// out of the echo and the hash.
std::string echo_config(const RunConfig& rc);
std::uint64_t fnv1a(const std::string& text);
std::string config_hash(const RunConfig& rc);

// Runs a subcommand; returns the process exit code (0 success, 2 invalid
// input or configuration, 3 infeasible calibration, 4 I/O failure).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace calibra::cli
