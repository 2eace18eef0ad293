#pragma once

#include <string>
#include <vector>

namespace calibra {

// RFC-4180 table: a header row plus string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column; throws IoError when absent.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text, const std::string& source = "<memory>");

std::string csv_escape(const std::string& cell);

// Shortest round-trip representation (17 significant digits).
std::string format_double(double v);

}  // namespace calibra
