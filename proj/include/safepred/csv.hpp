#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace safepred {

/// Shortest text that parses back to the same double ("%.17g").
std::string format_double(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws Errc::format when absent.
  std::size_t column(const std::string& name) const;
};

/// Comma-separated, header row first, no quoting.
CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

double parse_double(const std::string& text);
long long parse_int(const std::string& text);

}  // namespace safepred
