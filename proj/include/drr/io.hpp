#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace drr::io {

// Shortest decimal string that parses back to exactly the same double.
std::string fmt_double(double v);

// Strict parse; throws drr::DataError on trailing garbage or empty input.
double parse_double(const std::string& s);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& contents);

// Minimal CSV: comma-separated, no quoting (none of our files need it).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p);

}  // namespace drr::io
