#pragma once

#include <string>
#include <vector>

namespace msgdn {

// Shortest round-trip-exact decimal form of a double ("%.17g" trimmed).
std::string fmt_g17(double v);
double parse_double(const std::string& s);
std::int64_t parse_int(const std::string& s);

// Plain comma split; fields in this toolkit's CSVs never contain commas.
std::vector<std::string> split_csv(const std::string& line);

}  // namespace msgdn
