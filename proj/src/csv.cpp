#include "msgdn/csv.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

#include "msgdn/common.hpp"

namespace msgdn {

std::string fmt_g17(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  // Try increasing precision until the value round-trips exactly.
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw IoError("csv: not a number: '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str()) throw IoError("csv: not an integer: '" + s + "'");
  return static_cast<std::int64_t>(v);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace msgdn
