#pragma once

#include <charconv>
#include <string>

namespace fmapkit {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Like format_double but always shows a decimal point for finite integral
/// values ("0.0" rather than "0").
inline std::string format_decimal(double v) {
  std::string s = format_double(v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

}  // namespace fmapkit
