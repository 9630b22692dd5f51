#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ltx/container.hpp"
#include "ltx/error.hpp"

namespace ltx {

// Shortest text that round-trips the double; identical across runs.
inline std::string format_double(double v) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(' ');
    const auto e = f.find_last_not_of(' ');
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (first) {
      t.header = std::move(fields);
      first = false;
      continue;
    }
    require(fields.size() == t.header.size(), ErrorCode::Io,
            path.string() + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  require(!first, ErrorCode::Io, path.string() + " is empty");
  return t;
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    require(used == s.size(), ErrorCode::Io, "trailing characters");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::Io, "cannot parse '" + s + "' as a number (" + what + ")");
  }
}

inline long long parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    require(used == s.size(), ErrorCode::Io, "trailing characters");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::Io, "cannot parse '" + s + "' as an integer (" + what + ")");
  }
}

/// Accumulates CSV text; fields are joined verbatim (callers format numbers).
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_ += ',';
      text_ += fields[i];
    }
    text_ += '\n';
  }

  const std::string& text() const { return text_; }
  void save(const std::filesystem::path& path) const { write_file_bytes(path, text_); }

 private:
  std::string text_;
};

}  // namespace ltx
