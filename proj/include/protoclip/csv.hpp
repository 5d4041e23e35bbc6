#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "protoclip/error.hpp"

namespace protoclip::csv {

using Row = std::vector<std::string>;

/// Reads one record, honoring double-quoted fields with embedded commas,
/// quotes and newlines. Returns false at end of input.
inline bool read_record(std::istream& in, Row& out) {
  out.clear();
  std::string field;
  bool quoted = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      out.push_back(std::move(field));
      return true;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (!any) return false;
  out.push_back(std::move(field));
  return true;
}

inline std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void write_record(std::ostream& os, const Row& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) os << ',';
    os << escape(row[i]);
  }
  os << '\n';
}

struct Table {
  Row header;
  std::vector<Row> rows;
};

inline Table read_table(std::istream& in, const std::string& source) {
  Table t;
  if (!read_record(in, t.header)) throw FormatError(source + ": missing header row");
  if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) t.header[0].erase(0, 3);
  Row r;
  std::size_t line = 1;
  while (read_record(in, r)) {
    ++line;
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() != t.header.size()) {
      throw FormatError(source + ": record " + std::to_string(line) + " has " +
                        std::to_string(r.size()) + " fields, header has " +
                        std::to_string(t.header.size()));
    }
    t.rows.push_back(r);
  }
  return t;
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return read_table(in, path);
}

/// Parses a whole field as a double; nullopt if it is not a number.
inline std::optional<double> parse_double(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return std::nullopt;
  std::size_t e = s.find_last_not_of(" \t");
  const char* first = s.data() + b;
  const char* last = s.data() + e + 1;
  if (*first == '+') ++first;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace protoclip::csv
