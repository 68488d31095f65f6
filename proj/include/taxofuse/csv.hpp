#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "taxofuse/error.hpp"

namespace taxofuse::csv {

// Picks the delimiter that occurs most often in the header line among
// comma, tab and semicolon.
inline char sniff_delimiter(std::string_view header) {
  char best = ',';
  std::size_t best_count = 0;
  for (char c : {',', '\t', ';'}) {
    auto n = static_cast<std::size_t>(std::count(header.begin(), header.end(), c));
    if (n > best_count) {
      best = c;
      best_count = n;
    }
  }
  return best;
}

// Splits one line, honoring double-quoted fields with "" escapes.
inline std::vector<std::string> split_line(std::string_view line, char delim) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string quote_if_needed(std::string_view field, char delim = ',') {
  if (field.find_first_of(std::string{delim, '"', '\n'}) == std::string_view::npos)
    return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

struct Table {
  std::vector<std::string> header;
  // (1-based source line number, fields)
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;

  // Index of a header column, or -1.
  int column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline Table parse(std::istream& in) {
  Table table;
  std::string line;
  std::size_t lineno = 0;
  char delim = ',';
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!have_header) {
      // Strip a UTF-8 byte order mark.
      if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
      delim = sniff_delimiter(line);
      for (auto& f : split_line(line, delim)) table.header.push_back(trim(f));
      have_header = true;
      continue;
    }
    auto fields = split_line(line, delim);
    for (auto& f : fields) f = trim(f);
    table.rows.emplace_back(lineno, std::move(fields));
  }
  if (!have_header) throw DataError("delimited file has no header row");
  return table;
}

inline Table parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  return parse(in);
}

}  // namespace taxofuse::csv
