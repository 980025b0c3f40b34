#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tradeiv/error.hpp"

namespace tradeiv::csv {

enum class ColumnType { String, Int, Real };

struct ColumnSpec {
  std::string name;
  ColumnType type = ColumnType::Real;
  bool required = true;
};

struct Schema {
  std::vector<ColumnSpec> columns;
};

// One parsed row: raw cells by column name plus the 1-based line number for
// error reporting.
struct Row {
  std::size_t line = 0;
  std::map<std::string, std::string> cells;

  const std::string& str(const std::string& col) const {
    auto it = cells.find(col);
    require(it != cells.end(), "missing column '", col, "' in row at line ", line);
    return it->second;
  }

  long long integer(const std::string& col) const {
    const std::string& s = str(col);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size())
      fail("line ", line, ": cell '", s, "' in column '", col, "' is not an integer");
    return out;
  }

  double real(const std::string& col) const {
    const std::string& s = str(col);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size())
      fail("line ", line, ": cell '", s, "' in column '", col, "' is not numeric");
    return out;
  }
};

struct Table {
  std::vector<std::string> header;
  std::vector<Row> rows;

  bool has_column(const std::string& name) const {
    for (const auto& h : header)
      if (h == name) return true;
    return false;
  }
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  require(!quoted, "line ", lineno, ": unterminated quote");
  out.push_back(cur);
  return out;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace detail

// Reads a comma-delimited UTF-8 file with a mandatory header row. When a
// schema is given, required columns must be present and typed cells are
// validated eagerly so errors carry the offending line number.
inline Table read_table(const std::string& path, const Schema* schema = nullptr) {
  std::ifstream in(path);
  require(in.good(), "cannot open '", path, "'");
  Table table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (lineno == 1) {
      table.header = detail::split_line(line, lineno);
      if (schema) {
        for (const auto& col : schema->columns) {
          if (!col.required) continue;
          bool found = false;
          for (const auto& h : table.header) found = found || h == col.name;
          require(found, "'", path, "': missing required column '", col.name, "'");
        }
      }
      continue;
    }
    if (line.empty()) continue;
    auto cells = detail::split_line(line, lineno);
    require(cells.size() == table.header.size(), "'", path, "' line ", lineno, ": expected ",
            table.header.size(), " cells, got ", cells.size());
    Row row;
    row.line = lineno;
    for (std::size_t i = 0; i < cells.size(); ++i) row.cells[table.header[i]] = cells[i];
    if (schema) {
      for (const auto& col : schema->columns) {
        if (!row.cells.count(col.name)) continue;
        if (col.type == ColumnType::Int) (void)row.integer(col.name);
        if (col.type == ColumnType::Real) (void)row.real(col.name);
      }
    }
    table.rows.push_back(std::move(row));
  }
  require(lineno >= 1, "'", path, "': empty file, header row required");
  return table;
}

// Shortest round-trip formatting so identical inputs always serialize to
// identical bytes.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  require(ec == std::errc(), "double formatting failed");
  return std::string(buf, ptr);
}

class Writer {
 public:
  Writer(const std::string& path, const std::vector<std::string>& header) : out_(path) {
    require(out_.good(), "cannot write '", path, "'");
    write_cells(header);
  }

  void row(const std::vector<std::string>& cells) { write_cells(cells); }

 private:
  void write_cells(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      bool needs_quote = cells[i].find_first_of(",\"\n") != std::string::npos;
      if (needs_quote) {
        out_ << '"';
        for (char c : cells[i]) {
          if (c == '"') out_ << '"';
          out_ << c;
        }
        out_ << '"';
      } else {
        out_ << cells[i];
      }
    }
    out_ << '\n';
  }

  std::ofstream out_;
};

}  // namespace tradeiv::csv
