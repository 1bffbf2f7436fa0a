#pragma once

// Tab-separated tables: label files, score files, and text pairs. Lines
// starting with '#' are comments.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attnhd/errors.hpp"

namespace attnhd {

inline std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::vector<std::string>> read_tsv_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    rows.push_back(split_tabs(line));
  }
  return rows;
}

inline double parse_number(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(context + ": '" + s + "' is not a number");
  }
}

// Per-utterance label and numeric quality columns.
struct LabelEntry {
  std::optional<int> label;
  std::map<std::string, double> quality;
};

using LabelTable = std::map<std::string, LabelEntry>;

// Header row required; first column is utterance_id, a column named "label"
// holds 0/1, every other column must be numeric and becomes a quality value.
inline LabelTable read_label_table(const std::filesystem::path& path) {
  const auto rows = read_tsv_rows(path);
  if (rows.empty()) throw DataError("label file '" + path.string() + "' is empty");
  const auto& header = rows.front();
  if (header.empty() || header.front() != "utterance_id")
    throw DataError("label file '" + path.string() + "' must start with an utterance_id column");
  LabelTable table;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw DataError("label file '" + path.string() + "' row " + std::to_string(r + 1) + " has the wrong column count");
    LabelEntry e;
    for (std::size_t c = 1; c < row.size(); ++c) {
      const double v = parse_number(row[c], "label file '" + path.string() + "' column " + header[c]);
      if (header[c] == "label") {
        if (v != 0.0 && v != 1.0) throw DataError("label for '" + row[0] + "' is not 0 or 1");
        e.label = static_cast<int>(v);
      } else {
        e.quality[header[c]] = v;
      }
    }
    table[row[0]] = std::move(e);
  }
  return table;
}

}  // namespace attnhd
