#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ppr {

/// Fixed CSV column order; also the key order of log lines.
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {
      "env_steps", "update",   "train_return", "train_episodes", "eval_return", "eval_stderr",
      "success_rate", "loss_total", "pg",     "baseline",       "entropy",     "aux",
      "aux_r_p",   "aux_r_q",  "aux_p_q",      "gate",           "grad_norm"};
  return cols;
}

/// One self-describing record: `key=value` pairs separated by spaces. Keys
/// absent from a record (eval fields between evaluations) are left out.
struct MetricsRecord {
  std::map<std::string, double> values;

  std::uint64_t env_steps() const { return static_cast<std::uint64_t>(values.at("env_steps")); }

  bool has(const std::string& k) const { return values.count(k) != 0; }
  double get(const std::string& k) const { return values.at(k); }
  void set(const std::string& k, double v) { values[k] = v; }

  std::string to_line() const {
    std::string out;
    for (const std::string& k : metric_columns()) {
      auto it = values.find(k);
      if (it == values.end()) continue;
      if (!out.empty()) out += ' ';
      out += k + "=" + format_value(it->second);
    }
    return out;
  }

  static MetricsRecord parse_line(const std::string& line) {
    MetricsRecord r;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("metrics line token without '=': " + tok);
      r.values[tok.substr(0, eq)] = std::stod(tok.substr(eq + 1));
    }
    if (!r.has("env_steps")) throw std::invalid_argument("metrics line lacks env_steps");
    return r;
  }

  static std::string format_value(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
};

inline std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open metrics log " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(MetricsRecord::parse_line(line));
  }
  return out;
}

inline std::string metrics_log_header() { return "# ppr metrics v1: one key=value record per line"; }

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& recs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const auto& cols = metric_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "," : "") << cols[i];
  f << "\n";
  for (const auto& r : recs) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) f << ",";
      if (r.has(cols[i])) f << MetricsRecord::format_value(r.get(cols[i]));
    }
    f << "\n";
  }
}

// ---------------------------------------------------------------------------
// Curves

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  CsvTable t;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (t.header.empty()) {
      t.header = split_csv_line(line);
    } else {
      t.rows.push_back(split_csv_line(line));
    }
  }
  if (t.header.empty()) throw std::runtime_error(path.string() + ": empty CSV");
  return t;
}

/// (step, value) samples of one run, sorted by step.
struct Curve {
  std::string name;
  std::vector<std::pair<double, double>> points;

  /// Linear interpolation inside the sampled range; nullopt outside it.
  std::optional<double> at(double x) const {
    if (points.empty() || x < points.front().first || x > points.back().first) return std::nullopt;
    auto hi = std::lower_bound(points.begin(), points.end(), x,
                               [](const auto& p, double v) { return p.first < v; });
    if (hi->first == x) return hi->second;
    auto lo = std::prev(hi);
    const double w = (x - lo->first) / (hi->first - lo->first);
    return lo->second + w * (hi->second - lo->second);
  }
};

/// Reads `column` against env_steps from a metrics CSV, skipping rows where
/// the column is empty.
inline Curve curve_from_csv(const std::filesystem::path& path, const std::string& column, std::string name) {
  const CsvTable t = read_csv(path);
  const auto xs = t.column("env_steps");
  const auto ys = t.column(column);
  if (!xs) throw std::runtime_error(path.string() + ": no env_steps column");
  if (!ys) throw std::runtime_error(path.string() + ": no " + column + " column");
  Curve c{std::move(name), {}};
  for (const auto& row : t.rows) {
    if (*ys >= row.size() || *xs >= row.size() || row[*ys].empty()) continue;
    const double x = std::stod(row[*xs]);
    const double y = std::stod(row[*ys]);
    if (!c.points.empty() && x < c.points.back().first) {
      throw std::runtime_error(path.string() + ": env_steps not nondecreasing");
    }
    if (!c.points.empty() && x == c.points.back().first) {
      c.points.back().second = y;
    } else {
      c.points.emplace_back(x, y);
    }
  }
  return c;
}

/// CSV over the union of all step grids: `env_steps,<run1>,<run2>,...`.
/// Cells outside a run's sampled range stay empty.
inline std::string merge_curves(const std::vector<Curve>& curves) {
  std::vector<double> grid;
  for (const auto& c : curves) {
    for (const auto& p : c.points) grid.push_back(p.first);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::string out = "env_steps";
  for (const auto& c : curves) out += "," + c.name;
  out += "\n";
  for (double x : grid) {
    out += MetricsRecord::format_value(x);
    for (const auto& c : curves) {
      out += ",";
      if (auto y = c.at(x)) out += MetricsRecord::format_value(*y);
    }
    out += "\n";
  }
  return out;
}

}  // namespace ppr
