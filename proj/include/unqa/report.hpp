#pragma once

// Tables and static SVG plots rendered from a run directory.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/core.hpp"
#include "unqa/evaluation.hpp"

namespace unqa {

namespace fs = std::filesystem;

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::missing_file, "metrics log '" + path.string() + "' not found");
  std::vector<json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse_error, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Everything the report needs from one run directory.
struct RunSummary {
  std::string label;
  std::string strategy = "unqa";
  std::vector<json> records;
  std::optional<EvalReport> eval;
};

inline EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  r.config_hash = j.value("config_hash", "");
  r.checkpoint_id = j.value("checkpoint", "");
  r.databases = j.at("databases").get<std::vector<std::string>>();
  for (const auto& row : j.at("rows")) {
    EvalRow e;
    e.repeat = row.at("repeat").get<std::size_t>();
    e.seed = row.at("seed").get<std::uint64_t>();
    e.database = row.at("database").get<std::string>();
    e.metrics.srcc = row.at("srcc").get<double>();
    e.metrics.plcc = row.at("plcc").get<double>();
    e.metrics.plcc_logistic = row.at("plcc_logistic").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                                   : row.at("plcc_logistic").get<double>();
    e.metrics.n = row.at("n").get<std::size_t>();
    r.rows.push_back(e);
  }
  r.finalize();
  return r;
}

inline RunSummary load_run_summary(const fs::path& run_dir) {
  RunSummary s;
  s.label = run_dir.filename().string();
  if (s.label.empty()) s.label = run_dir.parent_path().filename().string();
  s.records = read_jsonl(run_dir / "metrics.jsonl");
  require(!s.records.empty(), ErrorCode::invalid_argument, "metrics log in '" + run_dir.string() + "' is empty");
  for (const auto& r : s.records) {
    if (r.value("type", "") == "run") s.strategy = r.value("strategy", s.strategy);
  }
  if (fs::exists(run_dir / "eval.json")) {
    std::ifstream in(run_dir / "eval.json");
    try {
      s.eval = eval_report_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse_error, "eval.json in '" + run_dir.string() + "': " + e.what());
    }
  }
  return s;
}

namespace detail {

inline std::string fmt4(double v) {
  if (!std::isfinite(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

/// Fixed-width text table from rows of cells (first row is the header).
inline std::string text_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream os;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) os << (i ? "  " : "") << pad(rows[k][i], width[i]);
    os << "\n";
    if (k == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      os << std::string(total, '-') << "\n";
    }
  }
  return os.str();
}

inline std::string csv_table(const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_field(r[i]);
    os << "\n";
  }
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::io_error, "cannot write '" + path.string() + "'");
  out << text;
}

// Minimal SVG line and bar charts.

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  return colors[i % 7];
}

struct Series {
  std::string name;
  std::vector<double> y;
};

inline std::string svg_line_chart(const std::string& title, const std::string& y_label,
                                  const std::vector<Series>& series) {
  const double w = 640, h = 360, left = 60, right = 150, top = 40, bottom = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 1;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.y.size());
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto px = [&](std::size_t i) { return left + (w - left - right) * (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.5); };
  auto py = [&](double v) { return top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo)); };
  std::ostringstream os;
  char buf[160];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
  std::snprintf(buf, sizeof(buf), "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left,
                h - bottom, w - right, h - bottom);
  os << buf;
  std::snprintf(buf, sizeof(buf), "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left, top,
                left, h - bottom);
  os << buf;
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n",
                  left - 4, py(v) + 3, v);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\">epoch (1..%zu)</text>\n",
                (left + w - right) / 2 - 30, h - 10, n);
  os << buf;
  os << "<text x=\"12\" y=\"" << top - 8 << "\" font-family=\"sans-serif\" font-size=\"11\">" << y_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::ostringstream pts;
    for (std::size_t i = 0; i < series[k].y.size(); ++i) {
      if (!std::isfinite(series[k].y[i])) continue;
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", px(i), py(series[k].y[i]));
      pts << buf;
    }
    os << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" fill=\"%s\">",
                  w - right + 8, top + 14.0 * static_cast<double>(k + 1), palette(k));
    os << buf << series[k].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string svg_bar_chart(const std::string& title, const std::vector<std::pair<std::string, double>>& bars) {
  const double w = 640, h = 360, left = 60, top = 40, bottom = 60;
  double hi = 1.0;
  for (const auto& b : bars) hi = std::max(hi, b.second);
  const double slot = (w - left - 20) / static_cast<double>(std::max<std::size_t>(1, bars.size()));
  std::ostringstream os;
  char buf[200];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double bh = (h - top - bottom) * bars[i].second / hi;
    const double x = left + slot * static_cast<double>(i) + slot * 0.15;
    std::snprintf(buf, sizeof(buf), "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\"/>\n", x,
                  h - bottom - bh, slot * 0.7, bh, palette(i));
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">%g</text>\n",
                  x + slot * 0.35, h - bottom - bh - 4, bars[i].second);
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">",
                  x + slot * 0.35, h - bottom + 16);
    os << buf << bars[i].first << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace detail

/// One row per (database, repeat) plus a mean row per database.
inline std::vector<std::vector<std::string>> metrics_table(const EvalReport& r) {
  std::vector<std::vector<std::string>> rows{{"database", "repeat", "srcc", "plcc", "plcc_logistic", "n"}};
  for (const auto& db : r.databases) {
    for (const auto& row : r.rows_for(db)) {
      rows.push_back({db, std::to_string(row.repeat), detail::fmt4(row.metrics.srcc), detail::fmt4(row.metrics.plcc),
                      detail::fmt4(row.metrics.plcc_logistic), std::to_string(row.metrics.n)});
    }
    if (r.mean.count(db)) {
      const auto& m = r.mean.at(db);
      rows.push_back({db, "mean", detail::fmt4(m.srcc), detail::fmt4(m.plcc), detail::fmt4(m.plcc_logistic),
                      std::to_string(m.n)});
    }
  }
  return rows;
}

/// Databases as rows, one SRCC/PLCC column pair per run.
inline std::vector<std::vector<std::string>> comparison_table(const std::vector<RunSummary>& runs) {
  std::vector<std::vector<std::string>> rows{{"database"}};
  std::vector<std::string> dbs;
  for (const auto& run : runs) {
    rows[0].push_back(run.label + " srcc");
    rows[0].push_back(run.label + " plcc");
    if (!run.eval) continue;
    for (const auto& db : run.eval->databases) {
      if (std::find(dbs.begin(), dbs.end(), db) == dbs.end()) dbs.push_back(db);
    }
  }
  for (const auto& db : dbs) {
    std::vector<std::string> row{db};
    for (const auto& run : runs) {
      const bool has = run.eval && run.eval->mean.count(db);
      row.push_back(has ? detail::fmt4(run.eval->mean.at(db).srcc) : "-");
      row.push_back(has ? detail::fmt4(run.eval->mean.at(db).plcc) : "-");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Criterion x strategy rows, databases as columns (the training-strategy
/// ablation layout).
inline std::vector<std::vector<std::string>> ablation_table(const std::vector<RunSummary>& runs) {
  std::vector<std::string> dbs;
  for (const auto& run : runs) {
    require(run.eval.has_value(), ErrorCode::invalid_argument, "run '" + run.label + "' has no eval.json");
    for (const auto& db : run.eval->databases) {
      if (std::find(dbs.begin(), dbs.end(), db) == dbs.end()) dbs.push_back(db);
    }
  }
  std::vector<std::vector<std::string>> rows{{"criterion", "strategy"}};
  rows[0].insert(rows[0].end(), dbs.begin(), dbs.end());
  for (const char* criterion : {"SRCC", "PLCC"}) {
    for (const auto& run : runs) {
      std::vector<std::string> row{criterion, run.strategy == run.label ? run.label : run.strategy + " (" + run.label + ")"};
      for (const auto& db : dbs) {
        if (!run.eval->mean.count(db)) {
          row.push_back("-");
          continue;
        }
        const auto& m = run.eval->mean.at(db);
        row.push_back(detail::fmt4(std::string(criterion) == "SRCC" ? m.srcc : m.plcc));
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

struct ReportOptions {
  fs::path out_dir;  // default: <first run>/report
  bool ablation = false;
};

/// Writes tables (CSV and text) and SVG plots; returns the files written.
inline std::vector<fs::path> write_report(const std::vector<fs::path>& run_dirs, const ReportOptions& options = {}) {
  require(!run_dirs.empty(), ErrorCode::invalid_argument, "report: no run directory");
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run_summary(d));
  const fs::path out = options.out_dir.empty() ? run_dirs.front() / "report" : options.out_dir;
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(out / name, text);
    written.push_back(out / name);
  };

  for (const auto& run : runs) {
    const std::string p = runs.size() == 1 ? "" : run.label + "_";
    if (run.eval) {
      const auto table = metrics_table(*run.eval);
      emit(p + "metrics.csv", detail::csv_table(table));
      emit(p + "metrics.txt", detail::text_table(table));
    }
    // Training curves and schedule composition per phase.
    std::map<std::string, std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>>> loss;
    std::map<std::string, std::map<std::string, std::map<std::size_t, double>>> val;
    std::map<std::string, std::map<std::string, std::size_t>> draws;
    for (const auto& r : run.records) {
      const std::string type = r.value("type", "");
      if (type == "train") {
        auto& cell = loss[r.at("phase")][r.at("database")][r.at("epoch").get<std::size_t>()];
        cell.first += r.at("loss").get<double>();
        ++cell.second;
        if (r.at("epoch").get<std::size_t>() == 0) ++draws[r.at("phase")][r.at("database")];
      } else if (type == "val" && r.at("srcc").is_number()) {
        val[r.at("phase")][r.at("database")][r.at("epoch").get<std::size_t>()] = r.at("srcc").get<double>();
      }
    }
    for (const auto& [phase, by_db] : loss) {
      std::vector<detail::Series> series;
      for (const auto& [db, by_epoch] : by_db) {
        detail::Series s{db, {}};
        for (const auto& [epoch, acc] : by_epoch) {
          (void)epoch;
          s.y.push_back(acc.first / static_cast<double>(acc.second));
        }
        series.push_back(std::move(s));
      }
      emit(p + "train_loss_" + phase + ".svg", detail::svg_line_chart(run.label + " " + phase + " training loss", "mean loss", series));
    }
    for (const auto& [phase, by_db] : val) {
      std::vector<detail::Series> series;
      for (const auto& [db, by_epoch] : by_db) {
        detail::Series s{db, {}};
        for (const auto& [epoch, v] : by_epoch) {
          (void)epoch;
          s.y.push_back(v);
        }
        series.push_back(std::move(s));
      }
      emit(p + "val_srcc_" + phase + ".svg", detail::svg_line_chart(run.label + " " + phase + " validation SRCC", "SRCC", series));
    }
    for (const auto& [phase, by_db] : draws) {
      std::vector<std::pair<std::string, double>> bars;
      for (const auto& [db, count] : by_db) bars.emplace_back(db, static_cast<double>(count));
      emit(p + "schedule_" + phase + ".svg", detail::svg_bar_chart(run.label + " " + phase + " draws per epoch", bars));
    }
  }
  if (runs.size() > 1) {
    const auto table = comparison_table(runs);
    emit("comparison.csv", detail::csv_table(table));
    emit("comparison.txt", detail::text_table(table));
  }
  if (options.ablation) {
    const auto table = ablation_table(runs);
    emit("ablation.csv", detail::csv_table(table));
    emit("ablation.txt", detail::text_table(table));
  }
  require(!written.empty(), ErrorCode::invalid_argument, "report: nothing to report in the given run(s)");
  return written;
}

}  // namespace unqa
