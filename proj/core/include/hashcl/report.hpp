#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace hashcl {

struct Series {
  std::string name;
  std::vector<double> values;
  std::vector<double> errors;  // optional whiskers, parallel to values
};

enum class ChartKind { bars, lines };

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> categories;
  std::vector<Series> series;
  ChartKind kind = ChartKind::bars;
};

/// Standalone SVG document; no scripts, fonts or external references.
std::string render_svg(const Chart& chart);

struct ReportFiles {
  std::vector<std::filesystem::path> written;
};

/// Reads seed_* artifacts under `run_dir` (a run, or an ablation whose cells
/// are run directories) and writes utilization, accuracy-curve and FM tables
/// plus one SVG per table into `run_dir`.
ReportFiles write_report(const std::filesystem::path& run_dir);

}  // namespace hashcl
