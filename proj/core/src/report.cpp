#include "hashcl/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "hashcl/errors.hpp"
#include "hashcl/experiment.hpp"

namespace hashcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Frequencies are written at round-trip precision so each group sums to 1.
std::string format_frequency(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                          "#66ccee", "#aa3377", "#bbbbbb", "#000000"};

}  // namespace

std::string render_svg(const Chart& chart) {
  const double width = 720, height = 420;
  const double left = 70, right = 160, top = 50, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  double lo = 0.0, hi = 0.0;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i])) continue;
      const double e = i < s.errors.size() && std::isfinite(s.errors[i]) ? s.errors[i] : 0.0;
      lo = std::min(lo, s.values[i] - e);
      hi = std::max(hi, s.values[i] + e);
    }
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  const double pad = 0.05 * (hi - lo);
  if (lo < 0.0) lo -= pad;
  hi += pad;
  auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << xml_escape(chart.title) << "</text>\n";

  // Axes, ticks and gridlines.
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << y_of(std::max(lo, 0.0)) << "\" x2=\""
      << left + plot_w << "\" y2=\"" << y_of(std::max(lo, 0.0)) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = lo + (hi - lo) * i / 5.0;
    const double y = y_of(v);
    svg << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << left + plot_w << "\" y2=\""
        << y << "\" stroke=\"#dddddd\"/>\n"
        << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << format_number(std::round(v * 1e4) / 1e4)
        << "</text>\n";
  }
  const std::size_t n_cat = std::max<std::size_t>(1, chart.categories.size());
  const double slot = plot_w / static_cast<double>(n_cat);
  for (std::size_t c = 0; c < chart.categories.size(); ++c) {
    svg << "<text x=\"" << left + slot * (c + 0.5) << "\" y=\"" << top + plot_h + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(chart.categories[c])
        << "</text>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 16
      << "\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(chart.x_label) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << top + plot_h / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "transform=\"rotate(-90 18 " << top + plot_h / 2 << ")\">" << xml_escape(chart.y_label)
      << "</text>\n";

  const std::size_t n_series = std::max<std::size_t>(1, chart.series.size());
  for (std::size_t s = 0; s < chart.series.size(); ++s) {
    const auto& series = chart.series[s];
    const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
    std::vector<std::pair<double, double>> points;
    for (std::size_t c = 0; c < series.values.size() && c < n_cat; ++c) {
      const double v = series.values[c];
      if (!std::isfinite(v)) continue;
      double x = 0.0;
      if (chart.kind == ChartKind::bars) {
        const double bar_w = slot * 0.8 / static_cast<double>(n_series);
        x = left + slot * c + slot * 0.1 + bar_w * s;
        const double y0 = y_of(std::max(lo, 0.0));
        const double y1 = y_of(v);
        svg << "<rect x=\"" << x << "\" y=\"" << std::min(y0, y1) << "\" width=\"" << bar_w
            << "\" height=\"" << std::abs(y0 - y1) << "\" fill=\"" << color << "\"/>\n";
        x += bar_w / 2;
      } else {
        x = left + slot * (c + 0.5);
        points.emplace_back(x, y_of(v));
        svg << "<circle cx=\"" << x << "\" cy=\"" << y_of(v) << "\" r=\"3\" fill=\"" << color
            << "\"/>\n";
      }
      if (c < series.errors.size() && std::isfinite(series.errors[c]) && series.errors[c] > 0) {
        svg << "<line x1=\"" << x << "\" y1=\"" << y_of(v - series.errors[c]) << "\" x2=\"" << x
            << "\" y2=\"" << y_of(v + series.errors[c]) << "\" stroke=\"black\"/>\n";
      }
    }
    if (points.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : points) svg << x << ',' << y << ' ';
      svg << "\"/>\n";
    }
    const double ly = top + 14.0 * static_cast<double>(s);
    svg << "<rect x=\"" << left + plot_w + 12 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" "
        << "fill=\"" << color << "\"/>\n"
        << "<text x=\"" << left + plot_w + 26 << "\" y=\"" << ly + 9 << "\" font-size=\"11\">"
        << xml_escape(series.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

namespace {

struct SeedArtifacts {
  std::uint64_t seed = 0;
  std::map<std::string, std::optional<double>> scalars;  // faa, caa, fm
  std::map<std::pair<std::size_t, std::size_t>, double> accuracy;
  std::vector<std::vector<std::vector<std::uint64_t>>> snapshots;  // task x layer x expert
  std::size_t tasks = 0;
};

struct Cell {
  std::string name;
  std::vector<SeedArtifacts> seeds;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ifstream open_artifact(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing run artifact: " + path.string());
  return in;
}

SeedArtifacts read_seed(const fs::path& dir) {
  SeedArtifacts a;
  a.seed = std::stoull(dir.filename().string().substr(5));
  {
    auto in = open_artifact(dir / "metrics.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto f = split_csv(line);
      if (f.size() != 4) throw DataError("malformed row in " + (dir / "metrics.csv").string());
      std::optional<double> v;
      if (!f[3].empty()) v = std::stod(f[3]);
      if (f[0] == "accuracy") {
        const std::size_t i = std::stoul(f[1]), t = std::stoul(f[2]);
        a.accuracy[{i, t}] = v.value_or(0.0);
        a.tasks = std::max(a.tasks, t + 1);
      } else if (f[0] == "faa" || f[0] == "caa" || f[0] == "fm") {
        a.scalars[f[0]] = v;
      }
    }
  }
  {
    auto in = open_artifact(dir / "events.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json e = json::parse(line);
      if (e.at("kind") == "ledger_snapshot") {
        const auto task = e.at("task").get<std::size_t>();
        const auto layer = e.at("layer").get<std::size_t>();
        if (a.snapshots.size() <= task) a.snapshots.resize(task + 1);
        if (a.snapshots[task].size() <= layer) a.snapshots[task].resize(layer + 1);
        a.snapshots[task][layer] = e.at("counts").get<std::vector<std::uint64_t>>();
      }
    }
  }
  if (a.snapshots.empty()) {
    throw DataError("no ledger snapshots in " + (dir / "events.jsonl").string());
  }
  return a;
}

std::vector<fs::path> seed_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("seed_", 0) == 0 && name.size() > 5 &&
        std::all_of(name.begin() + 5, name.end(), ::isdigit)) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return std::stoull(a.filename().string().substr(5)) <
           std::stoull(b.filename().string().substr(5));
  });
  return out;
}

std::vector<Cell> discover(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) {
    throw DataError("run directory not found: " + run_dir.string());
  }
  std::vector<Cell> cells;
  if (auto seeds = seed_dirs(run_dir); !seeds.empty()) {
    Cell c{"run", {}};
    for (const auto& s : seeds) c.seeds.push_back(read_seed(s));
    cells.push_back(std::move(c));
    return cells;
  }
  std::vector<fs::path> subdirs;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (entry.is_directory() && !seed_dirs(entry.path()).empty()) subdirs.push_back(entry.path());
  }
  // Keep the ablation grid order when the ablation table is present.
  std::vector<std::string> order;
  if (std::ifstream csv(run_dir / "ablation.csv"); csv) {
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
      const auto f = split_csv(line);
      if (f.size() > 1 && std::find(order.begin(), order.end(), f[1]) == order.end()) {
        order.push_back(f[1]);
      }
    }
  }
  auto rank = [&](const fs::path& p) {
    auto it = std::find(order.begin(), order.end(), p.filename().string());
    return std::make_pair(static_cast<std::size_t>(it - order.begin()), p.filename().string());
  };
  std::sort(subdirs.begin(), subdirs.end(),
            [&](const fs::path& a, const fs::path& b) { return rank(a) < rank(b); });
  for (const auto& d : subdirs) {
    Cell c{d.filename().string(), {}};
    for (const auto& s : seed_dirs(d)) c.seeds.push_back(read_seed(s));
    cells.push_back(std::move(c));
  }
  if (cells.empty()) {
    throw DataError("missing run artifacts: no seed_* directories under " + run_dir.string());
  }
  return cells;
}

std::vector<double> normalized(const std::vector<std::uint64_t>& counts) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::vector<double> f(counts.size(), 0.0);
  if (total == 0) return f;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    f[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return f;
}

void write_text(const fs::path& path, const std::string& text, ReportFiles& files) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  files.written.push_back(path);
}

}  // namespace

ReportFiles write_report(const fs::path& run_dir) {
  const auto cells = discover(run_dir);
  ReportFiles files;

  // Utilization: activations recorded while training each task, plus the
  // cumulative distribution after the last task ("all").
  std::ostringstream util;
  util << "cell,seed,task,layer,expert,frequency\n";
  Chart util_chart{"Expert utilization after the last task", "expert",
                   "activation frequency (mean over layers and seeds)", {}, {}, ChartKind::bars};
  for (const auto& cell : cells) {
    std::vector<double> mean_freq;
    for (const auto& s : cell.seeds) {
      std::vector<std::vector<std::uint64_t>> previous;
      for (std::size_t t = 0; t < s.snapshots.size(); ++t) {
        const auto& snap = s.snapshots[t];
        for (std::size_t l = 0; l < snap.size(); ++l) {
          std::vector<std::uint64_t> delta = snap[l];
          if (!previous.empty()) {
            for (std::size_t e = 0; e < delta.size(); ++e) delta[e] -= previous[l][e];
          }
          const auto f = normalized(delta);
          for (std::size_t e = 0; e < f.size(); ++e) {
            util << cell.name << ',' << s.seed << ',' << t << ',' << l << ',' << e << ','
                 << format_frequency(f[e]) << '\n';
          }
        }
        previous = snap;
      }
      const auto& last = s.snapshots.back();
      for (std::size_t l = 0; l < last.size(); ++l) {
        const auto f = normalized(last[l]);
        if (mean_freq.empty()) mean_freq.assign(f.size(), 0.0);
        for (std::size_t e = 0; e < f.size(); ++e) {
          util << cell.name << ',' << s.seed << ",all," << l << ',' << e << ','
               << format_frequency(f[e]) << '\n';
          mean_freq[e] += f[e] / static_cast<double>(last.size() * cell.seeds.size());
        }
      }
    }
    if (util_chart.categories.size() < mean_freq.size()) {
      util_chart.categories.clear();
      for (std::size_t e = 0; e < mean_freq.size(); ++e) {
        util_chart.categories.push_back(std::to_string(e));
      }
    }
    util_chart.series.push_back({cell.name, mean_freq, {}});
  }
  write_text(run_dir / "utilization.csv", util.str(), files);
  write_text(run_dir / "utilization.svg", render_svg(util_chart), files);

  // Accuracy curves: one row per (cell, seed, after_task).
  std::size_t max_tasks = 0;
  for (const auto& cell : cells) {
    for (const auto& s : cell.seeds) max_tasks = std::max(max_tasks, s.tasks);
  }
  std::ostringstream curves;
  curves << "cell,seed,after_task,average";
  for (std::size_t i = 0; i < max_tasks; ++i) curves << ",task_" << i;
  curves << '\n';
  Chart curve_chart{"Average accuracy over seen tasks", "after task", "accuracy (mean over seeds)",
                    {}, {}, ChartKind::lines};
  for (std::size_t t = 0; t < max_tasks; ++t) curve_chart.categories.push_back(std::to_string(t));
  for (const auto& cell : cells) {
    std::vector<double> mean(max_tasks, 0.0);
    std::vector<double> count(max_tasks, 0.0);
    for (const auto& s : cell.seeds) {
      for (std::size_t t = 0; t < s.tasks; ++t) {
        double avg = 0.0;
        for (std::size_t i = 0; i <= t; ++i) avg += s.accuracy.at({i, t});
        avg /= static_cast<double>(t + 1);
        curves << cell.name << ',' << s.seed << ',' << t << ',' << format_number(avg);
        for (std::size_t i = 0; i < max_tasks; ++i) {
          curves << ',';
          if (i <= t && s.accuracy.count({i, t})) curves << format_number(s.accuracy.at({i, t}));
        }
        curves << '\n';
        mean[t] += avg;
        count[t] += 1.0;
      }
    }
    for (std::size_t t = 0; t < max_tasks; ++t) {
      mean[t] = count[t] > 0 ? mean[t] / count[t] : std::nan("");
    }
    curve_chart.series.push_back({cell.name, mean, {}});
  }
  write_text(run_dir / "accuracy_curves.csv", curves.str(), files);
  write_text(run_dir / "accuracy_curves.svg", render_svg(curve_chart), files);

  // Forgetting comparison across cells.
  std::ostringstream fm;
  fm << "cell,seed,fm,faa,caa\n";
  Chart fm_chart{"Forgetting measure", "", "FM (mean over seeds, whiskers: sample std)",
                 {}, {}, ChartKind::bars};
  Series fm_series{"FM", {}, {}};
  auto cell_of = [](const std::optional<double>& v) {
    return v ? format_number(*v) : std::string();
  };
  for (const auto& cell : cells) {
    std::vector<double> values;
    for (const auto& s : cell.seeds) {
      auto get = [&](const char* k) {
        auto it = s.scalars.find(k);
        return it == s.scalars.end() ? std::optional<double>() : it->second;
      };
      fm << cell.name << ',' << s.seed << ',' << cell_of(get("fm")) << ',' << cell_of(get("faa"))
         << ',' << cell_of(get("caa")) << '\n';
      if (auto v = get("fm")) values.push_back(*v);
    }
    const Aggregate a = aggregate(values);
    fm << cell.name << ",mean," << (a.count ? format_number(a.mean) : "") << ",,\n";
    fm_chart.categories.push_back(cell.name);
    fm_series.values.push_back(a.count ? a.mean : std::nan(""));
    fm_series.errors.push_back(a.std.value_or(0.0));
  }
  fm_chart.series.push_back(fm_series);
  write_text(run_dir / "fm.csv", fm.str(), files);
  write_text(run_dir / "fm.svg", render_svg(fm_chart), files);
  return files;
}

}  // namespace hashcl
