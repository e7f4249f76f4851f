#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hashcl/config.hpp"
#include "hashcl/errors.hpp"
#include "hashcl/experiment.hpp"
#include "hashcl/gradcheck.hpp"
#include "hashcl/report.hpp"

using namespace hashcl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  auto cfg = parse_config(R"({
    "schema": 1, "n_layers": 1, "dim": 8, "n_heads": 2, "tokens": 2, "raw_dim": 6,
    "injected_layers": [1], "n_experts": 4, "prompt_length": 4, "top_k": 2,
    "tasks": 3, "classes_per_task": 2, "train_per_class": 10, "test_per_class": 5,
    "pretrain_classes": 3, "pretrain_train_per_class": 30, "pretrain_test_per_class": 10,
    "pretrain_epochs": 5, "epochs": 1, "pseudo_per_class": 8, "seeds": [0, 1]})");
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    if (!line.empty() && line.back() == ',') row.emplace_back();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST(Aggregate, SampleStandardDeviation) {
  const auto a = aggregate({1.0, 2.0, 3.0});
  EXPECT_EQ(a.mean, 2.0);
  ASSERT_TRUE(a.std.has_value());
  EXPECT_EQ(*a.std, 1.0);
  EXPECT_EQ(a.count, 3u);
  EXPECT_FALSE(aggregate({4.0}).std.has_value());
}

TEST(FormatNumber, NineSignificantDigits) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(format_number(123456789.5), "123456790");
}

TEST(AblationGrid, CellCounts) {
  const auto base = tiny_config();
  EXPECT_EQ(ablation_grid(base, "components", std::nullopt).size(), 4u);
  EXPECT_EQ(ablation_grid(base, "delta", std::nullopt).size(), 8u);
  EXPECT_EQ(ablation_grid(base, "psi_variant", std::nullopt).size(), 3u);
  const auto cells = ablation_grid(base, "components", std::nullopt);
  EXPECT_FALSE(cells[0].config.modulator.hdr_enabled);
  EXPECT_FALSE(cells[0].config.modulator.hgm_enabled);
  EXPECT_TRUE(cells[3].config.modulator.hdr_enabled);
  EXPECT_TRUE(cells[3].config.modulator.hgm_enabled);
}

TEST(AblationGrid, UsageErrors) {
  const auto base = tiny_config();
  EXPECT_THROW(ablation_grid(base, "colour", std::nullopt), ConfigError);
  EXPECT_THROW(ablation_grid(base, "delta", std::vector<std::string>{}), ConfigError);
  EXPECT_THROW(ablation_grid(base, "delta", std::vector<std::string>{"-1"}), ConfigError);
  // top_k is 2, so a single expert cannot be valid.
  EXPECT_THROW(ablation_grid(base, "n_experts", std::vector<std::string>{"1"}), ConfigError);
}

TEST(Experiment, RunArtifactsAndDeterminism) {
  const auto cfg = tiny_config();
  const auto a = fresh_dir("hashcl_exp_a");
  const auto b = fresh_dir("hashcl_exp_b");
  const auto sa = run_experiment(cfg, a, 2);
  const auto sb = run_experiment(cfg, b, 1);
  for (auto seed : cfg.seeds) {
    const std::string d = "seed_" + std::to_string(seed);
    EXPECT_EQ(read_file(a / d / "metrics.csv"), read_file(b / d / "metrics.csv"));
    EXPECT_EQ(read_file(a / d / "checkpoint.bin"), read_file(b / d / "checkpoint.bin"));
  }
  EXPECT_EQ(sa.faa.mean, sb.faa.mean);

  const auto summary = nlohmann::json::parse(read_file(a / "summary.json"));
  for (const char* key : {"faa", "caa", "fm"}) {
    ASSERT_TRUE(summary.contains(key)) << key;
    EXPECT_TRUE(summary[key].contains("mean"));
    EXPECT_TRUE(summary[key].contains("std"));
  }
  EXPECT_TRUE(fs::exists(a / "config.json"));

  // events.jsonl: one JSON object per line with a known kind.
  std::ifstream events(a / "seed_0" / "events.jsonl");
  std::map<std::string, int> kinds;
  std::string line;
  while (std::getline(events, line)) {
    const auto j = nlohmann::json::parse(line);
    kinds[j.at("kind").get<std::string>()]++;
  }
  EXPECT_EQ(kinds.size(), 4u);
  EXPECT_EQ(kinds["eval"], 3);
  EXPECT_EQ(kinds["task_boundary"], 3);
  EXPECT_EQ(kinds["ledger_snapshot"], 3);
  EXPECT_EQ(kinds["epoch_loss"], 3);

  const auto rows = read_csv(a / "seed_0" / "metrics.csv");
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], (std::vector<std::string>{"metric", "task", "after_task", "value"}));
  std::size_t accuracy_rows = 0;
  for (const auto& r : rows) accuracy_rows += r[0] == "accuracy";
  EXPECT_EQ(accuracy_rows, 6u);

  // Report on the same run.
  write_report(a);
  const auto util = read_csv(a / "utilization.csv");
  std::map<std::string, double> sums;
  for (std::size_t i = 1; i < util.size(); ++i) {
    sums[util[i][0] + "/" + util[i][1] + "/" + util[i][2] + "/" + util[i][3]] +=
        std::stod(util[i][5]);
  }
  EXPECT_FALSE(sums.empty());
  for (const auto& [key, total] : sums) EXPECT_NEAR(total, 1.0, 1e-9) << key;
  const auto curves = read_csv(a / "accuracy_curves.csv");
  EXPECT_EQ(curves.size(), 1u + cfg.seeds.size() * cfg.data.tasks);
  for (const char* svg : {"utilization.svg", "accuracy_curves.svg", "fm.svg"}) {
    const auto text = read_file(a / svg);
    EXPECT_EQ(text.rfind("<?xml", 0), 0u) << svg;
    EXPECT_EQ(text.find("href"), std::string::npos) << svg;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, SingleTaskRunHasNoForgetting) {
  auto cfg = tiny_config();
  cfg.data.tasks = 1;
  cfg.seeds = {0};
  const auto dir = fresh_dir("hashcl_exp_single");
  const auto summary = run_experiment(cfg, dir, 1);
  EXPECT_EQ(summary.seeds[0].faa, summary.seeds[0].caa);
  EXPECT_FALSE(summary.seeds[0].fm.has_value());
  EXPECT_EQ(summary.fm.count, 0u);
  fs::remove_all(dir);
}

TEST(Report, MissingArtifactsNameTheFile) {
  const auto dir = fresh_dir("hashcl_report_missing");
  fs::create_directories(dir / "seed_0");
  try {
    write_report(dir);
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(".csv"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Report, SvgEscapesText) {
  Chart chart;
  chart.title = "a < b & c";
  chart.categories = {"x"};
  chart.series = {{"s", {0.5}, {}}};
  const auto svg = render_svg(chart);
  EXPECT_NE(svg.find("a &lt; b &amp; c"), std::string::npos);
  EXPECT_EQ(svg.find("<script"), std::string::npos);
}

TEST(Gradcheck, PassesAndCatchesCorruption) {
  auto cfg = tiny_config();
  const auto groups = run_gradcheck(cfg);
  ASSERT_EQ(groups.size(), gradcheck_groups().size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    EXPECT_EQ(groups[i].group, gradcheck_groups()[i]);
    EXPECT_TRUE(groups[i].passed()) << groups[i].group << " " << groups[i].max_relative_error;
  }
  GradcheckOptions bad;
  bad.corrupt_group = "routers";
  const auto corrupted = run_gradcheck(cfg, bad);
  for (const auto& g : corrupted) EXPECT_EQ(g.passed(), g.group != "routers") << g.group;
}

TEST(Gradcheck, SingleExpertRoutingHasNoRouterGradient) {
  auto cfg = tiny_config();
  cfg.pool.top_k = 1;
  for (const auto& g : run_gradcheck(cfg)) {
    EXPECT_TRUE(g.passed()) << g.group << " " << g.max_relative_error;
    if (g.group == "routers") EXPECT_EQ(g.checked, 0u);
  }
}
