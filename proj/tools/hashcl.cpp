#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hashcl/config.hpp"
#include "hashcl/errors.hpp"
#include "hashcl/experiment.hpp"
#include "hashcl/gradcheck.hpp"
#include "hashcl/report.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct Options {
  std::string config;
  std::string out;
  std::string seeds;
  std::size_t jobs = 1;
  std::string axis;
  std::optional<std::string> values;
  std::string run_dir;
};

std::vector<std::string> split_values(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

hashcl::ExperimentConfig resolve_config(const Options& opt) {
  hashcl::ExperimentConfig cfg =
      opt.config.empty() ? hashcl::ExperimentConfig{} : hashcl::load_config(opt.config);
  hashcl::apply_environment(cfg);
  if (!opt.seeds.empty()) cfg.seeds = hashcl::parse_seed_list(opt.seeds);
  if (!opt.out.empty()) cfg.out_dir = opt.out;
  cfg.validate();
  return cfg;
}

hashcl::LogFn stderr_log() {
  static std::mutex mutex;
  return [](const std::string& line) {
    std::lock_guard lock(mutex);
    std::cerr << line << '\n';
  };
}

void print_summary(const hashcl::RunSummary& s) {
  auto show = [](const char* name, const hashcl::Aggregate& a) {
    std::cout << name << ' ' << hashcl::format_number(a.mean);
    if (a.std) std::cout << " +- " << hashcl::format_number(*a.std);
    std::cout << '\n';
  };
  show("faa", s.faa);
  show("caa", s.caa);
  if (s.fm.count > 0) show("fm", s.fm);
  show("utilization_variance", s.utilization_variance);
}

int cmd_run(const Options& opt) {
  const auto cfg = resolve_config(opt);
  const auto summary = hashcl::run_experiment(cfg, cfg.out_dir, opt.jobs, stderr_log());
  print_summary(summary);
  std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / "summary.json").string() << '\n';
  return kOk;
}

int cmd_ablate(const Options& opt) {
  const auto cfg = resolve_config(opt);
  std::optional<std::vector<std::string>> values;
  if (opt.values) values = split_values(*opt.values);
  const auto result =
      hashcl::run_ablation(cfg, opt.axis, values, cfg.out_dir, opt.jobs, stderr_log());
  for (std::size_t i = 0; i < result.labels.size(); ++i) {
    const auto& s = result.cells[i];
    std::cout << opt.axis << '=' << result.labels[i] << " faa "
              << hashcl::format_number(s.faa.mean);
    if (s.fm.count > 0) std::cout << " fm " << hashcl::format_number(s.fm.mean);
    std::cout << " utilization_variance " << hashcl::format_number(s.utilization_variance.mean)
              << '\n';
  }
  std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / "ablation.csv").string() << '\n';
  return kOk;
}

int cmd_gradcheck(const Options& opt) {
  const auto cfg = resolve_config(opt);
  hashcl::GradcheckOptions go;
  go.seed = cfg.seeds.front();
  const auto groups = hashcl::run_gradcheck(cfg, go);
  bool ok = true;
  for (const auto& g : groups) {
    std::cout << g.group << " max_relative_error " << hashcl::format_number(g.max_relative_error)
              << " checked " << g.checked << (g.passed() ? " ok" : " FAIL") << '\n';
    if (!g.passed()) {
      ok = false;
      for (const auto& name : g.offending) std::cout << "  offending " << name << '\n';
      if (g.checked == 0) std::cout << "  no entries above the finite-difference floor\n";
    }
  }
  return ok ? kOk : kRuntimeFailure;
}

int cmd_report(const Options& opt) {
  const std::string dir = !opt.run_dir.empty() ? opt.run_dir : opt.out;
  if (dir.empty()) {
    std::cerr << "report: give the run directory (positional or --out)\n";
    return kUsageError;
  }
  const auto files = hashcl::write_report(dir);
  for (const auto& f : files.written) std::cout << "wrote " << f.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with history-aware prompt mixtures of experts"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON config (schema 1)")->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (overrides out_dir)");
    sub->add_option("--seeds", opt.seeds, "comma-separated seed list (overrides the config)");
    sub->add_option("--jobs", opt.jobs, "parallel seed runs")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "train and evaluate every seed");
  add_common(run);
  auto* ablate = app.add_subcommand("ablate", "sweep one axis of the configuration");
  add_common(ablate);
  ablate->add_option("--axis", opt.axis, "components, n_experts, prompt_length, psi_variant, "
                                         "gamma_variant, delta or alpha")
      ->required();
  ablate->add_option("--values", opt.values, "comma-separated grid replacing the default");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck);
  auto* report = app.add_subcommand("report", "plot-ready tables and SVGs for a run directory");
  report->add_option("run_dir", opt.run_dir, "run or ablation directory");
  report->add_option("--out", opt.out, "run or ablation directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*run) return cmd_run(opt);
    if (*ablate) return cmd_ablate(opt);
    if (*gradcheck) return cmd_gradcheck(opt);
    if (*report) return cmd_report(opt);
  } catch (const hashcl::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}
