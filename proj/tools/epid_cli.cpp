#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "epid/acceptance.hpp"
#include "epid/error.hpp"
#include "epid/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailure = 1;
constexpr int kConfigError = 2;

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::string level = "quick";
  std::vector<int> only;
  std::vector<double> lambda;
  double b_low = 1.0;
  double b_high = 1.0;
  double L = 0.0;
  std::optional<double> c;
};

epid::ExperimentConfig configure(const json& j, const Options& o) {
  json copy = j;
  if (o.seed) copy["seed"] = *o.seed;
  return epid::parse_config(copy);
}

int cmd_gains(const Options& o) {
  json report;
  if (!o.config.empty()) {
    const epid::ExperimentConfig cfg = configure(epid::load_config_json(o.config), o);
    const epid::ExperimentResult res = [&] {
      epid::ExperimentConfig only_gains = cfg;
      only_gains.initial.list.clear();
      only_gains.initial.radius = 0.0;
      only_gains.initial.count = 0;
      only_gains.checks = {};
      return epid::run_experiment(only_gains);
    }();
    report["c"] = res.c;
    report["gain_sets"] = json::array();
    for (const auto& gs : res.gain_sets) report["gain_sets"].push_back(gs.constants);
  } else {
    if (o.lambda.size() < 2) throw epid::Error(epid::Errc::config, "gains needs --config or --lambda");
    const epid::LambdaVector lam(o.lambda);
    epid::UncertaintyBounds b;
    b.L = o.L;
    b.b_low = o.b_low;
    b.b_high = o.b_high;
    b.validate();
    const double c = o.c.value_or(epid::c0_upper_bound(lam.order()));
    report = epid::gains_report(epid::lambda_to_gains(lam, o.b_low), lam, b, c);
  }
  const std::string text = report.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!o.out.empty() && !o.config.empty()) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "gains.json") << text;
  }
  return kOk;
}

int cmd_simulate(const Options& o) {
  const json j = epid::load_config_json(o.config);
  if (j.contains("sweep")) throw epid::Error(epid::Errc::config, "sweep is only valid for the sweep command");
  const epid::ExperimentResult res = epid::run_experiment(configure(j, o));
  epid::write_bundle(res, o.out);
  std::ifstream report(fs::path(o.out) / "report.txt");
  std::cout << report.rdbuf();
  return res.passed() ? kOk : kCheckFailure;
}

int cmd_sweep(const Options& o) {
  const auto variants = epid::expand_sweep(epid::load_config_json(o.config));
  // Parse every variant first so that a bad value fails before any run.
  for (const auto& v : variants) (void)configure(v.config, o);
  int status = kOk;
  std::ostringstream summary;
  summary << "variant,max_abs_error_final,escaped,passed\n";
  std::vector<double> finals;
  for (const auto& v : variants) {
    const epid::ExperimentResult res = epid::run_experiment(configure(v.config, o));
    epid::write_bundle(res, fs::path(o.out) / v.label);
    double worst = 0.0;
    bool escaped = false;
    for (const auto& r : res.runs) {
      worst = std::max(worst, std::abs(r.trace.e.back()));
      escaped = escaped || r.trace.escape.detected;
    }
    finals.push_back(worst);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.6g,%d,%d\n", v.label.c_str(), worst, escaped ? 1 : 0, res.passed() ? 1 : 0);
    summary << line;
    if (!res.passed()) status = kCheckFailure;
  }
  bool monotone = true;
  for (std::size_t i = 1; i < finals.size(); ++i) monotone = monotone && finals[i] <= finals[i - 1];
  summary << "# final error non-increasing across variants: " << (monotone ? "yes" : "no") << '\n';
  fs::create_directories(o.out);
  std::ofstream(fs::path(o.out) / "sweep_summary.csv") << summary.str();
  std::cout << summary.str();
  return status;
}

int cmd_verify(const Options& o) {
  const auto results = epid::run_acceptance(epid::parse_acceptance_level(o.level), o.only);
  std::fputs(epid::format_acceptance(results).c_str(), stdout);
  for (const auto& r : results)
    if (!r.passed) return kCheckFailure;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"extended PID experiments"};
  app.require_subcommand(1);
  Options o;

  auto* gains = app.add_subcommand("gains", "map lambda to gains and report thresholds, c and alpha");
  gains->add_option("--config", o.config, "experiment config");
  gains->add_option("--lambda", o.lambda, "eigenvalue parameters")->delimiter(',');
  gains->add_option("--b-low", o.b_low, "lower input gain bound");
  gains->add_option("--b-high", o.b_high, "upper input gain bound");
  gains->add_option("--L", o.L, "effective Lipschitz constant");
  gains->add_option("--c", o.c, "manifold constant (defaults to the certified bound)");
  gains->add_option("--out", o.out, "output directory");
  gains->add_option("--seed", o.seed, "seed override");

  auto* simulate = app.add_subcommand("simulate", "run a config and write traces and reports");
  simulate->add_option("--config", o.config, "experiment config")->required();
  simulate->add_option("--out", o.out, "output directory");
  simulate->add_option("--seed", o.seed, "seed override");

  auto* verify = app.add_subcommand("verify", "run the acceptance suite");
  verify->add_option("--level", o.level, "quick or full")->check(CLI::IsMember({"quick", "full"}));
  verify->add_option("--only", o.only, "criterion ids")->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "expand the sweep grid of a config and run every variant");
  sweep->add_option("--config", o.config, "experiment config")->required();
  sweep->add_option("--out", o.out, "output directory");
  sweep->add_option("--seed", o.seed, "seed override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*gains) return cmd_gains(o);
    if (*simulate) return cmd_simulate(o);
    if (*verify) return cmd_verify(o);
    if (*sweep) return cmd_sweep(o);
  } catch (const epid::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}
