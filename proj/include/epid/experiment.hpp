#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "epid/analysis.hpp"
#include "epid/controllers.hpp"
#include "epid/gain_manifold.hpp"
#include "epid/plants.hpp"
#include "epid/simulator.hpp"

namespace epid {

struct GainSource {
  enum class Kind { explicit_k, lambda, sample };
  Kind kind = Kind::sample;
  std::vector<double> k;       // explicit_k
  std::vector<double> lambda;  // lambda
  std::optional<double> b_low;  // λ → k map; defaults to the bounds' b̲
  std::size_t count = 1;        // sample
  std::optional<std::uint64_t> seed;
  double upper_factor = 10.0;
};

struct ObserverSpec {
  std::optional<Vec> beta;        // defaults to (s + 1)ⁿ
  std::optional<double> epsilon;  // empty: epsilon_fraction·ε*
  double epsilon_fraction = 0.9;
  std::optional<Vec> zhat0;
};

struct InitialStates {
  std::vector<Vec> list;
  std::optional<double> radius;  // uniform in the ball ‖x‖ ≤ radius
  std::size_t count = 1;
  std::optional<std::uint64_t> seed;
};

struct BoundsOverride {
  std::optional<double> L;
  std::optional<double> b_low;
  std::optional<double> b_high;
};

struct CheckSelection {
  bool no_escape = false;
  std::optional<double> convergence;  // |e(t_end)| ≤ tol
  bool lyapunov = false;
  bool bound = false;
  bool rate = false;
  bool xi = false;
  bool grid = false;
  std::optional<double> escape_before;  // escape bracket upper end ≤ value
  bool escape_profile = false;          // f(x₂(t)) ≥ t/(2ε) on accepted samples
};

struct ExperimentConfig {
  std::string name = "experiment";
  PresetParams plant;
  double y_star = 0.0;
  ControllerMode mode = ControllerMode::state_derivative_feedback;
  GainSource gains;
  BoundsOverride bounds;
  std::optional<double> c;  // defaults to the certified c₀ bound of the order
  std::optional<ObserverSpec> observer;
  double t_end = 20.0;
  IntegratorPolicy policy;
  bool dt_min_auto = false;  // 1e-6 of the fastest time scale
  InitialStates initial;
  CheckSelection checks;
  std::uint64_t seed = 1;
  unsigned threads = 0;  // 0 selects the hardware concurrency
  nlohmann::json source = nlohmann::json::object();
};

// Throws Error(config) with the offending field path.
[[nodiscard]] ExperimentConfig parse_config(const nlohmann::json& j);
[[nodiscard]] nlohmann::json load_config_json(const std::filesystem::path& path);
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path);

// Cartesian expansion of a top-level "sweep" object mapping dotted field
// paths to value lists. Without a sweep the config itself is the only entry.
struct SweepVariant {
  std::string label;
  nlohmann::json config;
};
[[nodiscard]] std::vector<SweepVariant> expand_sweep(const nlohmann::json& j);

struct RunResult {
  std::string id;
  std::size_t gain_index = 0;
  std::size_t state_index = 0;
  Vec x0;
  Trace trace;
  std::vector<CheckRecord> checks;
  [[nodiscard]] bool passed() const;
};

struct GainSet {
  GainVector gains;
  std::optional<LambdaVector> lambda;
  nlohmann::json constants;  // α, thresholds, ε*, …
};

struct ExperimentResult {
  ExperimentConfig config;
  UncertaintyBounds bounds;
  double c = 0.0;
  std::vector<GainSet> gain_sets;
  std::vector<RunResult> runs;
  std::vector<CheckRecord> global_checks;
  [[nodiscard]] bool passed() const;
};

[[nodiscard]] UncertaintyBounds resolve_bounds(const ExperimentConfig& config, const PlantModel& plant);
[[nodiscard]] ExperimentResult run_experiment(const ExperimentConfig& config);

// Writes traces/<id>.csv, traces/<id>.summary.json, reports/<id>.txt,
// report.txt, plot.csv (series,t,value) and manifest.json. Timestamps appear
// in the manifest only.
void write_bundle(const ExperimentResult& result, const std::filesystem::path& out_dir);

[[nodiscard]] nlohmann::json gains_report(const GainVector& gains, const std::optional<LambdaVector>& lam,
                                          const UncertaintyBounds& bounds, double c);

}  // namespace epid
