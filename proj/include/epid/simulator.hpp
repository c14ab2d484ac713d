#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "epid/controllers.hpp"
#include "epid/plants.hpp"
#include "epid/types.hpp"

namespace epid {

// Augmented state s = (x₀, x₁…x_n[, ẑ₁…ẑ_n]); x₀ is the running ∫e.
struct StateLayout {
  int n = 0;
  bool observer = false;

  [[nodiscard]] int dim() const noexcept { return observer ? 2 * n + 1 : n + 1; }
  [[nodiscard]] std::vector<std::string> column_names() const;
};

struct Observation {
  double y = 0.0;
  double e = 0.0;
  double u = 0.0;
};

struct VectorField {
  int dim = 0;
  std::function<void(ConstVecRef s, VecRef ds)> rhs;
  std::function<Observation(ConstVecRef s)> observe;  // optional
  // Optional ∂rhs/∂s for the implicit policy; central differences otherwise.
  std::function<void(ConstVecRef s, Eigen::Ref<Mat> J)> jacobian;
  std::vector<std::string> names;                     // one per state component
  std::optional<double> observer_epsilon;             // fastest time scale, for step warnings
  // Optional change of coordinates between the recorded state (decoded) and
  // the integrated one; identity when empty. rhs, observe and jacobian act on
  // the integrated coordinates.
  std::function<void(ConstVecRef s, VecRef out)> encode;
  std::function<void(ConstVecRef s, VecRef out)> decode;
  // Leading components seen by the escape norm test; all when zero.
  int escape_dim = 0;
};

// Closed loop ẋ₀ = y* − h(x), ẋ = f + g·u. In state-feedback mode the error
// derivatives come from Φ(x) (e^{(i)} = −z_{i+1}); in observer mode u uses ẑ,
// integrated as the scaled observer error and recorded as ẑ.
// The Jacobian is assembled from the exact controller and observer terms and
// central differences of the plant maps f + g·u, h and Φ only, so that the
// large gains and 1/εⁱ factors never enter a difference quotient.
[[nodiscard]] VectorField assemble_closed_loop(const PlantModel& plant, const ControllerState& controller, double y_star,
                                               const std::optional<ObserverConfig>& observer = std::nullopt);

// s(0) with x₀ = 0 and, in observer mode, ẑ(0) = zhat0 or (e(0), 0, …, 0).
[[nodiscard]] Vec initial_augmented_state(const PlantModel& plant, double y_star, ConstVecRef x0,
                                          const std::optional<ObserverConfig>& observer = std::nullopt);

enum class IntegratorKind { rk4, rk45, rosenbrock };

[[nodiscard]] const char* integrator_name(IntegratorKind kind) noexcept;
[[nodiscard]] IntegratorKind parse_integrator_kind(const std::string& name);

struct IntegratorPolicy {
  IntegratorKind kind = IntegratorKind::rk45;
  double dt = 1e-3;  // fixed step for rk4, initial guess otherwise
  double abs_tol = 1e-9;
  double rel_tol = 1e-9;
  int samples = 1000;
  double escape_norm = 1e8;
  double dt_min = 1e-12;
  long long max_steps = 50'000'000;
};

struct EscapeInfo {
  bool detected = false;
  std::string reason;          // "norm" | "step-collapse" | "non-finite"
  double last_accepted = 0.0;  // end of the recorded trace
  // Bracket on the blow-up time: the lower end is the last step accepted
  // below the hard limits, the upper end the first rejected step beyond it.
  // Infinite when the divergence was too slow to collapse within the horizon.
  double bracket_low = 0.0;
  double bracket_high = std::numeric_limits<double>::infinity();
};

struct Trace {
  std::vector<double> t;
  std::vector<Vec> states;
  std::vector<double> y, e, u;
  EscapeInfo escape;
  std::vector<std::string> names;
  std::vector<std::string> warnings;
  nlohmann::json meta = nlohmann::json::object();
  long long accepted_steps = 0;
  long long rejected_steps = 0;

  [[nodiscard]] std::size_t size() const noexcept { return t.size(); }
};

// Integrates on [0, t_end], recording a uniform output grid. Throws
// Error(evaluation) for a non-finite initial state.
[[nodiscard]] Trace integrate(const VectorField& field, ConstVecRef s0, double t_end, const IntegratorPolicy& policy);

// CSV with a header row and a trailing "# escape …" comment line.
void write_trace_csv(const Trace& trace, const std::string& path);
[[nodiscard]] std::string trace_csv(const Trace& trace);
[[nodiscard]] nlohmann::json trace_summary(const Trace& trace);

}  // namespace epid
