#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "epid/gain_manifold.hpp"
#include "epid/types.hpp"

namespace epid {

enum class PresetKind { normal_form, strict_feedback2, pure_feedback2, escape_counterexample };

[[nodiscard]] const char* preset_name(PresetKind kind) noexcept;
[[nodiscard]] PresetKind parse_preset_kind(const std::string& name);

// Knobs for the benchmark plants. Only the fields of the chosen kind are read.
//   normal_form:  ẋᵢ = xᵢ₊₁, ẋ_n = a(x) + b(x)u with
//                 a = a_sin·sin x₁ + a_cos·cos x_n, b = b_mean + b_amp·sin(x₁ + x_n)
//   strict_feedback2: ẋ₁ = f1_amp·sin x₁ + x₂, ẋ₂ = f2_amp·cos(x₁ + x₂) + u
//   pure_feedback2:   ẋ₁ = x₂ + f1_a·sin x₁ + f1_b·sin x₂,
//                     ẋ₂ = f2_amp·cos(x₁ + x₂) + (g_mean + g_amp·sin x₁)u
//   escape_counterexample: ẋ₁ = ε f(x₂), ẋ₂ = (1 + u)/(ε f'(x₂)), f the odd
//                 profile 2 − (log x)^{−η} for x ≥ e with a cubic core.
struct PresetParams {
  PresetKind kind = PresetKind::normal_form;
  int n = 2;
  double a_sin = 0.5;
  double a_cos = 0.3;
  double b_mean = 1.5;
  double b_amp = 0.4;
  double f1_amp = 1.0;
  double f2_amp = 0.5;
  double f1_a = 0.5;
  double f1_b = 0.3;
  double g_mean = 2.0;
  double g_amp = 0.4;
  double eta = 1.0;
  double epsilon = 0.1;
};

struct FG {
  double F = 0.0;
  double G = 0.0;
};

struct PlantCallbacks {
  std::function<void(ConstVecRef x, VecRef out)> drift;  // f(x)
  std::function<void(ConstVecRef x, VecRef out)> input;  // g(x)
  std::function<double(ConstVecRef x)> output;           // h(x)
  std::function<void(ConstVecRef x, VecRef z)> phi;      // Φ(x)
  std::function<FG(ConstVecRef x)> fg;                   // (F, G)
  std::function<Vec(double y_star)> equilibrium;         // x* with Φ(x*) = (y*, 0, …); optional
};

using AssumptionStatus = std::map<std::string, std::string>;

// Immutable, cheap to copy (shared callbacks), safe to evaluate concurrently.
class PlantModel {
 public:
  PlantModel(std::string name, int n, PlantCallbacks callbacks, AssumptionStatus status = {},
             std::optional<PresetParams> preset = std::nullopt);

  [[nodiscard]] const std::string& name() const noexcept { return impl_->name; }
  [[nodiscard]] int order() const noexcept { return impl_->n; }
  [[nodiscard]] const AssumptionStatus& assumption_status() const noexcept { return impl_->status; }
  [[nodiscard]] const std::optional<PresetParams>& preset() const noexcept { return impl_->preset; }

  void dynamics(ConstVecRef x, double u, VecRef xdot) const;
  void drift(ConstVecRef x, VecRef out) const { impl_->cb.drift(x, out); }
  void input(ConstVecRef x, VecRef out) const { impl_->cb.input(x, out); }
  [[nodiscard]] double output(ConstVecRef x) const { return impl_->cb.output(x); }
  void phi(ConstVecRef x, VecRef z) const { impl_->cb.phi(x, z); }
  [[nodiscard]] Vec phi(ConstVecRef x) const;
  [[nodiscard]] FG fg(ConstVecRef x) const { return impl_->cb.fg(x); }
  [[nodiscard]] bool has_equilibrium() const noexcept { return static_cast<bool>(impl_->cb.equilibrium); }
  // Throws Error(unsupported) for plants without a known Φ⁻¹(z*).
  [[nodiscard]] Vec equilibrium(double y_star) const;

 private:
  struct Impl {
    std::string name;
    int n;
    PlantCallbacks cb;
    AssumptionStatus status;
    std::optional<PresetParams> preset;
  };
  std::shared_ptr<const Impl> impl_;
};

[[nodiscard]] PlantModel make_preset(const PresetParams& params);

struct PlantEvaluation {
  Vec xdot;
  double y = 0.0;
  Vec z;
  double F = 0.0;
  double G = 0.0;
};

[[nodiscard]] PlantEvaluation eval_plant(const PlantModel& plant, ConstVecRef x, double u);

// Certified (L, b̲, b̄, τ₁, τ₂, M) for a preset at setpoint y*. L is the
// constant with |F(x) − F(x*)G(x)/G(x*)| ≤ L‖Φ(x) − Φ(x*)‖, the quantity the
// closed-loop Lyapunov argument consumes.
[[nodiscard]] UncertaintyBounds derived_bounds(const PlantModel& plant, double y_star = 0.0);

// The odd escape profile f and its derivative.
[[nodiscard]] double escape_profile(double x, double eta);
[[nodiscard]] double escape_profile_slope(double x, double eta);

}  // namespace epid
