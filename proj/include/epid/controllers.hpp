#pragma once

#include <optional>
#include <span>

#include "epid/gain_manifold.hpp"
#include "epid/types.hpp"

namespace epid {

enum class ControllerMode { state_derivative_feedback, observer_based };

struct ControllerState {
  GainVector gains;
  ControllerMode mode = ControllerMode::state_derivative_feedback;
  double integral = 0.0;  // ∫₀ᵗ e(s) ds; integrated by the closed loop, not here
};

// u = k₁e + k₀∫e + Σ_{i=2..n} kᵢ vᵢ where v = (ė, …, e^{(n−1)}) or the
// observer estimates (ẑ₂, …, ẑ_n). Arity is the caller's responsibility.
[[nodiscard]] double extended_pid_law(const GainVector& k, double integral, double e, const double* v) noexcept;

// u = k₁e + k₀∫e + Σ_{i=2..n} kᵢ e^{(i−1)}; e_derivs holds ė, …, e^{(n−1)}.
[[nodiscard]] double pid_control(const ControllerState& state, double e, std::span<const double> e_derivs);

// u = k₁e + k₀∫e + Σ_{i=2..n} kᵢ ẑᵢ; ẑ₁ is not used by the law.
[[nodiscard]] double observer_pid_control(const ControllerState& state, double e, std::span<const double> zhat);

// Coefficients of (s + 1)ⁿ without the leading one.
[[nodiscard]] Vec hurwitz_beta(int n);

// Companion matrix with first column −β and ones on the superdiagonal.
[[nodiscard]] Mat observer_companion(const Vec& beta);
[[nodiscard]] bool is_hurwitz(const Mat& A);

struct ObserverConfig {
  Vec beta;
  double epsilon = 0.0;
  std::optional<Vec> zhat0;  // defaults to (e(0), 0, …, 0)

  // Throws invalid_gain for ε ≤ 0 and no_positive_definite_solution for a
  // non-Hurwitz β.
  void validate() const;
};

[[nodiscard]] Vec observer_derivative(const ObserverConfig& cfg, ConstVecRef zhat, double e);
void observer_derivative(const ObserverConfig& cfg, ConstVecRef zhat, double e, VecRef out);

// Solution of BᵀQ + QB = −I over the symmetric unknowns.
[[nodiscard]] Mat solve_lyapunov_Q(const Vec& beta);

struct ObserverCertificate {
  Mat Q;
  double lambda_max_q = 0.0;
  double lambda_min_q = 0.0;
  double alpha = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double epsilon_star = 0.0;
  double beta_rate = 0.0;  // decay rate at ε = 0.9·ε*
};

// Constants c₁, c₂ and the threshold ε* = min(1, 1/(c₂ + c₁²/(2α))). The
// bound on the observer coupling assumes ε < 1, hence the cap.
[[nodiscard]] ObserverCertificate epsilon_star(const LambdaVector& lam, const GainVector& gains,
                                               const UncertaintyBounds& bounds, double c, const Vec& beta);

[[nodiscard]] double epsilon_star_from_constants(double c1, double c2, double alpha);

// Decay rate β of V₀ = ½‖w̄‖² + ξᵀQξ at a given ε < ε*: λ_min of the 2×2
// form [[α, −c₁/2], [−c₁/2, 1/ε − c₂]] over 2·max(½, λ_max(Q)). Returns 0
// when ε is not certified.
[[nodiscard]] double observer_decay_rate(const ObserverCertificate& cert, double epsilon);

}  // namespace epid
