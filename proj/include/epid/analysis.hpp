#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epid/controllers.hpp"
#include "epid/gain_manifold.hpp"
#include "epid/plants.hpp"
#include "epid/simulator.hpp"
#include "epid/types.hpp"

namespace epid {

// Lyapunov coordinates w̄ = P⁻¹Ȳ per trace sample, with
// Ȳ = (−x₀ − F*/(k₀G*), −e, z₂, …, z_n).
struct WCoordinates {
  std::vector<double> t;
  std::vector<Vec> Y;
  std::vector<Vec> w;
  double max_residual = 0.0;  // max of ‖P·w̄ − Ȳ‖/(1 + ‖Ȳ‖)
};

// Throws unsupported when the plant has no known equilibrium map.
[[nodiscard]] WCoordinates to_w_coordinates(const Trace& trace, const LambdaVector& lam, const GainVector& gains,
                                            const PlantModel& plant, double y_star);

struct LyapunovReport {
  bool ok = true;
  std::size_t violations = 0;
  double worst_margin = 0.0;  // max of V̇ + 2αV − tol_abs − tol_rel·V; ≤ 0 passes
  double worst_time = 0.0;
  std::size_t samples = 0;
};

// V = ½‖w̄‖², V̇ by centered differences. Needs at least 200 samples.
[[nodiscard]] LyapunovReport lyapunov_check(const WCoordinates& w, double alpha, double tol_abs = 1e-6,
                                            double tol_rel = 1e-3);

struct BoundReport {
  bool ok = true;
  std::size_t violations = 0;
  double worst_margin = 0.0;  // max of |e(t)| − bound(t)
  double worst_ratio = 0.0;   // max of |e(t)|/bound(t)
  double initial_bound = 0.0;
};

// |e(t)| ≤ c·e^{−αt}(‖Φ(x(0)) − z*‖ + τ₁(|y*|)/(k₀b̲)), checked as stated.
[[nodiscard]] BoundReport check_error_bound(const Trace& trace, double c, double alpha, const PlantModel& plant,
                                            const GainVector& gains, const UncertaintyBounds& bounds, double y_star);

// Slope of −log of the suffix-max envelope of |e| over the second half of
// the interval where the envelope stays above the noise floor. A negative
// floor selects 1e−6 of the initial envelope. nullopt marks an escaped or
// identically zero trace, and a non-decaying one: the peak over the last
// tenth of the horizon is at least half the peak over the first tenth.
[[nodiscard]] std::optional<double> fit_rate(const Trace& trace, double noise_floor = -1.0);
[[nodiscard]] std::optional<double> fit_rate(const std::vector<double>& t, const std::vector<double>& e,
                                             double noise_floor = -1.0);

struct GridReport {
  bool ok = true;
  std::size_t points = 0;
  double min_G = 0.0;
  double max_G = 0.0;
  double max_lipschitz_ratio = 0.0;  // ‖H(x) − H(x*)‖/‖Φ(x) − Φ(x*)‖, H = (F, G)
  double max_tau2_ratio = 0.0;       // ‖H(x) − H(x*)‖/τ₂(‖Φ(x) − Φ(x*)‖)
  double max_tau1_ratio = 0.0;       // ‖H(x)‖/τ₁(‖Φ(x)‖)
  double max_effective_ratio = 0.0;  // |F − (F*/G*)G|/(L‖Φ − Φ*‖)
  std::vector<std::string> failures;
};

// Evaluates the declared bounds on a uniform grid over ‖x‖∞ ≤ half_width
// with about grid_size points.
[[nodiscard]] GridReport assumption_grid_check(const PlantModel& plant, const UncertaintyBounds& bounds, double y_star,
                                               double half_width = 50.0, std::size_t grid_size = 10000);

struct MonotonicityReport {
  bool contained = true;
  std::size_t checked = 0;
  std::optional<LambdaVector> witness;  // member of Ω(first) outside Ω(second)
};

// Samples Ω(bounds_strong) and tests each member against Ω(bounds_weak).
// Throws invalid_bounds when the two b̲ differ.
[[nodiscard]] MonotonicityReport omega_monotonicity_check(const UncertaintyBounds& bounds_strong,
                                                          const UncertaintyBounds& bounds_weak, int n, double c,
                                                          std::size_t samples, std::uint64_t seed = 1);

struct CharpolyReport {
  double max_residual = 0.0;        // max |p(−λᵢ)|/(1 + λᵢ^{n+1})
  double eigenvector_residual = 0.0;  // ‖AP − P·diag(−λ)‖/(‖A‖‖P‖)
  bool ok = true;
};

[[nodiscard]] CharpolyReport charpoly_residuals(const GainVector& gains, double b_low, const LambdaVector& lam);

struct XiReport {
  bool ok = true;
  std::size_t violations = 0;
  double worst_ratio = 0.0;  // max ‖ξ(t)‖/bound(t)
  double beta = 0.0;
  double xi0 = 0.0;
  double xi_final = 0.0;
};

// Observer error ξᵢ = (yᵢ + ẑᵢ)/ε^{n−i} against
// (c‖Ȳ(0)‖ + √λ_max(Q)‖ξ(0)‖)e^{−βt}/√λ_min(Q).
[[nodiscard]] XiReport observer_xi_check(const Trace& trace, const LambdaVector& lam, const GainVector& gains,
                                         const PlantModel& plant, double y_star, const ObserverCertificate& cert,
                                         double epsilon, double c);

// One line of a structured text report.
struct CheckRecord {
  std::string name;
  bool passed = false;
  double worst_margin = 0.0;
  std::map<std::string, double> constants;
  std::string detail;
};

[[nodiscard]] std::string format_report(const std::vector<CheckRecord>& records);

}  // namespace epid
