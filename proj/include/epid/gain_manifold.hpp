#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "epid/types.hpp"

namespace epid {

// Eigenvalue parameters (λ₀, …, λ_n) of the gain manifold. Entries are
// strictly positive and pairwise distinct (relative tolerance 1e-9).
class LambdaVector {
 public:
  explicit LambdaVector(std::vector<double> values);

  [[nodiscard]] int order() const noexcept { return static_cast<int>(values_.size()) - 1; }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return values_[i]; }
  [[nodiscard]] double back() const { return values_.back(); }
  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] double product() const;

 private:
  std::vector<double> values_;
};

// Extended PID gains (k₀, …, k_n): k₀ integral, k₁ error, k_{i+1} the i-th
// error derivative. b_low records the b̲ used in the λ → k map.
class GainVector {
 public:
  GainVector(std::vector<double> k, double b_low);

  [[nodiscard]] int order() const noexcept { return static_cast<int>(k_.size()) - 1; }
  [[nodiscard]] std::size_t size() const noexcept { return k_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return k_[i]; }
  [[nodiscard]] std::span<const double> values() const noexcept { return k_; }
  [[nodiscard]] double b_low() const noexcept { return b_low_; }

 private:
  std::vector<double> k_;
  double b_low_;
};

using ScalarFn = std::function<double(double)>;

struct UncertaintyBounds {
  double L = 0.0;       // effective Lipschitz constant for the λ_n threshold
  double b_low = 1.0;   // b̲
  double b_high = 1.0;  // b̄
  ScalarFn tau1;        // optional, nondecreasing
  ScalarFn tau2;        // optional, nondecreasing, limsup τ₂(ρ)/ρ finite at 0
  std::optional<double> M;

  // Throws Error(invalid_bounds) unless 0 < b̲ ≤ b̄, L ≥ 0 and the τ
  // functions (when present) are nondecreasing on a probe grid.
  void validate() const;
  [[nodiscard]] bool has_tau() const noexcept { return static_cast<bool>(tau1) && static_cast<bool>(tau2); }
};

struct ManifoldConstants {
  Mat P;
  Vec d;
  double c0_upper = 0.0;
  double det_lower = 0.0;
};

// Per-constant breakdown of the certified c₀ bound for one order n.
struct C0Breakdown {
  int n = 0;
  double c1 = 0.0;  // sup ‖P‖
  double c2 = 0.0;  // sup ‖P‖‖P⁻¹‖
  double c3 = 0.0;  // sup √n(2n+1)d_n
  double c4 = 0.0;  // sup_i |(2n+1) n λ_n d_i|
  double lambda_cutoff = 0.0;
  double safety = 0.0;
  double bound = 0.0;
};

[[nodiscard]] bool in_omega1(const LambdaVector& lam);
[[nodiscard]] Mat build_P(const LambdaVector& lam);
[[nodiscard]] Vec compute_d(const LambdaVector& lam);
[[nodiscard]] ManifoldConstants manifold_constants(const LambdaVector& lam);

[[nodiscard]] double c0_upper_bound(int n);
[[nodiscard]] C0Breakdown c0_breakdown(int n);

// Certified lower bound on |det P| over Ω₁, from the identity
// (Πλ)ⁿ det P = Π_{i<j}(λᵢ − λ_j).
[[nodiscard]] double det_lower_bound(int n);

[[nodiscard]] GainVector lambda_to_gains(const LambdaVector& lam, double b_low);

// Inverse map via the companion eigenvalues; throws degenerate_lambda when
// the roots are not real, negative and distinct.
[[nodiscard]] LambdaVector gains_to_lambda(const GainVector& gains);

// m = Lc² + (b̄ − b̲)c/b̲, the off-diagonal of the Lyapunov quadratic form.
[[nodiscard]] double coupling_m(const UncertaintyBounds& bounds, double c);
[[nodiscard]] double omega_lambda_threshold(const UncertaintyBounds& bounds, int n, double c);
[[nodiscard]] bool in_omega(const LambdaVector& lam, const UncertaintyBounds& bounds, double c);

struct OmegaSample {
  LambdaVector lambda;
  GainVector gains;
};

[[nodiscard]] std::vector<OmegaSample> sample_omega(int n, const UncertaintyBounds& bounds, double c,
                                                    std::uint64_t seed, std::size_t count,
                                                    double upper_factor = 10.0);

[[nodiscard]] double compute_alpha(const LambdaVector& lam, const UncertaintyBounds& bounds, double c);

struct SemiGlobalBounds {
  double R0 = 0.0;
  double L0 = 0.0;
  double b0 = 0.0;
  double limsup_at_zero = 0.0;
};

[[nodiscard]] SemiGlobalBounds semiglobal_bounds(double R, double y_star, const UncertaintyBounds& bounds,
                                                 double c);

}  // namespace epid
