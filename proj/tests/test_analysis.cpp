#include <doctest.h>

#include <cmath>
#include <string>

#include <unsupported/Eigen/MatrixFunctions>

#include "epid/analysis.hpp"
#include "epid/error.hpp"

using namespace epid;

namespace {

PlantModel double_integrator(int n = 2) {
  PresetParams p;
  p.n = n;
  p.a_sin = 0.0;
  p.a_cos = 0.0;
  p.b_mean = 1.0;
  p.b_amp = 0.0;
  return make_preset(p);
}

PlantModel preset(PresetKind kind) {
  PresetParams p;
  p.kind = kind;
  return make_preset(p);
}

Trace linear_trace(const GainVector& k, double y_star, double t_end, int samples) {
  const PlantModel plant = double_integrator();
  const VectorField field =
      assemble_closed_loop(plant, ControllerState{k, ControllerMode::state_derivative_feedback, 0.0}, y_star);
  Vec x0(2);
  x0 << -0.5, 2.0;
  IntegratorPolicy pol;
  pol.samples = samples;
  return integrate(field, initial_augmented_state(plant, y_star, x0), t_end, pol);
}

Trace synthetic(double t_end, int m, double (*f)(double)) {
  Trace tr;
  for (int i = 0; i < m; ++i) {
    const double t = t_end * i / (m - 1);
    tr.t.push_back(t);
    tr.e.push_back(f(t));
  }
  return tr;
}

}  // namespace

TEST_CASE("fit_rate on synthetic signals") {
  const Trace a = synthetic(10.0, 1000, [](double t) { return std::exp(-2.0 * t); });
  REQUIRE(fit_rate(a).has_value());
  CHECK(*fit_rate(a) == doctest::Approx(2.0).epsilon(5e-4));

  const Trace b = synthetic(20.0, 2000, [](double t) { return std::exp(-t) * (1.0 + 0.5 * std::sin(10.0 * t)); });
  REQUIRE(fit_rate(b).has_value());
  CHECK(std::abs(*fit_rate(b) - 1.0) <= 0.05);

  CHECK_FALSE(fit_rate(synthetic(10.0, 100, [](double) { return 0.0; })).has_value());
  CHECK_FALSE(fit_rate(synthetic(10.0, 100, [](double t) { return 1.0 + t; })).has_value());
  CHECK_FALSE(fit_rate(synthetic(100.0, 2000, [](double t) { return std::sin(t); })).has_value());

  Trace esc = a;
  esc.escape.detected = true;
  CHECK_FALSE(fit_rate(esc).has_value());
}

TEST_CASE("fit_rate on the counterexample escape trace is unavailable") {
  PresetParams p;
  p.kind = PresetKind::escape_counterexample;
  const PlantModel plant = make_preset(p);
  const VectorField field = assemble_closed_loop(
      plant, ControllerState{GainVector({1.0, 1.0, 0.0}, 1.0), ControllerMode::state_derivative_feedback, 0.0}, 0.0);
  const Trace tr = integrate(field, initial_augmented_state(plant, 0.0, Vec::Zero(2)), 1.0, IntegratorPolicy{});
  REQUIRE(tr.escape.detected);
  CHECK_FALSE(fit_rate(tr).has_value());
}

TEST_CASE("w coordinates") {
  const PlantModel plant = double_integrator(1);
  const LambdaVector lam({2.5, 5.0});
  const GainVector k = lambda_to_gains(lam, 1.0);
  Trace tr;
  tr.t = {0.0, 1.0};
  Vec s(2);
  s << 0.0, 1.0;  // y* = 0 so e = −1 and Ȳ = (0, 1)
  tr.states = {s, Vec::Zero(2)};
  tr.e = {-1.0, 0.0};
  const WCoordinates w = to_w_coordinates(tr, lam, k, plant, 0.0);
  CHECK(w.w[0](0) == doctest::Approx(-1.0));
  CHECK(w.w[0](1) == doctest::Approx(2.0));
  CHECK(w.w[1].norm() == 0.0);
  CHECK(w.max_residual <= 1e-15);

  // Nonlinear plant at its equilibrium: Ȳ = 0 once x₀ carries the shift.
  const PlantModel nf = preset(PresetKind::normal_form);
  const LambdaVector lam2({2.5, 4.5, 7.0});
  const GainVector k2 = lambda_to_gains(lam2, 1.1);
  const Vec xs = nf.equilibrium(1.0);
  const FG h = nf.fg(xs);
  Trace eq;
  eq.t = {0.0};
  Vec se(3);
  se << -h.F / (k2[0] * h.G), xs;
  eq.states = {se};
  eq.e = {0.0};
  CHECK(to_w_coordinates(eq, lam2, k2, nf, 1.0).w[0].norm() <= 1e-15);

  PlantCallbacks cb;
  cb.drift = [](ConstVecRef x, VecRef out) { out = -x; };
  cb.input = [](ConstVecRef, VecRef out) { out.setOnes(); };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [](ConstVecRef x, VecRef z) { z = x; };
  cb.fg = [](ConstVecRef x) { return FG{-x(0), 1.0}; };
  const PlantModel opaque("opaque", 1, cb);
  try {
    (void)to_w_coordinates(tr, lam, k, opaque, 0.0);
    FAIL("expected unsupported");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::unsupported);
  }
}

TEST_CASE("Lyapunov function on the linear fixture matches the matrix exponential") {
  const LambdaVector lam({2.5, 4.5, 7.0});
  const GainVector k = lambda_to_gains(lam, 1.0);
  const double y_star = 1.0;
  const Trace tr = linear_trace(k, y_star, 10.0, 1000);
  const WCoordinates w = to_w_coordinates(tr, lam, k, double_integrator(), y_star);
  CHECK(w.max_residual <= 1e-9);

  // Oracle: in w̄ coordinates the linear loop is diagonal, w̄(t) = exp(−Λt)w̄(0),
  // so V(t) = ½ Σ wⱼ(0)² e^{−2λⱼt}. The same V from the full closed-loop
  // matrix exponential (no diagonalisation) must agree.
  Mat E = Mat::Zero(4, 4);
  E(0, 1) = -1.0;
  E(0, 3) = y_star;
  E(1, 2) = 1.0;
  E(2, 0) = k[0];
  E(2, 1) = -k[1];
  E(2, 2) = -k[2];
  E(2, 3) = k[1] * y_star;
  const Mat Pinv = build_P(lam).inverse();
  Vec a(4);
  a << tr.states[0], 1.0;
  double worst = 0.0, worst_diag = 0.0;
  for (std::size_t i = 0; i < tr.size(); i += 9) {
    const Vec s = ((E * tr.t[i]).exp() * a).head(3);
    Vec Y(3);
    Y << -s(0), s(1) - y_star, s(2);  // F ≡ 0 so no shift
    const double V_ref = 0.5 * (Pinv * Y).squaredNorm();
    double V_diag = 0.0;
    for (int j = 0; j < 3; ++j) V_diag += 0.5 * std::pow(w.w[0](j), 2) * std::exp(-2.0 * lam[static_cast<std::size_t>(j)] * tr.t[i]);
    const double V = 0.5 * w.w[i].squaredNorm();
    worst = std::max(worst, std::abs(V - V_ref));
    worst_diag = std::max(worst_diag, std::abs(V - V_diag));
  }
  CHECK(worst <= 1e-6);
  CHECK(worst_diag <= 1e-6);

  const LyapunovReport ok = lyapunov_check(w, 1.0);
  CHECK(ok.ok);
  CHECK(ok.worst_margin <= 0.0);
  // The slowest mode decays at λ₀, so any α ≤ λ₀ certifies decrease and
  // α = 2λ₀ must be caught.
  CHECK(lyapunov_check(w, 2.0).ok);
  const LyapunovReport bad = lyapunov_check(w, 2.0 * lam[0]);
  CHECK_FALSE(bad.ok);
  CHECK(bad.violations > 0);

  WCoordinates few = w;
  few.w.resize(150);
  few.t.resize(150);
  CHECK_THROWS_AS((void)lyapunov_check(few, 1.0), Error);

  WCoordinates zero = w;
  for (Vec& v : zero.w) v.setZero();
  CHECK(lyapunov_check(zero, 1.0).ok);
}

TEST_CASE("error bound") {
  const LambdaVector lam({2.5, 4.5, 7.0});
  const GainVector k = lambda_to_gains(lam, 1.0);
  const PlantModel plant = double_integrator();
  const UncertaintyBounds b = derived_bounds(plant, 1.0);
  const Trace tr = linear_trace(k, 1.0, 10.0, 500);
  const double c = c0_upper_bound(2);
  const BoundReport r = check_error_bound(tr, c, 1.0, plant, k, b, 1.0);
  CHECK(r.ok);
  CHECK(r.worst_ratio < 1.0);
  CHECK(r.initial_bound >= std::abs(tr.e[0]));

  Trace zero = tr;
  std::fill(zero.e.begin(), zero.e.end(), 0.0);
  CHECK(check_error_bound(zero, c, 1.0, plant, k, b, 1.0).ok);

  // A bound with c < 1 cannot cover |e(0)| = ‖Φ(x(0)) − z*‖ for this start.
  CHECK_FALSE(check_error_bound(tr, 0.1, 1.0, plant, k, b, 1.0).ok);
}

TEST_CASE("assumption grid checks") {
  const PlantModel strict = preset(PresetKind::strict_feedback2);
  const GridReport s = assumption_grid_check(strict, derived_bounds(strict, 0.0), 0.0);
  CHECK(s.ok);
  CHECK(s.points == 10000);
  CHECK(s.max_lipschitz_ratio <= 2.8284271247461903);
  CHECK(s.min_G == 1.0);
  CHECK(s.max_G == 1.0);

  const PlantModel ce = preset(PresetKind::escape_counterexample);
  const GridReport c = assumption_grid_check(ce, derived_bounds(ce, 0.0), 0.0);
  CHECK(c.ok);
  CHECK(c.max_lipschitz_ratio == 0.0);
  CHECK(c.min_G == 1.0);

  for (PresetKind kind : {PresetKind::normal_form, PresetKind::pure_feedback2}) {
    CAPTURE(preset_name(kind));
    const PlantModel plant = preset(kind);
    const GridReport r = assumption_grid_check(plant, derived_bounds(plant, 1.0), 1.0);
    CHECK(r.ok);
    for (const std::string& f : r.failures) MESSAGE(f);
  }

  const PlantModel nf = preset(PresetKind::normal_form);
  UncertaintyBounds tight = derived_bounds(nf, 1.0);
  tight.b_low = 1.5;
  const GridReport t = assumption_grid_check(nf, tight, 1.0);
  CHECK_FALSE(t.ok);
  REQUIRE_FALSE(t.failures.empty());
  CHECK(t.failures.front().find("b_low") != std::string::npos);
}

TEST_CASE("omega monotonicity") {
  const double c = c0_upper_bound(2);
  const UncertaintyBounds strong{.L = 1.0, .b_low = 1.0, .b_high = 2.0};
  const UncertaintyBounds weak{.L = 0.5, .b_low = 1.0, .b_high = 1.0};
  CHECK(omega_monotonicity_check(strong, strong, 2, c, 100).contained);
  const MonotonicityReport m = omega_monotonicity_check(strong, weak, 2, c, 1000, 7);
  CHECK(m.contained);
  CHECK(m.checked == 1000);
  CHECK_FALSE(m.witness.has_value());

  const MonotonicityReport rev = omega_monotonicity_check(weak, strong, 2, c, 1000, 7);
  CHECK_FALSE(rev.contained);
  REQUIRE(rev.witness.has_value());
  CHECK(in_omega(*rev.witness, weak, c));
  CHECK_FALSE(in_omega(*rev.witness, strong, c));

  const UncertaintyBounds other{.L = 0.5, .b_low = 2.0, .b_high = 2.0};
  CHECK_THROWS_AS((void)omega_monotonicity_check(strong, other, 2, c, 10), Error);
}

TEST_CASE("characteristic polynomial residuals") {
  const LambdaVector l1({2.5, 5.0});
  const CharpolyReport a = charpoly_residuals(lambda_to_gains(l1, 1.0), 1.0, l1);
  CHECK(a.max_residual <= 1e-15);
  CHECK(a.ok);

  const LambdaVector l2({2.5, 4.5, 7.0});
  const GainVector k2 = lambda_to_gains(l2, 2.0);
  const CharpolyReport b = charpoly_residuals(k2, 2.0, l2);
  CHECK(b.max_residual <= 1e-10);
  CHECK(b.eigenvector_residual <= 1e-8);

  const GainVector k1 = lambda_to_gains(l2, 1.0);
  std::vector<double> halved(k1.values().begin(), k1.values().end());
  for (double& v : halved) v *= 0.5;
  const CharpolyReport h = charpoly_residuals(GainVector(halved, 2.0), 2.0, l2);
  CHECK(h.max_residual == doctest::Approx(charpoly_residuals(k1, 1.0, l2).max_residual).epsilon(1e-6));
  CHECK(h.max_residual <= 1e-10);

  // Gains for a different λ leave a visible residual.
  const CharpolyReport off = charpoly_residuals(lambda_to_gains(LambdaVector({2.5, 4.5, 8.0}), 1.0), 1.0, l2);
  CHECK(off.max_residual > 1e-3);
  CHECK_FALSE(off.ok);
}

TEST_CASE("report formatting") {
  const std::vector<CheckRecord> recs{{"lyapunov", true, -0.5, {{"alpha", 0.25}}, ""},
                                      {"bound", false, 1.5, {}, "2 violations"}};
  const std::string s = format_report(recs);
  CHECK(s == "lyapunov: pass worst_margin=-0.5 alpha=0.25\nbound: FAIL worst_margin=1.5 (2 violations)\n");
}
