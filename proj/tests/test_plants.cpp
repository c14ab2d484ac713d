#include <doctest.h>

#include <cmath>
#include <numbers>

#include "epid/error.hpp"
#include "epid/plants.hpp"
#include "epid/random.hpp"

using namespace epid;

namespace {

PresetParams preset(PresetKind kind) {
  PresetParams p;
  p.kind = kind;
  return p;
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// Oracle: ż = J_Φ(x)·ẋ by central differences of Φ along ẋ = f + g·u, which
// must reproduce the chain (z₂, …, z_n, F + G·u).
Vec z_rate_fd(const PlantModel& plant, const Vec& x, double u) {
  Vec xdot(plant.order());
  plant.dynamics(x, u, xdot);
  const double h = 1e-6 / std::max(1.0, xdot.norm());
  return (plant.phi(x + h * xdot) - plant.phi(x - h * xdot)) / (2.0 * h);
}

}  // namespace

TEST_CASE("normal form fixture values") {
  const PlantModel plant = make_preset(preset(PresetKind::normal_form));
  CHECK(plant.order() == 2);
  const FG h = plant.fg(Vec::Zero(2));
  CHECK(h.F == doctest::Approx(0.3));
  CHECK(h.G == doctest::Approx(1.5));
  const Vec x = vec2(0.7, -1.2);
  CHECK((plant.phi(x) - x).norm() == 0.0);

  const PlantEvaluation ev = eval_plant(plant, Vec::Zero(2), 0.0);
  CHECK(ev.xdot(0) == 0.0);
  CHECK(ev.xdot(1) == doctest::Approx(0.3));
}

TEST_CASE("normal form chain structure for n = 1..4") {
  Rng rng(3);
  for (int n = 1; n <= 4; ++n) {
    PresetParams p = preset(PresetKind::normal_form);
    p.n = n;
    const PlantModel plant = make_preset(p);
    for (int s = 0; s < 50; ++s) {
      Vec x(n);
      for (int i = 0; i < n; ++i) x(i) = rng.uniform(-5.0, 5.0);
      const double u = rng.uniform(-3.0, 3.0);
      const PlantEvaluation ev = eval_plant(plant, x, u);
      for (int i = 0; i + 1 < n; ++i) CHECK(ev.xdot(i) == x(i + 1));
      CHECK(ev.xdot(n - 1) == doctest::Approx(ev.F + ev.G * u).epsilon(1e-14));
      CHECK(ev.z(0) == ev.y);
      CHECK(ev.G >= 1.1 - 1e-15);
      CHECK(ev.G <= 1.9 + 1e-15);
    }
  }
}

TEST_CASE("strict feedback fixture values") {
  const PlantModel plant = make_preset(preset(PresetKind::strict_feedback2));
  const Vec z = plant.phi(Vec::Zero(2));
  CHECK(z.norm() == 0.0);
  const FG h = plant.fg(Vec::Zero(2));
  CHECK(h.F == doctest::Approx(0.5));
  CHECK(h.G == 1.0);
}

TEST_CASE("counterexample fixture values") {
  const PlantModel plant = make_preset(preset(PresetKind::escape_counterexample));
  const FG h = plant.fg(vec2(3.0, -7.0));
  CHECK(h.F == 1.0);
  CHECK(h.G == 1.0);
  CHECK(plant.phi(Vec::Zero(2)).norm() == 0.0);
}

TEST_CASE("closed-form F and G match finite differences of Phi along the flow") {
  Rng rng(17);
  for (PresetKind k : {PresetKind::normal_form, PresetKind::strict_feedback2, PresetKind::pure_feedback2,
                       PresetKind::escape_counterexample}) {
    CAPTURE(preset_name(k));
    const PlantModel plant = make_preset(preset(k));
    for (int s = 0; s < 100; ++s) {
      const Vec x = vec2(rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0));
      const double u = rng.uniform(-2.0, 2.0);
      const Vec zdot = z_rate_fd(plant, x, u);
      const Vec z = plant.phi(x);
      const FG h = plant.fg(x);
      const double scale = 1.0 + std::abs(h.F) + std::abs(h.G * u);
      CHECK(std::abs(zdot(0) - z(1)) <= 1e-6 * (1.0 + std::abs(z(1))));
      CHECK(std::abs(zdot(1) - (h.F + h.G * u)) <= 1e-6 * scale);
      CHECK(z(0) == plant.output(x));
    }
  }
}

TEST_CASE("strict feedback: finite-difference L_f h along the trajectory matches z2 to first order") {
  const PlantModel plant = make_preset(preset(PresetKind::strict_feedback2));
  const Vec x0 = vec2(0.8, -0.3);
  auto flow = [&](double T) {
    // Open-loop trajectory by many small RK4 steps, accurate far below O(T).
    Vec x = x0, k1(2), k2(2), k3(2), k4(2);
    const int steps = 200;
    const double dt = T / steps;
    for (int i = 0; i < steps; ++i) {
      plant.drift(x, k1);
      plant.drift(x + 0.5 * dt * k1, k2);
      plant.drift(x + 0.5 * dt * k2, k3);
      plant.drift(x + dt * k3, k4);
      x += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return x;
  };
  const double z2 = plant.phi(x0)(1);
  double prev_err = 0.0;
  for (double h : {1e-2, 1e-3, 1e-4}) {
    const double fd = (plant.output(flow(h)) - plant.output(x0)) / h;
    const double err = std::abs(fd - z2);
    CHECK(err <= h * (1.0 + std::abs(plant.fg(x0).F)));
    if (prev_err > 0.0) CHECK(err == doctest::Approx(prev_err / 10.0).epsilon(0.05));
    prev_err = err;
  }
}

TEST_CASE("strict feedback Jacobian of Phi has unit determinant") {
  const PlantModel plant = make_preset(preset(PresetKind::strict_feedback2));
  Rng rng(4);
  for (int s = 0; s < 200; ++s) {
    const Vec x = vec2(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0));
    const double h = 1e-6;
    Mat J(2, 2);
    for (int j = 0; j < 2; ++j) {
      Vec dx = Vec::Zero(2);
      dx(j) = h;
      J.col(j) = (plant.phi(x + dx) - plant.phi(x - dx)) / (2.0 * h);
    }
    CHECK(J.determinant() == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("equilibria map to z* = (y*, 0)") {
  for (PresetKind k : {PresetKind::normal_form, PresetKind::strict_feedback2, PresetKind::pure_feedback2,
                       PresetKind::escape_counterexample}) {
    const PlantModel plant = make_preset(preset(k));
    for (double y : {-2.0, 0.0, 1.0, 3.7}) {
      const Vec z = plant.phi(plant.equilibrium(y));
      CHECK(z(0) == doctest::Approx(y));
      CHECK(std::abs(z(1)) <= 1e-12);
    }
  }
}

TEST_CASE("escape profile properties") {
  constexpr double e = std::numbers::e;
  for (double eta : {0.5, 1.0, 2.0}) {
    CAPTURE(eta);
    CHECK(escape_profile(0.0, eta) == 0.0);
    for (double x : {0.1, 1.0, 2.0, e, 3.0, 10.0, 1e3, 1e12}) {
      CHECK(escape_profile(-x, eta) == -escape_profile(x, eta));
      CHECK(std::abs(escape_profile(x, eta)) < 2.0);
      CHECK(escape_profile_slope(x, eta) > 0.0);
      CHECK(escape_profile_slope(-x, eta) == escape_profile_slope(x, eta));
    }
    for (double x : {e, 3.0, 10.0, 100.0}) {
      const double exact = eta / (x * std::pow(std::log(x), 1.0 + eta));
      CHECK(escape_profile_slope(x, eta) == doctest::Approx(exact).epsilon(1e-15));
      // Right-sided difference at x = e so the closed form on |x| ≥ e is what is tested.
      const double h = 1e-6 * x;
      const double fd = (-escape_profile(x + 2 * h, eta) + 4 * escape_profile(x + h, eta) - 3 * escape_profile(x, eta)) / (2 * h);
      CHECK(std::abs(fd - exact) <= 1e-6 * exact);
    }
    const double d = 1e-12;
    for (double s : {1.0, -1.0}) {
      CHECK(std::abs(escape_profile(s * (e - d), eta) - escape_profile(s * e, eta)) <= 1e-9);
      CHECK(std::abs(escape_profile_slope(s * (e - d), eta) - escape_profile_slope(s * (e + d), eta)) <= 1e-9);
    }
    CHECK(escape_profile(e, eta) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(escape_profile_slope(e, eta) == doctest::Approx(eta / e).epsilon(1e-15));
  }
}

TEST_CASE("derived bounds") {
  const PlantModel strict = make_preset(preset(PresetKind::strict_feedback2));
  const UncertaintyBounds bs = derived_bounds(strict, 0.0);
  CHECK(bs.L == doctest::Approx(2.828427124746).epsilon(1e-12));
  CHECK(bs.b_low == 1.0);
  CHECK(bs.b_high == 1.0);

  const PlantModel nf = make_preset(preset(PresetKind::normal_form));
  const UncertaintyBounds bn = derived_bounds(nf, 1.0);
  CHECK(bn.b_low == doctest::Approx(1.1));
  CHECK(bn.b_high == doctest::Approx(1.9));
  CHECK(bn.tau2(1.0) == doctest::Approx(std::sqrt(0.34 + 0.32)));
  CHECK(bn.M.value() == doctest::Approx(0.3));

  const PlantModel ce = make_preset(preset(PresetKind::escape_counterexample));
  const UncertaintyBounds bc = derived_bounds(ce, 0.0);
  CHECK(bc.tau1(3.0) == 5.0);
  CHECK(bc.tau2(3.0) == 3.0);
  CHECK(bc.b_low == 1.0);
  CHECK(bc.b_high == 1.0);

  const PlantModel pf = make_preset(preset(PresetKind::pure_feedback2));
  const UncertaintyBounds bp = derived_bounds(pf, 1.0);
  CHECK(bp.b_low == doctest::Approx(0.7 * 1.6));
  CHECK(bp.b_high == doctest::Approx(1.3 * 2.4));
  CHECK(bp.L > 0.0);
}

TEST_CASE("opaque plants and invalid parameters") {
  PlantCallbacks cb;
  cb.drift = [](ConstVecRef x, VecRef out) { out = -x; };
  cb.input = [](ConstVecRef, VecRef out) { out.setOnes(); };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [](ConstVecRef x, VecRef z) { z = x; };
  cb.fg = [](ConstVecRef x) { return FG{-x(0), 1.0}; };
  const PlantModel opaque("opaque", 1, cb);
  try {
    (void)derived_bounds(opaque, 0.0);
    FAIL("expected bounds-unknown");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::bounds_unknown);
  }
  CHECK_THROWS_AS((void)opaque.equilibrium(0.0), Error);

  PresetParams bad = preset(PresetKind::normal_form);
  bad.b_amp = 2.0;
  CHECK_THROWS_AS((void)make_preset(bad), Error);
  PresetParams bad_eps = preset(PresetKind::escape_counterexample);
  bad_eps.epsilon = 0.0;
  try {
    (void)make_preset(bad_eps);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::construction);
    CHECK(std::string(e.what()).find("epsilon") != std::string::npos);
  }

  const PlantModel nf = make_preset(preset(PresetKind::normal_form));
  Vec x = Vec::Zero(2);
  x(1) = std::nan("");
  CHECK_THROWS_AS((void)eval_plant(nf, x, 0.0), Error);
}
