#include "epid/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include <unsupported/Eigen/MatrixFunctions>

#include "epid/error.hpp"
#include "epid/experiment.hpp"
#include "epid/random.hpp"

namespace epid {

using nlohmann::json;

namespace {

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << "FAILED " << what << "; ";
    }
  }
};

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// λ ∈ Ω₁ with λ_n log-uniform on (2n + 2, lambda_n_max).
LambdaVector random_omega1(Rng& rng, int n, double lambda_n_max = 1e4) {
  std::vector<double> v(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = rng.uniform(2.0 * i + 2.0, 2.0 * i + 3.0);
  const double lo = 2.0 * n + 2.0;
  v.back() = lo * std::exp(rng.uniform() * std::log(lambda_n_max / lo));
  return LambdaVector(v);
}

// Size of |p(−λᵢ)|/(1 + λᵢ^{n+1}) caused by storing k in double alone:
// u·Σ|b̲kⱼ|λᵢʲ/(1 + λᵢ^{n+1}), maximised over the roots.
double charpoly_rounding_floor(const GainVector& k, const LambdaVector& lam) {
  const int n = lam.order();
  double worst = 0.0;
  for (std::size_t i = 0; i < lam.size(); ++i) {
    double sum = std::pow(lam[i], n + 1);
    for (int j = 0; j <= n; ++j) sum += std::abs(k.b_low() * k[static_cast<std::size_t>(j)]) * std::pow(lam[i], j);
    worst = std::max(worst, std::numeric_limits<double>::epsilon() * sum / (1.0 + std::pow(lam[i], n + 1)));
  }
  return worst;
}

json ball(double radius, std::size_t count, std::uint64_t seed) {
  return {{"radius", radius}, {"count", count}, {"seed", seed}};
}

json stiff_policy() { return {{"kind", "rosenbrock"}, {"samples", 1000}, {"dt_min", "auto"}}; }

// Aggregates the run checks of an experiment: every record must pass.
void require_runs(Outcome& out, const ExperimentResult& res, const std::string& tag) {
  std::size_t failed = 0;
  std::map<std::string, double> worst;
  for (const auto& run : res.runs) {
    for (const auto& c : run.checks) {
      auto [it, fresh] = worst.emplace(c.name, c.worst_margin);
      if (!fresh) it->second = std::max(it->second, c.worst_margin);
      if (!c.passed) {
        ++failed;
        if (failed <= 3) out.detail << tag << ' ' << run.id << ' ' << c.name << " failed (" << c.detail << "); ";
      }
    }
  }
  for (const auto& c : res.global_checks)
    if (!c.passed) {
      ++failed;
      out.detail << tag << ' ' << c.name << " failed (" << c.detail << "); ";
    }
  out.require(failed == 0, tag + ": " + std::to_string(failed) + " check failures");
  out.detail << tag << ": " << res.runs.size() << " runs";
  for (const auto& [name, m] : worst) out.detail << ' ' << name << "_margin=" << g6(m);
  out.detail << "; ";
}

void manifold_algebra(Outcome& out, std::size_t samples) {
  double sum_err = 0.0, d_err = 0.0, cp = 0.0, det_err = 0.0;
  bool dn_ok = true;
  for (int n = 1; n <= 4; ++n) {
    Rng rng(1000 + static_cast<std::uint64_t>(n));
    for (std::size_t s = 0; s < samples; ++s) {
      const LambdaVector lam = random_omega1(rng, n);
      const Vec d = compute_d(lam);
      const Mat P = build_P(lam);
      Vec en = Vec::Zero(n + 1);
      en(n) = 1.0;
      const Vec ds = P.fullPivLu().solve(en);
      sum_err = std::max(sum_err, std::abs(d.sum() - 1.0));
      d_err = std::max(d_err, (d - ds).cwiseAbs().maxCoeff() / ds.cwiseAbs().maxCoeff());
      dn_ok = dn_ok && d(n) > 0.0 && d(n) < std::pow(2.0 * n + 2.0, n);
      cp = std::max(cp, charpoly_residuals(lambda_to_gains(lam, 1.0), 1.0, lam).max_residual);
      const double lhs = std::pow(lam.product(), n) * P.determinant();
      double rhs = 1.0;
      for (int i = 0; i <= n; ++i)
        for (int j = i + 1; j <= n; ++j) rhs *= lam[static_cast<std::size_t>(i)] - lam[static_cast<std::size_t>(j)];
      det_err = std::max(det_err, std::abs(lhs - rhs) / std::abs(rhs));
    }
  }
  out.require(sum_err <= 1e-9, "sum of d");
  out.require(dn_ok, "0 < d_n < (2n+2)^n");
  out.require(d_err <= 1e-10, "closed-form d vs solve");
  out.require(cp <= 1e-9, "charpoly residual");
  out.detail << "samples/n=" << samples << " lambda_n<=1e4 max|sum d-1|=" << g6(sum_err) << " d_rel=" << g6(d_err)
             << " charpoly=" << g6(cp) << " det_rel=" << g6(det_err) << "; ";

  // Informational: wider λ_n window, where the charpoly residual is bounded
  // below by the rounding of k itself.
  double wide = 0.0, floor = 0.0;
  for (int n = 1; n <= 4; ++n) {
    Rng rng(2000 + static_cast<std::uint64_t>(n));
    for (std::size_t s = 0; s < samples; ++s) {
      const LambdaVector lam = random_omega1(rng, n, 1e6);
      const GainVector k = lambda_to_gains(lam, 1.0);
      wide = std::max(wide, charpoly_residuals(k, 1.0, lam).max_residual);
      floor = std::max(floor, charpoly_rounding_floor(k, lam));
    }
  }
  out.detail << "lambda_n<=1e6 (not gated): charpoly=" << g6(wide) << " rounding_floor=" << g6(floor);
}

void determinant_identity(Outcome& out, std::size_t samples) {
  double worst = 0.0;
  for (int n = 1; n <= 4; ++n) {
    Rng rng(1000 + static_cast<std::uint64_t>(n));
    for (std::size_t s = 0; s < samples; ++s) {
      const LambdaVector lam = random_omega1(rng, n);
      const double lhs = std::pow(lam.product(), n) * build_P(lam).determinant();
      double rhs = 1.0;
      for (int i = 0; i <= n; ++i)
        for (int j = i + 1; j <= n; ++j) rhs *= lam[static_cast<std::size_t>(i)] - lam[static_cast<std::size_t>(j)];
      worst = std::max(worst, std::abs(lhs - rhs) / std::abs(rhs));
    }
  }
  out.require(worst <= 1e-9, "determinant identity");
  out.detail << "samples/n=" << samples << " max_rel=" << g6(worst);
}

void linear_sanity(Outcome& out) {
  PresetParams p;
  p.a_sin = p.a_cos = p.b_amp = 0.0;
  p.b_mean = 1.0;
  const PlantModel plant = make_preset(p);
  const GainVector k = lambda_to_gains(LambdaVector({2.5, 4.5, 7.0}), 1.0);
  const double y_star = 1.0;
  Vec x0(2);
  x0 << 0.0, 0.0;
  IntegratorPolicy pol;
  pol.samples = 101;
  const Trace tr = integrate(assemble_closed_loop(plant, ControllerState{k, ControllerMode::state_derivative_feedback, 0.0}, y_star),
                             initial_augmented_state(plant, y_star, x0), 5.0, pol);
  // [x₀, x₁, x₂, 1]' = E [x₀, x₁, x₂, 1] for the linear closed loop.
  Mat E = Mat::Zero(4, 4);
  E(0, 1) = -1.0;
  E(0, 3) = y_star;
  E(1, 2) = 1.0;
  E(2, 0) = k[0];
  E(2, 1) = -k[1];
  E(2, 2) = -k[2];
  E(2, 3) = k[1] * y_star;
  Vec a = Vec::Zero(4);
  a(3) = 1.0;
  double worst = 0.0;
  for (std::size_t i = 1; i < tr.size(); ++i) {
    const Vec s = (E * tr.t[i]).exp() * a;
    worst = std::max(worst, std::abs(tr.e[i] - (y_star - s(1))));
  }
  out.require(tr.size() == 101 && !tr.escape.detected, "trace shape");
  out.require(worst <= 1e-6, "e(t) vs matrix exponential");
  out.detail << "checkpoints=" << tr.size() - 1 << " max|e-e_exact|=" << g6(worst);
}

json example1(int n, std::size_t states) {
  return {{"name", "example1_n" + std::to_string(n)},
          {"plant", {{"preset", "normal_form"}, {"n", n}}},
          {"setpoint", 1.0},
          {"gains", {{"sample", {{"count", 1}, {"seed", 11}}}}},
          {"horizon", 20.0},
          {"integrator", stiff_policy()},
          {"initial_states", ball(10.0, states, 21)},
          {"checks", {{"no_escape", true}, {"bound", true}, {"lyapunov", true}}}};
}

void theorem_example1(Outcome& out, std::size_t states) {
  for (int n : {2, 3}) {
    const ExperimentResult res = run_experiment(parse_config(example1(n, states)));
    require_runs(out, res, "n=" + std::to_string(n));
    const GainSet& gs = res.gain_sets.at(0);
    out.detail << "lambda_n=" << g6(gs.lambda->back()) << " alpha=" << g6(gs.constants.at("alpha").get<double>())
               << "; ";
    double resid = 0.0;
    for (const auto& run : res.runs)
      for (const auto& c : run.checks)
        if (c.name == "lyapunov_decrease") resid = std::max(resid, c.constants.at("reconstruction_residual"));
    out.require(resid <= 1e-9, "w reconstruction residual");

    // Sensitivity guard: a decay rate twice the slowest closed-loop mode
    // must be rejected by the same Lyapunov check on the same trace.
    if (n == 2) {
      const PlantModel plant = make_preset(res.config.plant);
      const WCoordinates w = to_w_coordinates(res.runs.at(0).trace, *gs.lambda, gs.gains, plant, 1.0);
      const double alpha = gs.constants.at("alpha").get<double>();
      const LyapunovReport mutated = lyapunov_check(w, 2.0 * (*gs.lambda)[0]);
      const LyapunovReport doubled = lyapunov_check(w, 2.0 * alpha);
      out.require(!mutated.ok, "mutation guard (alpha = 2*lambda_0 must fail)");
      out.detail << "guard: alpha=2*lambda_0 " << (mutated.ok ? "passed" : "rejected") << ", alpha=2*alpha "
                 << (doubled.ok ? "passed" : "rejected") << "; ";
    }
  }
}

void examples_2_3(Outcome& out, std::size_t states) {
  for (const char* preset : {"strict_feedback2", "pure_feedback2"}) {
    const json cfg = {{"name", preset},
                      {"plant", {{"preset", preset}}},
                      {"setpoint", 1.0},
                      {"gains", {{"sample", {{"count", 1}, {"seed", 13}}}}},
                      {"horizon", 20.0},
                      {"integrator", stiff_policy()},
                      {"initial_states", ball(100.0, states, 23)},
                      {"checks", {{"no_escape", true}, {"convergence", 1e-6}, {"rate", true}}}};
    const ExperimentResult res = run_experiment(parse_config(cfg));
    require_runs(out, res, preset);
    double min_rate = std::numeric_limits<double>::infinity();
    for (const auto& run : res.runs)
      for (const auto& c : run.checks)
        if (c.name == "fitted_rate" && c.constants.count("alpha_hat"))
          min_rate = std::min(min_rate, c.constants.at("alpha_hat"));
    out.detail << "min_alpha_hat=" << g6(min_rate) << "; ";
  }
}

void counterexample(Outcome& out) {
  const json cfg = {{"name", "counterexample"},
                    {"plant", {{"preset", "escape_counterexample"}, {"eta", 1.0}, {"epsilon", 0.1}}},
                    {"setpoint", 0.0},
                    {"gains", {{"k", {1.0, 1.0, 0.0}}, {"b_low", 1.0}}},
                    {"horizon", 1.0},
                    {"integrator", {{"kind", "rk45"}, {"samples", 1000}}},
                    {"initial_states", {{"list", {{0.0, 0.0}}}}},
                    {"checks", {{"escape_before", 0.44}, {"escape_profile", true}}}};
  const ExperimentResult res = run_experiment(parse_config(cfg));
  require_runs(out, res, "counterexample");
  const EscapeInfo& esc = res.runs.at(0).trace.escape;
  out.detail << "reason=" << esc.reason << " bracket=[" << g6(esc.bracket_low) << ", " << g6(esc.bracket_high) << "]";
}

// Example-1 plant with the nonlinear amplitudes scaled by 1e-6. At the
// nominal amplitudes the certified ε* is far below double resolution; the
// scaled fixture keeps the same structure with ε* near 1e-9.
json observer_fixture() {
  return {{"preset", "normal_form"}, {"n", 2}, {"a_sin", 0.5e-6}, {"a_cos", 0.3e-6}, {"b_amp", 0.4e-6}};
}

void observer(Outcome& out) {
  for (double fraction : {0.9, 0.45}) {
    for (bool zero_start : {false, true}) {
      json obs = {{"beta", {2.0, 1.0}}, {"epsilon_fraction", fraction}};
      if (zero_start) obs["zhat0"] = {0.0, 0.0};
      json cfg = {{"name", "observer"},
                  {"plant", observer_fixture()},
                  {"setpoint", 1.0},
                  {"mode", "observer"},
                  {"gains", {{"sample", {{"count", 1}, {"seed", 42}}}}},
                  {"observer", obs},
                  {"horizon", 20.0},
                  {"integrator", stiff_policy()},
                  {"initial_states", {{"list", {{0.5, -1.0}}}}},
                  {"checks", {{"no_escape", true}, {"convergence", 1e-5}, {"xi", true}}}};
      const std::string tag = "eps=" + g6(fraction) + "eps*" + (zero_start ? " zhat0=0" : " zhat0=e0");
      const ExperimentResult res = run_experiment(parse_config(cfg));
      require_runs(out, res, tag);
      const double eps = res.gain_sets.at(0).constants.at("observer").at("epsilon").get<double>();
      if (fraction == 0.9 && !zero_start) out.detail << "eps*=" << g6(eps / 0.9) << "; ";

      // The grid above is far coarser than ε; resolve the observer transient
      // on [0, 2000ε] as well.
      cfg["horizon"] = 2000.0 * eps;
      cfg["integrator"]["samples"] = 2001;
      cfg["checks"] = {{"no_escape", true}, {"xi", true}};
      require_runs(out, run_experiment(parse_config(cfg)), tag + " transient");
    }
  }
}

void semi_global(Outcome& out, std::size_t states) {
  const int n = 2;
  const double c = c0_upper_bound(n);
  UncertaintyBounds tb;
  tb.b_low = tb.b_high = 1.0;
  tb.tau1 = [](double r) { return r + 2.0; };
  tb.tau2 = [](double r) { return r; };
  const SemiGlobalBounds sb = semiglobal_bounds(1.0, 0.0, tb, c);
  out.require(std::abs(sb.R0 - 5.0) <= 1e-12, "R0 = 5");
  out.require(std::abs(sb.L0 - 3.0) <= 1e-9 * 3.0, "L0 = 3");
  out.require(std::abs(sb.b0 - (5.0 * c + 2.0)) <= 1e-12 * sb.b0, "b0 = tau1(5c)");
  out.detail << "R0=" << g6(sb.R0) << " L0=" << g6(sb.L0) << " b0=" << g6(sb.b0) << " c=" << g6(c) << "; ";

  // Presets that satisfy τ₁(r) = r + 2, τ₂(r) = r and G ≥ 1 at y* = 0.
  const std::vector<json> plants = {
      {{"preset", "normal_form"}, {"n", 2}},
      {{"preset", "strict_feedback2"}, {"f1_amp", 0.25}, {"f2_amp", 0.25}},
      {{"preset", "pure_feedback2"}, {"f1_a", 0.1}, {"f1_b", 0.05}, {"f2_amp", 0.1}, {"g_mean", 1.2}, {"g_amp", 0.1}}};
  for (const json& pj : plants) {
    const std::string tag = pj.at("preset").get<std::string>();
    const json cfg = {{"name", "semi_global_" + tag},
                      {"plant", pj},
                      {"setpoint", 0.0},
                      {"gains", {{"sample", {{"count", 1}, {"seed", 17}}}, {"b_low", 1.0}}},
                      {"bounds", {{"L", sb.L0}, {"b_low", 1.0}, {"b_high", sb.b0}}},
                      {"horizon", 20.0},
                      {"integrator", stiff_policy()},
                      {"initial_states", ball(1.0, states, 29)},
                      {"checks", {{"no_escape", true}, {"convergence", 1e-6}}}};
    const ExperimentConfig ec = parse_config(cfg);
    const PlantModel plant = make_preset(ec.plant);
    UncertaintyBounds hb = tb;
    hb.L = sb.L0;
    hb.b_high = sb.b0;
    const GridReport grid = assumption_grid_check(plant, hb, 0.0);
    out.require(grid.min_G >= 1.0 && grid.max_tau1_ratio <= 1.0 && grid.max_tau2_ratio <= 1.0,
                tag + " tau bounds on the grid");
    const ExperimentResult res = run_experiment(ec);
    require_runs(out, res, tag);
    out.detail << tag << " tau1_ratio=" << g6(grid.max_tau1_ratio) << " tau2_ratio=" << g6(grid.max_tau2_ratio)
               << " min_G=" << g6(grid.min_G) << " lambda_n=" << g6(res.gain_sets.at(0).lambda->back()) << "; ";
  }
}

void monotonicity(Outcome& out, std::size_t samples) {
  const int n = 2;
  const double c = c0_upper_bound(n);
  auto bounds = [](double L, double b_high) {
    UncertaintyBounds b;
    b.L = L;
    b.b_low = 1.0;
    b.b_high = b_high;
    return b;
  };
  UncertaintyBounds tb = bounds(0.0, 1.0);
  tb.tau1 = [](double r) { return r + 2.0; };
  tb.tau2 = [](double r) { return r; };
  const SemiGlobalBounds sb = semiglobal_bounds(1.0, 0.0, tb, c);
  const std::pair<UncertaintyBounds, UncertaintyBounds> pairs[] = {
      {bounds(1.0, 2.0), bounds(0.5, 1.0)}, {bounds(sb.L0, sb.b0), bounds(0.5 * sb.L0, 0.5 * sb.b0)}};
  for (const auto& [strong, weak] : pairs) {
    const MonotonicityReport fwd = omega_monotonicity_check(strong, weak, n, c, samples, 3);
    const MonotonicityReport rev = omega_monotonicity_check(weak, strong, n, c, samples, 3);
    out.require(fwd.contained && fwd.checked == samples, "containment");
    out.require(!rev.contained && rev.witness.has_value(), "reversed witness");
    out.detail << "L=" << g6(strong.L) << " b=" << g6(strong.b_high) << ": contained " << fwd.checked
               << ", reversed witness " << (rev.witness ? "found" : "missing") << "; ";
  }
}

void lyapunov_solver(Outcome& out) {
  double worst_res = 0.0, worst_quad = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const Vec beta = hurwitz_beta(n);
    const Mat B = observer_companion(beta);
    const Mat Q = solve_lyapunov_Q(beta);
    const Mat R = B.transpose() * Q + Q * B + Mat::Identity(n, n);
    worst_res = std::max(worst_res, R.cwiseAbs().maxCoeff());
    // Oracle: ∫₀^∞ exp(Bᵀt) exp(Bt) dt by composite Simpson on [0, 60].
    const int intervals = 12000;
    const double h = 60.0 / intervals;
    const Mat step = (B * h).exp();
    Mat E = Mat::Identity(n, n), acc = Mat::Zero(n, n);
    for (int i = 0; i <= intervals; ++i) {
      const double w = (i == 0 || i == intervals) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += w * E.transpose() * E;
      E = E * step;
    }
    worst_quad = std::max(worst_quad, (Q - acc * h / 3.0).cwiseAbs().maxCoeff());
  }
  out.require(worst_res <= 1e-10, "Lyapunov residual");
  out.require(worst_quad <= 1e-6, "quadrature agreement");
  out.detail << "max_residual=" << g6(worst_res) << " max|Q-Q_quad|=" << g6(worst_quad);
}

struct Criterion {
  int id;
  const char* name;
  double budget;
  std::function<void(Outcome&, bool full)> body;
};

}  // namespace

AcceptanceLevel parse_acceptance_level(const std::string& name) {
  if (name == "quick") return AcceptanceLevel::quick;
  if (name == "full") return AcceptanceLevel::full;
  throw Error(Errc::config, "level must be quick or full, got '" + name + "'");
}

std::vector<CriterionResult> run_acceptance(AcceptanceLevel level, const std::vector<int>& only) {
  const std::vector<Criterion> all = {
      {1, "manifold_algebra", 10.0, [](Outcome& o, bool full) { manifold_algebra(o, full ? 1000 : 200); }},
      {2, "determinant_identity", 10.0, [](Outcome& o, bool full) { determinant_identity(o, full ? 1000 : 200); }},
      {3, "linear_sanity", 5.0, [](Outcome& o, bool) { linear_sanity(o); }},
      {4, "example1_certificates", 60.0, [](Outcome& o, bool full) { theorem_example1(o, full ? 20 : 5); }},
      {5, "examples2_3_pid", 60.0, [](Outcome& o, bool full) { examples_2_3(o, full ? 20 : 5); }},
      {6, "finite_escape", 5.0, [](Outcome& o, bool) { counterexample(o); }},
      {7, "observer", 60.0, [](Outcome& o, bool) { observer(o); }},
      {8, "semi_global", 30.0, [](Outcome& o, bool full) { semi_global(o, full ? 10 : 4); }},
      {9, "omega_monotonicity", 5.0, [](Outcome& o, bool full) { monotonicity(o, full ? 1000 : 200); }},
      {10, "lyapunov_solver", 5.0, [](Outcome& o, bool) { lyapunov_solver(o); }},
  };
  std::vector<CriterionResult> results;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome out;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.body(out, level == AcceptanceLevel::full);
    } catch (const std::exception& e) {
      out.passed = false;
      out.detail << "error: " << e.what();
    }
    CriterionResult r;
    r.id = c.id;
    r.name = c.name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.budget = c.budget;
    r.passed = out.passed && r.seconds <= r.budget;
    r.detail = out.detail.str();
    if (r.seconds > r.budget) r.detail += " over time budget";
    results.push_back(std::move(r));
  }
  return results;
}

std::string format_acceptance(const std::vector<CriterionResult>& results) {
  std::ostringstream os;
  std::size_t passed = 0;
  for (const auto& r : results) {
    char head[160];
    std::snprintf(head, sizeof head, "criterion %2d %-22s %s  %.2fs/%.0fs  ", r.id, r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.seconds, r.budget);
    os << head << r.detail << '\n';
    passed += r.passed ? 1 : 0;
  }
  os << "acceptance: " << passed << '/' << results.size() << " passed\n";
  return os.str();
}

}  // namespace epid
