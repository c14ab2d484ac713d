#include "epid/plants.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include <boost/math/tools/roots.hpp>

#include "epid/error.hpp"

namespace epid {

namespace {

constexpr int kMaxOrder = 8;
using Scratch = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxOrder, 1>;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::construction, what);
}

}  // namespace

const char* preset_name(PresetKind kind) noexcept {
  switch (kind) {
    case PresetKind::normal_form: return "normal_form";
    case PresetKind::strict_feedback2: return "strict_feedback2";
    case PresetKind::pure_feedback2: return "pure_feedback2";
    case PresetKind::escape_counterexample: return "escape_counterexample";
  }
  return "unknown";
}

PresetKind parse_preset_kind(const std::string& name) {
  for (PresetKind k : {PresetKind::normal_form, PresetKind::strict_feedback2, PresetKind::pure_feedback2,
                       PresetKind::escape_counterexample}) {
    if (name == preset_name(k)) return k;
  }
  throw Error(Errc::config, "unknown plant kind '" + name + "'");
}

PlantModel::PlantModel(std::string name, int n, PlantCallbacks callbacks, AssumptionStatus status,
                       std::optional<PresetParams> preset) {
  if (n < 1 || n > kMaxOrder) throw Error(Errc::construction, "plant order must be in [1, 8]");
  if (!callbacks.drift || !callbacks.input || !callbacks.output || !callbacks.phi || !callbacks.fg) {
    throw Error(Errc::construction, "plant callbacks drift, input, output, phi and fg are required");
  }
  impl_ = std::make_shared<const Impl>(Impl{std::move(name), n, std::move(callbacks), std::move(status), preset});
}

void PlantModel::dynamics(ConstVecRef x, double u, VecRef xdot) const {
  impl_->cb.drift(x, xdot);
  Scratch g(impl_->n);
  impl_->cb.input(x, g);
  xdot += u * g;
}

Vec PlantModel::phi(ConstVecRef x) const {
  Vec z(impl_->n);
  impl_->cb.phi(x, z);
  return z;
}

Vec PlantModel::equilibrium(double y_star) const {
  if (!impl_->cb.equilibrium) throw Error(Errc::unsupported, "plant '" + impl_->name + "' has no known equilibrium map");
  return impl_->cb.equilibrium(y_star);
}

double escape_profile(double x, double eta) {
  const double ax = std::abs(x);
  const double s = x < 0.0 ? -1.0 : 1.0;
  constexpr double e = std::numbers::e;
  if (ax >= e) return s * (2.0 - std::pow(std::log(ax), -eta));
  // Odd cubic core a·x + b·x³ with value 1 and slope η/e at x = e.
  const double a = (3.0 - eta) / (2.0 * e);
  const double b = (eta - 1.0) / (2.0 * e * e * e);
  return x * (a + b * x * x);
}

double escape_profile_slope(double x, double eta) {
  const double ax = std::abs(x);
  constexpr double e = std::numbers::e;
  if (ax >= e) return eta / (ax * std::pow(std::log(ax), 1.0 + eta));
  const double a = (3.0 - eta) / (2.0 * e);
  const double b = (eta - 1.0) / (2.0 * e * e * e);
  return a + 3.0 * b * x * x;
}

namespace {

PlantModel make_normal_form(const PresetParams& p) {
  require(p.n >= 1 && p.n <= kMaxOrder, "normal_form needs 1 <= n <= 8");
  require(p.b_mean - std::abs(p.b_amp) > 0.0, "normal_form needs b_mean - |b_amp| > 0");
  const int n = p.n;
  auto a = [p, n](ConstVecRef x) { return p.a_sin * std::sin(x(0)) + p.a_cos * std::cos(x(n - 1)); };
  auto b = [p, n](ConstVecRef x) { return p.b_mean + p.b_amp * std::sin(x(0) + x(n - 1)); };
  PlantCallbacks cb;
  cb.drift = [a, n](ConstVecRef x, VecRef out) {
    for (int i = 0; i + 1 < n; ++i) out(i) = x(i + 1);
    out(n - 1) = a(x);
  };
  cb.input = [b, n](ConstVecRef x, VecRef out) {
    out.setZero();
    out(n - 1) = b(x);
  };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [](ConstVecRef x, VecRef z) { z = x; };
  cb.fg = [a, b](ConstVecRef x) { return FG{a(x), b(x)}; };
  cb.equilibrium = [n](double y) {
    Vec x = Vec::Zero(n);
    x(0) = y;
    return x;
  };
  AssumptionStatus st{{"A", "holds: b >= b_mean - |b_amp| > 0"},
                      {"B'", "holds: trig amplitudes bound a, b and their gradients"},
                      {"B1", "holds: a, b globally Lipschitz, b bounded"},
                      {"C", "holds: Phi is the identity"},
                      {"C'", "holds: Phi is the identity"}};
  return PlantModel("normal_form", n, std::move(cb), std::move(st), p);
}

PlantModel make_strict_feedback(const PresetParams& p) {
  auto f1 = [p](double x1) { return p.f1_amp * std::sin(x1); };
  auto df1 = [p](double x1) { return p.f1_amp * std::cos(x1); };
  auto f2 = [p](double x1, double x2) { return p.f2_amp * std::cos(x1 + x2); };
  PlantCallbacks cb;
  cb.drift = [f1, f2](ConstVecRef x, VecRef out) {
    out(0) = f1(x(0)) + x(1);
    out(1) = f2(x(0), x(1));
  };
  cb.input = [](ConstVecRef, VecRef out) {
    out(0) = 0.0;
    out(1) = 1.0;
  };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [f1](ConstVecRef x, VecRef z) {
    z(0) = x(0);
    z(1) = f1(x(0)) + x(1);
  };
  cb.fg = [f1, df1, f2](ConstVecRef x) {
    return FG{df1(x(0)) * (f1(x(0)) + x(1)) + f2(x(0), x(1)), 1.0};
  };
  cb.equilibrium = [f1](double y) {
    Vec x(2);
    x << y, -f1(y);
    return x;
  };
  AssumptionStatus st{{"A", "holds: G = 1"},
                      {"B1", "holds with the strict-feedback constant sqrt(4L^2 + (L + L^2)^2)"},
                      {"C'", "holds: det J_Phi = 1 and Phi is proper"}};
  return PlantModel("strict_feedback2", 2, std::move(cb), std::move(st), p);
}

PlantModel make_pure_feedback(const PresetParams& p) {
  require(std::abs(p.f1_b) < 1.0, "pure_feedback2 needs |f1_b| < 1 so that d f1/d x2 > 0");
  require(p.g_mean - std::abs(p.g_amp) > 0.0, "pure_feedback2 needs g_mean - |g_amp| > 0");
  auto f1 = [p](double x1, double x2) { return x2 + p.f1_a * std::sin(x1) + p.f1_b * std::sin(x2); };
  auto d1f1 = [p](double x1) { return p.f1_a * std::cos(x1); };
  auto d2f1 = [p](double x2) { return 1.0 + p.f1_b * std::cos(x2); };
  auto f2 = [p](double x1, double x2) { return p.f2_amp * std::cos(x1 + x2); };
  auto g = [p](double x1) { return p.g_mean + p.g_amp * std::sin(x1); };
  PlantCallbacks cb;
  cb.drift = [f1, f2](ConstVecRef x, VecRef out) {
    out(0) = f1(x(0), x(1));
    out(1) = f2(x(0), x(1));
  };
  cb.input = [g](ConstVecRef x, VecRef out) {
    out(0) = 0.0;
    out(1) = g(x(0));
  };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [f1](ConstVecRef x, VecRef z) {
    z(0) = x(0);
    z(1) = f1(x(0), x(1));
  };
  cb.fg = [f1, d1f1, d2f1, f2, g](ConstVecRef x) {
    const double F = d1f1(x(0)) * f1(x(0), x(1)) + d2f1(x(1)) * f2(x(0), x(1));
    return FG{F, d2f1(x(1)) * g(x(0))};
  };
  cb.equilibrium = [p, f1](double y) {
    // f1(y, ·) is strictly increasing; its root lies within |f1_a| + |f1_b| of 0.
    const double r = std::abs(p.f1_a) + std::abs(p.f1_b) + 1.0;
    boost::uintmax_t iters = 200;
    const auto root = boost::math::tools::toms748_solve([&](double x2) { return f1(y, x2); }, -r, r,
                                                        boost::math::tools::eps_tolerance<double>(52), iters);
    Vec x(2);
    x << y, 0.5 * (root.first + root.second);
    return x;
  };
  AssumptionStatus st{{"A", "holds: G = (d f1/d x2) g >= (1 - |f1_b|)(g_mean - |g_amp|)"},
                      {"B1", "holds via the mean-value chain ||Phi(x) - Phi(x*)|| >= alpha ||x - x*||"},
                      {"C'", "holds: d f1/d x2 > 0 and Phi is proper"},
                      {"hessian", "||Hess f1|| <= max(|f1_a|, |f1_b|); recorded, not used for gains"}};
  return PlantModel("pure_feedback2", 2, std::move(cb), std::move(st), p);
}

PlantModel make_counterexample(const PresetParams& p) {
  require(p.epsilon > 0.0 && p.epsilon <= 1.0, "escape_counterexample needs 0 < epsilon <= 1");
  require(p.eta > 0.0 && p.eta < 3.0, "escape_counterexample needs 0 < eta < 3 for a monotone cubic core");
  const double eps = p.epsilon, eta = p.eta;
  PlantCallbacks cb;
  cb.drift = [eps, eta](ConstVecRef x, VecRef out) {
    out(0) = eps * escape_profile(x(1), eta);
    out(1) = 1.0 / (eps * escape_profile_slope(x(1), eta));
  };
  cb.input = [eps, eta](ConstVecRef x, VecRef out) {
    out(0) = 0.0;
    out(1) = 1.0 / (eps * escape_profile_slope(x(1), eta));
  };
  cb.output = [](ConstVecRef x) { return x(0); };
  cb.phi = [eps, eta](ConstVecRef x, VecRef z) {
    z(0) = x(0);
    z(1) = eps * escape_profile(x(1), eta);
  };
  cb.fg = [](ConstVecRef) { return FG{1.0, 1.0}; };
  cb.equilibrium = [](double y) {
    Vec x(2);
    x << y, 0.0;
    return x;
  };
  AssumptionStatus st{{"A", "holds: G = 1"},
                      {"B", "holds with tau1(r) = r + 2, tau2(r) = r"},
                      {"C", "fails: ||J_Phi^-1|| grows like |x| log^(1+eta)|x|"},
                      {"C'", "fails: Phi maps onto a strip |z2| < 2 epsilon"}};
  return PlantModel("escape_counterexample", 2, std::move(cb), std::move(st), p);
}

}  // namespace

PlantModel make_preset(const PresetParams& params) {
  switch (params.kind) {
    case PresetKind::normal_form: return make_normal_form(params);
    case PresetKind::strict_feedback2: return make_strict_feedback(params);
    case PresetKind::pure_feedback2: return make_pure_feedback(params);
    case PresetKind::escape_counterexample: return make_counterexample(params);
  }
  throw Error(Errc::construction, "unknown preset kind");
}

PlantEvaluation eval_plant(const PlantModel& plant, ConstVecRef x, double u) {
  const int n = plant.order();
  if (x.size() != n) throw Error(Errc::arity, "state dimension does not match plant order");
  if (!x.allFinite() || !std::isfinite(u)) throw Error(Errc::evaluation, "non-finite state or input");
  PlantEvaluation ev;
  ev.xdot.resize(n);
  plant.dynamics(x, u, ev.xdot);
  ev.y = plant.output(x);
  ev.z = plant.phi(x);
  const FG h = plant.fg(x);
  ev.F = h.F;
  ev.G = h.G;
  return ev;
}

UncertaintyBounds derived_bounds(const PlantModel& plant, double y_star) {
  if (!plant.preset()) throw Error(Errc::bounds_unknown, "plant '" + plant.name() + "' is not a preset; supply bounds");
  const PresetParams& p = *plant.preset();
  UncertaintyBounds b;
  const Vec xs = plant.equilibrium(y_star);
  const FG hs = plant.fg(xs);
  // Lemma-2 perturbation a_t = F(x) − (F*/G*)G(x) is bounded by (L_F + |F*|/G*·L_G)‖Φ − z*‖.
  auto effective = [&](double LF, double LG) { return LF + std::abs(hs.F) / hs.G * LG; };

  switch (p.kind) {
    case PresetKind::normal_form: {
      const double La = std::hypot(p.a_sin, p.a_cos);
      const double Lb = std::abs(p.b_amp) * (p.n == 1 ? 2.0 : std::numbers::sqrt2);
      const double amax = std::abs(p.a_sin) + std::abs(p.a_cos);
      b.b_low = p.b_mean - std::abs(p.b_amp);
      b.b_high = p.b_mean + std::abs(p.b_amp);
      b.L = effective(La, Lb);
      const double LH = std::hypot(La, Lb);
      const double h0 = std::hypot(amax, b.b_high);
      b.tau1 = [h0](double r) { return r + h0; };
      b.tau2 = [LH](double r) { return LH * r; };
      b.M = std::abs(p.a_cos);
      break;
    }
    case PresetKind::strict_feedback2: {
      const double L = std::max(std::abs(p.f1_amp), std::numbers::sqrt2 * std::abs(p.f2_amp));
      const double Lt = std::sqrt(4.0 * L * L + (L + L * L) * (L + L * L));
      b.b_low = b.b_high = 1.0;
      b.L = Lt;
      const double s = std::max(std::numbers::sqrt2, std::abs(p.f1_amp));
      const double off = std::abs(p.f1_amp) + std::abs(p.f2_amp) + 1.0;
      b.tau1 = [s, off](double r) { return s * r + off; };
      b.tau2 = [Lt](double r) { return Lt * r; };
      b.M = std::abs(p.f2_amp);
      break;
    }
    case PresetKind::pure_feedback2: {
      const double fa = std::abs(p.f1_a), fb = std::abs(p.f1_b);
      const double th2_min = 1.0 - fb, th2_max = 1.0 + fb;
      const double b1 = p.g_mean - std::abs(p.g_amp), b2 = p.g_mean + std::abs(p.g_amp);
      // σ_min([[1,0],[θ₁,θ₂]]) ≥ θ₂/‖·‖_F over the admissible (θ₁, θ₂) box.
      const double alpha_inf = th2_min / std::sqrt(1.0 + fa * fa + th2_max * th2_max);
      const double grad_f1 = std::hypot(fa, th2_max);
      const double f2s = std::abs(p.f2_amp * std::cos(xs(0) + xs(1)));
      const double beta_F = fa * grad_f1 + th2_max * std::numbers::sqrt2 * std::abs(p.f2_amp) + fb * f2s;
      const double beta_G = fb * b2 + th2_max * std::abs(p.g_amp);
      const double LF = beta_F / alpha_inf, LG = beta_G / alpha_inf;
      b.b_low = th2_min * b1;
      b.b_high = th2_max * b2;
      b.L = effective(LF, LG);
      const double LH = std::hypot(LF, LG);
      const double s = std::max(1.0 + grad_f1, fa);
      const double off = th2_max * std::abs(p.f2_amp) + b.b_high;
      b.tau1 = [s, off](double r) { return s * r + off; };
      b.tau2 = [LH](double r) { return LH * r; };
      b.M = std::abs(p.f2_amp);
      break;
    }
    case PresetKind::escape_counterexample: {
      b.b_low = b.b_high = 1.0;
      b.L = 0.0;
      b.tau1 = [](double r) { return r + 2.0; };
      b.tau2 = [](double r) { return r; };
      b.M = 0.0;
      break;
    }
  }
  return b;
}

}  // namespace epid
