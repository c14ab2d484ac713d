#include "epid/simulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <utility>

#include <boost/numeric/odeint/stepper/controlled_runge_kutta.hpp>
#include <boost/numeric/odeint/stepper/generation.hpp>
#include <boost/numeric/odeint/stepper/runge_kutta4.hpp>
#include <boost/numeric/odeint/stepper/runge_kutta_dopri5.hpp>

#include "epid/error.hpp"
#include "rosenbrock.hpp"

namespace epid {

namespace odeint = boost::numeric::odeint;

namespace {

constexpr int kMaxOrder = 8;

using StdState = std::vector<double>;

bool all_finite(const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

double norm2(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::string> StateLayout::column_names() const {
  std::vector<std::string> names{"x0"};
  for (int i = 1; i <= n; ++i) names.push_back("x_" + std::to_string(i));
  if (observer)
    for (int i = 1; i <= n; ++i) names.push_back("zhat_" + std::to_string(i));
  return names;
}

VectorField assemble_closed_loop(const PlantModel& plant, const ControllerState& controller, double y_star,
                                 const std::optional<ObserverConfig>& observer) {
  const int n = plant.order();
  if (controller.gains.order() != n) {
    throw Error(Errc::arity, "gain order " + std::to_string(controller.gains.order()) + " differs from plant order " +
                                 std::to_string(n));
  }
  const bool obs_mode = controller.mode == ControllerMode::observer_based;
  if (obs_mode != observer.has_value()) {
    throw Error(Errc::arity, obs_mode ? "observer mode needs an observer config" : "observer config given in state feedback mode");
  }
  if (!std::isfinite(y_star)) throw Error(Errc::evaluation, "setpoint must be finite");

  const StateLayout layout{n, obs_mode};
  VectorField field;
  field.dim = layout.dim();
  field.names = layout.column_names();
  const GainVector k = controller.gains;

  if (!obs_mode) {
    auto control = [plant, k, y_star, n](ConstVecRef s, double& e) {
      std::array<double, kMaxOrder> zbuf{};
      std::array<double, kMaxOrder> derivs{};
      Eigen::Map<Vec> z(zbuf.data(), n);
      const auto x = s.segment(1, n);
      plant.phi(x, z);
      e = y_star - plant.output(x);
      for (int i = 0; i + 1 < n; ++i) derivs[static_cast<std::size_t>(i)] = -z(i + 1);
      return extended_pid_law(k, s(0), e, derivs.data());
    };
    field.rhs = [plant, control, n](ConstVecRef s, VecRef ds) {
      double e = 0.0;
      const double u = control(s, e);
      ds(0) = e;
      plant.dynamics(s.segment(1, n), u, ds.segment(1, n));
    };
    field.observe = [control](ConstVecRef s) {
      Observation o;
      o.u = control(s, o.e);
      return o;
    };
  } else {
    observer->validate();
    if (observer->beta.size() != n) throw Error(Errc::arity, "observer beta length must equal the plant order");
    const ObserverConfig cfg = *observer;
    // The observer is integrated in its scaled error coordinates
    // ξᵢ = (ẑᵢ + yᵢ)/ε^{n−i}, y₁ = z₁ − y*, yᵢ = zᵢ. In these coordinates
    // εξ̇ = Bξ + ε·eₙ(F + G·u), while in ẑ the innovation e − ẑ₁ is O(ε²)
    // and drowns in rounding once ε is small.
    std::array<double, kMaxOrder> epow{};
    epow[static_cast<std::size_t>(n - 1)] = 1.0;
    for (int i = n - 2; i >= 0; --i) epow[static_cast<std::size_t>(i)] = epow[static_cast<std::size_t>(i + 1)] * cfg.epsilon;
    auto offsets = [plant, y_star, n](ConstVecRef x, double* y) {
      Eigen::Map<Vec> z(y, n);
      plant.phi(x, z);
      y[0] -= y_star;
    };
    auto control = [plant, k, y_star, n, epow, offsets](ConstVecRef s, double& e) {
      std::array<double, kMaxOrder> y{};
      std::array<double, kMaxOrder> zhat{};
      offsets(s.segment(1, n), y.data());
      for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        zhat[ui] = epow[ui] * s(n + 1 + i) - y[ui];
      }
      e = y_star - plant.output(s.segment(1, n));
      return extended_pid_law(k, s(0), e, zhat.data() + 1);
    };
    field.rhs = [plant, cfg, control, n](ConstVecRef s, VecRef ds) {
      double e = 0.0;
      const double u = control(s, e);
      ds(0) = e;
      const auto x = s.segment(1, n);
      plant.dynamics(x, u, ds.segment(1, n));
      const double inv = 1.0 / cfg.epsilon;
      const double xi1 = s(n + 1);
      for (int i = 0; i < n; ++i) {
        const double next = i + 1 < n ? s(n + 2 + i) : 0.0;
        ds(n + 1 + i) = (next - cfg.beta(i) * xi1) * inv;
      }
      const FG fg = plant.fg(x);
      ds(2 * n) += fg.F + fg.G * u;
    };
    field.observe = [control](ConstVecRef s) {
      Observation o;
      o.u = control(s, o.e);
      return o;
    };
    field.decode = [offsets, epow, n](ConstVecRef s, VecRef out) {
      std::array<double, kMaxOrder> y{};
      offsets(s.segment(1, n), y.data());
      out = s;
      for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        out(n + 1 + i) = epow[ui] * s(n + 1 + i) - y[ui];
      }
    };
    field.encode = [offsets, epow, n](ConstVecRef s, VecRef out) {
      std::array<double, kMaxOrder> y{};
      offsets(s.segment(1, n), y.data());
      out = s;
      for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        out(n + 1 + i) = (s(n + 1 + i) + y[ui]) / epow[ui];
      }
    };
    field.observer_epsilon = cfg.epsilon;
    field.escape_dim = n + 1;
  }
  std::function<double(ConstVecRef)> u_of = [obs = field.observe](ConstVecRef s) { return obs(s).u; };
  field.jacobian = [plant, k, obs_cfg = observer, n, u_of](ConstVecRef s, Eigen::Ref<Mat> J) {
    const bool obs = obs_cfg.has_value();
    const Vec x = s.segment(1, n);
    const double u = u_of(s);
    Vec g(n), grad_h(n), dp(n), dm(n), zp(n), zm(n), grad_fg(n);
    Mat Jz(n, n);
    plant.input(x, g);
    J.setZero();
    Vec xp = x, xm = x;
    for (int j = 0; j < n; ++j) {
      const double h = 6e-6 * std::max(1.0, std::abs(x(j)));
      xp(j) = x(j) + h;
      xm(j) = x(j) - h;
      grad_h(j) = (plant.output(xp) - plant.output(xm)) / (2.0 * h);
      // ∂(f + g·u)/∂x at frozen u.
      plant.dynamics(xp, u, dp);
      plant.dynamics(xm, u, dm);
      J.block(1, 1 + j, n, 1) = (dp - dm) / (2.0 * h);
      plant.phi(xp, zp);
      plant.phi(xm, zm);
      Jz.col(j) = (zp - zm) / (2.0 * h);
      if (obs) {
        const FG a = plant.fg(xp);
        const FG b = plant.fg(xm);
        grad_fg(j) = (a.F + a.G * u - b.F - b.G * u) / (2.0 * h);
      }
      xp(j) = xm(j) = x(j);
    }
    J.block(0, 1, 1, n) = -grad_h.transpose();
    Vec du = Vec::Zero(J.cols());
    du(0) = k[0];
    du.segment(1, n) = -k[1] * grad_h;
    for (int i = 2; i <= n; ++i) du.segment(1, n) -= k[static_cast<std::size_t>(i)] * Jz.row(i - 1).transpose();
    if (obs) {
      double epow = 1.0;
      for (int i = n; i >= 2; --i) {
        du(n + i) = k[static_cast<std::size_t>(i)] * epow;
        epow *= obs_cfg->epsilon;
      }
    }
    J.block(1, 0, n, J.cols()) += g * du.transpose();
    if (obs) {
      const double inv = 1.0 / obs_cfg->epsilon;
      for (int i = 1; i <= n; ++i) {
        J(n + i, n + 1) -= obs_cfg->beta(i - 1) * inv;
        if (i < n) J(n + i, n + i + 1) += inv;
      }
      const FG fg = plant.fg(x);
      J.block(2 * n, 1, 1, n) += grad_fg.transpose();
      J.row(2 * n) += fg.G * du.transpose();
    }
  };
  // y = y* − e, kept exact by recomputing from e.
  auto inner = field.observe;
  field.observe = [inner, y_star](ConstVecRef s) {
    Observation o = inner(s);
    o.y = y_star - o.e;
    return o;
  };
  return field;
}

Vec initial_augmented_state(const PlantModel& plant, double y_star, ConstVecRef x0,
                            const std::optional<ObserverConfig>& observer) {
  const int n = plant.order();
  if (x0.size() != n) throw Error(Errc::arity, "initial state length must equal the plant order");
  const StateLayout layout{n, observer.has_value()};
  Vec s = Vec::Zero(layout.dim());
  s.segment(1, n) = x0;
  if (observer) {
    if (observer->zhat0) {
      if (observer->zhat0->size() != n) throw Error(Errc::arity, "zhat0 length must equal the plant order");
      s.segment(n + 1, n) = *observer->zhat0;
    } else {
      s(n + 1) = y_star - plant.output(x0);
    }
  }
  return s;
}

const char* integrator_name(IntegratorKind kind) noexcept {
  switch (kind) {
    case IntegratorKind::rk4: return "rk4";
    case IntegratorKind::rk45: return "rk45";
    case IntegratorKind::rosenbrock: return "rosenbrock";
  }
  return "?";
}

IntegratorKind parse_integrator_kind(const std::string& name) {
  for (IntegratorKind k : {IntegratorKind::rk4, IntegratorKind::rk45, IntegratorKind::rosenbrock})
    if (name == integrator_name(k)) return k;
  throw Error(Errc::config, "unknown integrator '" + name + "'");
}

namespace {

// One attempted step from (x, t) of size h. Returns whether it was accepted
// by the error controller and the controller's next step proposal.
struct Attempt {
  bool accepted = false;
  double h_next = 0.0;
};

class Stepper {
 public:
  Stepper(const VectorField& field, const IntegratorPolicy& policy)
      : field_(field),
        policy_(policy),
        dopri_(odeint::make_controlled(policy.abs_tol, policy.rel_tol, odeint::runge_kutta_dopri5<StdState>())),
        dim_(static_cast<std::size_t>(field.dim)),
        dxdt_(dim_),
        dxdt_out_(dim_) {
    if (policy.kind == IntegratorKind::rosenbrock) {
      detail::RosenbrockStepper::Jac jac;
      if (field.jacobian) {
        jac = [this](const double* s, double* J) {
          Eigen::Map<const Vec> sm(s, field_.dim);
          Eigen::Map<Mat> Jm(J, field_.dim, field_.dim);
          field_.jacobian(sm, Jm);
        };
      }
      rosen_ = std::make_unique<detail::RosenbrockStepper>(
          dim_, policy.abs_tol, policy.rel_tol, [this](const double* s, double* ds) { eval(s, ds); }, std::move(jac));
    }
  }

  Attempt attempt(const StdState& x, double t, double h, StdState& out) {
    auto sys = [this](const StdState& s, StdState& ds, double) { eval(s.data(), ds.data()); };
    switch (policy_.kind) {
      case IntegratorKind::rk4: {
        rk4_.do_step(sys, x, t, out, h);
        return {true, policy_.dt};
      }
      case IntegratorKind::rk45: {
        // Derivatives are passed explicitly so that a step rejected by the
        // caller never leaves a stale first-same-as-last cache behind.
        eval(x.data(), dxdt_.data());
        double tt = t, hh = h;
        const auto res = dopri_.try_step(sys, x, dxdt_, tt, out, dxdt_out_, hh);
        return {res == odeint::success, hh};
      }
      case IntegratorKind::rosenbrock: {
        double hh = h;
        const bool ok = rosen_->try_step(x.data(), t, h, out.data(), hh);
        return {ok, hh};
      }
    }
    return {};
  }

 private:
  void eval(const double* s, double* ds) const {
    Eigen::Map<const Vec> sm(s, field_.dim);
    Eigen::Map<Vec> dm(ds, field_.dim);
    field_.rhs(sm, dm);
  }

  const VectorField& field_;
  const IntegratorPolicy& policy_;
  odeint::runge_kutta4<StdState> rk4_;
  decltype(odeint::make_controlled(0.0, 0.0, odeint::runge_kutta_dopri5<StdState>())) dopri_;
  std::unique_ptr<detail::RosenbrockStepper> rosen_;
  std::size_t dim_;
  StdState dxdt_, dxdt_out_;
};

}  // namespace

Trace integrate(const VectorField& field, ConstVecRef s0, double t_end, const IntegratorPolicy& policy) {
  if (!field.rhs) throw Error(Errc::construction, "vector field has no right-hand side");
  if (s0.size() != field.dim) throw Error(Errc::arity, "initial state length must equal the field dimension");
  if (!s0.allFinite()) throw Error(Errc::evaluation, "initial state is not finite");
  if (!(t_end > 0.0) || !std::isfinite(t_end)) throw Error(Errc::config, "t_end must be positive");
  if (policy.samples < 2) throw Error(Errc::config, "at least two output samples are required");
  if (!(policy.dt > 0.0)) throw Error(Errc::config, "dt must be positive");

  const std::size_t dim = static_cast<std::size_t>(field.dim);
  Trace tr;
  tr.names = field.names;
  tr.meta = {{"integrator", integrator_name(policy.kind)},
             {"dt", policy.dt},
             {"abs_tol", policy.abs_tol},
             {"rel_tol", policy.rel_tol},
             {"samples", policy.samples},
             {"escape_norm", policy.escape_norm},
             {"dt_min", policy.dt_min},
             {"t_end", t_end},
             {"dim", field.dim}};
  if (field.observer_epsilon && *field.observer_epsilon < 10.0 * policy.dt_min) {
    tr.warnings.push_back("observer epsilon " + fmt(*field.observer_epsilon) + " is below 10*dt_min");
  }
  if (policy.kind == IntegratorKind::rk4 && field.observer_epsilon && *field.observer_epsilon < 10.0 * policy.dt) {
    tr.warnings.push_back("observer epsilon " + fmt(*field.observer_epsilon) + " is below 10*dt for a fixed step");
  }

  auto decoded = [&](const StdState& x) {
    Eigen::Map<const Vec> s(x.data(), field.dim);
    if (!field.decode) return Vec(s);
    Vec out(field.dim);
    field.decode(s, out);
    return out;
  };
  auto record = [&](double t, const StdState& x) {
    Eigen::Map<const Vec> s(x.data(), field.dim);
    Observation o;
    if (field.observe) {
      o = field.observe(s);
    } else {
      o.y = o.e = o.u = std::nan("");
    }
    tr.t.push_back(t);
    tr.states.push_back(decoded(x));
    tr.y.push_back(o.y);
    tr.e.push_back(o.e);
    tr.u.push_back(o.u);
  };

  Stepper stepper(field, policy);
  // Observer peaking (ẑ of order 1/ε^{n−1} for a mismatched ẑ(0)) is not an
  // escape; the norm test sees only the integral and plant states.
  const int norm_dim = field.escape_dim > 0 ? field.escape_dim : field.dim;
  StdState x(s0.data(), s0.data() + s0.size()), xn(dim);
  if (field.encode) {
    Eigen::Map<Vec> xm(x.data(), field.dim);
    field.encode(s0, xm);
    if (!xm.allFinite()) throw Error(Errc::evaluation, "initial state is not finite in integration coordinates");
  }
  double t = 0.0, h = policy.dt;
  record(0.0, x);

  const int last = policy.samples - 1;
  auto grid = [&](int k) { return k == last ? t_end : t_end * static_cast<double>(k) / last; };
  const double snap = 1e-12 * std::max(1.0, t_end);
  long long steps = 0;

  auto collapse = [&](const char* reason, double t_hi) {
    tr.escape.detected = true;
    tr.escape.reason = reason;
    tr.escape.last_accepted = t;
    tr.escape.bracket_low = t;
    tr.escape.bracket_high = t_hi;
    if (t > tr.t.back()) record(t, x);
  };

  // Continue past the norm threshold without recording, to bracket the
  // blow-up by the step-collapse criterion.
  auto probe = [&]() {
    while (t < t_end && steps < policy.max_steps) {
      const double hs = std::min(h, t_end - t);
      const Attempt a = stepper.attempt(x, t, hs, xn);
      ++steps;
      const bool ok = a.accepted && all_finite(xn.data(), dim);
      if (!ok) {
        ++tr.rejected_steps;
        if (policy.kind == IntegratorKind::rk4) {
          tr.escape.bracket_low = t;
          tr.escape.bracket_high = t + hs;
          return;
        }
        const double next = a.accepted ? 0.25 * hs : std::min(a.h_next, 0.5 * hs);
        if (next < policy.dt_min) {
          tr.escape.bracket_low = t;
          tr.escape.bracket_high = t + hs;
          return;
        }
        h = next;
        continue;
      }
      ++tr.accepted_steps;
      t += hs;
      x.swap(xn);
      if (policy.kind != IntegratorKind::rk4) h = a.h_next;
    }
    tr.escape.bracket_low = t;
  };

  int k = 1;
  while (k <= last) {
    if (steps >= policy.max_steps) {
      tr.warnings.push_back("max_steps reached at t=" + fmt(t));
      break;
    }
    const double target = grid(k);
    double hs = h;
    bool clipped = false;
    if (t + hs >= target - snap) {
      hs = target - t;
      clipped = true;
    }
    const Attempt a = stepper.attempt(x, t, hs, xn);
    ++steps;
    const bool finite = all_finite(xn.data(), dim);
    if (!a.accepted || !finite) {
      ++tr.rejected_steps;
      if (policy.kind == IntegratorKind::rk4) {
        collapse("non-finite", t + hs);
        break;
      }
      // A non-finite accepted step means the error estimate itself was NaN.
      const double next = a.accepted ? 0.25 * hs : std::min(a.h_next, 0.5 * hs);
      if (next < policy.dt_min) {
        collapse(finite ? "step-collapse" : "non-finite", t + hs);
        break;
      }
      h = next;
      continue;
    }
    ++tr.accepted_steps;
    t = clipped ? target : t + hs;
    x.swap(xn);
    if (policy.kind != IntegratorKind::rk4) h = clipped ? std::max(h, a.h_next) : a.h_next;
    const double nrm = norm2(x.data(), static_cast<std::size_t>(norm_dim));
    if (nrm > policy.escape_norm) {
      tr.escape.detected = true;
      tr.escape.reason = "norm";
      tr.escape.last_accepted = t;
      tr.escape.bracket_low = t;
      record(t, x);
      probe();
      break;
    }
    if (clipped) {
      record(t, x);
      ++k;
    }
  }
  tr.meta["accepted_steps"] = tr.accepted_steps;
  tr.meta["rejected_steps"] = tr.rejected_steps;
  return tr;
}

std::string trace_csv(const Trace& trace) {
  std::ostringstream os;
  os << 't';
  for (const auto& n : trace.names) os << ',' << n;
  os << ",y,e,u\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    os << fmt(trace.t[i]);
    for (Eigen::Index j = 0; j < trace.states[i].size(); ++j) os << ',' << fmt(trace.states[i](j));
    os << ',' << fmt(trace.y[i]) << ',' << fmt(trace.e[i]) << ',' << fmt(trace.u[i]) << '\n';
  }
  if (trace.escape.detected) {
    os << "# escape detected reason=" << trace.escape.reason << " last_accepted=" << fmt(trace.escape.last_accepted)
       << " bracket=[" << fmt(trace.escape.bracket_low) << ',' << fmt(trace.escape.bracket_high) << "]\n";
  } else {
    os << "# escape none\n";
  }
  return os.str();
}

void write_trace_csv(const Trace& trace, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::config, "cannot write " + path);
  f << trace_csv(trace);
}

nlohmann::json trace_summary(const Trace& trace) {
  nlohmann::json j;
  j["samples"] = trace.size();
  j["t_final"] = trace.t.empty() ? 0.0 : trace.t.back();
  j["accepted_steps"] = trace.accepted_steps;
  j["rejected_steps"] = trace.rejected_steps;
  j["escape"] = {{"detected", trace.escape.detected}};
  if (trace.escape.detected) {
    j["escape"]["reason"] = trace.escape.reason;
    j["escape"]["last_accepted"] = trace.escape.last_accepted;
    j["escape"]["bracket_low"] = trace.escape.bracket_low;
    // JSON has no infinity; null marks an open bracket.
    if (std::isfinite(trace.escape.bracket_high))
      j["escape"]["bracket_high"] = trace.escape.bracket_high;
    else
      j["escape"]["bracket_high"] = nullptr;
  }
  if (!trace.e.empty()) j["final_abs_error"] = std::abs(trace.e.back());
  j["warnings"] = trace.warnings;
  j["meta"] = trace.meta;
  return j;
}

}  // namespace epid
