#include "epid/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <Eigen/LU>

#include "epid/error.hpp"

namespace epid {

namespace {

int plant_order_of(const Trace& trace, const PlantModel& plant) {
  const int n = plant.order();
  if (trace.states.empty()) throw Error(Errc::too_few_samples, "trace is empty");
  const Eigen::Index dim = trace.states.front().size();
  if (dim != n + 1 && dim != 2 * n + 1) throw Error(Errc::arity, "trace dimension does not match the plant order");
  return n;
}

// −F(x*)/(k₀G(x*)): the integral state at equilibrium.
double integral_at_equilibrium(const PlantModel& plant, const GainVector& gains, double y_star) {
  if (!(gains[0] != 0.0)) throw Error(Errc::invalid_gain, "k0 must be nonzero for the equilibrium shift");
  const FG h = plant.fg(plant.equilibrium(y_star));
  return -h.F / (gains[0] * h.G);
}

Vec assemble_Y(const Vec& s, double e, int n, double x0_star, const PlantModel& plant) {
  Vec z(n);
  plant.phi(s.segment(1, n), z);
  Vec Y(n + 1);
  Y(0) = -(s(0) - x0_star);
  Y(1) = -e;
  for (int i = 1; i < n; ++i) Y(i + 1) = z(i);
  return Y;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

WCoordinates to_w_coordinates(const Trace& trace, const LambdaVector& lam, const GainVector& gains,
                              const PlantModel& plant, double y_star) {
  const int n = plant_order_of(trace, plant);
  if (lam.order() != n || gains.order() != n) throw Error(Errc::arity, "lambda and gain orders must equal the plant order");
  const double x0_star = integral_at_equilibrium(plant, gains, y_star);
  const Mat P = build_P(lam);
  const Eigen::FullPivLU<Mat> lu(P);
  WCoordinates w;
  w.t = trace.t;
  w.Y.reserve(trace.size());
  w.w.reserve(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    Vec Y = assemble_Y(trace.states[i], trace.e[i], n, x0_star, plant);
    Vec wi = lu.solve(Y);
    w.max_residual = std::max(w.max_residual, (P * wi - Y).norm() / (1.0 + Y.norm()));
    w.Y.push_back(std::move(Y));
    w.w.push_back(std::move(wi));
  }
  return w;
}

LyapunovReport lyapunov_check(const WCoordinates& w, double alpha, double tol_abs, double tol_rel) {
  const std::size_t m = w.w.size();
  if (m < 200) throw Error(Errc::too_few_samples, "Lyapunov check needs at least 200 samples, got " + std::to_string(m));
  std::vector<double> V(m);
  for (std::size_t i = 0; i < m; ++i) V[i] = 0.5 * w.w[i].squaredNorm();
  LyapunovReport r;
  r.samples = m;
  r.worst_margin = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < m; ++i) {
    const double dV = (V[i + 1] - V[i - 1]) / (w.t[i + 1] - w.t[i - 1]);
    const double margin = dV + 2.0 * alpha * V[i] - tol_abs - tol_rel * V[i];
    if (margin > r.worst_margin) {
      r.worst_margin = margin;
      r.worst_time = w.t[i];
    }
    if (margin > 0.0) ++r.violations;
  }
  r.ok = r.violations == 0;
  return r;
}

BoundReport check_error_bound(const Trace& trace, double c, double alpha, const PlantModel& plant,
                              const GainVector& gains, const UncertaintyBounds& bounds, double y_star) {
  const int n = plant_order_of(trace, plant);
  if (!bounds.tau1) throw Error(Errc::bounds_unknown, "error bound needs tau1");
  Vec zstar = Vec::Zero(n);
  zstar(0) = y_star;
  const Vec z0 = plant.phi(trace.states.front().segment(1, n));
  const double shift = bounds.tau1(std::abs(y_star)) / (gains[0] * bounds.b_low);
  BoundReport r;
  r.initial_bound = c * ((z0 - zstar).norm() + shift);
  r.worst_margin = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double rhs = r.initial_bound * std::exp(-alpha * trace.t[i]);
    const double lhs = std::abs(trace.e[i]);
    r.worst_margin = std::max(r.worst_margin, lhs - rhs);
    if (rhs > 0.0) r.worst_ratio = std::max(r.worst_ratio, lhs / rhs);
    if (lhs > rhs) ++r.violations;
  }
  r.ok = r.violations == 0;
  return r;
}

std::optional<double> fit_rate(const std::vector<double>& t, const std::vector<double>& e, double noise_floor) {
  const std::size_t m = std::min(t.size(), e.size());
  if (m < 4) return std::nullopt;
  std::vector<double> env(m);
  double run = 0.0;
  for (std::size_t i = m; i-- > 0;) {
    const double a = std::abs(e[i]);
    if (!std::isfinite(a)) return std::nullopt;
    run = std::max(run, a);
    env[i] = run;
  }
  if (!(env[0] > 0.0)) return std::nullopt;
  // Non-decaying: the last tenth of the horizon still reaches half of the
  // peak seen in the first tenth.
  const double t_tenth = 0.1 * (t[m - 1] - t[0]);
  double head = 0.0;
  for (std::size_t i = 0; i < m && t[i] <= t[0] + t_tenth; ++i) head = std::max(head, std::abs(e[i]));
  std::size_t tail = m - 1;
  while (tail > 0 && t[tail - 1] >= t[m - 1] - t_tenth) --tail;
  if (!(env[tail] < 0.5 * head)) return std::nullopt;
  const double floor = noise_floor < 0.0 ? 1e-6 * env[0] : noise_floor;
  std::size_t end = m;  // first index at or below the floor
  for (std::size_t i = 0; i < m; ++i) {
    if (env[i] <= floor) {
      end = i;
      break;
    }
  }
  const double t_hi = t[end - 1];
  const double t_lo = t[0] + 0.5 * (t_hi - t[0]);
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < end; ++i) {
    if (t[i] < t_lo) continue;
    const double y = std::log(env[i]);
    sx += t[i];
    sy += y;
    sxx += t[i] * t[i];
    sxy += t[i] * y;
    ++cnt;
  }
  if (cnt < 8) return std::nullopt;
  const double den = cnt * sxx - sx * sx;
  if (!(den > 0.0)) return std::nullopt;
  return -(cnt * sxy - sx * sy) / den;
}

std::optional<double> fit_rate(const Trace& trace, double noise_floor) {
  if (trace.escape.detected) return std::nullopt;
  return fit_rate(trace.t, trace.e, noise_floor);
}

GridReport assumption_grid_check(const PlantModel& plant, const UncertaintyBounds& bounds, double y_star,
                                 double half_width, std::size_t grid_size) {
  const int n = plant.order();
  const Vec xs = plant.equilibrium(y_star);
  const Vec zs = plant.phi(xs);
  const FG hs = plant.fg(xs);
  const int per_dim = std::max(2, static_cast<int>(std::lround(std::pow(static_cast<double>(grid_size), 1.0 / n))));

  GridReport r;
  r.min_G = std::numeric_limits<double>::infinity();
  r.max_G = -std::numeric_limits<double>::infinity();
  std::vector<int> idx(static_cast<std::size_t>(n), 0);
  Vec x(n), z(n);
  for (;;) {
    for (int j = 0; j < n; ++j) x(j) = -half_width + 2.0 * half_width * idx[static_cast<std::size_t>(j)] / (per_dim - 1);
    plant.phi(x, z);
    const FG h = plant.fg(x);
    ++r.points;
    r.min_G = std::min(r.min_G, h.G);
    r.max_G = std::max(r.max_G, h.G);
    const double dH = std::hypot(h.F - hs.F, h.G - hs.G);
    const double dz = (z - zs).norm();
    if ((x - xs).norm() > 1e-6 && dz > 0.0) {
      r.max_lipschitz_ratio = std::max(r.max_lipschitz_ratio, dH / dz);
      if (bounds.tau2) r.max_tau2_ratio = std::max(r.max_tau2_ratio, dH / bounds.tau2(dz));
      const double at = std::abs(h.F - hs.F / hs.G * h.G);
      if (bounds.L > 0.0) {
        r.max_effective_ratio = std::max(r.max_effective_ratio, at / (bounds.L * dz));
      } else if (at > 1e-12 * (1.0 + std::abs(h.F))) {
        r.max_effective_ratio = std::numeric_limits<double>::infinity();
      }
    }
    if (bounds.tau1) r.max_tau1_ratio = std::max(r.max_tau1_ratio, std::hypot(h.F, h.G) / bounds.tau1(z.norm()));

    int j = 0;
    while (j < n && ++idx[static_cast<std::size_t>(j)] == per_dim) idx[static_cast<std::size_t>(j++)] = 0;
    if (j == n) break;
  }
  const double slack = 1.0 + 1e-9;
  if (r.min_G < bounds.b_low / slack) r.failures.push_back("min G " + fmt(r.min_G) + " below b_low " + fmt(bounds.b_low));
  if (r.max_G > bounds.b_high * slack) r.failures.push_back("max G " + fmt(r.max_G) + " above b_high " + fmt(bounds.b_high));
  if (r.max_tau2_ratio > slack) r.failures.push_back("tau2 ratio " + fmt(r.max_tau2_ratio) + " above 1");
  if (r.max_tau1_ratio > slack) r.failures.push_back("tau1 ratio " + fmt(r.max_tau1_ratio) + " above 1");
  if (r.max_effective_ratio > slack) r.failures.push_back("effective Lipschitz ratio " + fmt(r.max_effective_ratio) + " above 1");
  r.ok = r.failures.empty();
  return r;
}

MonotonicityReport omega_monotonicity_check(const UncertaintyBounds& bounds_strong, const UncertaintyBounds& bounds_weak,
                                            int n, double c, std::size_t samples, std::uint64_t seed) {
  if (bounds_strong.b_low != bounds_weak.b_low) throw Error(Errc::invalid_bounds, "monotonicity check needs equal b_low");
  MonotonicityReport r;
  for (const OmegaSample& s : sample_omega(n, bounds_strong, c, seed, samples)) {
    ++r.checked;
    if (!in_omega(s.lambda, bounds_weak, c)) {
      r.contained = false;
      if (!r.witness) r.witness = s.lambda;
    }
  }
  return r;
}

CharpolyReport charpoly_residuals(const GainVector& gains, double b_low, const LambdaVector& lam) {
  const int n = lam.order();
  if (gains.order() != n) throw Error(Errc::arity, "gain and lambda orders differ");
  CharpolyReport r;
  for (std::size_t i = 0; i < lam.size(); ++i) {
    const double s = -lam[i];
    double p = 1.0;  // Horner from the monic top coefficient
    for (int j = n; j >= 0; --j) p = p * s + b_low * gains[static_cast<std::size_t>(j)];
    r.max_residual = std::max(r.max_residual, std::abs(p) / (1.0 + std::pow(lam[i], n + 1)));
  }
  Mat A = Mat::Zero(n + 1, n + 1);
  for (int i = 0; i < n; ++i) A(i, i + 1) = 1.0;
  for (int j = 0; j <= n; ++j) A(n, j) = -b_low * gains[static_cast<std::size_t>(j)];
  const Mat P = build_P(lam);
  Vec neg(n + 1);
  for (int j = 0; j <= n; ++j) neg(j) = -lam[static_cast<std::size_t>(j)];
  const double scale = A.norm() * P.norm();
  r.eigenvector_residual = (A * P - P * neg.asDiagonal()).norm() / scale;
  r.ok = r.eigenvector_residual <= 1e-8;
  return r;
}

XiReport observer_xi_check(const Trace& trace, const LambdaVector& lam, const GainVector& gains,
                           const PlantModel& plant, double y_star, const ObserverCertificate& cert, double epsilon,
                           double c) {
  const int n = plant.order();
  if (trace.states.empty() || trace.states.front().size() != 2 * n + 1) {
    throw Error(Errc::arity, "observer check needs an observer-mode trace");
  }
  const WCoordinates w = to_w_coordinates(trace, lam, gains, plant, y_star);
  auto xi_at = [&](std::size_t k) {
    const Vec& s = trace.states[k];
    const Vec& Y = w.Y[k];
    Vec xi(n);
    for (int i = 1; i <= n; ++i) xi(i - 1) = (Y(i) + s(n + i)) / std::pow(epsilon, n - i);
    return xi;
  };
  XiReport r;
  r.beta = observer_decay_rate(cert, epsilon);
  r.xi0 = xi_at(0).norm();
  const double head = (c * w.Y.front().norm() + std::sqrt(cert.lambda_max_q) * r.xi0) / std::sqrt(cert.lambda_min_q);
  for (std::size_t k = 0; k < trace.size(); ++k) {
    const double xn = xi_at(k).norm();
    const double bound = head * std::exp(-r.beta * trace.t[k]);
    r.worst_ratio = std::max(r.worst_ratio, xn / bound);
    if (xn > bound) ++r.violations;
    r.xi_final = xn;
  }
  r.ok = r.violations == 0 && r.beta > 0.0;
  return r;
}

std::string format_report(const std::vector<CheckRecord>& records) {
  std::ostringstream os;
  for (const CheckRecord& rec : records) {
    os << rec.name << ": " << (rec.passed ? "pass" : "FAIL") << " worst_margin=" << fmt(rec.worst_margin);
    for (const auto& [k, v] : rec.constants) os << ' ' << k << '=' << fmt(v);
    if (!rec.detail.empty()) os << " (" << rec.detail << ')';
    os << '\n';
  }
  return os.str();
}

}  // namespace epid
