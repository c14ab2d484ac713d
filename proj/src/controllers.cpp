#include "epid/controllers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "epid/error.hpp"

namespace epid {

double extended_pid_law(const GainVector& k, double integral, double e, const double* v) noexcept {
  const std::size_t n = k.size() - 1;
  double u = k[1] * e + k[0] * integral;
  for (std::size_t i = 2; i <= n; ++i) u += k[i] * v[i - 2];
  return u;
}

double pid_control(const ControllerState& state, double e, std::span<const double> e_derivs) {
  if (state.mode != ControllerMode::state_derivative_feedback) throw Error(Errc::arity, "pid_control needs state feedback mode");
  const int n = state.gains.order();
  if (static_cast<int>(e_derivs.size()) != n - 1) {
    throw Error(Errc::arity, "expected " + std::to_string(n - 1) + " error derivatives, got " + std::to_string(e_derivs.size()));
  }
  return extended_pid_law(state.gains, state.integral, e, e_derivs.data());
}

double observer_pid_control(const ControllerState& state, double e, std::span<const double> zhat) {
  if (state.mode != ControllerMode::observer_based) throw Error(Errc::arity, "observer_pid_control needs observer mode");
  const int n = state.gains.order();
  if (static_cast<int>(zhat.size()) != n) {
    throw Error(Errc::arity, "expected " + std::to_string(n) + " observer states, got " + std::to_string(zhat.size()));
  }
  return extended_pid_law(state.gains, state.integral, e, zhat.data() + 1);
}

Vec hurwitz_beta(int n) {
  if (n < 1) throw Error(Errc::arity, "n must be >= 1");
  Vec beta(n);
  double c = 1.0;
  for (int i = 1; i <= n; ++i) {
    c = c * (n - i + 1) / i;
    beta(i - 1) = c;
  }
  return beta;
}

Mat observer_companion(const Vec& beta) {
  const Eigen::Index n = beta.size();
  if (n < 1) throw Error(Errc::arity, "beta must be nonempty");
  Mat B = Mat::Zero(n, n);
  B.col(0) = -beta;
  for (Eigen::Index i = 0; i + 1 < n; ++i) B(i, i + 1) = 1.0;
  return B;
}

bool is_hurwitz(const Mat& A) {
  Eigen::EigenSolver<Mat> es(A, false);
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    if (!(es.eigenvalues()(i).real() < 0.0)) return false;
  }
  return true;
}

void ObserverConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error(Errc::invalid_gain, "observer epsilon must be positive");
  if (!is_hurwitz(observer_companion(beta))) {
    throw Error(Errc::no_positive_definite_solution, "observer beta is not Hurwitz");
  }
  if (zhat0 && zhat0->size() != beta.size()) throw Error(Errc::arity, "zhat0 length must match beta");
}

void observer_derivative(const ObserverConfig& cfg, ConstVecRef zhat, double e, VecRef out) {
  if (!(cfg.epsilon > 0.0)) throw Error(Errc::invalid_gain, "observer epsilon must be positive");
  const Eigen::Index n = cfg.beta.size();
  if (zhat.size() != n || out.size() != n) throw Error(Errc::arity, "observer state length must match beta");
  const double innov = e - zhat(0);
  double scale = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    scale /= cfg.epsilon;
    const double chain = i + 1 < n ? zhat(i + 1) : 0.0;
    out(i) = chain + cfg.beta(i) * scale * innov;
  }
}

Vec observer_derivative(const ObserverConfig& cfg, ConstVecRef zhat, double e) {
  Vec out(cfg.beta.size());
  observer_derivative(cfg, zhat, e, out);
  return out;
}

Mat solve_lyapunov_Q(const Vec& beta) {
  const Mat B = observer_companion(beta);
  if (!is_hurwitz(B)) throw Error(Errc::no_positive_definite_solution, "observer beta is not Hurwitz");
  const int n = static_cast<int>(B.rows());
  // Unknowns Q(i, j), i ≤ j; one equation per (r ≤ c) entry of BᵀQ + QB + I.
  auto index = [n](int i, int j) {
    if (i > j) std::swap(i, j);
    return i * n - i * (i - 1) / 2 + (j - i);
  };
  const int m = n * (n + 1) / 2;
  Mat A = Mat::Zero(m, m);
  Vec rhs = Vec::Zero(m);
  for (int r = 0; r < n; ++r) {
    for (int c = r; c < n; ++c) {
      const int row = index(r, c);
      for (int k = 0; k < n; ++k) {
        A(row, index(k, c)) += B(k, r);  // (BᵀQ)_rc = Σ_k B_kr Q_kc
        A(row, index(r, k)) += B(k, c);  // (QB)_rc = Σ_k Q_rk B_kc
      }
      rhs(row) = r == c ? -1.0 : 0.0;
    }
  }
  const Vec q = A.fullPivLu().solve(rhs);
  Mat Q(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) Q(i, j) = q(index(i, j));
  Eigen::LLT<Mat> llt(Q);
  if (llt.info() != Eigen::Success) throw Error(Errc::no_positive_definite_solution, "Lyapunov solution is not positive definite");
  return Q;
}

ObserverCertificate epsilon_star(const LambdaVector& lam, const GainVector& gains, const UncertaintyBounds& bounds,
                                 double c, const Vec& beta) {
  const int n = lam.order();
  if (gains.order() != n || beta.size() != n) throw Error(Errc::arity, "lambda, gains and beta orders differ");
  ObserverCertificate cert;
  cert.alpha = compute_alpha(lam, bounds, c);  // throws certificate_unavailable outside Ω_Λ
  cert.Q = solve_lyapunov_Q(beta);
  Eigen::SelfAdjointEigenSolver<Mat> es(cert.Q);
  cert.lambda_min_q = es.eigenvalues().minCoeff();
  cert.lambda_max_q = es.eigenvalues().maxCoeff();
  double kmax = 0.0;
  for (int i = 2; i <= n; ++i) kmax = std::max(kmax, gains[static_cast<std::size_t>(i)]);
  const double sn = std::sqrt(static_cast<double>(n));
  cert.c1 = sn * bounds.b_high * c * kmax +
            2.0 * cert.lambda_max_q *
                (bounds.L * c + bounds.b_high * std::sqrt(n + 1.0) * lam.back() / bounds.b_low);
  cert.c2 = 2.0 * sn * bounds.b_high * cert.lambda_max_q * kmax;
  cert.epsilon_star = epsilon_star_from_constants(cert.c1, cert.c2, cert.alpha);
  cert.beta_rate = observer_decay_rate(cert, 0.9 * cert.epsilon_star);
  return cert;
}

double epsilon_star_from_constants(double c1, double c2, double alpha) {
  if (!(alpha > 0.0)) throw Error(Errc::certificate_unavailable, "alpha must be positive");
  return std::min(1.0, 1.0 / (c2 + c1 * c1 / (2.0 * alpha)));
}

double observer_decay_rate(const ObserverCertificate& cert, double epsilon) {
  if (!(epsilon > 0.0) || !(epsilon < cert.epsilon_star)) return 0.0;
  const double a = cert.alpha;
  const double d = 1.0 / epsilon - cert.c2;
  const double b = 0.5 * cert.c1;
  const double lmax = 0.5 * ((a + d) + std::hypot(a - d, 2.0 * b));
  const double mu = (a * d - b * b) / lmax;
  if (!(mu > 0.0)) return 0.0;
  return mu / (2.0 * std::max(0.5, cert.lambda_max_q));
}

}  // namespace epid
