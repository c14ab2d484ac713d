#include "epid/gain_manifold.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <mutex>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "epid/error.hpp"
#include "epid/random.hpp"

namespace epid {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::degenerate_lambda: return "degenerate-lambda";
    case Errc::invalid_bounds: return "invalid-bounds";
    case Errc::certificate_unavailable: return "certificate-unavailable";
    case Errc::semi_global_unsupported: return "semi-global-unsupported";
    case Errc::arity: return "arity";
    case Errc::invalid_gain: return "invalid-gain";
    case Errc::no_positive_definite_solution: return "no-positive-definite-solution";
    case Errc::evaluation: return "evaluation";
    case Errc::bounds_unknown: return "bounds-unknown";
    case Errc::construction: return "construction";
    case Errc::unsupported: return "unsupported";
    case Errc::too_few_samples: return "too-few-samples";
    case Errc::config: return "config";
  }
  return "unknown";
}

namespace {

constexpr double kDistinctTol = 1e-9;

void require_distinct(std::span<const double> v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      const double scale = std::max(std::abs(v[i]), std::abs(v[j]));
      if (std::abs(v[i] - v[j]) <= kDistinctTol * scale) {
        throw Error(Errc::degenerate_lambda, "entries " + std::to_string(i) + " and " + std::to_string(j) +
                                                 " coincide (" + std::to_string(v[i]) + ")");
      }
    }
  }
}

}  // namespace

LambdaVector::LambdaVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.size() < 2) throw Error(Errc::arity, "lambda needs n+1 >= 2 entries");
  for (double v : values_) {
    if (!std::isfinite(v) || v <= 0.0) throw Error(Errc::degenerate_lambda, "lambda entries must be finite and positive");
  }
  require_distinct(values_);
}

double LambdaVector::product() const {
  double p = 1.0;
  for (double v : values_) p *= v;
  return p;
}

GainVector::GainVector(std::vector<double> k, double b_low) : k_(std::move(k)), b_low_(b_low) {
  if (k_.size() < 2) throw Error(Errc::arity, "gain vector needs n+1 >= 2 entries");
  if (!(b_low_ > 0.0)) throw Error(Errc::invalid_bounds, "b_low must be positive");
  for (double v : k_) {
    if (!std::isfinite(v)) throw Error(Errc::invalid_gain, "gains must be finite");
  }
}

void UncertaintyBounds::validate() const {
  if (!(b_low > 0.0)) throw Error(Errc::invalid_bounds, "b_low must be positive");
  if (!(b_high >= b_low)) throw Error(Errc::invalid_bounds, "b_high must be >= b_low");
  if (!(L >= 0.0) || !std::isfinite(L)) throw Error(Errc::invalid_bounds, "L must be finite and nonnegative");
  auto check_monotone = [](const ScalarFn& fn, const char* name) {
    if (!fn) return;
    double prev = fn(0.0);
    for (int k = -6; k <= 6; ++k) {
      for (double m : {1.0, 2.0, 5.0}) {
        const double r = m * std::pow(10.0, k);
        const double v = fn(r);
        if (v < prev - 1e-12 * std::max(1.0, std::abs(prev))) {
          throw Error(Errc::invalid_bounds, std::string(name) + " is not nondecreasing near r=" + std::to_string(r));
        }
        prev = v;
      }
    }
  };
  check_monotone(tau1, "tau1");
  check_monotone(tau2, "tau2");
}

bool in_omega1(const LambdaVector& lam) {
  const int n = lam.order();
  for (int i = 0; i < n; ++i) {
    const double s = lam[static_cast<std::size_t>(i)] - 2.0 * i;
    if (!(s > 2.0 && s < 3.0)) return false;
  }
  return lam.back() > 2.0 * n + 2.0;
}

Mat build_P(const LambdaVector& lam) {
  const int n = lam.order();
  Mat P(n + 1, n + 1);
  for (int j = 0; j <= n; ++j) {
    const double inv = -1.0 / lam[static_cast<std::size_t>(j)];
    double v = 1.0;
    for (int r = n; r >= 0; --r) {
      P(r, j) = v;
      v *= inv;
    }
  }
  return P;
}

Vec compute_d(const LambdaVector& lam) {
  const int n = lam.order();
  Vec d(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double li = lam[static_cast<std::size_t>(i)];
    // λᵢⁿ / Π_{j≠i}(λᵢ − λ_j), accumulated as a product of ratios to avoid overflow.
    double v = 1.0;
    for (int j = 0; j <= n; ++j) {
      if (j != i) v *= li / (li - lam[static_cast<std::size_t>(j)]);
    }
    d(i) = v;
  }
  return d;
}

double det_lower_bound(int n) {
  if (n < 1) throw Error(Errc::arity, "n must be >= 1");
  // |det P| = Π_{i<j<n}|λᵢ−λ_j| / Π_{i<n}λᵢⁿ · Π_{i<n}(1 − λᵢ/λ_n); on Ω₁ every
  // gap in the first product exceeds 1, λᵢ < 2i+3 and λ_n > 2n+2.
  double v = 1.0;
  for (int i = 0; i < n; ++i) {
    v *= (2.0 * n - 2.0 * i - 1.0) / (2.0 * n + 2.0);
    v /= std::pow(2.0 * i + 3.0, n);
  }
  return v;
}

ManifoldConstants manifold_constants(const LambdaVector& lam) {
  ManifoldConstants mc;
  mc.P = build_P(lam);
  mc.d = compute_d(lam);
  mc.c0_upper = c0_upper_bound(lam.order());
  mc.det_lower = det_lower_bound(lam.order());
  return mc;
}

namespace {

struct Lemma1Terms {
  std::array<double, 4> c{};  // c1, c2, c3, c4 (max over i < n)
};

Lemma1Terms lemma1_terms(const std::vector<double>& lam) {
  const int n = static_cast<int>(lam.size()) - 1;
  const LambdaVector lv(lam);
  const Mat P = build_P(lv);
  const Vec d = compute_d(lv);
  Eigen::JacobiSVD<Mat> svd(P);
  const auto& s = svd.singularValues();
  Lemma1Terms t;
  t.c[0] = s(0);
  t.c[1] = s(0) / s(n);
  t.c[2] = std::sqrt(static_cast<double>(n)) * (2.0 * n + 1.0) * d(n);
  double c4 = 0.0;
  for (int i = 0; i < n; ++i) c4 = std::max(c4, std::abs((2.0 * n + 1.0) * n * lam[static_cast<std::size_t>(n)] * d(i)));
  t.c[3] = c4;
  return t;
}

// Bounds on ‖P‖ and ‖P‖‖P⁻¹‖ valid for every λ_n ≥ cutoff, given the
// compact coordinates. P differs from its λ_n → ∞ limit only in the last
// column, by a vector of norm δ ≤ Σ_k cutoff^{-2k} (square-rooted).
std::array<double, 2> tail_bounds(std::vector<double> lam, double cutoff) {
  const int n = static_cast<int>(lam.size()) - 1;
  lam.back() = cutoff;
  Mat Pinf = build_P(LambdaVector(lam));
  Pinf.col(n).setZero();
  Pinf(n, n) = 1.0;
  double delta2 = 0.0;
  for (int k = 1; k <= n; ++k) delta2 += std::pow(cutoff, -2.0 * k);
  const double delta = std::sqrt(delta2);
  Eigen::JacobiSVD<Mat> svd(Pinf);
  const auto& s = svd.singularValues();
  const double pn = s(0) + delta;
  const double inv = 1.0 / s(n);
  if (delta * inv >= 1.0) return {pn, std::numeric_limits<double>::infinity()};
  return {pn, pn * inv / (1.0 - delta * inv)};
}

C0Breakdown compute_c0(int n) {
  constexpr double kCutoff = 1e6;
  constexpr double kSafety = 1.05;
  const int per_dim = n <= 2 ? 13 : (n == 3 ? 9 : 7);
  constexpr int kSweep = 48;

  const double lo_n = 2.0 * n + 2.0;
  auto clamp_point = [&](std::vector<double>& lam) {
    for (int i = 0; i < n; ++i) lam[static_cast<std::size_t>(i)] = std::clamp(lam[static_cast<std::size_t>(i)], 2.0 * i + 2.0, 2.0 * i + 3.0);
    lam.back() = std::clamp(lam.back(), lo_n * (1.0 + 1e-12), kCutoff);
  };

  std::array<double, 4> best{};
  std::array<std::vector<double>, 4> argbest;
  std::array<double, 2> tail{};

  std::vector<int> idx(static_cast<std::size_t>(n), 0);
  std::vector<double> lam(static_cast<std::size_t>(n) + 1);
  const double log_lo = std::log(lo_n), log_hi = std::log(kCutoff);
  while (true) {
    for (int i = 0; i < n; ++i) {
      lam[static_cast<std::size_t>(i)] = 2.0 * i + 2.0 + static_cast<double>(idx[static_cast<std::size_t>(i)]) / (per_dim - 1);
    }
    for (int s = 0; s <= kSweep; ++s) {
      lam.back() = std::exp(log_lo + (log_hi - log_lo) * s / kSweep);
      if (s == 0) lam.back() = lo_n * (1.0 + 1e-12);
      const Lemma1Terms t = lemma1_terms(lam);
      for (int k = 0; k < 4; ++k) {
        if (t.c[static_cast<std::size_t>(k)] > best[static_cast<std::size_t>(k)]) {
          best[static_cast<std::size_t>(k)] = t.c[static_cast<std::size_t>(k)];
          argbest[static_cast<std::size_t>(k)] = lam;
        }
      }
    }
    const auto tb = tail_bounds(lam, kCutoff);
    tail[0] = std::max(tail[0], tb[0]);
    tail[1] = std::max(tail[1], tb[1]);

    int pos = 0;
    while (pos < n && ++idx[static_cast<std::size_t>(pos)] == per_dim) idx[static_cast<std::size_t>(pos++)] = 0;
    if (pos == n) break;
  }

  // Pattern search from the best grid point of each constant, inside the box.
  for (int k = 0; k < 4; ++k) {
    std::vector<double> x = argbest[static_cast<std::size_t>(k)];
    double fx = best[static_cast<std::size_t>(k)];
    double step = 0.5 / (per_dim - 1);
    while (step > 1e-7) {
      bool improved = false;
      for (int i = 0; i <= n; ++i) {
        for (double sgn : {1.0, -1.0}) {
          std::vector<double> y = x;
          if (i < n) {
            y[static_cast<std::size_t>(i)] += sgn * step;
          } else {
            y.back() *= std::exp(sgn * step * (log_hi - log_lo) / kSweep * (per_dim - 1));
          }
          clamp_point(y);
          const double fy = lemma1_terms(y).c[static_cast<std::size_t>(k)];
          if (fy > fx) {
            fx = fy;
            x = std::move(y);
            improved = true;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    best[static_cast<std::size_t>(k)] = fx;
  }

  C0Breakdown b;
  b.n = n;
  b.lambda_cutoff = kCutoff;
  b.safety = kSafety;
  // c3 and c4 terms are decreasing in λ_n beyond the cutoff, so the swept maxima cover the tail.
  b.c1 = kSafety * std::max(best[0], tail[0]);
  b.c2 = kSafety * std::max(best[1], tail[1]);
  b.c3 = kSafety * best[2];
  b.c4 = kSafety * best[3];
  b.bound = std::max({b.c1, b.c2, b.c3, b.c4});
  return b;
}

}  // namespace

C0Breakdown c0_breakdown(int n) {
  if (n < 1) throw Error(Errc::arity, "n must be >= 1");
  static std::mutex mu;
  static std::map<int, C0Breakdown> cache;
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(n); it != cache.end()) return it->second;
  }
  C0Breakdown b = compute_c0(n);
  std::lock_guard lock(mu);
  return cache.emplace(n, b).first->second;
}

double c0_upper_bound(int n) { return c0_breakdown(n).bound; }

GainVector lambda_to_gains(const LambdaVector& lam, double b_low) {
  if (!(b_low > 0.0)) throw Error(Errc::invalid_bounds, "b_low must be positive");
  const std::size_t m = lam.size();
  // coeff[i] multiplies sⁱ in Π(s + λ_j).
  std::vector<double> coeff(m + 1, 0.0);
  coeff[0] = 1.0;
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = j + 1; i > 0; --i) coeff[i] = coeff[i - 1] + lam[j] * coeff[i];
    coeff[0] *= lam[j];
  }
  std::vector<double> k(m);
  for (std::size_t i = 0; i < m; ++i) k[i] = coeff[i] / b_low;
  return GainVector(std::move(k), b_low);
}

LambdaVector gains_to_lambda(const GainVector& gains) {
  const int n = gains.order();
  const int dim = n + 1;
  Mat A = Mat::Zero(dim, dim);
  for (int i = 0; i + 1 < dim; ++i) A(i, i + 1) = 1.0;
  for (int i = 0; i < dim; ++i) A(dim - 1, i) = -gains.b_low() * gains[static_cast<std::size_t>(i)];
  Eigen::EigenSolver<Mat> es(A, false);
  std::vector<double> lam;
  for (int i = 0; i < dim; ++i) {
    const std::complex<double> r = es.eigenvalues()(i);
    if (std::abs(r.imag()) > 1e-9 * std::max(1.0, std::abs(r)) || !(r.real() < 0.0)) {
      throw Error(Errc::degenerate_lambda, "closed-loop roots are not real and negative");
    }
    lam.push_back(-r.real());
  }
  std::sort(lam.begin(), lam.end());
  return LambdaVector(std::move(lam));
}

double coupling_m(const UncertaintyBounds& bounds, double c) {
  return bounds.L * c * c + (bounds.b_high - bounds.b_low) * c / bounds.b_low;
}

double omega_lambda_threshold(const UncertaintyBounds& bounds, int n, double c) {
  bounds.validate();
  const double m = coupling_m(bounds, c);
  return std::max(2.0 * n + 2.0, m * m + bounds.L * c * c);
}

bool in_omega(const LambdaVector& lam, const UncertaintyBounds& bounds, double c) {
  return in_omega1(lam) && lam.back() > omega_lambda_threshold(bounds, lam.order(), c);
}

std::vector<OmegaSample> sample_omega(int n, const UncertaintyBounds& bounds, double c, std::uint64_t seed,
                                      std::size_t count, double upper_factor) {
  if (n < 1) throw Error(Errc::arity, "n must be >= 1");
  if (!(upper_factor > 1.0)) throw Error(Errc::invalid_bounds, "upper_factor must exceed 1");
  const double thr = omega_lambda_threshold(bounds, n, c);
  Rng rng(seed);
  std::vector<OmegaSample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<double> lam(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i < n; ++i) lam[static_cast<std::size_t>(i)] = rng.uniform(2.0 * i + 2.0, 2.0 * i + 3.0);
    double ln = thr * std::exp(rng.uniform() * std::log(upper_factor));
    if (!(ln > thr)) ln = std::nextafter(thr, std::numeric_limits<double>::infinity());
    lam.back() = ln;
    LambdaVector lv(std::move(lam));
    GainVector k = lambda_to_gains(lv, bounds.b_low);
    out.push_back(OmegaSample{std::move(lv), std::move(k)});
  }
  return out;
}

double compute_alpha(const LambdaVector& lam, const UncertaintyBounds& bounds, double c) {
  if (!in_omega(lam, bounds, c)) {
    throw Error(Errc::certificate_unavailable, "lambda is outside Omega_Lambda for the given bounds");
  }
  const double m = coupling_m(bounds, c);
  const double a = 1.0;
  const double d = lam.back() - bounds.L * c * c;
  // Smallest eigenvalue of [[a, −m], [−m, d]] as det / λ_max, which avoids
  // cancellation when d is huge.
  const double lmax = 0.5 * ((a + d) + std::hypot(a - d, 2.0 * m));
  return (a * d - m * m) / lmax;
}

SemiGlobalBounds semiglobal_bounds(double R, double y_star, const UncertaintyBounds& bounds, double c) {
  if (!bounds.has_tau()) throw Error(Errc::semi_global_unsupported, "tau1 and tau2 are required");
  if (!(R >= 0.0)) throw Error(Errc::invalid_bounds, "R must be nonnegative");
  bounds.validate();
  const double ay = std::abs(y_star);
  SemiGlobalBounds sb;
  sb.R0 = bounds.tau1(R) + ay + bounds.tau1(ay);
  const double factor = (bounds.tau1(ay) + bounds.b_low) / bounds.b_low;

  // Sup of τ₂(ρ)/ρ over (0, c·R₀]: the trajectory bound ‖z(t) − z*‖ ≤ c·R₀ is
  // what the Lipschitz estimate is applied on.
  constexpr int kGrid = 1000;
  const double hi = std::max(c * sb.R0, 1e-300);
  const double lo = hi * 1e-12;
  double sup = 0.0;
  std::array<double, 3> smallest{};
  for (int i = 0; i < kGrid; ++i) {
    const double rho = lo * std::pow(hi / lo, static_cast<double>(i) / (kGrid - 1));
    const double ratio = bounds.tau2(rho) / rho;
    if (!std::isfinite(ratio)) throw Error(Errc::semi_global_unsupported, "tau2(rho)/rho is not finite");
    sup = std::max(sup, ratio);
    if (i < 3) smallest[static_cast<std::size_t>(i)] = ratio;
  }
  sb.limsup_at_zero = std::max({smallest[0], smallest[1], smallest[2]});
  sup = std::max(sup, sb.limsup_at_zero);
  sb.L0 = factor * sup;
  sb.b0 = bounds.tau1(c * sb.R0 + ay);
  return sb;
}

}  // namespace epid
