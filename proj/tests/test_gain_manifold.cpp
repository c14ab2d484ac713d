#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "epid/error.hpp"
#include "epid/gain_manifold.hpp"
#include "epid/random.hpp"

using namespace epid;

namespace {

// Oracle: d as the last column of P⁻¹ via a pivoted LU solve.
Vec d_by_solve(const LambdaVector& lam) {
  const Mat P = build_P(lam);
  Vec e = Vec::Zero(P.rows());
  e(e.size() - 1) = 1.0;
  return P.fullPivLu().solve(e);
}

double spectral_norm(const Mat& A) {
  Eigen::SelfAdjointEigenSolver<Mat> es(A.transpose() * A);
  return std::sqrt(es.eigenvalues().maxCoeff());
}

double charpoly_at(const GainVector& k, double s) {
  // p(s) = s^{n+1} + Σ b̲ kᵢ sⁱ by Horner.
  const int n = k.order();
  double p = 1.0;
  for (int i = n; i >= 0; --i) p = p * s + k.b_low() * k[static_cast<std::size_t>(i)];
  return p;
}

LambdaVector random_omega1(Rng& rng, int n, double lambda_n_max) {
  std::vector<double> v(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = rng.uniform(2.0 * i + 2.0, 2.0 * i + 3.0);
  const double lo = 2.0 * n + 2.0;
  v.back() = lo * std::exp(rng.uniform() * std::log(lambda_n_max / lo));
  return LambdaVector(v);
}

}  // namespace

TEST_CASE("in_omega1 examples") {
  CHECK(in_omega1(LambdaVector({2.5, 5.0})));
  CHECK(in_omega1(LambdaVector({2.5, 4.5, 7.0})));
  CHECK_FALSE(in_omega1(LambdaVector({2.5, 4.5, 5.5})));
  CHECK_FALSE(in_omega1(LambdaVector({2.0001, 5.0, 9.0})));  // λ₁ − 2 = 3 is not < 3
}

TEST_CASE("lambda vector rejects duplicates and nonpositive entries") {
  CHECK_THROWS_AS(LambdaVector({2.5, 2.5}), Error);
  CHECK_THROWS_AS(LambdaVector({2.5, 2.5 * (1 + 1e-10)}), Error);
  CHECK_NOTHROW(LambdaVector({2.5, 2.5 * (1 + 1e-8)}));
  CHECK_THROWS_AS(LambdaVector({-1.0, 2.0}), Error);
  try {
    LambdaVector({3.0, 3.0});
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate_lambda);
  }
}

TEST_CASE("build_P n=1 by hand") {
  const Mat P = build_P(LambdaVector({2.5, 5.0}));
  CHECK(P(0, 0) == doctest::Approx(-0.4));
  CHECK(P(0, 1) == doctest::Approx(-0.2));
  CHECK(P(1, 0) == 1.0);
  CHECK(P(1, 1) == 1.0);
  CHECK(12.5 * P.determinant() == doctest::Approx(-2.5));
}

TEST_CASE("compute_d fixtures") {
  const Vec d1 = compute_d(LambdaVector({2.5, 5.0}));
  CHECK(d1(0) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(d1(1) == doctest::Approx(2.0).epsilon(1e-14));

  const LambdaVector lam({2.5, 4.5, 7.0});
  const Vec d2 = compute_d(lam);
  // Closed form evaluated by hand: 2.5²/((−2)(−4.5)), 4.5²/((2)(−2.5)), 49/(4.5·2.5).
  CHECK(d2(0) == doctest::Approx(6.25 / 9.0).epsilon(1e-12));
  CHECK(d2(1) == doctest::Approx(-20.25 / 5.0).epsilon(1e-12));
  CHECK(d2(2) == doctest::Approx(49.0 / 11.25).epsilon(1e-12));
  CHECK(std::abs(d2.sum() - 1.0) < 1e-12);
  const Vec ds = d_by_solve(lam);
  CHECK((d2 - ds).norm() <= 1e-10 * ds.norm());
}

TEST_CASE("manifold algebra over sampled Omega1 for n = 1..4") {
  Rng rng(20240917);
  for (int n = 1; n <= 4; ++n) {
    const double dl = det_lower_bound(n);
    CAPTURE(n);
    for (int s = 0; s < 1000; ++s) {
      const LambdaVector lam = random_omega1(rng, n, 1e4);
      REQUIRE(in_omega1(lam));
      const Vec d = compute_d(lam);
      const Vec ds = d_by_solve(lam);
      CHECK(std::abs(d.sum() - 1.0) <= 1e-9);
      CHECK(d(n) > 0.0);
      CHECK(d(n) < std::pow(2.0 * n + 2.0, n));
      CHECK((d - ds).cwiseAbs().maxCoeff() <= 1e-10 * ds.cwiseAbs().maxCoeff());

      const Mat P = build_P(lam);
      const double det = P.determinant();
      CHECK(std::abs(det) >= dl);
      double lhs = std::pow(lam.product(), n) * det;
      double rhs = 1.0;
      for (int i = 0; i <= n; ++i)
        for (int j = i + 1; j <= n; ++j) rhs *= lam[static_cast<std::size_t>(i)] - lam[static_cast<std::size_t>(j)];
      CHECK(std::abs(lhs - rhs) <= 1e-9 * std::abs(rhs));
    }
  }
}

TEST_CASE("det_lower_bound closed form") {
  CHECK(det_lower_bound(1) == doctest::Approx(1.0 / 12.0));
  // n=2: (3/6)(1/6) / (3² · 5²)
  CHECK(det_lower_bound(2) == doctest::Approx((0.5 / 6.0) / 225.0));
}

TEST_CASE("c0_upper_bound dominates resampled Lemma-1 constants") {
  for (int n = 1; n <= 2; ++n) {
    CAPTURE(n);
    const double c = c0_upper_bound(n);
    REQUIRE(std::isfinite(c));
    Rng rng(777 + static_cast<std::uint64_t>(n));
    double worst = 0.0;
    for (int s = 0; s < 10000; ++s) {
      const LambdaVector lam = random_omega1(rng, n, 1e3);
      const Mat P = build_P(lam);
      const Mat Pinv = P.inverse();
      const Vec d = d_by_solve(lam);
      const double c1 = spectral_norm(P);
      const double c2 = c1 * spectral_norm(Pinv);
      const double c3 = std::sqrt(static_cast<double>(n)) * (2.0 * n + 1.0) * d(n);
      double c4 = 0.0;
      for (int i = 0; i < n; ++i) c4 = std::max(c4, std::abs((2.0 * n + 1.0) * n * lam.back() * d(i)));
      worst = std::max({worst, c1, c2, c3, c4});
    }
    CHECK(worst <= c);
    // The bound should not be wildly loose either.
    CHECK(c <= 1.5 * worst);
  }
}

TEST_CASE("c0_upper_bound dominates a fixed member for n = 1..4") {
  for (int n = 1; n <= 4; ++n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(2.0 * i + 2.5);
    v.push_back(2.0 * n + 3.0);
    const LambdaVector lam(v);
    const Vec d = d_by_solve(lam);
    CHECK(c0_upper_bound(n) >= std::sqrt(static_cast<double>(n)) * (2.0 * n + 1.0) * d(n));
    CHECK(c0_upper_bound(n) >= 1.0);
  }
}

TEST_CASE("lambda_to_gains by Vieta") {
  const GainVector k1 = lambda_to_gains(LambdaVector({2.5, 5.0}), 1.0);
  CHECK(k1[0] == doctest::Approx(12.5));
  CHECK(k1[1] == doctest::Approx(7.5));

  const GainVector k2 = lambda_to_gains(LambdaVector({2.5, 4.5, 7.0}), 2.0);
  CHECK(k2[0] == doctest::Approx(39.375));
  CHECK(k2[1] == doctest::Approx(30.125));
  CHECK(k2[2] == doctest::Approx(7.0));

  CHECK_THROWS_AS((void)lambda_to_gains(LambdaVector({2.5, 5.0}), 0.0), Error);

  Rng rng(5);
  for (int n = 1; n <= 4; ++n) {
    for (int s = 0; s < 200; ++s) {
      const LambdaVector lam = random_omega1(rng, n, 1e3);
      const GainVector k = lambda_to_gains(lam, 1.0);
      double sum = 0.0;
      for (double v : lam.values()) sum += v;
      CHECK(k[static_cast<std::size_t>(n)] == doctest::Approx(sum).epsilon(1e-13));
      for (double v : k.values()) CHECK(v > 0.0);
      for (double l : lam.values()) CHECK(std::abs(charpoly_at(k, -l)) / (1.0 + std::pow(l, n + 1)) <= 1e-9);
    }
  }
}

TEST_CASE("gains_to_lambda inverts lambda_to_gains") {
  const LambdaVector lam({2.5, 4.5, 7.0});
  const LambdaVector back = gains_to_lambda(lambda_to_gains(lam, 2.0));
  for (std::size_t i = 0; i < lam.size(); ++i) CHECK(back[i] == doctest::Approx(lam[i]).epsilon(1e-10));
  // s² + s + 1 has complex roots.
  CHECK_THROWS_AS((void)gains_to_lambda(GainVector({1.0, 1.0}, 1.0)), Error);
}

TEST_CASE("omega_lambda_threshold") {
  UncertaintyBounds exact{.L = 0.0, .b_low = 1.3, .b_high = 1.3};
  CHECK(omega_lambda_threshold(exact, 3, 1234.0) == 8.0);

  UncertaintyBounds b{.L = 0.1, .b_low = 1.0, .b_high = 1.0};
  CHECK(omega_lambda_threshold(b, 2, 5.0) == doctest::Approx(8.75));
  CHECK(omega_lambda_threshold(b, 4, 5.0) == doctest::Approx(10.0));

  Rng rng(99);
  for (int s = 0; s < 1000; ++s) {
    const double L0 = rng.uniform(0.0, 2.0), Lp = L0 * rng.uniform();
    const double b0 = rng.uniform(1.0, 3.0), bp = 1.0 + (b0 - 1.0) * rng.uniform();
    const double c = rng.uniform(1.0, 50.0);
    const UncertaintyBounds strong{.L = L0, .b_low = 1.0, .b_high = b0};
    const UncertaintyBounds weak{.L = Lp, .b_low = 1.0, .b_high = bp};
    CHECK(omega_lambda_threshold(strong, 2, c) >= omega_lambda_threshold(weak, 2, c));
  }

  UncertaintyBounds bad{.L = 0.1, .b_low = 2.0, .b_high = 1.0};
  CHECK_THROWS_AS((void)omega_lambda_threshold(bad, 2, 5.0), Error);
}

TEST_CASE("sample_omega is deterministic and lands in Omega") {
  const UncertaintyBounds b{.L = 0.1, .b_low = 1.0, .b_high = 2.0};
  const double c = c0_upper_bound(2);
  const auto s1 = sample_omega(2, b, c, 42, 100);
  const auto s2 = sample_omega(2, b, c, 42, 100);
  REQUIRE(s1.size() == 100);
  const double thr = omega_lambda_threshold(b, 2, c);
  for (std::size_t i = 0; i < s1.size(); ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(s1[i].lambda[j] == s2[i].lambda[j]);
      CHECK(s1[i].gains[j] == s2[i].gains[j]);
    }
    CHECK(in_omega1(s1[i].lambda));
    CHECK(s1[i].lambda.back() > thr);
    CHECK(s1[i].lambda.back() <= 10.0 * thr);
  }
  CHECK(sample_omega(2, b, c, 42, 0).empty());
  CHECK(sample_omega(2, b, c, 43, 1)[0].lambda[0] != s1[0].lambda[0]);
}

TEST_CASE("compute_alpha") {
  const UncertaintyBounds exact{.L = 0.0, .b_low = 1.0, .b_high = 1.0};
  CHECK(compute_alpha(LambdaVector({2.5, 4.5, 7.0}), exact, 5.0) == doctest::Approx(1.0));

  // Oracle: minimise the quadratic form of [[1, −m], [−m, d]] over the unit circle.
  const UncertaintyBounds b{.L = 0.1, .b_low = 1.0, .b_high = 1.0};
  const double alpha = compute_alpha(LambdaVector({2.5, 4.5, 20.0}), b, 5.0);
  const double m = 2.5, dd = 17.5;
  double lo = 0.0, hi = std::numbers::pi;
  auto form = [&](double th) {
    const double x = std::cos(th), y = std::sin(th);
    return x * x - 2.0 * m * x * y + dd * y * y;
  };
  double best = 1e300, best_th = 0.0;
  for (int i = 0; i <= 20000; ++i) {
    const double th = lo + (hi - lo) * i / 20000.0;
    if (form(th) < best) best = form(th), best_th = th;
  }
  double a = best_th - 1e-3, c = best_th + 1e-3;
  for (int it = 0; it < 200; ++it) {
    const double m1 = a + (c - a) / 3.0, m2 = c - (c - a) / 3.0;
    (form(m1) < form(m2) ? c : a) = (form(m1) < form(m2) ? m2 : m1);
  }
  const double oracle = form(0.5 * (a + c));
  CHECK(alpha == doctest::Approx(oracle).epsilon(1e-10));
  CHECK(alpha == doctest::Approx((18.5 - std::sqrt(297.25)) / 2.0).epsilon(1e-12));
  CHECK(alpha == doctest::Approx(0.629530).epsilon(1e-6));

  CHECK_THROWS_AS((void)compute_alpha(LambdaVector({2.5, 4.5, 8.0}), b, 5.0), Error);
}

TEST_CASE("alpha certifies the Lemma-2 quadratic bound on random points") {
  const UncertaintyBounds b{.L = 0.2, .b_low = 1.0, .b_high = 1.5};
  const double c = 3.0;
  const auto samples = sample_omega(3, b, c, 11, 1000);
  Rng rng(12);
  for (const auto& s : samples) {
    const double alpha = compute_alpha(s.lambda, b, c);
    CHECK(alpha > 0.0);
  }
  const auto& lam = samples.front().lambda;
  const double alpha = compute_alpha(lam, b, c);
  const double m = coupling_m(b, c), ln = lam.back();
  for (int i = 0; i < 10000; ++i) {
    const double w = std::abs(rng.normal()) * 10.0, wn = rng.normal() * 10.0;
    const double q = (m / ln - 2.0) * w * w + 2.0 * m * w * std::abs(wn) - (ln - b.L * c * c) * wn * wn;
    CHECK(q <= -alpha * (w * w + wn * wn) * (1.0 - 1e-12));
  }
}

TEST_CASE("semiglobal_bounds") {
  UncertaintyBounds b{.L = 0.0, .b_low = 1.0, .b_high = 1.0};
  CHECK_THROWS_AS((void)semiglobal_bounds(1.0, 0.0, b, 5.0), Error);

  b.tau1 = [](double r) { return r + 2.0; };
  b.tau2 = [](double r) { return r; };
  const auto sb = semiglobal_bounds(1.0, 0.0, b, 5.0);
  CHECK(sb.R0 == doctest::Approx(5.0));
  CHECK(sb.L0 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(sb.b0 == doctest::Approx(27.0));

  b.tau2 = [](double r) { return 0.7 * r; };
  const double y = 1.5;
  const auto s1 = semiglobal_bounds(1.0, y, b, 5.0);
  const auto s2 = semiglobal_bounds(40.0, y, b, 5.0);
  CHECK(s1.L0 == doctest::Approx((y + 2.0 + 1.0) * 0.7).epsilon(1e-12));
  CHECK(s2.L0 == doctest::Approx(s1.L0).epsilon(1e-12));

  const auto s0 = semiglobal_bounds(0.0, 0.0, b, 5.0);
  CHECK(s0.R0 == doctest::Approx(4.0));
}
