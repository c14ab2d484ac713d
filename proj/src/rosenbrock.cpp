#include "rosenbrock.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

// The consistency re-check after each LU solve fails spuriously on the
// near-singular systems met close to a finite escape; non-finite results are
// rejected by the caller instead.
#ifndef BOOST_UBLAS_TYPE_CHECK
#define BOOST_UBLAS_TYPE_CHECK 0
#endif
#include <boost/numeric/odeint/stepper/rosenbrock4.hpp>
#include <boost/numeric/odeint/stepper/rosenbrock4_controller.hpp>

namespace epid::detail {

namespace odeint = boost::numeric::odeint;
using UVec = boost::numeric::ublas::vector<double>;
using UMat = boost::numeric::ublas::matrix<double>;

struct RosenbrockStepper::Impl {
  std::size_t dim;
  Rhs rhs;
  Jac jac;
  odeint::rosenbrock4_controller<odeint::rosenbrock4<double>> controller;
  UVec in, out;
  std::vector<double> xp, fp, fm, jbuf;

  Impl(std::size_t d, double abs_tol, double rel_tol, Rhs f, Jac j)
      : dim(d), rhs(std::move(f)), jac(std::move(j)), controller(abs_tol, rel_tol), in(d), out(d), xp(d), fp(d),
        fm(d), jbuf(d * d) {}

  // The field is autonomous, so the time derivative is zero.
  void jacobian(const UVec& s, UMat& J, UVec& dfdt) {
    for (std::size_t i = 0; i < dim; ++i) dfdt[i] = 0.0;
    std::copy(s.begin(), s.end(), xp.begin());
    if (jac) {
      jac(xp.data(), jbuf.data());
      for (std::size_t j = 0; j < dim; ++j)
        for (std::size_t i = 0; i < dim; ++i) J(i, j) = jbuf[j * dim + i];
      return;
    }
    for (std::size_t j = 0; j < dim; ++j) {
      const double h = 6e-6 * std::max(1.0, std::abs(s[j]));
      const double orig = xp[j];
      xp[j] = orig + h;
      rhs(xp.data(), fp.data());
      xp[j] = orig - h;
      rhs(xp.data(), fm.data());
      xp[j] = orig;
      for (std::size_t i = 0; i < dim; ++i) J(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
  }
};

RosenbrockStepper::RosenbrockStepper(std::size_t dim, double abs_tol, double rel_tol, Rhs rhs, Jac jac)
    : impl_(std::make_unique<Impl>(dim, abs_tol, rel_tol, std::move(rhs), std::move(jac))) {}

RosenbrockStepper::~RosenbrockStepper() = default;

bool RosenbrockStepper::try_step(const double* x, double t, double h, double* out, double& h_next) {
  Impl& m = *impl_;
  std::copy(x, x + m.dim, m.in.begin());
  auto sys = [&m](const UVec& s, UVec& ds, double) { m.rhs(&s[0], &ds[0]); };
  auto jac = [&m](const UVec& s, UMat& J, double, UVec& dfdt) { m.jacobian(s, J, dfdt); };
  double tt = t;
  h_next = h;
  try {
    const auto res = m.controller.try_step(std::make_pair(sys, jac), m.in, tt, m.out, h_next);
    std::copy(m.out.begin(), m.out.end(), out);
    return res == odeint::success;
  } catch (const boost::numeric::ublas::internal_logic&) {
    h_next = 0.5 * h;
    return false;
  }
}

}  // namespace epid::detail
