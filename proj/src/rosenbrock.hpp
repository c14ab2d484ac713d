#pragma once

#include <cstddef>
#include <functional>
#include <memory>

namespace epid::detail {

// Controlled Rosenbrock (order 4) step. Uses the supplied Jacobian when
// given, central differences of rhs otherwise.
// Lives in its own translation unit: the uBLAS containers it is built on do
// not compile as C++20, so this file is compiled as C++17 and exposes only
// plain pointers.
class RosenbrockStepper {
 public:
  using Rhs = std::function<void(const double* x, double* dxdt)>;
  using Jac = std::function<void(const double* x, double* J_col_major)>;

  RosenbrockStepper(std::size_t dim, double abs_tol, double rel_tol, Rhs rhs, Jac jac = {});
  ~RosenbrockStepper();
  RosenbrockStepper(const RosenbrockStepper&) = delete;
  RosenbrockStepper& operator=(const RosenbrockStepper&) = delete;

  // Attempts a step of size h from (x, t). On acceptance out holds the new
  // state; h_next is the controller's proposal either way.
  bool try_step(const double* x, double t, double h, double* out, double& h_next);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace epid::detail
