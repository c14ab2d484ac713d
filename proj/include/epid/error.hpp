#pragma once

#include <stdexcept>
#include <string>

namespace epid {

enum class Errc {
  degenerate_lambda,
  invalid_bounds,
  certificate_unavailable,
  semi_global_unsupported,
  arity,
  invalid_gain,
  no_positive_definite_solution,
  evaluation,
  bounds_unknown,
  construction,
  unsupported,
  too_few_samples,
  config,
};

[[nodiscard]] const char* errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  [[nodiscard]] Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace epid
