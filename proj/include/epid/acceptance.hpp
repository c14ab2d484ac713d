#pragma once

#include <string>
#include <vector>

namespace epid {

enum class AcceptanceLevel { quick, full };

[[nodiscard]] AcceptanceLevel parse_acceptance_level(const std::string& name);

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  double budget = 0.0;  // wall-clock limit in seconds, part of the verdict
  std::string detail;
};

// Runs the ten acceptance criteria; quick trims sample counts, full uses
// the stated ones. An empty selection runs all of them.
[[nodiscard]] std::vector<CriterionResult> run_acceptance(AcceptanceLevel level, const std::vector<int>& only = {});

// One line per criterion plus a closing summary line.
[[nodiscard]] std::string format_acceptance(const std::vector<CriterionResult>& results);

}  // namespace epid
