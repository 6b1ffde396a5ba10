#pragma once

// Randomized finite-difference suites over every differentiable op, the full
// assignment loss and the toy detector end to end.

#include "autoassign/assign.hpp"
#include "autoassign/diffcore.hpp"

#include <optional>
#include <string>
#include <vector>

namespace autoassign {

struct GradSuiteConfig {
  int seeds = 10;
  double epsilon = 1e-5;
  double unit_tolerance = 1e-4;
  double end_to_end_tolerance = 1e-3;
  bool end_to_end = true;
  AssignConfig assign;
  /// Flips the sign of this op's backward rule (negative control).
  std::optional<OpTag> fault_op;

  void validate() const;
};

struct GradCase {
  std::string suite;
  std::string name;
  int seed = 0;
  double tolerance = 0.0;
  GradCheckReport report;

  bool passed() const { return report.passed && report.max_rel_error < tolerance; }
};

struct GradSuiteSummary {
  std::string suite;
  int cases = 0;
  int failed = 0;
  double max_rel_error = 0.0;
  /// Case holding the worst coordinate.
  std::string worst_case;
  int worst_seed = 0;
  GradCheckCoordinate worst;

  bool passed() const { return failed == 0; }
};

/// One case per op and seed; outputs are contracted with fixed random weights.
std::vector<GradCase> unit_op_suite(const GradSuiteConfig& cfg);
/// Up to three objects over 20 locations, including the prior parameters.
std::vector<GradCase> loss_suite(const GradSuiteConfig& cfg);
/// Detector weights and prior on a 16x16 scene with one object.
std::vector<GradCase> end_to_end_suite(const GradSuiteConfig& cfg);

std::vector<GradCase> run_grad_suites(const GradSuiteConfig& cfg);
std::vector<GradSuiteSummary> summarize(const std::vector<GradCase>& cases);

}  // namespace autoassign
