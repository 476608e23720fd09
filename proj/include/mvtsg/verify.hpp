#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvtsg/model.hpp"

namespace mvtsg {

/// Outcome of one verification suite: number of individual checks, how many
/// failed, the worst residual observed and a bounded list of failure notes.
struct SuiteResult {
  std::string name;
  int checks = 0;
  int failures = 0;
  double worst_residual = 0.0;
  std::vector<std::string> failure_notes;  // capped at 20 entries

  bool passed() const { return failures == 0; }
  void record(bool ok, double residual, const std::string& note);
};

struct VerifyOptions {
  int games = 20;            // random instances per suite
  std::uint64_t seed = 1;    // master seed; suites derive their own streams
  int pairs_per_game = 50;   // policy pairs per game in the bound suites
  std::int64_t simulation_steps = 200000;

  /// Fault-injection hook: flips the sign of the quadratic mean-shift term
  /// inside the performance-difference suite's hand-computed identity. A
  /// healthy build must fail that suite with the flag on.
  bool flip_difference_quadratic = false;
};

/// Two-policy difference identity, library residual cross-checked against a
/// from-scratch evaluation of both sides.
SuiteResult verify_performance_difference(const VerifyOptions& options);
/// Closed-form mixing derivative against Richardson finite differences.
SuiteResult verify_performance_derivative(const VerifyOptions& options);
/// Stationarity of pi, bias-equation residual and per-state advantage balance.
SuiteResult verify_evaluator_invariants(const VerifyOptions& options);
/// Long simulated rollouts against exact eta and zeta, three standard errors.
SuiteResult verify_simulation_consistency(const VerifyOptions& options);
/// Joint trust-region lower bound on random policy pairs.
SuiteResult verify_improvement_bound(const VerifyOptions& options);
/// Per-position sequential lower bound along random update paths, plus the
/// recomposition of its gains into the joint surrogate gain.
SuiteResult verify_sequential_bound(const VerifyOptions& options);
/// Sequential advantage estimator: direct hybrid summation versus the
/// importance-ratio form.
SuiteResult verify_estimator_identity(const VerifyOptions& options);
/// Best-response limits: first-order stationarity, classification versus
/// exhaustive enumeration, and mixing-path certificates.
SuiteResult verify_classification(const VerifyOptions& options);

std::vector<SuiteResult> run_all_suites(const VerifyOptions& options);

}  // namespace mvtsg
