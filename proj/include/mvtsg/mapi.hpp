#pragma once

#include <cstdint>
#include <vector>

#include "mvtsg/chain.hpp"
#include "mvtsg/model.hpp"

namespace mvtsg {

enum class TieRule { keep_current, lowest_index };

/// One trace row: the exact evaluation of the joint policy after the given
/// agent's update. The first row (outer 0, inner 0, agent -1) records the
/// initial policy.
struct SweepRecord {
  int outer = 0;
  int inner = 0;
  int agent = -1;
  double eta = 0.0;
  double zeta = 0.0;
  double j_value = 0.0;
  int changed_states = 0;
};

struct SweepTrace {
  std::vector<SweepRecord> iterations;
  std::vector<std::vector<int>> permutations;  // one agent order per outer sweep
  bool converged = false;
  DeterministicPolicy final_policy;
};

/// Expected advantage of each of one agent's actions under the other agents'
/// current policies: out(s, a_i) = E_{a_-i ~ policy_-i}[table(s, (a_i, a_-i))].
Eigen::MatrixXd expected_advantage(const TsgModel& model, const DeterministicPolicy& policy,
                                   int agent, const Eigen::MatrixXd& table);
Eigen::MatrixXd expected_advantage(const TsgModel& model, const JointPolicy& policy, int agent,
                                   const Eigen::MatrixXd& table);

/// Per-state argmax of the expected advantage for one agent. keep_current
/// retains the agent's current action unless an alternative beats it by
/// tol.switch_margin; among non-current tied maxima the lowest index wins.
/// eval must be the exact evaluation of `current`.
std::vector<int> best_response_update(const TsgModel& model, const DeterministicPolicy& current,
                                      int agent, const PolicyEval& eval,
                                      TieRule tie_rule = TieRule::keep_current,
                                      const Tolerances& tol = {});

/// Sequential best-response iteration: each outer sweep draws a fresh random
/// agent permutation, then updates agents one at a time against exact
/// evaluations. Terminates when a full sweep changes nothing (converged) or
/// after max_outer sweeps (converged = false; not an error).
SweepTrace run_mv_mapi(const TsgModel& model, const DeterministicPolicy& initial,
                       std::uint64_t seed, int max_outer = 100, const Tolerances& tol = {});

/// Max over agents, states and single-action deviations of the expected
/// advantage; the policy is first-order stationary iff that max is at most
/// tol.stationarity.
struct StationarityCheck {
  bool stationary = false;
  double worst_violation = 0.0;
};
StationarityCheck check_first_order_stationary(const TsgModel& model,
                                               const DeterministicPolicy& policy,
                                               const Tolerances& tol = {});
StationarityCheck check_first_order_stationary(const TsgModel& model, const JointPolicy& policy,
                                               const Tolerances& tol = {});

enum class StationaryClass {
  strict_local_ne,        // no zero-derivative deviations anywhere
  local_ne_nonstrict,     // deviations exist, every witness provably eta-equal
  saddle_escapable,       // some witness changes eta (J can be improved)
  unclassified_boundary,  // enumeration or evaluation budget hit first
};

/// A zero-derivative alternative policy for one agent.
struct Witness {
  int agent = -1;
  std::vector<int> action;      // per-state map for that agent
  bool eta_evaluated = false;   // false when certified equal without a solve
  double eta = 0.0;             // valid when eta_evaluated
  double j_value = 0.0;         // valid when eta_evaluated
  bool eta_mismatch = false;
};

struct StationaryReport {
  DeterministicPolicy policy;
  StationaryClass classification = StationaryClass::strict_local_ne;
  std::vector<Witness> zero_derivative_witnesses;  // enumerated subset
  std::vector<Witness> eta_mismatch_witnesses;
  std::uint64_t pruned_set_size = 0;  // |D| summed over agents, saturating
  bool truncated = false;             // witness cap or evaluation budget hit
  double eta_base = 0.0;
  double j_base = 0.0;
};

/// Resource limits for witness enumeration. Deviations whose reward and
/// transition rows equal the current action's rows (given the others' fixed
/// actions) are certified eta-equal without an evaluation, so games whose
/// ties all come from duplicate actions classify without any extra solves.
struct ClassifyLimits {
  std::uint64_t witness_cap_per_agent = 10000;
  std::uint64_t eta_evaluation_budget = 512;
};

/// Classifies a first-order stationary deterministic policy per the
/// zero-derivative witness criterion. Throws PreconditionError if the policy
/// is not stationary.
StationaryReport classify_stationary_point(const TsgModel& model,
                                           const DeterministicPolicy& policy,
                                           const ClassifyLimits& limits = {},
                                           const Tolerances& tol = {});

struct ModifiedRunResult {
  SweepTrace trace;  // records of all phases, concatenated
  StationaryReport report;
  int restarts = 0;
  std::vector<std::size_t> restart_record_offsets;  // index into trace.iterations
};

/// Alternates best-response runs with stationary-point classification,
/// restarting from the best improving witness whenever the point is
/// escapable. A restart requires a measured J gain over tol.escape_min_gain.
ModifiedRunResult run_modified_mv_mapi(const TsgModel& model, const DeterministicPolicy& initial,
                                       std::uint64_t seed, int max_restarts = 16,
                                       int max_outer = 100, const ClassifyLimits& limits = {},
                                       const Tolerances& tol = {});

}  // namespace mvtsg
