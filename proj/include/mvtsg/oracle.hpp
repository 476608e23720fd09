#pragma once

#include <cstdint>
#include <vector>

#include "mvtsg/chain.hpp"
#include "mvtsg/model.hpp"

namespace mvtsg {

/// Exhaustive ground truth over all deterministic joint policies.
struct EnumerationResult {
  double global_max_j = 0.0;
  DeterministicPolicy global_argmax;
  /// Policies where no single agent's deterministic unilateral deviation
  /// (over that agent's whole per-state map) raises J.
  std::vector<DeterministicPolicy> ne_set;
  /// Max Kemeny constant over all deterministic policies.
  double kemeny_star = 0.0;

  struct Row {
    DeterministicPolicy policy;
    double j_value, eta, zeta;
  };
  /// Full listing, populated only on request.
  std::vector<Row> table;
};

/// Evaluates every deterministic joint policy exactly. Throws CapacityError
/// beyond the enumeration cap.
EnumerationResult exhaustive_search(
    const TsgModel& model, bool keep_table = false,
    std::uint64_t cap = DeterministicPolicyEnumerator::kDefaultEnumerationCap,
    const Tolerances& tol = {});

/// Seeded chain rollout from state 0.
struct SimulationResult {
  double eta_hat = 0.0;
  double zeta_hat = 0.0;  // time-average squared deviation from eta_hat (two-pass)
  std::vector<double> rewards;  // populated only when requested
};

SimulationResult simulate(const TsgModel& model, const JointPolicy& policy, std::int64_t steps,
                          std::uint64_t seed, bool keep_rewards = false);

/// Standard error of the mean of an autocorrelated series via batch means.
double batch_means_se(const std::vector<double>& values, int num_batches = 1000);

/// One-sided Richardson estimate of dJ(mix(mu, direction, delta))/d delta at
/// delta = 0: with D(x) = (J(mix(x)) - J(mu))/x, returns 2 D(h/2) - D(h),
/// which cancels the O(h) error term of the one-sided quotient.
double finite_difference_derivative(const TsgModel& model, const JointPolicy& mu,
                                    const JointPolicy& direction, double h,
                                    const Tolerances& tol = {});

/// Finite certificate for the local-NE condition: for every agent and every
/// deterministic deviation of that agent, J along the mixing path at
/// delta in {delta_bar k / grid} never exceeds J(policy) + 1e-10.
/// Covers deterministic directions only; stochastic deviations are dominated
/// at first order because the state-wise expected advantage is linear in the
/// deviating agent's distribution.
bool verify_local_ne(const TsgModel& model, const JointPolicy& policy, int grid = 10,
                     double delta_bar = 0.05, std::uint64_t per_agent_cap = 100000,
                     const Tolerances& tol = {});

/// All of one agent's deterministic per-state maps, in lexicographic order
/// (last state fastest). Throws CapacityError beyond the cap.
std::vector<std::vector<int>> enumerate_agent_policies(const TsgModel& model, int agent,
                                                       std::uint64_t cap);

}  // namespace mvtsg
