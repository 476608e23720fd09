#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvtsg/errors.hpp"
#include "mvtsg/rng.hpp"

namespace mvtsg {

/// Finite team stochastic game <N, S, A, P, r> with a shared reward and a
/// mean-variance trade-off coefficient beta.
///
/// Joint actions are stored flat with mixed-radix encoding, agent 0 most
/// significant. Transition rows are kept in compressed sparse form because the
/// microgrid benchmark has 972k (state, joint-action) rows with only six
/// successors each; dense toy games pay a negligible overhead for the same
/// layout.
class TsgModel {
 public:
  struct SparseRow {
    std::span<const int> next;
    std::span<const double> prob;
  };

  /// Builds from dense tables: transition[s][a][s'] and reward[s][a].
  static TsgModel from_dense(int num_agents, int num_states, std::vector<int> action_counts,
                             const std::vector<std::vector<std::vector<double>>>& transition,
                             const std::vector<std::vector<double>>& reward, double beta);

  /// Builds from per-(s, a) sparse successor lists, in row order
  /// (s major, joint action minor). Entries within a row must have distinct,
  /// in-range next states.
  static TsgModel from_sparse(int num_agents, int num_states, std::vector<int> action_counts,
                              std::vector<std::vector<std::pair<int, double>>> rows,
                              std::vector<double> reward, double beta);

  int num_agents() const { return num_agents_; }
  int num_states() const { return num_states_; }
  int num_joint_actions() const { return num_joint_actions_; }
  const std::vector<int>& action_counts() const { return action_counts_; }
  int action_count(int agent) const { return action_counts_[static_cast<std::size_t>(agent)]; }
  double beta() const { return beta_; }

  double reward(int state, int joint_action) const {
    return reward_[flat(state, joint_action)];
  }

  SparseRow transition_row(int state, int joint_action) const {
    std::size_t r = flat(state, joint_action);
    std::size_t lo = row_offset_[r], hi = row_offset_[r + 1];
    return {std::span<const int>(next_state_).subspan(lo, hi - lo),
            std::span<const double>(prob_).subspan(lo, hi - lo)};
  }

  int encode_joint(std::span<const int> actions) const;

  /// Per-agent components of a flat joint-action index (precomputed).
  std::span<const int> joint_components(int joint_action) const {
    return std::span<const int>(decode_table_)
        .subspan(static_cast<std::size_t>(joint_action) * static_cast<std::size_t>(num_agents_),
                 static_cast<std::size_t>(num_agents_));
  }

  /// Radix weight of an agent's digit in the joint-action encoding.
  std::int64_t joint_stride(int agent) const { return strides_[static_cast<std::size_t>(agent)]; }

  /// Joint index with agent's component replaced by `action`.
  int replace_component(int joint_action, int agent, int action) const {
    int old = joint_components(joint_action)[static_cast<std::size_t>(agent)];
    return joint_action + static_cast<int>((action - old) * strides_[static_cast<std::size_t>(agent)]);
  }

  void check_state(int s) const;
  void check_joint(int a) const;

 private:
  TsgModel() = default;
  void finalize();  // builds decode table, validates rows

  std::size_t flat(int state, int joint_action) const {
    check_state(state);
    check_joint(joint_action);
    return static_cast<std::size_t>(state) * static_cast<std::size_t>(num_joint_actions_) +
           static_cast<std::size_t>(joint_action);
  }

  int num_agents_ = 0;
  int num_states_ = 0;
  int num_joint_actions_ = 0;
  std::vector<int> action_counts_;
  std::vector<std::int64_t> strides_;
  std::vector<double> reward_;
  std::vector<std::size_t> row_offset_;  // (S*A)+1 entries
  std::vector<int> next_state_;
  std::vector<double> prob_;
  std::vector<int> decode_table_;  // num_joint_actions x num_agents
  double beta_ = 0.0;
};

/// One agent's policy: a per-state distribution over that agent's actions.
struct AgentPolicy {
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> probs;  // state-major

  double at(int state, int action) const {
    return probs[static_cast<std::size_t>(state) * static_cast<std::size_t>(num_actions) +
                 static_cast<std::size_t>(action)];
  }
  double& at(int state, int action) {
    return probs[static_cast<std::size_t>(state) * static_cast<std::size_t>(num_actions) +
                 static_cast<std::size_t>(action)];
  }

  static AgentPolicy zeros(int num_states, int num_actions);
  static AgentPolicy uniform(int num_states, int num_actions);
  static AgentPolicy deterministic(int num_states, int num_actions, const std::vector<int>& choice);

  void validate(double tol = 1e-12) const;
  bool is_deterministic() const;
  /// Index of the unit entry for a deterministic row.
  int chosen_action(int state) const;
};

enum class PolicyKind { deterministic, stochastic };

/// Product policy over agents. The joint distribution at each state is the
/// product of the per-agent distributions.
struct JointPolicy {
  std::vector<AgentPolicy> per_agent;
  PolicyKind kind = PolicyKind::stochastic;

  int num_agents() const { return static_cast<int>(per_agent.size()); }
  void validate(double tol = 1e-12) const;

  static JointPolicy uniform(const TsgModel& model);
};

/// Deterministic joint policy in compact form: action[agent][state].
struct DeterministicPolicy {
  std::vector<std::vector<int>> action;

  int num_agents() const { return static_cast<int>(action.size()); }
  bool operator==(const DeterministicPolicy&) const = default;

  JointPolicy to_joint(const TsgModel& model) const;
  int joint_action_at(const TsgModel& model, int state) const;
};

/// General per-state distribution over joint actions. Product policies lower
/// to this for evaluation; mixtures of distinct joint policies live only here
/// because a convex combination of products is not generally a product.
struct PolicyTable {
  int num_states = 0;
  int num_joint_actions = 0;
  std::vector<double> probs;  // state-major

  double at(int state, int joint_action) const {
    return probs[static_cast<std::size_t>(state) * static_cast<std::size_t>(num_joint_actions) +
                 static_cast<std::size_t>(joint_action)];
  }
  double& at(int state, int joint_action) {
    return probs[static_cast<std::size_t>(state) * static_cast<std::size_t>(num_joint_actions) +
                 static_cast<std::size_t>(joint_action)];
  }

  void validate(double tol = 1e-12) const;
};

/// Mixture (1-delta) * base + delta * direction, taken per state over joint
/// actions. `realize` lowers it to a PolicyTable for evaluation.
struct MixedPolicy {
  JointPolicy base;
  JointPolicy direction;
  double delta = 0.0;

  PolicyTable realize(const TsgModel& model) const;
};

/// mu(a|s) as the product of per-agent action probabilities.
double joint_probability(const TsgModel& model, const JointPolicy& policy, int state,
                         int joint_action);

PolicyTable to_table(const TsgModel& model, const JointPolicy& policy);

/// Per-state convex combinations. Shapes must match; delta must be in [0, 1].
AgentPolicy mix(const AgentPolicy& base, const AgentPolicy& direction, double delta);
PolicyTable mix(const PolicyTable& base, const PolicyTable& direction, double delta);
/// Mixes a single agent's policy inside a joint policy; the result stays a
/// product policy because only one factor changes.
JointPolicy mix_agent(const JointPolicy& base, int agent, const AgentPolicy& direction,
                      double delta);

/// Joint policy equal to `base` with one agent's policy replaced.
JointPolicy with_agent(const JointPolicy& base, int agent, AgentPolicy replacement);

/// Number of deterministic joint policies, prod_i |A_i|^|S|, saturating at
/// 2^63-1 on overflow.
std::uint64_t deterministic_policy_count(const TsgModel& model);

/// Yields every deterministic joint policy exactly once, counting in
/// lexicographic order of the flattened (agent, state) action digits with the
/// last digit moving fastest.
class DeterministicPolicyEnumerator {
 public:
  explicit DeterministicPolicyEnumerator(const TsgModel& model,
                                         std::uint64_t cap = kDefaultEnumerationCap);

  static constexpr std::uint64_t kDefaultEnumerationCap = 10'000'000;

  std::uint64_t total() const { return total_; }
  /// Returns policies in order, then nullopt.
  std::optional<DeterministicPolicy> next();

 private:
  const TsgModel* model_;
  DeterministicPolicy current_;
  std::uint64_t total_;
  std::uint64_t emitted_ = 0;
};

void for_each_deterministic_policy(const TsgModel& model,
                                   const std::function<void(const DeterministicPolicy&)>& fn,
                                   std::uint64_t cap = DeterministicPolicyEnumerator::kDefaultEnumerationCap);

/// Random test instance: strictly positive Dirichlet-style transition rows
/// (every induced chain is ergodic) and rewards uniform in [0, 1].
/// Deterministic function of the seed.
TsgModel random_toy_game(std::uint64_t seed, int num_agents, int num_states, int actions_per_agent,
                         double beta);

/// Random stochastic joint policy with strictly positive rows.
JointPolicy random_joint_policy(const TsgModel& model, Rng& rng);

/// Random deterministic joint policy.
DeterministicPolicy random_deterministic_policy(const TsgModel& model, Rng& rng);

/// Optional ergodicity screen: true iff the induced chain under the uniform
/// policy is irreducible and aperiodic. Cannot certify other policies.
bool uniform_policy_chain_is_ergodic(const TsgModel& model);

}  // namespace mvtsg
