#include "mvtsg/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

namespace mvtsg {

namespace {

constexpr double kRowSumTol = 1e-12;

void check_counts(int num_agents, int num_states, const std::vector<int>& action_counts) {
  if (num_agents <= 0) throw PreconditionError("model: num_agents must be positive");
  if (num_states <= 0) throw PreconditionError("model: num_states must be positive");
  if (static_cast<int>(action_counts.size()) != num_agents)
    throw PreconditionError("model: action_counts size != num_agents");
  for (int c : action_counts)
    if (c <= 0) throw PreconditionError("model: every agent needs at least one action");
}

}  // namespace

void TsgModel::check_state(int s) const {
  if (s < 0 || s >= num_states_) throw PreconditionError("model: state index out of range");
}

void TsgModel::check_joint(int a) const {
  if (a < 0 || a >= num_joint_actions_) throw PreconditionError("model: joint action out of range");
}

void TsgModel::finalize() {
  strides_.assign(static_cast<std::size_t>(num_agents_), 1);
  std::int64_t total = 1;
  for (int i = num_agents_ - 1; i >= 0; --i) {
    strides_[static_cast<std::size_t>(i)] = total;
    total *= action_counts_[static_cast<std::size_t>(i)];
    if (total > std::numeric_limits<int>::max())
      throw CapacityError("model: joint action space exceeds int range");
  }
  num_joint_actions_ = static_cast<int>(total);

  decode_table_.resize(static_cast<std::size_t>(num_joint_actions_) *
                       static_cast<std::size_t>(num_agents_));
  std::vector<int> digits(static_cast<std::size_t>(num_agents_), 0);
  for (int a = 0; a < num_joint_actions_; ++a) {
    for (int i = 0; i < num_agents_; ++i)
      decode_table_[static_cast<std::size_t>(a) * static_cast<std::size_t>(num_agents_) +
                    static_cast<std::size_t>(i)] = digits[static_cast<std::size_t>(i)];
    for (int i = num_agents_ - 1; i >= 0; --i) {
      if (++digits[static_cast<std::size_t>(i)] < action_counts_[static_cast<std::size_t>(i)]) break;
      digits[static_cast<std::size_t>(i)] = 0;
    }
  }

  std::size_t rows = static_cast<std::size_t>(num_states_) * static_cast<std::size_t>(num_joint_actions_);
  if (reward_.size() != rows) throw PreconditionError("model: reward table has wrong size");
  if (row_offset_.size() != rows + 1) throw PreconditionError("model: transition table has wrong size");
  for (double r : reward_)
    if (!std::isfinite(r)) throw PreconditionError("model: reward must be finite");
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t lo = row_offset_[r], hi = row_offset_[r + 1];
    if (hi <= lo) throw PreconditionError("model: empty transition row");
    double sum = 0.0;
    for (std::size_t k = lo; k < hi; ++k) {
      int ns = next_state_[k];
      if (ns < 0 || ns >= num_states_)
        throw PreconditionError("model: transition targets out-of-range state");
      double p = prob_[k];
      if (!std::isfinite(p) || p < 0.0)
        throw PreconditionError("model: transition probability must be in [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowSumTol)
      throw PreconditionError("model: transition row does not sum to 1");
  }
}

TsgModel TsgModel::from_dense(int num_agents, int num_states, std::vector<int> action_counts,
                              const std::vector<std::vector<std::vector<double>>>& transition,
                              const std::vector<std::vector<double>>& reward, double beta) {
  check_counts(num_agents, num_states, action_counts);
  if (!std::isfinite(beta)) throw PreconditionError("model: beta must be finite");

  TsgModel m;
  m.num_agents_ = num_agents;
  m.num_states_ = num_states;
  m.action_counts_ = std::move(action_counts);
  m.beta_ = beta;

  std::int64_t total = 1;
  for (int c : m.action_counts_) total *= c;
  if (total > std::numeric_limits<int>::max())
    throw CapacityError("model: joint action space exceeds int range");
  int na = static_cast<int>(total);

  if (static_cast<int>(transition.size()) != num_states ||
      static_cast<int>(reward.size()) != num_states)
    throw PreconditionError("model: table outer dimension != num_states");

  m.row_offset_.reserve(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(na) + 1);
  m.row_offset_.push_back(0);
  for (int s = 0; s < num_states; ++s) {
    if (static_cast<int>(transition[static_cast<std::size_t>(s)].size()) != na ||
        static_cast<int>(reward[static_cast<std::size_t>(s)].size()) != na)
      throw PreconditionError("model: table inner dimension != num joint actions");
    for (int a = 0; a < na; ++a) {
      const auto& row = transition[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
      if (static_cast<int>(row.size()) != num_states)
        throw PreconditionError("model: transition row length != num_states");
      for (int ns = 0; ns < num_states; ++ns) {
        double p = row[static_cast<std::size_t>(ns)];
        if (p != 0.0) {
          m.next_state_.push_back(ns);
          m.prob_.push_back(p);
        }
      }
      m.row_offset_.push_back(m.next_state_.size());
      m.reward_.push_back(reward[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)]);
    }
  }
  m.finalize();
  return m;
}

TsgModel TsgModel::from_sparse(int num_agents, int num_states, std::vector<int> action_counts,
                               std::vector<std::vector<std::pair<int, double>>> rows,
                               std::vector<double> reward, double beta) {
  check_counts(num_agents, num_states, action_counts);
  if (!std::isfinite(beta)) throw PreconditionError("model: beta must be finite");

  TsgModel m;
  m.num_agents_ = num_agents;
  m.num_states_ = num_states;
  m.action_counts_ = std::move(action_counts);
  m.beta_ = beta;
  m.reward_ = std::move(reward);

  std::size_t nnz = 0;
  for (const auto& row : rows) nnz += row.size();
  m.next_state_.reserve(nnz);
  m.prob_.reserve(nnz);
  m.row_offset_.reserve(rows.size() + 1);
  m.row_offset_.push_back(0);
  std::vector<char> seen(static_cast<std::size_t>(num_states), 0);
  for (auto& row : rows) {
    for (const auto& [ns, p] : row) {
      if (ns < 0 || ns >= num_states)
        throw PreconditionError("model: transition targets out-of-range state");
      if (seen[static_cast<std::size_t>(ns)])
        throw PreconditionError("model: duplicate successor in sparse row");
      seen[static_cast<std::size_t>(ns)] = 1;
      m.next_state_.push_back(ns);
      m.prob_.push_back(p);
    }
    for (const auto& [ns, p] : row) seen[static_cast<std::size_t>(ns)] = 0;
    m.row_offset_.push_back(m.next_state_.size());
  }
  m.finalize();
  return m;
}

int TsgModel::encode_joint(std::span<const int> actions) const {
  if (static_cast<int>(actions.size()) != num_agents_)
    throw PreconditionError("encode_joint: wrong number of components");
  std::int64_t idx = 0;
  for (int i = 0; i < num_agents_; ++i) {
    int a = actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= action_counts_[static_cast<std::size_t>(i)])
      throw PreconditionError("encode_joint: component out of range");
    idx += strides_[static_cast<std::size_t>(i)] * a;
  }
  return static_cast<int>(idx);
}

AgentPolicy AgentPolicy::zeros(int num_states, int num_actions) {
  AgentPolicy p;
  p.num_states = num_states;
  p.num_actions = num_actions;
  p.probs.assign(static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions), 0.0);
  return p;
}

AgentPolicy AgentPolicy::uniform(int num_states, int num_actions) {
  AgentPolicy p = zeros(num_states, num_actions);
  double u = 1.0 / num_actions;
  std::fill(p.probs.begin(), p.probs.end(), u);
  return p;
}

AgentPolicy AgentPolicy::deterministic(int num_states, int num_actions,
                                       const std::vector<int>& choice) {
  if (static_cast<int>(choice.size()) != num_states)
    throw PreconditionError("deterministic policy: choice size != num_states");
  AgentPolicy p = zeros(num_states, num_actions);
  for (int s = 0; s < num_states; ++s) {
    int a = choice[static_cast<std::size_t>(s)];
    if (a < 0 || a >= num_actions)
      throw PreconditionError("deterministic policy: action out of range");
    p.at(s, a) = 1.0;
  }
  return p;
}

void AgentPolicy::validate(double tol) const {
  if (num_states <= 0 || num_actions <= 0 ||
      probs.size() != static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_actions))
    throw PreconditionError("agent policy: inconsistent shape");
  for (int s = 0; s < num_states; ++s) {
    double sum = 0.0;
    for (int a = 0; a < num_actions; ++a) {
      double v = at(s, a);
      if (!std::isfinite(v) || v < 0.0)
        throw PreconditionError("agent policy: probabilities must be in [0, 1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw PreconditionError("agent policy: row does not sum to 1");
  }
}

bool AgentPolicy::is_deterministic() const {
  for (int s = 0; s < num_states; ++s) {
    int ones = 0;
    for (int a = 0; a < num_actions; ++a) {
      double v = at(s, a);
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        return false;
    }
    if (ones != 1) return false;
  }
  return true;
}

int AgentPolicy::chosen_action(int state) const {
  for (int a = 0; a < num_actions; ++a)
    if (at(state, a) == 1.0) return a;
  throw PreconditionError("chosen_action: row is not deterministic");
}

void JointPolicy::validate(double tol) const {
  if (per_agent.empty()) throw PreconditionError("joint policy: no agents");
  for (const auto& p : per_agent) {
    p.validate(tol);
    if (p.num_states != per_agent.front().num_states)
      throw PreconditionError("joint policy: agents disagree on num_states");
  }
}

JointPolicy JointPolicy::uniform(const TsgModel& model) {
  JointPolicy jp;
  jp.per_agent.reserve(static_cast<std::size_t>(model.num_agents()));
  for (int i = 0; i < model.num_agents(); ++i)
    jp.per_agent.push_back(AgentPolicy::uniform(model.num_states(), model.action_count(i)));
  jp.kind = PolicyKind::stochastic;
  return jp;
}

JointPolicy DeterministicPolicy::to_joint(const TsgModel& model) const {
  if (num_agents() != model.num_agents())
    throw PreconditionError("deterministic policy: agent count mismatch");
  JointPolicy jp;
  jp.per_agent.reserve(action.size());
  for (int i = 0; i < num_agents(); ++i)
    jp.per_agent.push_back(AgentPolicy::deterministic(
        model.num_states(), model.action_count(i), action[static_cast<std::size_t>(i)]));
  jp.kind = PolicyKind::deterministic;
  return jp;
}

int DeterministicPolicy::joint_action_at(const TsgModel& model, int state) const {
  if (num_agents() != model.num_agents())
    throw PreconditionError("deterministic policy: agent count mismatch");
  std::vector<int> comps(action.size());
  for (std::size_t i = 0; i < action.size(); ++i) {
    if (state < 0 || state >= static_cast<int>(action[i].size()))
      throw PreconditionError("deterministic policy: state out of range");
    comps[i] = action[i][static_cast<std::size_t>(state)];
  }
  return model.encode_joint(comps);
}

void PolicyTable::validate(double tol) const {
  if (num_states <= 0 || num_joint_actions <= 0 ||
      probs.size() !=
          static_cast<std::size_t>(num_states) * static_cast<std::size_t>(num_joint_actions))
    throw PreconditionError("policy table: inconsistent shape");
  for (int s = 0; s < num_states; ++s) {
    double sum = 0.0;
    for (int a = 0; a < num_joint_actions; ++a) {
      double v = at(s, a);
      if (!std::isfinite(v) || v < 0.0)
        throw PreconditionError("policy table: probabilities must be in [0, 1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw PreconditionError("policy table: row does not sum to 1");
  }
}

PolicyTable MixedPolicy::realize(const TsgModel& model) const {
  if (delta < 0.0 || delta > 1.0) throw PreconditionError("mixture: delta must be in [0, 1]");
  return mix(to_table(model, base), to_table(model, direction), delta);
}

double joint_probability(const TsgModel& model, const JointPolicy& policy, int state,
                         int joint_action) {
  model.check_state(state);
  model.check_joint(joint_action);
  if (policy.num_agents() != model.num_agents())
    throw PreconditionError("joint_probability: agent count mismatch");
  auto comps = model.joint_components(joint_action);
  double p = 1.0;
  for (int i = 0; i < model.num_agents(); ++i)
    p *= policy.per_agent[static_cast<std::size_t>(i)].at(state, comps[static_cast<std::size_t>(i)]);
  return p;
}

PolicyTable to_table(const TsgModel& model, const JointPolicy& policy) {
  if (policy.num_agents() != model.num_agents())
    throw PreconditionError("to_table: agent count mismatch");
  PolicyTable t;
  t.num_states = model.num_states();
  t.num_joint_actions = model.num_joint_actions();
  t.probs.resize(static_cast<std::size_t>(t.num_states) *
                 static_cast<std::size_t>(t.num_joint_actions));
  for (int s = 0; s < t.num_states; ++s)
    for (int a = 0; a < t.num_joint_actions; ++a) {
      auto comps = model.joint_components(a);
      double p = 1.0;
      for (int i = 0; i < model.num_agents(); ++i)
        p *= policy.per_agent[static_cast<std::size_t>(i)].at(s, comps[static_cast<std::size_t>(i)]);
      t.at(s, a) = p;
    }
  return t;
}

AgentPolicy mix(const AgentPolicy& base, const AgentPolicy& direction, double delta) {
  if (base.num_states != direction.num_states || base.num_actions != direction.num_actions)
    throw PreconditionError("mix: shape mismatch");
  if (delta < 0.0 || delta > 1.0) throw PreconditionError("mix: delta must be in [0, 1]");
  AgentPolicy out = base;
  for (std::size_t i = 0; i < out.probs.size(); ++i)
    out.probs[i] = (1.0 - delta) * base.probs[i] + delta * direction.probs[i];
  return out;
}

PolicyTable mix(const PolicyTable& base, const PolicyTable& direction, double delta) {
  if (base.num_states != direction.num_states ||
      base.num_joint_actions != direction.num_joint_actions)
    throw PreconditionError("mix: shape mismatch");
  if (delta < 0.0 || delta > 1.0) throw PreconditionError("mix: delta must be in [0, 1]");
  PolicyTable out = base;
  for (std::size_t i = 0; i < out.probs.size(); ++i)
    out.probs[i] = (1.0 - delta) * base.probs[i] + delta * direction.probs[i];
  return out;
}

JointPolicy mix_agent(const JointPolicy& base, int agent, const AgentPolicy& direction,
                      double delta) {
  if (agent < 0 || agent >= base.num_agents())
    throw PreconditionError("mix_agent: agent index out of range");
  JointPolicy out = base;
  out.per_agent[static_cast<std::size_t>(agent)] =
      mix(base.per_agent[static_cast<std::size_t>(agent)], direction, delta);
  out.kind = PolicyKind::stochastic;
  for (const auto& p : out.per_agent)
    if (!p.is_deterministic()) return out;
  out.kind = PolicyKind::deterministic;
  return out;
}

JointPolicy with_agent(const JointPolicy& base, int agent, AgentPolicy replacement) {
  if (agent < 0 || agent >= base.num_agents())
    throw PreconditionError("with_agent: agent index out of range");
  JointPolicy out = base;
  out.per_agent[static_cast<std::size_t>(agent)] = std::move(replacement);
  out.kind = PolicyKind::stochastic;
  for (const auto& p : out.per_agent)
    if (!p.is_deterministic()) return out;
  out.kind = PolicyKind::deterministic;
  return out;
}

std::uint64_t deterministic_policy_count(const TsgModel& model) {
  const std::uint64_t kSaturated = std::uint64_t{1} << 63;  // > any usable count
  std::uint64_t count = 1;
  for (int i = 0; i < model.num_agents(); ++i)
    for (int s = 0; s < model.num_states(); ++s) {
      std::uint64_t c = static_cast<std::uint64_t>(model.action_count(i));
      if (count > kSaturated / c) return kSaturated;
      count *= c;
    }
  return count;
}

DeterministicPolicyEnumerator::DeterministicPolicyEnumerator(const TsgModel& model,
                                                             std::uint64_t cap)
    : model_(&model), total_(deterministic_policy_count(model)) {
  if (total_ > cap) throw CapacityError("policy enumeration exceeds cap");
  current_.action.assign(static_cast<std::size_t>(model.num_agents()),
                         std::vector<int>(static_cast<std::size_t>(model.num_states()), 0));
}

std::optional<DeterministicPolicy> DeterministicPolicyEnumerator::next() {
  if (emitted_ >= total_) return std::nullopt;
  DeterministicPolicy out = current_;
  ++emitted_;
  // Advance digits: agent-major, state-minor, last digit fastest.
  for (int i = model_->num_agents() - 1; i >= 0; --i) {
    bool carried = true;
    for (int s = model_->num_states() - 1; s >= 0; --s) {
      auto& digit = current_.action[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)];
      if (++digit < model_->action_count(i)) {
        carried = false;
        break;
      }
      digit = 0;
    }
    if (!carried) break;
  }
  return out;
}

void for_each_deterministic_policy(const TsgModel& model,
                                   const std::function<void(const DeterministicPolicy&)>& fn,
                                   std::uint64_t cap) {
  DeterministicPolicyEnumerator it(model, cap);
  while (auto p = it.next()) fn(*p);
}

TsgModel random_toy_game(std::uint64_t seed, int num_agents, int num_states, int actions_per_agent,
                         double beta) {
  if (num_agents < 1 || num_states < 1 || actions_per_agent < 1)
    throw PreconditionError("random_toy_game: sizes must be at least 1");
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  std::vector<int> counts(static_cast<std::size_t>(num_agents), actions_per_agent);
  std::int64_t na = 1;
  for (int c : counts) na *= c;

  std::vector<std::vector<std::vector<double>>> transition(
      static_cast<std::size_t>(num_states),
      std::vector<std::vector<double>>(static_cast<std::size_t>(na),
                                       std::vector<double>(static_cast<std::size_t>(num_states))));
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < na; ++a) {
      auto& row = transition[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
      double sum = 0.0;
      for (int ns = 0; ns < num_states; ++ns) {
        // Offset keeps every entry strictly positive, so any induced chain is
        // irreducible and aperiodic.
        row[static_cast<std::size_t>(ns)] = 0.1 + rng.next_exponential();
        sum += row[static_cast<std::size_t>(ns)];
      }
      for (int ns = 0; ns < num_states; ++ns) row[static_cast<std::size_t>(ns)] /= sum;
    }

  std::vector<std::vector<double>> reward(
      static_cast<std::size_t>(num_states), std::vector<double>(static_cast<std::size_t>(na)));
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < na; ++a)
      reward[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] = rng.next_double();

  return TsgModel::from_dense(num_agents, num_states, std::move(counts), transition, reward, beta);
}

JointPolicy random_joint_policy(const TsgModel& model, Rng& rng) {
  JointPolicy jp;
  jp.per_agent.reserve(static_cast<std::size_t>(model.num_agents()));
  for (int i = 0; i < model.num_agents(); ++i) {
    AgentPolicy p = AgentPolicy::zeros(model.num_states(), model.action_count(i));
    for (int s = 0; s < model.num_states(); ++s) {
      double sum = 0.0;
      for (int a = 0; a < p.num_actions; ++a) {
        p.at(s, a) = 0.1 + rng.next_exponential();
        sum += p.at(s, a);
      }
      for (int a = 0; a < p.num_actions; ++a) p.at(s, a) /= sum;
    }
    jp.per_agent.push_back(std::move(p));
  }
  jp.kind = PolicyKind::stochastic;
  return jp;
}

DeterministicPolicy random_deterministic_policy(const TsgModel& model, Rng& rng) {
  DeterministicPolicy d;
  d.action.resize(static_cast<std::size_t>(model.num_agents()));
  for (int i = 0; i < model.num_agents(); ++i) {
    d.action[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(model.num_states()));
    for (int s = 0; s < model.num_states(); ++s)
      d.action[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)] =
          rng.next_int(model.action_count(i));
  }
  return d;
}

bool uniform_policy_chain_is_ergodic(const TsgModel& model) {
  // Under the uniform policy every joint action has positive probability, so
  // the chain's support is the union of all transition rows.
  int n = model.num_states();
  std::vector<std::vector<int>> fwd(static_cast<std::size_t>(n)), bwd(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      auto row = model.transition_row(s, a);
      for (std::size_t k = 0; k < row.next.size(); ++k)
        if (row.prob[k] > 0.0) seen[static_cast<std::size_t>(row.next[k])] = 1;
    }
    for (int ns = 0; ns < n; ++ns)
      if (seen[static_cast<std::size_t>(ns)]) {
        fwd[static_cast<std::size_t>(s)].push_back(ns);
        bwd[static_cast<std::size_t>(ns)].push_back(s);
      }
  }

  auto reach_all = [n](const std::vector<std::vector<int>>& adj) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> q;
    q.push(0);
    seen[0] = 1;
    int count = 0;
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      ++count;
      for (int v : adj[static_cast<std::size_t>(u)])
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          q.push(v);
        }
    }
    return count == n;
  };
  if (!reach_all(fwd) || !reach_all(bwd)) return false;

  // Period = gcd over edges (u, v) of depth(u) + 1 - depth(v), depths from a
  // BFS tree; the chain is aperiodic iff it is 1.
  std::vector<int> depth(static_cast<std::size_t>(n), -1);
  std::queue<int> q;
  q.push(0);
  depth[0] = 0;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : fwd[static_cast<std::size_t>(u)])
      if (depth[static_cast<std::size_t>(v)] < 0) {
        depth[static_cast<std::size_t>(v)] = depth[static_cast<std::size_t>(u)] + 1;
        q.push(v);
      }
  }
  int g = 0;
  for (int u = 0; u < n; ++u)
    for (int v : fwd[static_cast<std::size_t>(u)])
      g = std::gcd(g, std::abs(depth[static_cast<std::size_t>(u)] + 1 -
                               depth[static_cast<std::size_t>(v)]));
  return g == 1;
}

}  // namespace mvtsg
