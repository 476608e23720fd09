#include "mvtsg/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mvtsg/rng.hpp"

namespace mvtsg {

namespace {

// Flat index of a deterministic policy in enumeration order: digits flattened
// (agent-major, state-minor), last digit fastest.
std::uint64_t policy_index(const TsgModel& model, const DeterministicPolicy& p) {
  std::uint64_t idx = 0;
  for (int i = 0; i < model.num_agents(); ++i)
    for (int s = 0; s < model.num_states(); ++s)
      idx = idx * static_cast<std::uint64_t>(model.action_count(i)) +
            static_cast<std::uint64_t>(p.action[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)]);
  return idx;
}

}  // namespace

EnumerationResult exhaustive_search(const TsgModel& model, bool keep_table, std::uint64_t cap,
                                    const Tolerances& tol) {
  std::uint64_t total = deterministic_policy_count(model);
  if (total > cap) throw CapacityError("exhaustive_search: policy count exceeds cap");

  EnumerationResult out;
  out.global_max_j = -std::numeric_limits<double>::infinity();
  std::vector<double> j_by_index(total);
  std::vector<DeterministicPolicy> policies;
  policies.reserve(total);

  DeterministicPolicyEnumerator it(model, cap);
  while (auto p = it.next()) {
    PolicyEval ev = evaluate(model, *p, tol);
    std::uint64_t idx = policy_index(model, *p);
    j_by_index[idx] = ev.j_value;
    policies.push_back(*p);
    if (ev.j_value > out.global_max_j) {
      out.global_max_j = ev.j_value;
      out.global_argmax = *p;
    }
    out.kemeny_star =
        std::max(out.kemeny_star, kemeny_constant(induced_chain(model, *p).transition, tol));
    if (keep_table) out.table.push_back({*p, ev.j_value, ev.eta, ev.zeta});
  }

  // NE over whole-policy unilateral deviations, by table lookup.
  std::vector<std::vector<std::vector<int>>> alts_per_agent;
  alts_per_agent.reserve(static_cast<std::size_t>(model.num_agents()));
  for (int i = 0; i < model.num_agents(); ++i)
    alts_per_agent.push_back(enumerate_agent_policies(model, i, cap));
  for (const DeterministicPolicy& p : policies) {
    double j = j_by_index[policy_index(model, p)];
    bool is_ne = true;
    for (int i = 0; i < model.num_agents() && is_ne; ++i) {
      DeterministicPolicy dev = p;
      for (const auto& alt : alts_per_agent[static_cast<std::size_t>(i)]) {
        dev.action[static_cast<std::size_t>(i)] = alt;
        if (j_by_index[policy_index(model, dev)] > j + 1e-12) {
          is_ne = false;
          break;
        }
      }
    }
    if (is_ne) out.ne_set.push_back(p);
  }
  return out;
}

std::vector<std::vector<int>> enumerate_agent_policies(const TsgModel& model, int agent,
                                                       std::uint64_t cap) {
  if (agent < 0 || agent >= model.num_agents())
    throw PreconditionError("enumerate_agent_policies: agent out of range");
  const int ns = model.num_states();
  const int na = model.action_count(agent);
  std::uint64_t total = 1;
  for (int s = 0; s < ns; ++s) {
    total *= static_cast<std::uint64_t>(na);
    if (total > cap) throw CapacityError("enumerate_agent_policies: count exceeds cap");
  }
  std::vector<std::vector<int>> out;
  out.reserve(total);
  std::vector<int> digits(static_cast<std::size_t>(ns), 0);
  for (std::uint64_t k = 0; k < total; ++k) {
    out.push_back(digits);
    for (int s = ns - 1; s >= 0; --s) {
      if (++digits[static_cast<std::size_t>(s)] < na) break;
      digits[static_cast<std::size_t>(s)] = 0;
    }
  }
  return out;
}

SimulationResult simulate(const TsgModel& model, const JointPolicy& policy, std::int64_t steps,
                          std::uint64_t seed, bool keep_rewards) {
  if (steps < 1) throw PreconditionError("simulate: steps must be at least 1");
  policy.validate();
  Rng rng(derive_seed(seed, 0x73696dULL));

  SimulationResult out;
  std::vector<double> rewards(static_cast<std::size_t>(steps));
  std::vector<int> comps(static_cast<std::size_t>(model.num_agents()));
  int s = 0;
  for (std::int64_t t = 0; t < steps; ++t) {
    for (int i = 0; i < model.num_agents(); ++i) {
      const AgentPolicy& pi = policy.per_agent[static_cast<std::size_t>(i)];
      double u = rng.next_double(), acc = 0.0;
      int choice = pi.num_actions - 1;
      for (int a = 0; a < pi.num_actions; ++a) {
        acc += pi.at(s, a);
        if (u < acc) {
          choice = a;
          break;
        }
      }
      comps[static_cast<std::size_t>(i)] = choice;
    }
    int a = model.encode_joint(comps);
    rewards[static_cast<std::size_t>(t)] = model.reward(s, a);

    auto row = model.transition_row(s, a);
    double u = rng.next_double(), acc = 0.0;
    int ns = row.next.back();
    for (std::size_t k = 0; k < row.next.size(); ++k) {
      acc += row.prob[k];
      if (u < acc) {
        ns = row.next[k];
        break;
      }
    }
    s = ns;
  }

  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(steps);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(steps);

  out.eta_hat = mean;
  out.zeta_hat = var;
  if (keep_rewards) out.rewards = std::move(rewards);
  return out;
}

double batch_means_se(const std::vector<double>& values, int num_batches) {
  if (num_batches < 2 || values.size() < static_cast<std::size_t>(num_batches))
    throw PreconditionError("batch_means_se: need at least 2 batches of data");
  std::size_t batch_len = values.size() / static_cast<std::size_t>(num_batches);
  std::vector<double> means(static_cast<std::size_t>(num_batches));
  double grand = 0.0;
  for (int b = 0; b < num_batches; ++b) {
    double acc = 0.0;
    for (std::size_t t = 0; t < batch_len; ++t)
      acc += values[static_cast<std::size_t>(b) * batch_len + t];
    means[static_cast<std::size_t>(b)] = acc / static_cast<double>(batch_len);
    grand += means[static_cast<std::size_t>(b)];
  }
  grand /= num_batches;
  double var = 0.0;
  for (double m : means) var += (m - grand) * (m - grand);
  var /= (num_batches - 1);
  return std::sqrt(var / num_batches);
}

double finite_difference_derivative(const TsgModel& model, const JointPolicy& mu,
                                    const JointPolicy& direction, double h,
                                    const Tolerances& tol) {
  if (!(h > 0.0) || h > 0.1)
    throw PreconditionError("finite_difference_derivative: h must be in (0, 0.1]");
  double j0 = evaluate(model, mu, tol).j_value;
  auto j_at = [&](double d) {
    return evaluate(model, MixedPolicy{mu, direction, d}.realize(model), tol).j_value;
  };
  double d_full = (j_at(h) - j0) / h;
  double d_half = (j_at(h / 2.0) - j0) / (h / 2.0);
  return 2.0 * d_half - d_full;
}

bool verify_local_ne(const TsgModel& model, const JointPolicy& policy, int grid, double delta_bar,
                     std::uint64_t per_agent_cap, const Tolerances& tol) {
  if (grid < 1) throw PreconditionError("verify_local_ne: grid must be positive");
  double j_base = evaluate(model, policy, tol).j_value;
  for (int i = 0; i < model.num_agents(); ++i) {
    std::vector<std::vector<int>> alts = enumerate_agent_policies(model, i, per_agent_cap);
    for (const auto& alt : alts) {
      AgentPolicy dir =
          AgentPolicy::deterministic(model.num_states(), model.action_count(i), alt);
      for (int k = 1; k <= grid; ++k) {
        double delta = delta_bar * k / grid;
        JointPolicy mixed = mix_agent(policy, i, dir, delta);
        if (evaluate(model, mixed, tol).j_value > j_base + 1e-10) return false;
      }
    }
  }
  return true;
}

}  // namespace mvtsg
