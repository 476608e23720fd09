#include "mvtsg/mapi.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mvtsg/errors.hpp"
#include "mvtsg/rng.hpp"

namespace mvtsg {

namespace {

std::uint64_t mul_sat(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    return std::numeric_limits<std::uint64_t>::max();
  }
  return a * b;
}

std::uint64_t add_sat(std::uint64_t a, std::uint64_t b) {
  return (b > std::numeric_limits<std::uint64_t>::max() - a)
             ? std::numeric_limits<std::uint64_t>::max()
             : a + b;
}

struct EtaResult {
  double eta = 0.0;
  double zeta = 0.0;
  double j_value = 0.0;
};

/// Eta/zeta only; skips the bias solve, so it is about half an evaluate().
EtaResult eta_of(const TsgModel& model, const DeterministicPolicy& policy,
                 const Tolerances& tol) {
  InducedChain chain = induced_chain(model, policy);
  Eigen::VectorXd pi = stationary_distribution(chain.transition, tol);
  EtaResult out;
  out.eta = pi.dot(chain.reward);
  for (int s = 0; s < model.num_states(); ++s) {
    const double d = chain.reward[s] - out.eta;
    out.zeta += pi[s] * d * d;
  }
  out.j_value = out.eta - model.beta() * out.zeta;
  return out;
}

/// True when swapping `agent`'s action at `state` from the current one to
/// `alt` leaves both the reward and the successor row bitwise unchanged.
/// Such a deviation cannot move any evaluation quantity.
bool row_identical(const TsgModel& model, int state, int base_joint, int agent, int alt) {
  const int swapped = model.replace_component(base_joint, agent, alt);
  if (swapped == base_joint) return true;
  if (model.reward(state, base_joint) != model.reward(state, swapped)) return false;
  const TsgModel::SparseRow a = model.transition_row(state, base_joint);
  const TsgModel::SparseRow b = model.transition_row(state, swapped);
  if (a.next.size() != b.next.size()) return false;
  for (std::size_t k = 0; k < a.next.size(); ++k) {
    if (a.next[k] != b.next[k] || a.prob[k] != b.prob[k]) return false;
  }
  return true;
}

}  // namespace

Eigen::MatrixXd expected_advantage(const TsgModel& model, const DeterministicPolicy& policy,
                                   int agent, const Eigen::MatrixXd& table) {
  const int num_actions = model.action_count(agent);
  Eigen::MatrixXd out(model.num_states(), num_actions);
  for (int s = 0; s < model.num_states(); ++s) {
    const int base = policy.joint_action_at(model, s);
    for (int a = 0; a < num_actions; ++a) {
      out(s, a) = table(s, model.replace_component(base, agent, a));
    }
  }
  return out;
}

Eigen::MatrixXd expected_advantage(const TsgModel& model, const JointPolicy& policy, int agent,
                                   const Eigen::MatrixXd& table) {
  const int num_actions = model.action_count(agent);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(model.num_states(), num_actions);
  for (int s = 0; s < model.num_states(); ++s) {
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      auto comps = model.joint_components(a);
      double p = 1.0;
      for (int j = 0; j < model.num_agents(); ++j) {
        if (j == agent) continue;
        p *= policy.per_agent[static_cast<std::size_t>(j)].at(s, comps[static_cast<std::size_t>(j)]);
        if (p == 0.0) break;
      }
      if (p == 0.0) continue;
      out(s, comps[static_cast<std::size_t>(agent)]) += p * table(s, a);
    }
  }
  return out;
}

std::vector<int> best_response_update(const TsgModel& model, const DeterministicPolicy& current,
                                      int agent, const PolicyEval& eval, TieRule tie_rule,
                                      const Tolerances& tol) {
  const Eigen::MatrixXd ea = expected_advantage(model, current, agent, eval.advantage);
  const int num_actions = model.action_count(agent);
  std::vector<int> next(static_cast<std::size_t>(model.num_states()));
  for (int s = 0; s < model.num_states(); ++s) {
    int best = 0;
    for (int a = 1; a < num_actions; ++a) {
      if (ea(s, a) > ea(s, best)) best = a;  // first maximum wins: lowest index
    }
    const int cur = current.action[static_cast<std::size_t>(agent)][static_cast<std::size_t>(s)];
    if (tie_rule == TieRule::keep_current && ea(s, best) - ea(s, cur) <= tol.switch_margin) {
      best = cur;
    }
    next[static_cast<std::size_t>(s)] = best;
  }
  return next;
}

SweepTrace run_mv_mapi(const TsgModel& model, const DeterministicPolicy& initial,
                       std::uint64_t seed, int max_outer, const Tolerances& tol) {
  if (initial.num_agents() != model.num_agents()) {
    throw PreconditionError("initial policy does not match the model's agent count");
  }
  SweepTrace trace;
  DeterministicPolicy policy = initial;
  PolicyEval eval = evaluate(model, policy, tol);
  trace.iterations.push_back({0, 0, -1, eval.eta, eval.zeta, eval.j_value, 0});

  Rng rng(derive_seed(seed, 0x6d617069ULL));
  for (int outer = 1; outer <= max_outer; ++outer) {
    std::vector<int> perm = rng.permutation(model.num_agents());
    trace.permutations.push_back(perm);
    bool any_change = false;
    for (int inner = 0; inner < model.num_agents(); ++inner) {
      const int agent = perm[static_cast<std::size_t>(inner)];
      std::vector<int> updated =
          best_response_update(model, policy, agent, eval, TieRule::keep_current, tol);
      auto& row = policy.action[static_cast<std::size_t>(agent)];
      int changed = 0;
      for (std::size_t s = 0; s < row.size(); ++s) changed += (updated[s] != row[s]);
      if (changed > 0) {
        row = std::move(updated);
        eval = evaluate(model, policy, tol);
        any_change = true;
      }
      trace.iterations.push_back({outer, inner, agent, eval.eta, eval.zeta, eval.j_value, changed});
    }
    if (!any_change) {
      trace.converged = true;
      break;
    }
  }
  trace.final_policy = std::move(policy);
  return trace;
}

namespace {

template <typename PolicyT>
StationarityCheck stationarity_impl(const TsgModel& model, const PolicyT& policy,
                                    const Tolerances& tol) {
  const PolicyEval eval = evaluate(model, policy, tol);
  StationarityCheck out;
  out.worst_violation = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < model.num_agents(); ++i) {
    const Eigen::MatrixXd ea = expected_advantage(model, policy, i, eval.advantage);
    out.worst_violation = std::max(out.worst_violation, ea.maxCoeff());
  }
  out.stationary = out.worst_violation <= tol.stationarity;
  return out;
}

}  // namespace

StationarityCheck check_first_order_stationary(const TsgModel& model,
                                               const DeterministicPolicy& policy,
                                               const Tolerances& tol) {
  return stationarity_impl(model, policy, tol);
}

StationarityCheck check_first_order_stationary(const TsgModel& model, const JointPolicy& policy,
                                               const Tolerances& tol) {
  return stationarity_impl(model, policy, tol);
}

StationaryReport classify_stationary_point(const TsgModel& model,
                                           const DeterministicPolicy& policy,
                                           const ClassifyLimits& limits, const Tolerances& tol) {
  constexpr std::size_t kWitnessSampleCap = 64;  // stored per report list; counts stay exact
  const PolicyEval eval = evaluate(model, policy, tol);

  StationaryReport report;
  report.policy = policy;
  report.eta_base = eval.eta;
  report.j_base = eval.j_value;

  std::vector<Eigen::MatrixXd> ea(static_cast<std::size_t>(model.num_agents()));
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < model.num_agents(); ++i) {
    ea[static_cast<std::size_t>(i)] = expected_advantage(model, policy, i, eval.advantage);
    worst = std::max(worst, ea[static_cast<std::size_t>(i)].maxCoeff());
  }
  if (worst > tol.stationarity) {
    throw PreconditionError("policy is not first-order stationary");
  }

  std::uint64_t evals_used = 0;
  bool any_mismatch = false;

  for (int i = 0; i < model.num_agents(); ++i) {
    const auto& cur_row = policy.action[static_cast<std::size_t>(i)];
    const int num_states = model.num_states();

    // Per-state sets of zero-derivative actions; the current action always
    // belongs (its expected advantage is identically zero up to solve error).
    std::vector<std::vector<int>> ties(static_cast<std::size_t>(num_states));
    std::vector<std::vector<bool>> identical(static_cast<std::size_t>(num_states));
    std::uint64_t combos = 1;
    bool all_identical = true;
    for (int s = 0; s < num_states; ++s) {
      const int cur = cur_row[static_cast<std::size_t>(s)];
      const int base = policy.joint_action_at(model, s);
      auto& set = ties[static_cast<std::size_t>(s)];
      auto& ident = identical[static_cast<std::size_t>(s)];
      for (int a = 0; a < model.action_count(i); ++a) {
        if (a != cur && std::abs(ea[static_cast<std::size_t>(i)](s, a)) > tol.zero_derivative) {
          continue;
        }
        set.push_back(a);
        ident.push_back(a == cur || row_identical(model, s, base, i, a));
        if (!ident.back()) all_identical = false;
      }
      combos = mul_sat(combos, static_cast<std::uint64_t>(set.size()));
    }
    const std::uint64_t deviation_count = combos - 1;
    report.pruned_set_size = add_sat(report.pruned_set_size, deviation_count);
    if (deviation_count == 0) continue;
    if (deviation_count > limits.witness_cap_per_agent && !all_identical) {
      report.truncated = true;
    }

    // A witness is processed by certifying it equal (free) or solving for its
    // eta (budgeted). Returns false once the evaluation budget is gone.
    auto process = [&](std::vector<int> action, bool certified_equal) {
      Witness w;
      w.agent = i;
      w.action = std::move(action);
      if (!certified_equal) {
        if (evals_used >= limits.eta_evaluation_budget) {
          report.truncated = true;
          return false;
        }
        DeterministicPolicy dev = policy;
        dev.action[static_cast<std::size_t>(i)] = w.action;
        const EtaResult r = eta_of(model, dev, tol);
        ++evals_used;
        w.eta_evaluated = true;
        w.eta = r.eta;
        w.j_value = r.j_value;
        w.eta_mismatch = std::abs(r.eta - report.eta_base) > tol.eta_equality;
      }
      if (w.eta_mismatch) {
        any_mismatch = true;
        if (report.eta_mismatch_witnesses.size() < kWitnessSampleCap) {
          report.eta_mismatch_witnesses.push_back(std::move(w));
        }
      } else if (report.zero_derivative_witnesses.size() < kWitnessSampleCap) {
        report.zero_derivative_witnesses.push_back(std::move(w));
      }
      return true;
    };

    if (all_identical) {
      // Every deviation recombines duplicate rows, so the whole set is
      // certified at once; a small sample is kept for the report.
      std::vector<std::size_t> digit(static_cast<std::size_t>(num_states), 0);
      std::uint64_t sampled = 0;
      while (sampled < std::min<std::uint64_t>(deviation_count, kWitnessSampleCap)) {
        bool is_current = true;
        std::vector<int> action(static_cast<std::size_t>(num_states));
        for (int s = 0; s < num_states; ++s) {
          action[static_cast<std::size_t>(s)] =
              ties[static_cast<std::size_t>(s)][digit[static_cast<std::size_t>(s)]];
          if (action[static_cast<std::size_t>(s)] != cur_row[static_cast<std::size_t>(s)]) {
            is_current = false;
          }
        }
        if (!is_current) {
          ++sampled;
          process(std::move(action), true);
        }
        int pos = num_states - 1;
        while (pos >= 0) {
          auto& d = digit[static_cast<std::size_t>(pos)];
          if (++d < ties[static_cast<std::size_t>(pos)].size()) break;
          d = 0;
          --pos;
        }
        if (pos < 0) break;
      }
      continue;
    }

    // Single-state deviations first: they are the cheapest probes and any
    // eta mismatch among them already settles the classification.
    bool budget_ok = true;
    for (int s = 0; s < num_states && budget_ok; ++s) {
      const auto& set = ties[static_cast<std::size_t>(s)];
      for (std::size_t k = 0; k < set.size() && budget_ok; ++k) {
        if (set[k] == cur_row[static_cast<std::size_t>(s)]) continue;
        std::vector<int> action = cur_row;
        action[static_cast<std::size_t>(s)] = set[k];
        budget_ok = process(std::move(action), identical[static_cast<std::size_t>(s)][k]);
      }
    }
    if (!budget_ok) continue;
    if (deviation_count > limits.witness_cap_per_agent) continue;  // already marked truncated

    // Full product walk for the multi-state remainder.
    std::vector<std::size_t> digit(static_cast<std::size_t>(num_states), 0);
    for (;;) {
      int changed_states = 0;
      bool certified_equal = true;
      std::vector<int> action(static_cast<std::size_t>(num_states));
      for (int s = 0; s < num_states; ++s) {
        const std::size_t k = digit[static_cast<std::size_t>(s)];
        action[static_cast<std::size_t>(s)] = ties[static_cast<std::size_t>(s)][k];
        if (action[static_cast<std::size_t>(s)] != cur_row[static_cast<std::size_t>(s)]) {
          ++changed_states;
        }
        if (!identical[static_cast<std::size_t>(s)][k]) certified_equal = false;
      }
      if (changed_states >= 2 && !process(std::move(action), certified_equal)) break;
      int pos = num_states - 1;
      while (pos >= 0) {
        auto& d = digit[static_cast<std::size_t>(pos)];
        if (++d < ties[static_cast<std::size_t>(pos)].size()) break;
        d = 0;
        --pos;
      }
      if (pos < 0) break;
    }
  }

  if (report.pruned_set_size == 0) {
    report.classification = StationaryClass::strict_local_ne;
  } else if (any_mismatch) {
    report.classification = StationaryClass::saddle_escapable;
  } else if (!report.truncated) {
    report.classification = StationaryClass::local_ne_nonstrict;
  } else {
    report.classification = StationaryClass::unclassified_boundary;
  }
  return report;
}

ModifiedRunResult run_modified_mv_mapi(const TsgModel& model, const DeterministicPolicy& initial,
                                       std::uint64_t seed, int max_restarts, int max_outer,
                                       const ClassifyLimits& limits, const Tolerances& tol) {
  ModifiedRunResult out;
  DeterministicPolicy current = initial;
  for (int phase = 0;; ++phase) {
    // Phase 0 replays run_mv_mapi(model, initial, seed) exactly, so the
    // modified run extends the plain one and can only finish at least as high.
    const std::uint64_t phase_seed =
        phase == 0 ? seed : derive_seed(seed, 0x72657374ULL, static_cast<std::uint64_t>(phase));
    SweepTrace tr = run_mv_mapi(model, current, phase_seed, max_outer, tol);
    if (phase > 0) out.restart_record_offsets.push_back(out.trace.iterations.size());
    out.trace.iterations.insert(out.trace.iterations.end(), tr.iterations.begin(),
                                tr.iterations.end());
    out.trace.permutations.insert(out.trace.permutations.end(), tr.permutations.begin(),
                                  tr.permutations.end());
    out.trace.converged = tr.converged;
    out.trace.final_policy = tr.final_policy;
    current = std::move(tr.final_policy);
    if (!out.trace.converged) {
      // Not stationary, so classification does not apply; report the policy
      // as-is and leave the class at its unresolved value.
      out.report = StationaryReport{};
      out.report.policy = current;
      out.report.classification = StationaryClass::unclassified_boundary;
      out.report.truncated = true;
      return out;
    }
    out.report = classify_stationary_point(model, current, limits, tol);
    if (out.report.classification != StationaryClass::saddle_escapable) return out;
    if (out.restarts >= max_restarts) return out;

    const Witness* best = nullptr;
    for (const Witness& w : out.report.eta_mismatch_witnesses) {
      if (best == nullptr || w.j_value > best->j_value) best = &w;
    }
    // A mismatch witness improves J by beta * (eta gap)^2; with beta = 0 the
    // gain is zero and a restart would cycle, so it is gated on measured gain.
    if (best == nullptr || best->j_value <= out.report.j_base + tol.escape_min_gain) return out;
    current.action[static_cast<std::size_t>(best->agent)] = best->action;
    ++out.restarts;
  }
}

}  // namespace mvtsg
