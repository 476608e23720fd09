#include "mvtsg/verify.hpp"

#include <algorithm>
#include <cmath>

#include "mvtsg/chain.hpp"
#include "mvtsg/mapi.hpp"
#include "mvtsg/matrpo.hpp"
#include "mvtsg/oracle.hpp"
#include "mvtsg/rng.hpp"

namespace mvtsg {

void SuiteResult::record(bool ok, double residual, const std::string& note) {
  ++checks;
  worst_residual = std::max(worst_residual, residual);
  if (!ok) {
    ++failures;
    if (failure_notes.size() < 20) {
      failure_notes.push_back(note);
    }
  }
}

namespace {

constexpr std::uint64_t kDifference = 0x01;
constexpr std::uint64_t kDerivative = 0x02;
constexpr std::uint64_t kEvaluator = 0x03;
constexpr std::uint64_t kSimulation = 0x04;
constexpr std::uint64_t kJointBound = 0x05;
constexpr std::uint64_t kSequential = 0x06;
constexpr std::uint64_t kEstimator = 0x07;
constexpr std::uint64_t kClassify = 0x08;

double cycle_beta(int index) {
  static constexpr double kGrid[] = {0.1, 0.5, 1.0, 2.0, 0.0};
  return kGrid[index % 5];
}

TsgModel instance_game(std::uint64_t master, std::uint64_t tag, int index, int max_actions = 3) {
  const int agents = 2 + index % 2;
  const int states = 2 + (index / 2) % 2;
  const int actions = 2 + index % (max_actions - 1);
  return random_toy_game(derive_seed(master, tag, static_cast<std::uint64_t>(index)), agents,
                         states, actions, cycle_beta(index));
}

std::string game_note(int index, const std::string& what) {
  return "instance " + std::to_string(index) + ": " + what;
}

/// Deterministic enumeration maximum plus the two endpoints' own constants;
/// the deterministic max alone need not dominate stochastic policies.
double kappa_for(const TsgModel& model, const JointPolicy& mu, const JointPolicy& mu_prime) {
  double kappa = exhaustive_search(model).kemeny_star;
  kappa = std::max(kappa, kemeny_constant(induced_chain(model, mu).transition));
  kappa = std::max(kappa, kemeny_constant(induced_chain(model, mu_prime).transition));
  return kappa;
}

double path_kappa(const TsgModel& model, const JointPolicy& mu, const JointPolicy& mu_prime,
                  const std::vector<int>& order) {
  double kappa = exhaustive_search(model).kemeny_star;
  JointPolicy hybrid = mu;
  kappa = std::max(kappa, kemeny_constant(induced_chain(model, hybrid).transition));
  for (int agent : order) {
    hybrid.per_agent[static_cast<std::size_t>(agent)] =
        mu_prime.per_agent[static_cast<std::size_t>(agent)];
    kappa = std::max(kappa, kemeny_constant(induced_chain(model, hybrid).transition));
  }
  return kappa;
}

}  // namespace

SuiteResult verify_performance_difference(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "performance_difference";
  for (int i = 0; i < options.games; ++i) {
    const TsgModel model = instance_game(options.seed, kDifference, i);
    Rng rng(derive_seed(options.seed, kDifference, 1000 + static_cast<std::uint64_t>(i)));
    const JointPolicy mu = random_joint_policy(model, rng);
    const JointPolicy mu_prime = random_joint_policy(model, rng);

    const double lib = performance_difference_residual(model, mu, mu_prime);

    // Same identity from scratch; the quadratic-term hook lives only here.
    const PolicyEval base = evaluate(model, mu);
    const PolicyEval other = evaluate(model, mu_prime);
    const PolicyTable table = to_table(model, mu_prime);
    double gain = 0.0;
    for (int s = 0; s < model.num_states(); ++s) {
      double inner = 0.0;
      for (int a = 0; a < model.num_joint_actions(); ++a) {
        inner += table.at(s, a) * base.advantage(s, a);
      }
      gain += other.stationary[s] * inner;
    }
    const double shift = other.eta - base.eta;
    const double quadratic =
        (options.flip_difference_quadratic ? -1.0 : 1.0) * model.beta() * shift * shift;
    const double hand = std::abs(other.j_value - base.j_value - gain - quadratic);

    const double defect = std::max(lib, hand);
    result.record(defect < 1e-8, defect, game_note(i, "residual " + std::to_string(defect)));
  }
  return result;
}

SuiteResult verify_performance_derivative(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "performance_derivative";
  for (int i = 0; i < options.games; ++i) {
    const TsgModel model = instance_game(options.seed, kDerivative, i);
    Rng rng(derive_seed(options.seed, kDerivative, 1000 + static_cast<std::uint64_t>(i)));
    const JointPolicy mu = random_joint_policy(model, rng);
    JointPolicy direction = random_joint_policy(model, rng);
    if (i % 3 == 0) {
      // Single-agent mixing direction, the case the update scheme uses.
      const int agent = rng.next_int(model.num_agents());
      for (int j = 0; j < model.num_agents(); ++j) {
        if (j != agent) {
          direction.per_agent[static_cast<std::size_t>(j)] =
              mu.per_agent[static_cast<std::size_t>(j)];
        }
      }
    }
    const double exact = performance_derivative(model, mu, direction);
    const double fd = finite_difference_derivative(model, mu, direction, 1e-4);
    const double rel = std::abs(fd - exact) / std::max(1e-3, std::abs(exact));
    result.record(rel < 1e-3, rel, game_note(i, "relative error " + std::to_string(rel)));
  }
  return result;
}

SuiteResult verify_evaluator_invariants(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "evaluator_invariants";
  for (int i = 0; i < options.games; ++i) {
    const TsgModel model = instance_game(options.seed, kEvaluator, i);
    Rng rng(derive_seed(options.seed, kEvaluator, 1000 + static_cast<std::uint64_t>(i)));
    JointPolicy policy;
    if (i % 2 == 0) {
      policy = random_joint_policy(model, rng);
    } else {
      policy = random_deterministic_policy(model, rng).to_joint(model);
    }
    const PolicyEval eval = evaluate(model, policy);
    const InducedChain chain = induced_chain(model, policy);
    const PolicyTable table = to_table(model, policy);

    const double stat_res =
        (eval.stationary.transpose() * chain.transition - eval.stationary.transpose())
            .cwiseAbs()
            .maxCoeff();

    double bias_res = std::abs(eval.stationary.dot(eval.value) - eval.j_value);
    double balance_res = 0.0;
    for (int s = 0; s < model.num_states(); ++s) {
      double mean_f = 0.0;
      double balance = 0.0;
      for (int a = 0; a < model.num_joint_actions(); ++a) {
        mean_f += table.at(s, a) * eval.surrogate_reward(s, a);
        balance += table.at(s, a) * eval.advantage(s, a);
      }
      const double flow = chain.transition.row(s).dot(eval.value);
      bias_res = std::max(bias_res, std::abs(mean_f - eval.j_value + flow - eval.value[s]));
      balance_res = std::max(balance_res, std::abs(balance));
    }

    const double defect = std::max({stat_res, bias_res, balance_res});
    result.record(defect < 1e-8, defect,
                  game_note(i, "stationary " + std::to_string(stat_res) + ", bias " +
                                   std::to_string(bias_res) + ", balance " +
                                   std::to_string(balance_res)));
  }
  return result;
}

SuiteResult verify_simulation_consistency(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "simulation_consistency";
  for (int i = 0; i < options.games; ++i) {
    const TsgModel model = instance_game(options.seed, kSimulation, i);
    Rng rng(derive_seed(options.seed, kSimulation, 1000 + static_cast<std::uint64_t>(i)));
    const JointPolicy policy = random_joint_policy(model, rng);
    const PolicyEval eval = evaluate(model, policy);
    const SimulationResult sim =
        simulate(model, policy, options.simulation_steps,
                 derive_seed(options.seed, kSimulation, 2000 + static_cast<std::uint64_t>(i)),
                 true);

    const double se_eta = batch_means_se(sim.rewards, 1000);
    std::vector<double> deviations(sim.rewards.size());
    for (std::size_t t = 0; t < sim.rewards.size(); ++t) {
      const double d = sim.rewards[t] - sim.eta_hat;
      deviations[t] = d * d;
    }
    const double se_zeta = batch_means_se(deviations, 1000);

    const double eta_excess = std::abs(sim.eta_hat - eval.eta) - 3.0 * se_eta;
    const double zeta_excess = std::abs(sim.zeta_hat - eval.zeta) - 3.0 * se_zeta;
    const double defect = std::max(eta_excess, zeta_excess);
    result.record(defect <= 0.0, defect,
                  game_note(i, "eta excess " + std::to_string(eta_excess) + ", zeta excess " +
                                   std::to_string(zeta_excess)));
  }
  return result;
}

SuiteResult verify_improvement_bound(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "improvement_bound";
  for (int g = 0; g < options.games; ++g) {
    const TsgModel model = instance_game(options.seed, kJointBound, g, 2);
    const double kappa_det = exhaustive_search(model).kemeny_star;
    Rng rng(derive_seed(options.seed, kJointBound, 1000 + static_cast<std::uint64_t>(g)));
    for (int p = 0; p < options.pairs_per_game; ++p) {
      const JointPolicy mu = random_joint_policy(model, rng);
      const JointPolicy mu_prime = random_joint_policy(model, rng);
      const double kappa =
          std::max({kappa_det, kemeny_constant(induced_chain(model, mu).transition),
                    kemeny_constant(induced_chain(model, mu_prime).transition)});
      const BoundReport rep = trust_region_bound(model, mu, mu_prime, kappa);
      const double defect = rep.lower_bound - rep.actual_difference;
      result.record(defect <= 1e-8, defect,
                    "game " + std::to_string(g) + " pair " + std::to_string(p) + ": violation " +
                        std::to_string(defect));
    }
  }
  return result;
}

SuiteResult verify_sequential_bound(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "sequential_bound";
  const int paths = std::max(1, options.pairs_per_game / 5);
  for (int g = 0; g < options.games; ++g) {
    const TsgModel model = instance_game(options.seed, kSequential, g, 2);
    Rng rng(derive_seed(options.seed, kSequential, 1000 + static_cast<std::uint64_t>(g)));
    for (int p = 0; p < paths; ++p) {
      const JointPolicy mu = random_joint_policy(model, rng);
      const JointPolicy mu_prime = random_joint_policy(model, rng);
      const std::vector<int> order = rng.permutation(model.num_agents());
      const double kappa = path_kappa(model, mu, mu_prime, order);
      const SequentialBound bound =
          sequential_improvement_bound(model, mu, mu_prime, order, kappa);
      const double violation = bound.lower_bound - bound.actual;

      const BoundReport joint = trust_region_bound(model, mu, mu_prime, kappa);
      double gain_sum = 0.0;
      for (double gain : bound.surrogate_gains) {
        gain_sum += gain;
      }
      const double recompose = std::abs(gain_sum - joint.surrogate_gain);

      const double defect = std::max(violation, recompose);
      result.record(violation <= 1e-8 && recompose < 1e-10, defect,
                    "game " + std::to_string(g) + " path " + std::to_string(p) + ": violation " +
                        std::to_string(violation) + ", recompose " + std::to_string(recompose));
    }
  }
  return result;
}

SuiteResult verify_estimator_identity(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "estimator_identity";
  for (int g = 0; g < options.games; ++g) {
    const TsgModel model = instance_game(options.seed, kEstimator, g);
    Rng rng(derive_seed(options.seed, kEstimator, 1000 + static_cast<std::uint64_t>(g)));
    const JointPolicy mu = random_joint_policy(model, rng);
    const JointPolicy mu_prime = random_joint_policy(model, rng);
    const PolicyEval eval = evaluate(model, mu);
    for (int rep = 0; rep < 2; ++rep) {
      const std::vector<int> order = rng.permutation(model.num_agents());
      for (int position = 0; position < model.num_agents(); ++position) {
        for (int s = 0; s < model.num_states(); ++s) {
          const EstimatorCheck check =
              sequential_estimator_check(model, eval, mu, mu_prime, order, position, s);
          const double defect = std::abs(check.direct - check.ratio_form);
          result.record(defect < 1e-10, defect,
                        "game " + std::to_string(g) + " position " + std::to_string(position) +
                            " state " + std::to_string(s) + ": gap " + std::to_string(defect));
        }
      }
    }
  }
  return result;
}

SuiteResult verify_classification(const VerifyOptions& options) {
  SuiteResult result;
  result.name = "classification";
  for (int g = 0; g < options.games; ++g) {
    const TsgModel model = instance_game(options.seed, kClassify, g, 2);
    const EnumerationResult enumeration = exhaustive_search(model);
    Rng rng(derive_seed(options.seed, kClassify, 1000 + static_cast<std::uint64_t>(g)));

    auto in_ne_set = [&](const DeterministicPolicy& policy) {
      return std::find(enumeration.ne_set.begin(), enumeration.ne_set.end(), policy) !=
             enumeration.ne_set.end();
    };

    auto cross_validate = [&](const DeterministicPolicy& policy, const std::string& label) {
      const StationarityCheck stat = check_first_order_stationary(model, policy);
      result.record(stat.stationary, stat.worst_violation,
                    "game " + std::to_string(g) + " " + label + ": not stationary");
      if (!stat.stationary) {
        return;
      }
      const StationaryReport report = classify_stationary_point(model, policy);
      switch (report.classification) {
        case StationaryClass::strict_local_ne:
        case StationaryClass::local_ne_nonstrict: {
          const bool member = in_ne_set(policy);
          const bool certified = verify_local_ne(model, policy.to_joint(model));
          result.record(member && certified, member && certified ? 0.0 : 1.0,
                        "game " + std::to_string(g) + " " + label +
                            ": local NE classification disagrees with oracle");
          break;
        }
        case StationaryClass::saddle_escapable: {
          bool witnessed = false;
          for (const Witness& witness : report.eta_mismatch_witnesses) {
            DeterministicPolicy deviated = policy;
            deviated.action[static_cast<std::size_t>(witness.agent)] = witness.action;
            const PolicyEval probe = evaluate(model, deviated);
            if (std::abs(probe.eta - report.eta_base) > 1e-10) {
              witnessed = true;
              break;
            }
          }
          result.record(witnessed, witnessed ? 0.0 : 1.0,
                        "game " + std::to_string(g) + " " + label +
                            ": escapable point without a confirmed mean-shift witness");
          break;
        }
        case StationaryClass::unclassified_boundary:
          // Budget-limited outcome; nothing to cross-check on toy dims.
          result.record(true, 0.0, "");
          break;
      }
    };

    cross_validate(enumeration.global_argmax, "argmax");
    for (int start = 0; start < 3; ++start) {
      const DeterministicPolicy initial = random_deterministic_policy(model, rng);
      const SweepTrace trace = run_mv_mapi(
          model, initial, derive_seed(options.seed, kClassify, 3000 + static_cast<std::uint64_t>(g * 3 + start)));
      result.record(trace.converged, trace.converged ? 0.0 : 1.0,
                    "game " + std::to_string(g) + ": best-response run did not converge");
      if (trace.converged) {
        cross_validate(trace.final_policy, "limit " + std::to_string(start));
      }
    }
  }
  return result;
}

std::vector<SuiteResult> run_all_suites(const VerifyOptions& options) {
  return {verify_performance_difference(options), verify_performance_derivative(options),
          verify_evaluator_invariants(options),  verify_simulation_consistency(options),
          verify_improvement_bound(options),     verify_sequential_bound(options),
          verify_estimator_identity(options),    verify_classification(options)};
}

}  // namespace mvtsg
