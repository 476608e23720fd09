#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "mvtsg/chain.hpp"
#include "mvtsg/errors.hpp"
#include "mvtsg/mapi.hpp"
#include "mvtsg/matrpo.hpp"
#include "mvtsg/microgrid.hpp"
#include "mvtsg/model.hpp"
#include "mvtsg/oracle.hpp"
#include "mvtsg/rng.hpp"

using namespace mvtsg;

namespace {

// One-state single-agent game: action k self-loops with reward rewards[k].
TsgModel reward_menu(const std::vector<double>& rewards, double beta) {
  std::vector<std::vector<std::vector<double>>> transition(1);
  std::vector<std::vector<double>> reward(1);
  for (double r : rewards) {
    transition[0].push_back({1.0});
    reward[0].push_back(r);
  }
  return TsgModel::from_dense(1, 1, {static_cast<int>(rewards.size())}, transition, reward, beta);
}

MatrpoConfig toy_config(int iterations, std::uint64_t seed) {
  MatrpoConfig cfg;
  cfg.num_envs = 8;
  cfg.episode_length = 250;
  cfg.total_steps = 8LL * 250 * iterations;
  cfg.seed = seed;
  cfg.exact_eval_every = 0;
  return cfg;
}

double mapi_multistart_best(const TsgModel& model) {
  double best = -1e300;
  for_each_deterministic_policy(model, [&](const DeterministicPolicy& start) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const SweepTrace trace = run_mv_mapi(model, start, seed);
      best = std::max(best, trace.iterations.back().j_value);
    }
  });
  return best;
}

std::vector<SoftmaxPolicy> softmax_from_joint(const JointPolicy& joint) {
  std::vector<SoftmaxPolicy> policies;
  for (const AgentPolicy& agent : joint.per_agent) {
    SoftmaxPolicy policy = SoftmaxPolicy::zeros(agent.num_states, agent.num_actions);
    for (int s = 0; s < agent.num_states; ++s) {
      for (int a = 0; a < agent.num_actions; ++a) {
        policy.logits(s, a) = std::log(agent.at(s, a));
      }
    }
    policies.push_back(std::move(policy));
  }
  return policies;
}

// Batch of identical steps at one observation, for drive-by-hand step tests.
Batch constant_step_batch(int steps, int action, double m_weight) {
  Batch batch;
  batch.trajectories.resize(1);
  Trajectory& traj = batch.trajectories[0];
  for (int t = 0; t <= steps; ++t) {
    traj.observations.push_back({0});
    traj.features.push_back({0});
  }
  traj.actions.assign(static_cast<std::size_t>(steps), {action});
  traj.rewards.assign(static_cast<std::size_t>(steps), 0.0);
  batch.m_weights.push_back(std::vector<double>(static_cast<std::size_t>(steps), m_weight));
  return batch;
}

double visitation_kl(const Batch& batch, int agent, const SoftmaxPolicy& old_policy,
                     const SoftmaxPolicy& new_policy) {
  double kl = 0.0;
  long long count = 0;
  for (const Trajectory& traj : batch.trajectories) {
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      const int o = traj.observations[t][static_cast<std::size_t>(agent)];
      const Eigen::VectorXd p = old_policy.probabilities(o);
      const Eigen::VectorXd q = new_policy.probabilities(o);
      for (int a = 0; a < p.size(); ++a) {
        kl += p[a] * (std::log(p[a]) - std::log(q[a]));
      }
      ++count;
    }
  }
  return kl / static_cast<double>(count);
}

}  // namespace

TEST_CASE("softmax policies normalize, stay positive, and sample proportionally") {
  SoftmaxPolicy policy = SoftmaxPolicy::zeros(2, 3);
  policy.logits << 1.0, 0.0, -1.0, 0.0, 0.0, 0.0;

  const Eigen::VectorXd uniform = policy.probabilities(1);
  for (int a = 0; a < 3; ++a) {
    CHECK(uniform[a] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  }

  const Eigen::VectorXd p = policy.probabilities(0);
  const double z = std::exp(1.0) + 1.0 + std::exp(-1.0);
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(p[2] == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-14));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.minCoeff() > 0.0);
  CHECK(policy.probability(0, 1) == doctest::Approx(p[1]).epsilon(1e-14));

  Rng rng(99);
  const int draws = 100000;
  std::vector<int> counts(3, 0);
  for (int i = 0; i < draws; ++i) {
    ++counts[static_cast<std::size_t>(policy.sample(0, rng))];
  }
  for (int a = 0; a < 3; ++a) {
    const double freq = static_cast<double>(counts[static_cast<std::size_t>(a)]) / draws;
    const double se = std::sqrt(p[a] * (1.0 - p[a]) / draws);
    CHECK(std::abs(freq - p[a]) <= 3.0 * se);
  }
}

TEST_CASE("model environment replays deterministically and reports model data") {
  const TsgModel model = random_toy_game(17, 2, 3, 2, 0.2);
  ModelEnv env(model);
  CHECK(env.num_agents() == 2);
  CHECK(env.observation_count(0) == 3);
  CHECK(env.action_count(1) == 2);
  CHECK(env.feature_count() == 3);
  CHECK(env.beta() == doctest::Approx(0.2));
  CHECK(env.exact_model() == &model);

  env.reset(5);
  std::vector<int> states;
  std::vector<double> rewards;
  std::vector<int> feats;
  for (int t = 0; t < 40; ++t) {
    states.push_back(env.observation(0));
    CHECK(env.observation(1) == states.back());
    env.active_features(feats);
    REQUIRE(feats.size() == 1);
    CHECK(feats[0] == states.back());
    const int joint = model.encode_joint(std::vector<int>{t % 2, (t / 2) % 2});
    const double expected = model.reward(states.back(), joint);
    rewards.push_back(env.step({t % 2, (t / 2) % 2}));
    CHECK(rewards.back() == expected);
  }
  env.reset(5);
  for (int t = 0; t < 40; ++t) {
    CHECK(env.observation(0) == states[static_cast<std::size_t>(t)]);
    CHECK(env.step({t % 2, (t / 2) % 2}) == rewards[static_cast<std::size_t>(t)]);
  }
}

TEST_CASE("microgrid rollout exposes local observations and component features") {
  MicrogridRolloutEnv env(build_scenario2_sampler(1.0, 3));
  CHECK(env.num_agents() == 5);
  CHECK(env.observation_count(2) == 216);
  CHECK(env.action_count(0) == 30);
  CHECK(env.feature_count() == 90);
  CHECK(env.beta() == doctest::Approx(1.0));
  CHECK(env.exact_model() == nullptr);

  env.reset(3);
  std::vector<int> feats;
  env.active_features(feats);
  REQUIRE(feats.size() == 15);
  for (int i = 0; i < 5; ++i) {
    CHECK(feats[static_cast<std::size_t>(3 * i)] == 18 * i);
    CHECK(feats[static_cast<std::size_t>(3 * i + 1)] == 18 * i + 6);
    CHECK(feats[static_cast<std::size_t>(3 * i + 2)] == 18 * i + 12);
    CHECK(env.observation(i) == 0);
  }

  // Idle joint action from the all-zero state: no charge, no curtailment.
  const double first = env.step(std::vector<int>(5, 12));
  CHECK(first == doctest::Approx(5.0 * (0.0 - 0.6)).epsilon(1e-12));

  Rng rng(8);
  for (int t = 0; t < 500; ++t) {
    std::vector<int> actions(5);
    for (int i = 0; i < 5; ++i) {
      actions[static_cast<std::size_t>(i)] = rng.next_int(30);
    }
    env.step(actions);
    env.active_features(feats);
    for (int i = 0; i < 5; ++i) {
      const int wind = feats[static_cast<std::size_t>(3 * i)] - 18 * i;
      const int load = feats[static_cast<std::size_t>(3 * i + 1)] - (18 * i + 6);
      const int storage = feats[static_cast<std::size_t>(3 * i + 2)] - (18 * i + 12);
      CHECK(wind >= 0);
      CHECK(wind < 6);
      CHECK(load >= 0);
      CHECK(load < 6);
      CHECK(storage >= 0);
      CHECK(storage < 6);
      CHECK(env.observation(i) == (wind * 6 + load) * 6 + storage);
    }
  }
}

TEST_CASE("collect reproduces batches from seeds and matches policy frequencies") {
  const TsgModel model = reward_menu({0.1, 0.2, 0.3}, 0.0);
  ModelEnv env(model);
  std::vector<SoftmaxPolicy> policies{SoftmaxPolicy::zeros(1, 3)};
  policies[0].logits << 0.3, -0.2, 0.9;

  const Batch a = collect(env, policies, 4, 2500, 11);
  const Batch b = collect(env, policies, 4, 2500, 11);
  REQUIRE(a.trajectories.size() == 4);
  CHECK(a.total_steps() == 10000);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.trajectories[i].actions == b.trajectories[i].actions);
    CHECK(a.trajectories[i].rewards == b.trajectories[i].rewards);
    CHECK(a.trajectories[i].observations == b.trajectories[i].observations);
  }
  const Batch c = collect(env, policies, 4, 2500, 12);
  bool differs = false;
  for (std::size_t i = 0; i < 4 && !differs; ++i) {
    differs = a.trajectories[i].actions != c.trajectories[i].actions;
  }
  CHECK(differs);

  const Eigen::VectorXd p = policies[0].probabilities(0);
  std::vector<int> counts(3, 0);
  for (const Trajectory& traj : a.trajectories) {
    for (const std::vector<int>& act : traj.actions) {
      ++counts[static_cast<std::size_t>(act[0])];
    }
  }
  for (int k = 0; k < 3; ++k) {
    const double freq = counts[static_cast<std::size_t>(k)] / 10000.0;
    const double se = std::sqrt(p[k] * (1.0 - p[k]) / 10000.0);
    CHECK(std::abs(freq - p[k]) <= 3.0 * se);
  }

  auto bad_shape = [&] {
    std::vector<SoftmaxPolicy> wrong{SoftmaxPolicy::zeros(1, 2)};
    collect(env, wrong, 2, 10, 0);
  };
  CHECK_THROWS_AS(bad_shape(), PreconditionError);
  auto too_short = [&] { collect(env, policies, 2, 1, 0); };
  CHECK_THROWS_AS(too_short(), PreconditionError);
}

TEST_CASE("constant-reward environment settles to zero advantages") {
  const TsgModel model = reward_menu({0.7, 0.7}, 0.3);
  ModelEnv env(model);
  MatrpoConfig cfg = toy_config(1, 0);
  cfg.alpha = 1.0;
  LearnerState state = initial_learner_state(env, cfg);

  Batch batch = collect(env, state.policies, 3, 100, 4);
  for (const Trajectory& traj : batch.trajectories) {
    for (double r : traj.rewards) {
      CHECK(r == 0.7);
    }
  }
  update_running_stats(state, batch);
  CHECK(state.eta_hat == doctest::Approx(0.7).epsilon(1e-13));
  CHECK(std::abs(state.zeta_hat) < 1e-13);
  CHECK(state.j_hat == doctest::Approx(0.7).epsilon(1e-13));

  compute_surrogate_rewards(batch, state);
  compute_gae(batch, state, state.critic);
  for (const std::vector<double>& adv : batch.advantages) {
    for (double a : adv) {
      CHECK(std::abs(a) < 1e-12);
    }
  }
  // Zero weights leave the trust-region update with nothing to improve.
  const SoftmaxPolicy unchanged = trust_region_step(0, batch, state);
  CHECK(unchanged.logits == state.policies[0].logits);
}

TEST_CASE("running statistics contract toward batch means") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  ModelEnv env(model);
  MatrpoConfig cfg = toy_config(1, 0);
  LearnerState state = initial_learner_state(env, cfg);
  const Batch batch = collect(env, state.policies, 8, 250, 21);

  double batch_mean = 0.0;
  for (const Trajectory& traj : batch.trajectories) {
    for (double r : traj.rewards) {
      batch_mean += r;
    }
  }
  batch_mean /= static_cast<double>(batch.total_steps());

  SUBCASE("alpha one replaces the estimate with the batch mean") {
    state.config.alpha = 1.0;
    update_running_stats(state, batch);
    CHECK(state.eta_hat == doctest::Approx(batch_mean).epsilon(1e-15));
    CHECK(state.j_hat ==
          doctest::Approx(state.eta_hat - state.beta * state.zeta_hat).epsilon(1e-15));
  }

  SUBCASE("repeated updates contract at rate one minus alpha") {
    state.config.alpha = 0.25;
    update_running_stats(state, batch);
    const double gap1 = std::abs(state.eta_hat - batch_mean);
    update_running_stats(state, batch);
    const double gap2 = std::abs(state.eta_hat - batch_mean);
    CHECK(gap2 == doctest::Approx(0.75 * gap1).epsilon(1e-10));
    CHECK(state.j_hat ==
          doctest::Approx(state.eta_hat - state.beta * state.zeta_hat).epsilon(1e-15));
  }

  SUBCASE("two hundred fixed-policy iterations track the exact mean within one percent") {
    const PolicyEval eval = evaluate(model, lower_to_joint(model, state.policies));
    for (int k = 0; k < 200; ++k) {
      const Batch sample = collect(env, state.policies, 8, 250, derive_seed(9, k, 5));
      update_running_stats(state, sample);
    }
    CHECK(std::abs(state.eta_hat - eval.eta) / std::abs(eval.eta) < 0.01);
    CHECK(std::abs(state.zeta_hat - eval.zeta) / std::abs(eval.zeta) < 0.01);
  }
}

TEST_CASE("gae matches one-step errors, telescoped sums, and exact advantages") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  ModelEnv env(model);
  MatrpoConfig cfg = toy_config(1, 0);
  LearnerState state = initial_learner_state(env, cfg);
  Batch batch = collect(env, state.policies, 4, 60, 31);
  update_running_stats(state, batch);
  compute_surrogate_rewards(batch, state);

  // A non-trivial critic makes the value terms matter.
  for (int s = 0; s < 3; ++s) {
    state.critic.weights[s] = 0.3 * s - 0.2;
  }

  SUBCASE("lambda zero returns the td errors") {
    state.config.gae_lambda = 0.0;
    compute_gae(batch, state, state.critic);
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      for (std::size_t t = 0; t < batch.advantages[b].size(); ++t) {
        const double delta = batch.surrogate_rewards[b][t] - state.j_hat +
                             batch.values[b][t + 1] - batch.values[b][t];
        CHECK(batch.advantages[b][t] == doctest::Approx(delta).epsilon(1e-14));
        CHECK(batch.m_weights[b][t] == batch.advantages[b][t]);
      }
    }
  }

  SUBCASE("zero critic at lambda one telescopes the centered rewards") {
    state.config.gae_lambda = 1.0;
    const LinearCritic zero = LinearCritic::zeros(3);
    compute_gae(batch, state, zero);
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      double tail = 0.0;
      for (std::size_t t = batch.advantages[b].size(); t-- > 0;) {
        tail += batch.surrogate_rewards[b][t] - state.j_hat;
        CHECK(batch.advantages[b][t] == doctest::Approx(tail).epsilon(1e-12));
      }
    }
  }

  SUBCASE("exact critic and exact stats make td errors unbiased for advantages") {
    const PolicyEval eval = evaluate(model, lower_to_joint(model, state.policies));
    state.eta_hat = eval.eta;
    state.zeta_hat = eval.zeta;
    state.j_hat = eval.j_value;
    state.config.gae_lambda = 0.0;
    LinearCritic exact = LinearCritic::zeros(3);
    for (int s = 0; s < 3; ++s) {
      exact.weights[s] = eval.value[s];
    }
    Batch big = collect(env, state.policies, 40, 500, 33);
    compute_surrogate_rewards(big, state);
    compute_gae(big, state, exact);

    std::map<std::pair<int, int>, std::vector<double>> groups;
    for (std::size_t b = 0; b < big.trajectories.size(); ++b) {
      const Trajectory& traj = big.trajectories[b];
      for (std::size_t t = 0; t < traj.actions.size(); ++t) {
        const int joint = model.encode_joint(traj.actions[t]);
        groups[{traj.observations[t][0], joint}].push_back(big.advantages[b][t]);
      }
    }
    int tested = 0;
    for (const auto& [key, samples] : groups) {
      if (samples.size() < 50) {
        continue;
      }
      double mean = 0.0;
      for (double v : samples) {
        mean += v;
      }
      mean /= static_cast<double>(samples.size());
      double var = 0.0;
      for (double v : samples) {
        var += (v - mean) * (v - mean);
      }
      var /= static_cast<double>(samples.size() - 1);
      const double se = std::sqrt(var / static_cast<double>(samples.size()));
      CHECK(std::abs(mean - eval.advantage(key.first, key.second)) <= 3.0 * se + 1e-12);
      ++tested;
    }
    CHECK(tested >= 10);
  }
}

TEST_CASE("avc targets pin values and the critic fit converges on them") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  ModelEnv env(model);
  MatrpoConfig cfg = toy_config(1, 0);
  LearnerState state = initial_learner_state(env, cfg);
  Batch batch = collect(env, state.policies, 4, 100, 41);
  update_running_stats(state, batch);
  compute_surrogate_rewards(batch, state);

  SUBCASE("zero advantages give value-preserving targets and a pure mean pull") {
    for (int s = 0; s < 3; ++s) {
      state.critic.weights[s] = 0.1 * s + 0.4;
    }
    compute_gae(batch, state, state.critic);
    for (std::vector<double>& m : batch.advantages) {
      std::fill(m.begin(), m.end(), 0.0);
    }
    avc_critic_targets(batch);
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      for (std::size_t t = 0; t < batch.critic_targets[b].size(); ++t) {
        CHECK(batch.critic_targets[b][t] == batch.values[b][t]);
      }
    }
    // Loss reduces to the squared mean of the predictions.
    double mean_value = 0.0;
    for (const std::vector<double>& vals : batch.values) {
      for (std::size_t t = 0; t + 1 < vals.size(); ++t) {
        mean_value += vals[t];
      }
    }
    mean_value /= static_cast<double>(batch.total_steps());
    CHECK(critic_loss(state.critic, batch, 0.01) ==
          doctest::Approx(0.01 * mean_value * mean_value).epsilon(1e-12));
    CHECK(critic_loss(state.critic, batch, 0.0) == doctest::Approx(0.0).epsilon(1e-15));
  }

  SUBCASE("without the mean pull the tabular fit approaches per-state target means") {
    compute_gae(batch, state, state.critic);
    avc_critic_targets(batch);
    std::map<int, std::pair<double, int>> per_state;
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      const Trajectory& traj = batch.trajectories[b];
      for (std::size_t t = 0; t < traj.actions.size(); ++t) {
        auto& [sum, count] = per_state[traj.observations[t][0]];
        sum += batch.critic_targets[b][t];
        ++count;
      }
    }
    fit_critic(state.critic, batch, 0.0, 4000, 5e-3, 0.5);
    const double loss = critic_loss(state.critic, batch, 0.0);
    for (const auto& [s, acc] : per_state) {
      const double target_mean = acc.first / acc.second;
      const double v = state.critic.value({s});
      CHECK(std::abs(v - target_mean) < 0.02 * std::max(1.0, std::abs(target_mean)));
    }
    CHECK(loss < critic_loss(LinearCritic::zeros(3), batch, 0.0));
  }

  SUBCASE("iterated fits recover exact value differences within ten percent") {
    const PolicyEval eval = evaluate(model, lower_to_joint(model, state.policies));
    LearnerState fresh = initial_learner_state(env, cfg);
    for (int k = 0; k < 300; ++k) {
      Batch sample = collect(env, fresh.policies, 8, 250, derive_seed(10, k, 6));
      update_running_stats(fresh, sample);
      compute_surrogate_rewards(sample, fresh);
      compute_gae(sample, fresh, fresh.critic);
      avc_critic_targets(sample);
      fit_critic(fresh.critic, sample, cfg.avc_coefficient, cfg.epochs, cfg.lr,
                 cfg.max_grad_norm);
    }
    for (int s = 1; s < 3; ++s) {
      const double learned = fresh.critic.value({s}) - fresh.critic.value({0});
      const double exact = eval.value[s] - eval.value[0];
      CHECK(std::abs(learned - exact) <= 0.10 * std::abs(exact));
    }
  }
}

TEST_CASE("m weights multiply by the logged-action probability ratio") {
  Batch batch;
  batch.trajectories.resize(1);
  Trajectory& traj = batch.trajectories[0];
  const std::vector<int> logged = {0, 1, 0, 1, 1, 0};
  for (std::size_t t = 0; t <= logged.size(); ++t) {
    traj.observations.push_back({0});
    traj.features.push_back({0});
  }
  for (int a : logged) {
    traj.actions.push_back({a});
    traj.rewards.push_back(0.0);
  }
  batch.m_weights.push_back({1.0, -2.0, 0.5, 3.0, 1.5, -0.25});
  const std::vector<double> original = batch.m_weights[0];

  SoftmaxPolicy old_policy = SoftmaxPolicy::zeros(1, 2);
  old_policy.logits << 0.0, std::log(3.0);  // p = (1/4, 3/4)

  SUBCASE("identical policies leave the weights alone") {
    propagate_m_weights(batch, 0, old_policy, old_policy);
    for (std::size_t t = 0; t < original.size(); ++t) {
      CHECK(batch.m_weights[0][t] == doctest::Approx(original[t]).epsilon(1e-14));
    }
  }

  SUBCASE("doubling the logged action's probability doubles its weights") {
    const SoftmaxPolicy new_policy = SoftmaxPolicy::zeros(1, 2);  // p = (1/2, 1/2)
    propagate_m_weights(batch, 0, old_policy, new_policy);
    for (std::size_t t = 0; t < original.size(); ++t) {
      const double ratio = logged[t] == 0 ? 2.0 : (0.5 / 0.75);
      CHECK(batch.m_weights[0][t] == doctest::Approx(original[t] * ratio).epsilon(1e-12));
    }
  }

  SUBCASE("vanishing old probability at a logged action is rejected") {
    SoftmaxPolicy extreme = SoftmaxPolicy::zeros(1, 2);
    extreme.logits << -60.0, 0.0;  // logged action 0 has probability ~ 9e-27
    auto degenerate = [&] { propagate_m_weights(batch, 0, extreme, old_policy); };
    CHECK_THROWS_AS(degenerate(), NumericalError);
  }
}

TEST_CASE("sequential advantage estimator identity holds by dual-route summation") {
  Rng rng(404);
  for (int round = 0; round < 20; ++round) {
    const int agents = 2 + round % 2;
    const int states = 2 + (round / 2) % 2;
    const int actions = 2 + round % 3;
    const double beta = round % 2 == 0 ? 0.0 : 0.5;
    const TsgModel model =
        random_toy_game(100 + static_cast<std::uint64_t>(round), agents, states, actions, beta);
    const JointPolicy mu = random_joint_policy(model, rng);
    const JointPolicy mu_prime = random_joint_policy(model, rng);
    const PolicyEval eval = evaluate(model, mu);
    const std::vector<int> order = rng.permutation(agents);
    for (int position = 0; position < agents; ++position) {
      for (int s = 0; s < states; ++s) {
        const EstimatorCheck check =
            sequential_estimator_check(model, eval, mu, mu_prime, order, position, s);
        CHECK(std::abs(check.direct - check.ratio_form) < 1e-10);
      }
    }
  }
}

TEST_CASE("ratio-propagated weights estimate the sequential advantage without bias") {
  for (int round = 0; round < 10; ++round) {
    const int actions = 2 + round % 2;
    const TsgModel model =
        random_toy_game(201 + static_cast<std::uint64_t>(round), 2, 2, actions, 0.5);
    Rng rng(derive_seed(7000, static_cast<std::uint64_t>(round)));
    const JointPolicy mu = random_joint_policy(model, rng);
    const JointPolicy mu_prime = random_joint_policy(model, rng);
    const PolicyEval eval = evaluate(model, mu);
    const std::vector<int> order = {0, 1};
    const int position = 1;  // nontrivial prefix: agent 0 already updated

    double exact = 0.0;
    for (int s = 0; s < model.num_states(); ++s) {
      exact += eval.stationary[s] *
               sequential_estimator_check(model, eval, mu, mu_prime, order, position, s).direct;
    }

    ModelEnv env(model);
    const std::vector<SoftmaxPolicy> behavior = softmax_from_joint(mu);
    const Batch batch = collect(env, behavior, 8, 500, derive_seed(7100, round));
    std::vector<double> samples;
    for (const Trajectory& traj : batch.trajectories) {
      for (std::size_t t = 0; t < traj.actions.size(); ++t) {
        const int s = traj.observations[t][0];
        const int a0 = traj.actions[t][0];
        const int a1 = traj.actions[t][1];
        const double prefix_ratio =
            mu_prime.per_agent[0].at(s, a0) / mu.per_agent[0].at(s, a0);
        const double ratio = mu_prime.per_agent[1].at(s, a1) / mu.per_agent[1].at(s, a1);
        const double advantage =
            eval.advantage(s, model.encode_joint(traj.actions[t]));
        samples.push_back((ratio - 1.0) * prefix_ratio * advantage);
      }
    }
    double mean = 0.0;
    for (double v : samples) {
      mean += v;
    }
    mean /= static_cast<double>(samples.size());
    const double se = batch_means_se(samples, 100);
    CHECK(std::abs(mean - exact) <= 3.0 * se);
  }
}

TEST_CASE("trust region steps keep kl inside the radius and never lose surrogate") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  ModelEnv env(model);
  MatrpoConfig cfg = toy_config(1, 0);
  LearnerState state = initial_learner_state(env, cfg);

  SUBCASE("zero weights are a no-op") {
    Batch batch = collect(env, state.policies, 2, 50, 51);
    batch.m_weights.assign(batch.trajectories.size(), {});
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      batch.m_weights[b].assign(batch.trajectories[b].rewards.size(), 0.0);
    }
    StepReport report;
    const SoftmaxPolicy updated = trust_region_step(0, batch, state, &report);
    CHECK(updated.logits == state.policies[0].logits);
    CHECK_FALSE(report.accepted);
    CHECK(report.surrogate_after == report.surrogate_before);
  }

  SUBCASE("accepted steps satisfy both acceptance rules on every sampled batch") {
    int accepted = 0;
    for (int round = 0; round < 12; ++round) {
      Batch batch = collect(env, state.policies, 4, 200, derive_seed(52, round));
      update_running_stats(state, batch);
      compute_surrogate_rewards(batch, state);
      compute_gae(batch, state, state.critic);
      const int agent = round % 2;
      StepReport report;
      const SoftmaxPolicy updated = trust_region_step(agent, batch, state, &report);
      if (report.accepted) {
        ++accepted;
        CHECK(report.mean_kl <= state.config.kl_epsilon);
        CHECK(report.surrogate_after > report.surrogate_before);
        const double recomputed =
            visitation_kl(batch, agent, state.policies[static_cast<std::size_t>(agent)], updated);
        CHECK(report.mean_kl == doctest::Approx(recomputed).epsilon(1e-10));
        state.policies[static_cast<std::size_t>(agent)] = updated;
      } else {
        CHECK(updated.logits == state.policies[static_cast<std::size_t>(agent)].logits);
      }
    }
    CHECK(accepted >= 8);
  }
}

TEST_CASE("exact-advantage trust region runs climb to the best-response surface") {
  for (std::uint64_t game_seed : {5, 8}) {
    const TsgModel model = random_toy_game(game_seed, 2, 2, 2, 0.5);
    const double mapi_best = mapi_multistart_best(model);
    ModelEnv env(model);
    MatrpoConfig cfg = toy_config(1, 0);
    LearnerState state = initial_learner_state(env, cfg);
    double previous = -1e300;
    double final_j = 0.0;
    for (int k = 0; k < 250; ++k) {
      const PolicyEval eval = evaluate(model, lower_to_joint(model, state.policies));
      CHECK(eval.j_value >= previous - 1e-6);
      previous = eval.j_value;
      final_j = eval.j_value;
      Batch batch = collect(env, state.policies, 8, 250, derive_seed(game_seed, k, 77));
      batch.m_weights.resize(batch.trajectories.size());
      for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
        const Trajectory& traj = batch.trajectories[b];
        batch.m_weights[b].resize(traj.rewards.size());
        for (std::size_t t = 0; t < traj.rewards.size(); ++t) {
          batch.m_weights[b][t] =
              eval.advantage(traj.observations[t][0], model.encode_joint(traj.actions[t]));
        }
      }
      Rng perm(derive_seed(game_seed, k, 78));
      for (int agent : perm.permutation(2)) {
        const SoftmaxPolicy updated = trust_region_step(agent, batch, state);
        propagate_m_weights(batch, agent, state.policies[static_cast<std::size_t>(agent)],
                            updated);
        state.policies[static_cast<std::size_t>(agent)] = updated;
      }
    }
    CHECK(std::abs(mapi_best - final_j) < 1e-3);
  }
}

TEST_CASE("clip steps follow the unclipped gradient inside the band and stall at its edge") {
  SUBCASE("ratios at one reproduce the plain policy-gradient ascent step") {
    Batch batch;
    batch.trajectories.resize(1);
    Trajectory& traj = batch.trajectories[0];
    const std::vector<int> logged = {0, 1, 0, 0, 1};
    const std::vector<double> weights = {1.0, -0.5, 0.25, 2.0, 1.5};
    for (std::size_t t = 0; t <= logged.size(); ++t) {
      traj.observations.push_back({0});
      traj.features.push_back({0});
    }
    for (int a : logged) {
      traj.actions.push_back({a});
      traj.rewards.push_back(0.0);
    }
    batch.m_weights.push_back(weights);

    const TsgModel model = reward_menu({0.0, 1.0}, 0.0);
    ModelEnv env(model);
    MatrpoConfig cfg = toy_config(1, 0);
    cfg.epochs = 1;
    cfg.num_minibatch = 1;
    LearnerState state = initial_learner_state(env, cfg);

    Eigen::RowVector2d grad = Eigen::RowVector2d::Zero();
    const Eigen::VectorXd p = state.policies[0].probabilities(0);
    for (std::size_t t = 0; t < logged.size(); ++t) {
      grad -= weights[t] * p.transpose();
      grad[logged[t]] += weights[t];
    }
    grad /= static_cast<double>(logged.size());
    if (grad.norm() > cfg.max_grad_norm) {
      grad *= cfg.max_grad_norm / grad.norm();
    }

    const SoftmaxPolicy updated = clip_step(0, batch, state, 99);
    CHECK(updated.logits(0, 0) == doctest::Approx(cfg.lr * grad[0]).epsilon(1e-12));
    CHECK(updated.logits(0, 1) == doctest::Approx(cfg.lr * grad[1]).epsilon(1e-12));
  }

  SUBCASE("positive weights saturate once the ratio reaches one plus epsilon") {
    const Batch batch = constant_step_batch(200, 0, 1.0);
    const TsgModel model = reward_menu({1.0, 0.0}, 0.0);
    ModelEnv env(model);
    LearnerState state = initial_learner_state(env, toy_config(1, 0));
    StepReport report;
    const SoftmaxPolicy updated = clip_step(0, batch, state, 7, &report);
    const double ratio = updated.probability(0, 0) / state.policies[0].probability(0, 0);
    CHECK(ratio > 1.15);
    CHECK(ratio < 1.0 + state.config.clip_epsilon + 0.01);
    CHECK(report.accepted);
  }
}

TEST_CASE("both step variants converge to the same objective on a toy game") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  double converged[2] = {0.0, 0.0};
  for (int variant = 0; variant < 2; ++variant) {
    MatrpoConfig cfg = toy_config(variant == 0 ? 400 : 800, 5);
    cfg.variant = variant == 0 ? StepVariant::trust_region : StepVariant::clip;
    cfg.exact_eval_every = cfg.iterations();
    ModelEnv env(model);
    const TrainResult result = train(env, cfg);
    converged[variant] = result.trace.back().j_exact;
  }
  CHECK(std::abs(converged[0] - converged[1]) < 5e-3);
}

TEST_CASE("sequential lower bound certifies random updates and a live training sweep") {
  auto candidate_kappa = [](const TsgModel& model, const JointPolicy& mu,
                            const JointPolicy& mu_prime, const std::vector<int>& order) {
    double kappa = exhaustive_search(model).kemeny_star;
    JointPolicy hybrid = mu;
    kappa = std::max(kappa, kemeny_constant(induced_chain(model, hybrid).transition));
    for (int agent : order) {
      hybrid.per_agent[static_cast<std::size_t>(agent)] =
          mu_prime.per_agent[static_cast<std::size_t>(agent)];
      kappa = std::max(kappa, kemeny_constant(induced_chain(model, hybrid).transition));
    }
    return kappa;
  };

  SUBCASE("random policy pairs never beat the bound") {
    Rng rng(515);
    for (int round = 0; round < 5; ++round) {
      const int agents = 2 + round % 2;
      const TsgModel model =
          random_toy_game(301 + static_cast<std::uint64_t>(round), agents, 2, 2, 0.4);
      for (int pair = 0; pair < 30; ++pair) {
        const JointPolicy mu = random_joint_policy(model, rng);
        const JointPolicy mu_prime = random_joint_policy(model, rng);
        const std::vector<int> order = rng.permutation(agents);
        const double kappa = candidate_kappa(model, mu, mu_prime, order);
        const SequentialBound bound =
            sequential_improvement_bound(model, mu, mu_prime, order, kappa);
        CHECK(bound.actual >= bound.lower_bound - 1e-8);

        // The per-position gains recompose the joint surrogate gain.
        const BoundReport joint = trust_region_bound(model, mu, mu_prime, kappa);
        double gain_sum = 0.0;
        for (double gain : bound.surrogate_gains) {
          gain_sum += gain;
        }
        CHECK(gain_sum == doctest::Approx(joint.surrogate_gain).epsilon(1e-10));
        CHECK(bound.eps_f == doctest::Approx(joint.eps_f).epsilon(1e-12));
      }
    }
  }

  SUBCASE("one exact-critic sweep stays above its certified floor") {
    const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
    ModelEnv env(model);
    MatrpoConfig cfg = toy_config(1, 0);
    LearnerState state = initial_learner_state(env, cfg);
    const JointPolicy mu = lower_to_joint(model, state.policies);
    const PolicyEval eval = evaluate(model, mu);
    state.eta_hat = eval.eta;
    state.zeta_hat = eval.zeta;
    state.j_hat = eval.j_value;
    LinearCritic exact = LinearCritic::zeros(3);
    for (int s = 0; s < 3; ++s) {
      exact.weights[s] = eval.value[s];
    }
    Batch batch = collect(env, state.policies, 8, 500, 61);
    compute_surrogate_rewards(batch, state);
    compute_gae(batch, state, exact);
    const std::vector<int> order = {1, 0};
    for (std::size_t h = 0; h < order.size(); ++h) {
      const int agent = order[h];
      const SoftmaxPolicy updated = trust_region_step(agent, batch, state);
      if (h + 1 < order.size()) {
        propagate_m_weights(batch, agent, state.policies[static_cast<std::size_t>(agent)],
                            updated);
      }
      state.policies[static_cast<std::size_t>(agent)] = updated;
    }
    const JointPolicy mu_prime = lower_to_joint(model, state.policies);
    const double kappa = candidate_kappa(model, mu, mu_prime, order);
    const SequentialBound bound =
        sequential_improvement_bound(model, mu, mu_prime, order, kappa);
    CHECK(bound.actual >= bound.lower_bound - 1e-8);
  }
}

TEST_CASE("training traces carry running stats, exact columns, and reproduce bytewise") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  MatrpoConfig cfg = toy_config(30, 2);
  cfg.exact_eval_every = 10;

  ModelEnv env(model);
  const TrainResult first = train(env, cfg);
  REQUIRE(first.trace.size() == 30);
  for (std::size_t k = 0; k < first.trace.size(); ++k) {
    const TraceRow& row = first.trace[k];
    CHECK(row.iteration == static_cast<int>(k));
    CHECK(row.j_hat ==
          doctest::Approx(row.eta_hat - model.beta() * row.zeta_hat).epsilon(1e-12));
    REQUIRE(row.mean_kl.size() == 2);
    CHECK(row.mean_kl[0] <= cfg.kl_epsilon + 1e-12);
    CHECK(row.mean_kl[1] <= cfg.kl_epsilon + 1e-12);
    const bool expect_exact = k % 10 == 0 || k + 1 == first.trace.size();
    CHECK(row.has_exact == expect_exact);
  }

  ModelEnv env_again(model);
  const TrainResult second = train(env_again, cfg);
  REQUIRE(second.trace.size() == first.trace.size());
  for (std::size_t k = 0; k < first.trace.size(); ++k) {
    CHECK(first.trace[k].eta_hat == second.trace[k].eta_hat);
    CHECK(first.trace[k].zeta_hat == second.trace[k].zeta_hat);
    CHECK(first.trace[k].j_hat == second.trace[k].j_hat);
    CHECK(first.trace[k].eta_exact == second.trace[k].eta_exact);
  }
  for (int i = 0; i < 2; ++i) {
    CHECK(first.state.policies[static_cast<std::size_t>(i)].logits ==
          second.state.policies[static_cast<std::size_t>(i)].logits);
  }

  MatrpoConfig other = cfg;
  other.seed = 3;
  ModelEnv env_other(model);
  const TrainResult third = train(env_other, other);
  CHECK(first.trace.back().eta_hat != third.trace.back().eta_hat);
}

TEST_CASE("the sampled objective drifts upward once estimates settle") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  MatrpoConfig cfg = toy_config(150, 2);
  ModelEnv env(model);

  // Noise scale of one EMA step, from the spread of per-trajectory means of
  // an initial-policy batch.
  LearnerState probe_state = initial_learner_state(env, cfg);
  const Batch probe = collect(env, probe_state.policies, cfg.num_envs, cfg.episode_length, 42);
  std::vector<double> means;
  for (const Trajectory& traj : probe.trajectories) {
    double m = 0.0;
    for (double r : traj.rewards) {
      m += r;
    }
    means.push_back(m / static_cast<double>(traj.rewards.size()));
  }
  double mu = 0.0;
  for (double m : means) {
    mu += m;
  }
  mu /= static_cast<double>(means.size());
  double var = 0.0;
  for (double m : means) {
    var += (m - mu) * (m - mu);
  }
  var /= static_cast<double>(means.size() - 1);
  const double band = 2.0 * cfg.alpha * std::sqrt(var / static_cast<double>(means.size()));

  const TrainResult result = train(env, cfg);
  for (std::size_t k = 21; k < result.trace.size(); ++k) {
    CHECK(result.trace[k].j_hat >= result.trace[k - 1].j_hat - band);
  }
  CHECK(result.trace.back().j_hat > result.trace.front().j_hat);
}

TEST_CASE("config validation rejects out-of-range hyperparameters") {
  MatrpoConfig cfg;
  cfg.total_steps = 16000;
  cfg.num_envs = 8;
  cfg.episode_length = 1000;
  CHECK(cfg.iterations() == 2);
  cfg.total_steps = 100;
  CHECK(cfg.iterations() == 1);

  auto reject = [](auto mutate) {
    MatrpoConfig bad;
    mutate(bad);
    bad.validate();
  };
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.episode_length = 1; }), PreconditionError);
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.alpha = 0.0; }), PreconditionError);
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.gae_lambda = 1.5; }), PreconditionError);
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.kl_epsilon = 0.0; }), PreconditionError);
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.num_minibatch = 0; }), PreconditionError);
  CHECK_THROWS_AS(reject([](MatrpoConfig& c) { c.exact_eval_every = -1; }), PreconditionError);

  const TsgModel model = reward_menu({0.0, 1.0}, 0.0);
  ModelEnv env(model);
  auto wrong_count = [&] {
    const std::vector<SoftmaxPolicy> none;
    collect(env, none, 1, 10, 0);
  };
  CHECK_THROWS_AS(wrong_count(), PreconditionError);
  auto wrong_shape = [&] {
    std::vector<SoftmaxPolicy> bad{SoftmaxPolicy::zeros(2, 2)};
    lower_to_joint(model, bad);
  };
  CHECK_THROWS_AS(wrong_shape(), PreconditionError);
}

TEST_CASE("sampling-only training runs end to end on the large scenario") {
  MicrogridRolloutEnv env(build_scenario2_sampler(0.5, 11));
  MatrpoConfig cfg;
  cfg.num_envs = 2;
  cfg.episode_length = 60;
  cfg.total_steps = 2LL * 60 * 4;
  cfg.seed = 11;
  const TrainResult result = train(env, cfg);
  REQUIRE(result.trace.size() == 4);
  for (const TraceRow& row : result.trace) {
    CHECK_FALSE(row.has_exact);
    CHECK(std::isfinite(row.j_hat));
    REQUIRE(row.mean_kl.size() == 5);
  }
  CHECK(result.state.iteration == 4);
  // Running mean should head toward the mostly negative early exchange power.
  CHECK(result.trace.back().eta_hat < 0.0);
}
