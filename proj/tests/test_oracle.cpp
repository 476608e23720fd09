#include <cmath>
#include <vector>

#include "doctest.h"
#include "mvtsg/chain.hpp"
#include "mvtsg/errors.hpp"
#include "mvtsg/model.hpp"
#include "mvtsg/oracle.hpp"

using namespace mvtsg;

namespace {

// Single state, one agent, arbitrary action rewards. J = max reward at any
// beta because a one-state deterministic policy has zero reward variance.
TsgModel bandit(const std::vector<double>& rewards, double beta) {
  std::vector<std::vector<std::vector<double>>> t(1);
  std::vector<std::vector<double>> r(1);
  for (double x : rewards) {
    t[0].push_back({1.0});
    r[0].push_back(x);
  }
  return TsgModel::from_dense(1, 1, {static_cast<int>(rewards.size())}, t, r, beta);
}

}  // namespace

TEST_CASE("exhaustive search solves a one-state one-agent game by inspection") {
  TsgModel m = bandit({0.2, 0.9, 0.4}, 0.7);
  EnumerationResult res = exhaustive_search(m, true);
  CHECK(res.table.size() == 3);
  CHECK(res.global_max_j == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(res.global_argmax.action[0][0] == 1);
  // The only policy no unilateral deviation improves is the maximum itself.
  REQUIRE(res.ne_set.size() == 1);
  CHECK(res.ne_set[0].action[0][0] == 1);
  // One-state chains hit every state in one step from anywhere.
  CHECK(res.kemeny_star == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exhaustive search anchors on a fixed two-agent game") {
  TsgModel m = random_toy_game(7, 2, 3, 2, 0.5);
  EnumerationResult res = exhaustive_search(m, true);
  CHECK(res.table.size() == 64);
  // Frozen against an independent scan of all 64 deterministic policies.
  CHECK(res.global_max_j == doctest::Approx(0.75088626300119576).epsilon(1e-12));
  CHECK(res.kemeny_star == doctest::Approx(6.3951641195685482).epsilon(1e-10));
  CHECK(res.ne_set.size() == 2);
  const std::vector<std::vector<int>> want = {{0, 1, 0}, {0, 0, 0}};
  CHECK(res.global_argmax.action == want);

  // The table's maximum matches the reported maximum and every row agrees
  // with a direct evaluation.
  double best = res.table[0].j_value;
  for (const auto& row : res.table) best = std::max(best, row.j_value);
  CHECK(best == res.global_max_j);
  for (int k = 0; k < 5; ++k) {
    const auto& row = res.table[static_cast<std::size_t>(k * 13 % 64)];
    PolicyEval ev = evaluate(m, row.policy);
    CHECK(row.eta == doctest::Approx(ev.eta).epsilon(1e-14));
    CHECK(row.zeta == doctest::Approx(ev.zeta).epsilon(1e-14));
    CHECK(row.j_value == doctest::Approx(ev.j_value).epsilon(1e-14));
  }
}

TEST_CASE("the global argmax is always in the equilibrium set") {
  for (std::uint64_t seed : {11, 12, 13, 14, 15, 16, 17, 18, 19, 20}) {
    TsgModel m = random_toy_game(seed, 2, 2, 2, 0.3);
    EnumerationResult res = exhaustive_search(m);
    bool found = false;
    for (const auto& ne : res.ne_set) {
      if (ne == res.global_argmax) found = true;
    }
    CHECK(found);
  }
}

TEST_CASE("exhaustive search respects the enumeration cap") {
  TsgModel big = random_toy_game(3, 2, 6, 4, 0.1);  // 4^12 policies
  CHECK_THROWS_AS(exhaustive_search(big), CapacityError);
}

TEST_CASE("simulation is seed-deterministic") {
  TsgModel m = random_toy_game(21, 2, 3, 2, 0.5);
  JointPolicy u = JointPolicy::uniform(m);
  SimulationResult a = simulate(m, u, 20000, 5);
  SimulationResult b = simulate(m, u, 20000, 5);
  SimulationResult c = simulate(m, u, 20000, 6);
  CHECK(a.eta_hat == b.eta_hat);
  CHECK(a.zeta_hat == b.zeta_hat);
  CHECK(a.eta_hat != c.eta_hat);
  CHECK(a.rewards.empty());
  SimulationResult d = simulate(m, u, 1000, 5, true);
  CHECK(d.rewards.size() == 1000);
}

TEST_CASE("simulation agrees with exact evaluation within sampling error") {
  TsgModel m = random_toy_game(7, 2, 3, 2, 0.5);
  JointPolicy u = JointPolicy::uniform(m);
  PolicyEval ev = evaluate(m, u);
  SimulationResult sim = simulate(m, u, 1000000, 42, true);
  const double se_eta = batch_means_se(sim.rewards);
  REQUIRE(se_eta > 0.0);
  CHECK(std::abs(sim.eta_hat - ev.eta) < 4.0 * se_eta);

  std::vector<double> sq(sim.rewards.size());
  for (std::size_t i = 0; i < sq.size(); ++i) {
    const double d = sim.rewards[i] - sim.eta_hat;
    sq[i] = d * d;
  }
  const double se_zeta = batch_means_se(sq);
  CHECK(std::abs(sim.zeta_hat - ev.zeta) < 4.0 * se_zeta);
}

TEST_CASE("batch means match the iid formula on uncorrelated data") {
  Rng rng(99);
  std::vector<double> xs(200000);
  for (double& x : xs) x = rng.next_double();
  const double se = batch_means_se(xs);
  const double iid = std::sqrt(1.0 / 12.0 / static_cast<double>(xs.size()));
  CHECK(se > 0.5 * iid);
  CHECK(se < 1.5 * iid);
}

TEST_CASE("directional derivative vanishes when the direction is the policy") {
  TsgModel m = random_toy_game(31, 2, 3, 2, 0.8);
  Rng rng(4);
  JointPolicy mu = random_joint_policy(m, rng);
  CHECK(std::abs(finite_difference_derivative(m, mu, mu, 1e-3)) < 1e-10);
}

TEST_CASE("finite differences track the closed-form derivative") {
  for (std::uint64_t seed : {41, 42, 43, 44, 45, 46, 47, 48}) {
    TsgModel m = random_toy_game(seed, 2, 3, 2, 0.5);
    Rng rng(seed + 100);
    JointPolicy mu = random_joint_policy(m, rng);
    JointPolicy dir = random_joint_policy(m, rng);
    const double exact = performance_derivative(m, mu, dir);
    const double fd = finite_difference_derivative(m, mu, dir, 1e-4);
    const double scale = std::max(1e-3, std::abs(exact));
    CHECK(std::abs(fd - exact) / scale < 1e-4);
  }
}

TEST_CASE("finite differences reject bad step sizes") {
  TsgModel m = random_toy_game(31, 2, 2, 2, 0.1);
  JointPolicy u = JointPolicy::uniform(m);
  CHECK_THROWS_AS(finite_difference_derivative(m, u, u, 0.0), PreconditionError);
  CHECK_THROWS_AS(finite_difference_derivative(m, u, u, 0.5), PreconditionError);
}

TEST_CASE("the mixing-path certificate accepts maxima and rejects dominated points") {
  TsgModel m = random_toy_game(7, 2, 3, 2, 0.5);
  EnumerationResult res = exhaustive_search(m);
  CHECK(verify_local_ne(m, res.global_argmax.to_joint(m)));

  // A policy strictly below the maximum in every table row cannot pass.
  EnumerationResult full = exhaustive_search(m, true);
  const DeterministicPolicy* worst = nullptr;
  double worst_j = 1e300;
  for (const auto& row : full.table) {
    if (row.j_value < worst_j) {
      worst_j = row.j_value;
      worst = &row.policy;
    }
  }
  REQUIRE(worst != nullptr);
  CHECK_FALSE(verify_local_ne(m, worst->to_joint(m)));
}

TEST_CASE("per-agent policy enumeration is lexicographic and capped") {
  TsgModel m = random_toy_game(51, 2, 2, 3, 0.2);
  auto maps = enumerate_agent_policies(m, 0, 1000);
  REQUIRE(maps.size() == 9);
  CHECK(maps[0] == std::vector<int>{0, 0});
  CHECK(maps[1] == std::vector<int>{0, 1});
  CHECK(maps[3] == std::vector<int>{1, 0});
  CHECK(maps[8] == std::vector<int>{2, 2});
  CHECK_THROWS_AS(enumerate_agent_policies(m, 0, 8), CapacityError);
}
