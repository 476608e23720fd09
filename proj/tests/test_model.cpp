#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "mvtsg/model.hpp"

using namespace mvtsg;

namespace {

// 2-state 1-agent 2-action model with hand-set rows.
TsgModel tiny_model(double beta = 0.0) {
  std::vector<std::vector<std::vector<double>>> t{
      {{0.9, 0.1}, {0.5, 0.5}},
      {{0.2, 0.8}, {0.6, 0.4}},
  };
  std::vector<std::vector<double>> r{{1.0, 0.0}, {0.25, 0.75}};
  return TsgModel::from_dense(1, 2, {2}, t, r, beta);
}

}  // namespace

TEST_CASE("joint action encoding is mixed-radix with agent 0 most significant") {
  // Heterogeneous action counts: 3 x 2 x 4.
  int na = 3 * 2 * 4;
  std::vector<std::vector<std::vector<double>>> t(
      2, std::vector<std::vector<double>>(static_cast<std::size_t>(na), {0.5, 0.5}));
  std::vector<std::vector<double>> r(2, std::vector<double>(static_cast<std::size_t>(na), 0.0));
  TsgModel m = TsgModel::from_dense(3, 2, {3, 2, 4}, t, r, 0.0);

  CHECK(m.num_joint_actions() == 24);
  CHECK(m.joint_stride(0) == 8);
  CHECK(m.joint_stride(1) == 4);
  CHECK(m.joint_stride(2) == 1);

  std::vector<int> acts{2, 1, 3};
  int code = m.encode_joint(acts);
  CHECK(code == 2 * 8 + 1 * 4 + 3);
  auto comps = m.joint_components(code);
  CHECK(comps[0] == 2);
  CHECK(comps[1] == 1);
  CHECK(comps[2] == 3);

  // Round trip over the whole space.
  for (int a = 0; a < m.num_joint_actions(); ++a) {
    auto c = m.joint_components(a);
    CHECK(m.encode_joint(std::vector<int>(c.begin(), c.end())) == a);
  }

  CHECK(m.replace_component(code, 0, 0) == 1 * 4 + 3);
  CHECK(m.replace_component(code, 2, 0) == 2 * 8 + 1 * 4);
}

TEST_CASE("model validation rejects malformed input") {
  std::vector<std::vector<std::vector<double>>> t{{{0.9, 0.1}, {0.5, 0.5}},
                                                  {{0.2, 0.8}, {0.6, 0.4}}};
  std::vector<std::vector<double>> r{{1.0, 0.0}, {0.25, 0.75}};

  CHECK_THROWS_AS(TsgModel::from_dense(0, 2, {}, t, r, 0.0), PreconditionError);
  CHECK_THROWS_AS(TsgModel::from_dense(1, 2, {3}, t, r, 0.0), PreconditionError);

  auto bad_sum = t;
  bad_sum[0][0] = {0.9, 0.2};
  CHECK_THROWS_AS(TsgModel::from_dense(1, 2, {2}, bad_sum, r, 0.0), PreconditionError);

  auto negative = t;
  negative[0][0] = {1.1, -0.1};
  CHECK_THROWS_AS(TsgModel::from_dense(1, 2, {2}, negative, r, 0.0), PreconditionError);

  auto bad_reward = r;
  bad_reward[0][0] = std::nan("");
  CHECK_THROWS_AS(TsgModel::from_dense(1, 2, {2}, t, bad_reward, 0.0), PreconditionError);
}

TEST_CASE("sparse and dense construction agree") {
  TsgModel dense = tiny_model();
  std::vector<std::vector<std::pair<int, double>>> rows{
      {{0, 0.9}, {1, 0.1}}, {{0, 0.5}, {1, 0.5}}, {{0, 0.2}, {1, 0.8}}, {{0, 0.6}, {1, 0.4}}};
  TsgModel sparse = TsgModel::from_sparse(1, 2, {2}, rows, {1.0, 0.0, 0.25, 0.75}, 0.0);
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a) {
      CHECK(dense.reward(s, a) == sparse.reward(s, a));
      auto dr = dense.transition_row(s, a);
      auto sr = sparse.transition_row(s, a);
      REQUIRE(dr.next.size() == sr.next.size());
      for (std::size_t k = 0; k < dr.next.size(); ++k) {
        CHECK(dr.next[k] == sr.next[k]);
        CHECK(dr.prob[k] == sr.prob[k]);
      }
    }
  std::vector<std::vector<std::pair<int, double>>> duplicated{{{0, 0.5}, {0, 0.5}}};
  auto build_duplicated = [&] { TsgModel::from_sparse(1, 1, {1}, duplicated, {0.0}, 0.0); };
  CHECK_THROWS_AS(build_duplicated(), PreconditionError);
}

TEST_CASE("joint_probability multiplies per-agent probabilities") {
  TsgModel m = random_toy_game(3, 2, 2, 2, 0.0);

  JointPolicy uniform = JointPolicy::uniform(m);
  for (int a = 0; a < 4; ++a) CHECK(joint_probability(m, uniform, 0, a) == doctest::Approx(0.25));

  DeterministicPolicy det;
  det.action = {{1, 0}, {0, 1}};
  JointPolicy jd = det.to_joint(m);
  CHECK(jd.kind == PolicyKind::deterministic);
  int chosen = det.joint_action_at(m, 0);
  for (int a = 0; a < 4; ++a)
    CHECK(joint_probability(m, jd, 0, a) == (a == chosen ? 1.0 : 0.0));

  JointPolicy p = JointPolicy::uniform(m);
  p.per_agent[0].at(0, 0) = 0.3;
  p.per_agent[0].at(0, 1) = 0.7;
  p.per_agent[1].at(0, 0) = 0.5;
  p.per_agent[1].at(0, 1) = 0.5;
  CHECK(joint_probability(m, p, 0, m.encode_joint(std::vector<int>{0, 0})) ==
        doctest::Approx(0.15));

  // Probabilities over all joint actions sum to 1 at every state.
  Rng rng(99);
  JointPolicy q = random_joint_policy(m, rng);
  for (int s = 0; s < m.num_states(); ++s) {
    double sum = 0.0;
    for (int a = 0; a < m.num_joint_actions(); ++a) sum += joint_probability(m, q, s, a);
    CHECK(std::abs(sum - 1.0) < 1e-10);
  }
}

TEST_CASE("mix forms per-state convex combinations") {
  AgentPolicy base = AgentPolicy::deterministic(1, 2, {0});
  AgentPolicy dir = AgentPolicy::deterministic(1, 2, {1});

  AgentPolicy same = mix(base, dir, 0.0);
  CHECK(same.at(0, 0) == 1.0);
  CHECK(same.at(0, 1) == 0.0);

  AgentPolicy other = mix(base, dir, 1.0);
  CHECK(other.at(0, 0) == 0.0);
  CHECK(other.at(0, 1) == 1.0);

  AgentPolicy quarter = mix(base, dir, 0.25);
  CHECK(quarter.at(0, 0) == doctest::Approx(0.75));
  CHECK(quarter.at(0, 1) == doctest::Approx(0.25));
  quarter.validate();

  CHECK_THROWS_AS(mix(base, dir, -0.1), PreconditionError);
  CHECK_THROWS_AS(mix(base, dir, 1.1), PreconditionError);

  // Mixture rows stay normalized for random endpoints.
  TsgModel m = random_toy_game(17, 2, 3, 2, 0.5);
  Rng rng(5);
  JointPolicy a = random_joint_policy(m, rng);
  JointPolicy b = random_joint_policy(m, rng);
  MixedPolicy mixed{a, b, 0.37};
  PolicyTable table = mixed.realize(m);
  table.validate(1e-12);
}

TEST_CASE("deterministic policy enumeration counts and order") {
  TsgModel m1 = random_toy_game(2, 1, 2, 2, 0.0);
  CHECK(deterministic_policy_count(m1) == 4);

  TsgModel m2 = random_toy_game(2, 2, 2, 2, 0.0);
  CHECK(deterministic_policy_count(m2) == 16);
  int seen = 0;
  std::set<std::vector<std::vector<int>>> unique;
  for_each_deterministic_policy(m2, [&](const DeterministicPolicy& p) {
    ++seen;
    unique.insert(p.action);
  });
  CHECK(seen == 16);
  CHECK(unique.size() == 16);

  TsgModel m3 = random_toy_game(2, 3, 1, 3, 0.0);
  CHECK(deterministic_policy_count(m3) == 27);

  // First increments happen in the last agent's last state.
  DeterministicPolicyEnumerator it(m2);
  auto p0 = it.next();
  auto p1 = it.next();
  REQUIRE(p0.has_value());
  REQUIRE(p1.has_value());
  CHECK(p0->action == std::vector<std::vector<int>>{{0, 0}, {0, 0}});
  CHECK(p1->action == std::vector<std::vector<int>>{{0, 0}, {0, 1}});
}

TEST_CASE("enumeration cap raises a capacity error") {
  TsgModel big = random_toy_game(4, 3, 4, 4, 0.0);  // 4^12 = 16.7M policies
  CHECK(deterministic_policy_count(big) > DeterministicPolicyEnumerator::kDefaultEnumerationCap);
  CHECK_THROWS_AS(DeterministicPolicyEnumerator{big}, CapacityError);
  CHECK_NOTHROW(DeterministicPolicyEnumerator(big, std::uint64_t{1} << 40));
}

TEST_CASE("random_toy_game is a deterministic function of the seed") {
  TsgModel a = random_toy_game(123, 2, 3, 2, 1.0);
  TsgModel b = random_toy_game(123, 2, 3, 2, 1.0);
  TsgModel c = random_toy_game(124, 2, 3, 2, 1.0);
  CHECK(a.beta() == 1.0);
  bool all_equal = true, any_diff_c = false;
  for (int s = 0; s < 3; ++s)
    for (int j = 0; j < a.num_joint_actions(); ++j) {
      if (a.reward(s, j) != b.reward(s, j)) all_equal = false;
      if (a.reward(s, j) != c.reward(s, j)) any_diff_c = true;
      auto ra = a.transition_row(s, j);
      auto rb = b.transition_row(s, j);
      for (std::size_t k = 0; k < ra.prob.size(); ++k) {
        if (ra.prob[k] != rb.prob[k]) all_equal = false;
        REQUIRE(ra.prob[k] > 0.0);
      }
    }
  CHECK(all_equal);
  CHECK(any_diff_c);
}

TEST_CASE("uniform policy chain ergodicity screen") {
  CHECK(uniform_policy_chain_is_ergodic(random_toy_game(5, 2, 4, 2, 0.0)));

  // Deterministic 2-cycle: irreducible but periodic.
  std::vector<std::vector<std::vector<double>>> t{{{0.0, 1.0}}, {{1.0, 0.0}}};
  std::vector<std::vector<double>> r{{0.0}, {0.0}};
  TsgModel cycle = TsgModel::from_dense(1, 2, {1}, t, r, 0.0);
  CHECK_FALSE(uniform_policy_chain_is_ergodic(cycle));

  // Disconnected pair of self-loops: reducible.
  std::vector<std::vector<std::vector<double>>> t2{{{1.0, 0.0}}, {{0.0, 1.0}}};
  TsgModel split = TsgModel::from_dense(1, 2, {1}, t2, r, 0.0);
  CHECK_FALSE(uniform_policy_chain_is_ergodic(split));
}

TEST_CASE("policy helpers validate and classify kinds") {
  AgentPolicy det = AgentPolicy::deterministic(2, 3, {2, 0});
  CHECK(det.is_deterministic());
  CHECK(det.chosen_action(0) == 2);
  CHECK(det.chosen_action(1) == 0);

  AgentPolicy u = AgentPolicy::uniform(2, 3);
  CHECK_FALSE(u.is_deterministic());
  CHECK_THROWS_AS(u.chosen_action(0), PreconditionError);

  AgentPolicy bad = AgentPolicy::zeros(1, 2);
  bad.at(0, 0) = 0.6;
  bad.at(0, 1) = 0.5;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);

  TsgModel m = random_toy_game(8, 2, 2, 2, 0.0);
  JointPolicy jp = JointPolicy::uniform(m);
  AgentPolicy one_hot = AgentPolicy::deterministic(2, 2, {0, 1});
  JointPolicy replaced = with_agent(jp, 0, one_hot);
  CHECK(replaced.kind == PolicyKind::stochastic);
  JointPolicy both = with_agent(replaced, 1, one_hot);
  CHECK(both.kind == PolicyKind::deterministic);
}
