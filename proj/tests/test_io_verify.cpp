#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "mvtsg/chain.hpp"
#include "mvtsg/errors.hpp"
#include "mvtsg/io.hpp"
#include "mvtsg/mapi.hpp"
#include "mvtsg/matrpo.hpp"
#include "mvtsg/model.hpp"
#include "mvtsg/rng.hpp"
#include "mvtsg/verify.hpp"

using namespace mvtsg;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

struct FileGuard {
  std::string path;
  ~FileGuard() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("double formatting round-trips exactly") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 1e300, 0.0, -0.0, 123456789.123456789}) {
    const std::string text = format_double(v);
    CHECK(std::stod(text) == v);
  }
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("model files round-trip through the dense schema") {
  const TsgModel model = random_toy_game(19, 2, 3, 2, 0.7);
  FileGuard guard{temp_path("model_roundtrip.json")};
  save_model(model, guard.path);
  const TsgModel loaded = load_model(guard.path);

  CHECK(loaded.num_agents() == model.num_agents());
  CHECK(loaded.num_states() == model.num_states());
  CHECK(loaded.action_counts() == model.action_counts());
  CHECK(loaded.beta() == model.beta());

  Rng rng(3);
  const JointPolicy policy = random_joint_policy(model, rng);
  const PolicyEval a = evaluate(model, policy);
  const PolicyEval b = evaluate(loaded, policy);
  CHECK(a.eta == doctest::Approx(b.eta).epsilon(1e-15));
  CHECK(a.zeta == doctest::Approx(b.zeta).epsilon(1e-15));
  CHECK(a.j_value == doctest::Approx(b.j_value).epsilon(1e-15));
}

TEST_CASE("malformed model documents are rejected") {
  auto missing_key = [] {
    model_from_json_text(R"({"num_agents":1,"states":1,"action_sets":[1],"transition":[[[1.0]]],"reward":[[0.5]]})");
  };
  CHECK_THROWS_AS(missing_key(), PreconditionError);
  auto wrong_agents = [] {
    model_from_json_text(
        R"({"num_agents":2,"states":1,"action_sets":[1],"transition":[[[1.0]]],"reward":[[0.5]],"beta":0})");
  };
  CHECK_THROWS_AS(wrong_agents(), PreconditionError);
  auto not_json = [] { model_from_json_text("not json at all"); };
  CHECK_THROWS_AS(not_json(), PreconditionError);
  auto bad_row = [] {
    model_from_json_text(
        R"({"num_agents":1,"states":1,"action_sets":[1],"transition":[[[0.5]]],"reward":[[0.5]],"beta":0})");
  };
  CHECK_THROWS_AS(bad_row(), PreconditionError);
}

TEST_CASE("best-response traces survive the csv round trip") {
  const TsgModel model = random_toy_game(7, 2, 3, 2, 0.5);
  Rng rng(5);
  const DeterministicPolicy initial = random_deterministic_policy(model, rng);
  const SweepTrace trace = run_mv_mapi(model, initial, 11);
  REQUIRE(trace.iterations.size() > 1);

  FileGuard guard{temp_path("mapi_trace.csv")};
  write_mapi_trace_csv(guard.path, trace);
  const std::vector<SweepRecord> rows = read_mapi_trace_csv(guard.path);
  REQUIRE(rows.size() == trace.iterations.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].outer == trace.iterations[i].outer);
    CHECK(rows[i].inner == trace.iterations[i].inner);
    CHECK(rows[i].agent == trace.iterations[i].agent);
    CHECK(rows[i].eta == trace.iterations[i].eta);
    CHECK(rows[i].zeta == trace.iterations[i].zeta);
    CHECK(rows[i].j_value == trace.iterations[i].j_value);
    CHECK(rows[i].changed_states == trace.iterations[i].changed_states);
  }
  // Re-loaded rows still satisfy the module's monotonicity invariant.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].j_value >= rows[i - 1].j_value - 1e-10);
  }
}

TEST_CASE("training traces survive the csv round trip with optional columns") {
  const TsgModel model = random_toy_game(8, 2, 3, 2, 0.1);
  ModelEnv env(model);
  MatrpoConfig cfg;
  cfg.num_envs = 4;
  cfg.episode_length = 100;
  cfg.total_steps = 4LL * 100 * 6;
  cfg.seed = 12;
  cfg.exact_eval_every = 3;
  const TrainResult result = train(env, cfg);

  FileGuard guard{temp_path("matrpo_trace.csv")};
  write_matrpo_trace_csv(guard.path, result.trace);
  const std::vector<TraceRow> rows = read_matrpo_trace_csv(guard.path);
  REQUIRE(rows.size() == result.trace.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const TraceRow& expect = result.trace[i];
    CHECK(rows[i].iteration == expect.iteration);
    CHECK(rows[i].eta_hat == expect.eta_hat);
    CHECK(rows[i].zeta_hat == expect.zeta_hat);
    CHECK(rows[i].j_hat == expect.j_hat);
    CHECK(rows[i].has_exact == expect.has_exact);
    if (expect.has_exact) {
      CHECK(rows[i].eta_exact == expect.eta_exact);
      CHECK(rows[i].j_exact == expect.j_exact);
    }
    REQUIRE(rows[i].mean_kl.size() == expect.mean_kl.size());
    for (std::size_t k = 0; k < expect.mean_kl.size(); ++k) {
      CHECK(rows[i].mean_kl[k] == expect.mean_kl[k]);
    }
    // Module invariant preserved across the round trip.
    CHECK(rows[i].j_hat ==
          doctest::Approx(rows[i].eta_hat - model.beta() * rows[i].zeta_hat).epsilon(1e-12));
  }
}

TEST_CASE("verification suites pass, reproduce, and cap failure notes") {
  VerifyOptions options;
  options.games = 5;
  options.seed = 4;
  options.pairs_per_game = 20;
  options.simulation_steps = 50000;

  const std::vector<SuiteResult> suites = run_all_suites(options);
  REQUIRE(suites.size() == 8);
  for (const SuiteResult& suite : suites) {
    CHECK(suite.passed());
    CHECK(suite.checks > 0);
  }

  const std::vector<SuiteResult> again = run_all_suites(options);
  for (std::size_t i = 0; i < suites.size(); ++i) {
    CHECK(again[i].checks == suites[i].checks);
    CHECK(again[i].failures == suites[i].failures);
    CHECK(again[i].worst_residual == suites[i].worst_residual);
  }

  SUBCASE("the quadratic-term fault injection is caught") {
    VerifyOptions faulty = options;
    faulty.flip_difference_quadratic = true;
    const SuiteResult broken = verify_performance_difference(faulty);
    CHECK_FALSE(broken.passed());
    CHECK(broken.worst_residual > 1e-4);
    // Only the suite holding the hand-computed identity reacts to the hook.
    CHECK(verify_evaluator_invariants(faulty).passed());
  }

  SUBCASE("failure notes stay bounded") {
    SuiteResult capped;
    for (int i = 0; i < 100; ++i) {
      capped.record(false, 1.0, "note");
    }
    CHECK(capped.failures == 100);
    CHECK(capped.failure_notes.size() == 20);
  }
}
