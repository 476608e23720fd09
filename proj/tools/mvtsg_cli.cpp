// Command-line experiment runner: best-response sweeps, sampled-rollout
// training, exhaustive enumeration and the formula verification suites.
// Every command is deterministic given its flags; reruns produce
// byte-identical files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvtsg/chain.hpp"
#include "mvtsg/errors.hpp"
#include "mvtsg/io.hpp"
#include "mvtsg/mapi.hpp"
#include "mvtsg/matrpo.hpp"
#include "mvtsg/microgrid.hpp"
#include "mvtsg/model.hpp"
#include "mvtsg/oracle.hpp"
#include "mvtsg/rng.hpp"
#include "mvtsg/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mvtsg;

namespace {

struct EnvSpec {
  enum class Kind { scenario1, scenario2, toy, file } kind = Kind::scenario1;
  std::uint64_t toy_seed = 0;
  int toy_agents = 2, toy_states = 2, toy_actions = 2;
  std::string path;
  std::string tag;  // directory-safe name
};

EnvSpec parse_env(const std::string& text) {
  EnvSpec env;
  env.tag = text;
  for (char& c : env.tag) {
    if (c == ':' || c == '/' || c == '\\') {
      c = '_';
    }
  }
  if (text == "scenario1") {
    env.kind = EnvSpec::Kind::scenario1;
    return env;
  }
  if (text == "scenario2") {
    env.kind = EnvSpec::Kind::scenario2;
    return env;
  }
  if (text.rfind("toy:", 0) == 0) {
    env.kind = EnvSpec::Kind::toy;
    std::vector<long long> parts;
    std::string rest = text.substr(4);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const std::size_t next = rest.find(':', pos);
      const std::string piece = rest.substr(pos, next == std::string::npos ? next : next - pos);
      parts.push_back(std::stoll(piece));
      if (next == std::string::npos) {
        break;
      }
      pos = next + 1;
    }
    if (parts.size() != 4) {
      throw CLI::ValidationError("--env", "toy spec needs toy:SEED:AGENTS:STATES:ACTIONS");
    }
    env.toy_seed = static_cast<std::uint64_t>(parts[0]);
    env.toy_agents = static_cast<int>(parts[1]);
    env.toy_states = static_cast<int>(parts[2]);
    env.toy_actions = static_cast<int>(parts[3]);
    return env;
  }
  if (text.rfind("file:", 0) == 0) {
    env.kind = EnvSpec::Kind::file;
    env.path = text.substr(5);
    env.tag = "file_" + fs::path(env.path).stem().string();
    return env;
  }
  throw CLI::ValidationError("--env", "expected scenario1, scenario2, toy:S:N:S:A or file:PATH");
}

/// Exact model for one beta. File models keep their stored beta unless the
/// caller overrides it.
TsgModel build_exact_model(const EnvSpec& env, double beta, bool beta_explicit) {
  switch (env.kind) {
    case EnvSpec::Kind::scenario1:
      return build_scenario1(beta);
    case EnvSpec::Kind::toy:
      return random_toy_game(env.toy_seed, env.toy_agents, env.toy_states, env.toy_actions, beta);
    case EnvSpec::Kind::file: {
      std::ifstream in(env.path);
      if (!in) {
        throw PreconditionError("cannot open " + env.path);
      }
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      if (!beta_explicit) {
        return model_from_json_text(text);
      }
      json doc = json::parse(text, nullptr, false);
      if (doc.is_discarded()) {
        throw PreconditionError("malformed JSON in " + env.path);
      }
      doc["beta"] = beta;
      return model_from_json_text(doc.dump());
    }
    case EnvSpec::Kind::scenario2:
      break;
  }
  throw PreconditionError("scenario2 has no exact model; use the matrpo command");
}

std::vector<double> parse_beta_list(const std::string& text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t next = text.find(',', pos);
    const std::string piece = text.substr(pos, next == std::string::npos ? next : next - pos);
    if (!piece.empty()) {
      out.push_back(std::stod(piece));
    }
    if (next == std::string::npos) {
      break;
    }
    pos = next + 1;
  }
  if (out.empty()) {
    throw CLI::ValidationError("--beta", "list must not be empty");
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t next = text.find(',', pos);
    std::string piece = text.substr(pos, next == std::string::npos ? next : next - pos);
    if (!piece.empty()) {
      const std::size_t dots = piece.find("..");
      if (dots == std::string::npos) {
        out.push_back(std::stoull(piece));
      } else {
        const std::uint64_t lo = std::stoull(piece.substr(0, dots));
        const std::uint64_t hi = std::stoull(piece.substr(dots + 2));
        if (hi < lo) {
          throw CLI::ValidationError("--seed", "range upper end below lower end");
        }
        for (std::uint64_t s = lo; s <= hi; ++s) {
          out.push_back(s);
        }
      }
    }
    if (next == std::string::npos) {
      break;
    }
    pos = next + 1;
  }
  if (out.empty()) {
    throw CLI::ValidationError("--seed", "list must not be empty");
  }
  return out;
}

std::string classification_name(StationaryClass c) {
  switch (c) {
    case StationaryClass::strict_local_ne:
      return "strict_local_ne";
    case StationaryClass::local_ne_nonstrict:
      return "local_ne_nonstrict";
    case StationaryClass::saddle_escapable:
      return "saddle_escapable";
    case StationaryClass::unclassified_boundary:
      return "unclassified_boundary";
  }
  return "unknown";
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) {
    throw PreconditionError("cannot write " + path.string());
  }
  out << doc.dump(1) << '\n';
}

/// Display form for betas in names and tables; data files keep full %.17g.
std::string compact(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.12g", value);
  return buffer;
}

std::string run_dir_name(double beta, std::uint64_t seed) {
  return "beta" + compact(beta) + "_seed" + std::to_string(seed);
}

/// Applies config-file values for keys whose flag was not given explicitly.
class ConfigFile {
 public:
  ConfigFile(CLI::App* cmd, const std::string& path) : cmd_(cmd) {
    if (path.empty()) {
      return;
    }
    std::ifstream in(path);
    if (!in) {
      throw CLI::ValidationError("--config", "cannot open " + path);
    }
    doc_ = json::parse(in, nullptr, false);
    if (doc_.is_discarded() || !doc_.is_object()) {
      throw CLI::ValidationError("--config", "config must be a JSON object");
    }
  }

  template <typename T>
  void apply(const std::string& flag, const std::string& key, T& value) {
    if (doc_.is_null() || !doc_.contains(key)) {
      return;
    }
    if (cmd_->count(flag) > 0) {
      return;  // explicit flags win
    }
    value = doc_[key].get<T>();
  }

  bool has(const std::string& key) const { return !doc_.is_null() && doc_.contains(key); }

  /// beta and seed configs may be JSON arrays or scalars; normalize to the
  /// flag syntax before list parsing.
  void apply_list(const std::string& flag, const std::string& key, std::string& value) {
    if (doc_.is_null() || !doc_.contains(key) || cmd_->count(flag) > 0) {
      return;
    }
    const json& entry = doc_[key];
    if (entry.is_string()) {
      value = entry.get<std::string>();
      return;
    }
    std::string joined;
    const auto append = [&](const json& item) {
      if (!joined.empty()) {
        joined += ',';
      }
      joined += item.is_number_integer() ? std::to_string(item.get<long long>())
                                         : format_double(item.get<double>());
    };
    if (entry.is_array()) {
      for (const json& item : entry) {
        append(item);
      }
    } else {
      append(entry);
    }
    value = joined;
  }

 private:
  CLI::App* cmd_;
  json doc_;
};

struct RunRow {
  double beta = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  json detail;
};

json rows_to_json(const std::vector<RunRow>& rows) {
  json arr = json::array();
  for (const RunRow& row : rows) {
    json entry;
    entry["beta"] = row.beta;
    entry["seed"] = row.seed;
    entry["ok"] = row.ok;
    if (!row.ok) {
      entry["error"] = row.error;
    } else {
      entry["result"] = row.detail;
    }
    arr.push_back(std::move(entry));
  }
  return arr;
}

int finish_command(const std::vector<RunRow>& rows, const fs::path& dir) {
  int failures = 0;
  for (const RunRow& row : rows) {
    if (!row.ok) {
      ++failures;
      std::cerr << "run beta=" << compact(row.beta) << " seed=" << row.seed
                << " failed: " << row.error << '\n';
    }
  }
  json summary;
  summary["runs"] = rows_to_json(rows);
  summary["failed_runs"] = failures;
  write_json(dir / "summary.json", summary);
  if (failures == static_cast<int>(rows.size()) && !rows.empty()) {
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_mapi(const EnvSpec& env, const std::vector<double>& betas,
             const std::vector<std::uint64_t>& seeds, bool beta_explicit, const fs::path& out,
             bool modified, bool all_starts, bool classify) {
  const fs::path base = out / (modified ? "mapi-modified" : "mapi") / env.tag;
  fs::create_directories(base);
  std::vector<RunRow> rows;
  std::cout << "command=" << (modified ? "mapi-modified" : "mapi") << " env=" << env.tag << '\n';
  std::cout << "beta,seed,converged,eta,zeta,j_value,classification\n";

  for (double beta : betas) {
    TsgModel model = build_exact_model(env, beta, beta_explicit);

    if (all_starts) {
      // Every deterministic start, one run each; agreement with enumeration.
      const EnumerationResult enumeration = exhaustive_search(model);
      const fs::path dir = base / ("beta" + compact(beta) + "_allstarts");
      fs::create_directories(dir);
      std::ofstream starts(dir / "starts.csv");
      starts << "start,eta,zeta,j_value,converged,classification\n";
      double best = -1e300;
      std::vector<double> distinct;
      int index = 0;
      for_each_deterministic_policy(model, [&](const DeterministicPolicy& initial) {
        const SweepTrace trace = run_mv_mapi(model, initial, seeds.front());
        const SweepRecord& last = trace.iterations.back();
        std::string cls = "skipped";
        if (classify && trace.converged) {
          cls = classification_name(
              classify_stationary_point(model, trace.final_policy).classification);
        }
        starts << index << ',' << format_double(last.eta) << ',' << format_double(last.zeta)
               << ',' << format_double(last.j_value) << ',' << (trace.converged ? 1 : 0) << ','
               << cls << '\n';
        best = std::max(best, last.j_value);
        const bool seen = std::any_of(distinct.begin(), distinct.end(), [&](double v) {
          return std::abs(v - last.j_value) < 1e-9;
        });
        if (!seen) {
          distinct.push_back(last.j_value);
        }
        ++index;
      });
      const double gap = enumeration.global_max_j - best;
      std::cout << "all-starts beta=" << compact(beta) << ": starts=" << index
                << " distinct_j=" << distinct.size()
                << " enumeration_optimum_reached=" << (std::abs(gap) <= 1e-9 ? "yes" : "no")
                << " gap=" << format_double(gap) << '\n';
      RunRow row;
      row.beta = beta;
      row.seed = seeds.front();
      row.ok = true;
      row.detail = {{"starts", index},
                    {"distinct_j", distinct},
                    {"best_j", best},
                    {"enumeration_max_j", enumeration.global_max_j},
                    {"gap", gap}};
      rows.push_back(std::move(row));
      continue;
    }

    for (std::uint64_t seed : seeds) {
      RunRow row;
      row.beta = beta;
      row.seed = seed;
      try {
        Rng start_rng(derive_seed(seed, 0x696e6974));
        const DeterministicPolicy initial = random_deterministic_policy(model, start_rng);
        const fs::path dir = base / run_dir_name(beta, seed);
        fs::create_directories(dir);

        SweepTrace trace;
        json report;
        if (modified) {
          const ModifiedRunResult result = run_modified_mv_mapi(model, initial, seed);
          trace = result.trace;
          report["restarts"] = result.restarts;
          report["classification"] = classification_name(result.report.classification);
        } else {
          trace = run_mv_mapi(model, initial, seed);
          if (classify && trace.converged) {
            report["classification"] =
                classification_name(classify_stationary_point(model, trace.final_policy).classification);
          }
        }
        const SweepRecord& last = trace.iterations.back();
        report["beta"] = beta;
        report["seed"] = seed;
        report["converged"] = trace.converged;
        report["eta"] = last.eta;
        report["zeta"] = last.zeta;
        report["j_value"] = last.j_value;
        report["final_policy"] = trace.final_policy.action;
        report["permutations"] = trace.permutations;
        write_mapi_trace_csv((dir / "trace.csv").string(), trace);
        write_json(dir / "report.json", report);

        std::cout << compact(beta) << ',' << seed << ',' << (trace.converged ? 1 : 0)
                  << ',' << format_double(last.eta) << ',' << format_double(last.zeta) << ','
                  << format_double(last.j_value) << ','
                  << (report.contains("classification")
                          ? report["classification"].get<std::string>()
                          : std::string("skipped"))
                  << '\n';
        row.ok = true;
        row.detail = std::move(report);
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  return finish_command(rows, base);
}

// ---------------------------------------------------------------------------

int cmd_matrpo(const EnvSpec& env, const std::vector<double>& betas,
               const std::vector<std::uint64_t>& seeds, bool beta_explicit, const fs::path& out,
               const MatrpoConfig& base_config, int eval_every) {
  const fs::path base = out / "matrpo" / env.tag;
  fs::create_directories(base);
  std::vector<RunRow> rows;
  std::cout << "command=matrpo env=" << env.tag << " variant="
            << (base_config.variant == StepVariant::clip ? "clip" : "trust_region") << '\n';
  std::cout << "beta,seed,eta_hat,zeta_hat,j_hat,eta_exact,zeta_exact,j_exact\n";

  json summary_by_beta = json::object();
  for (double beta : betas) {
    std::vector<double> final_eta, final_zeta, final_j;
    for (std::uint64_t seed : seeds) {
      RunRow row;
      row.beta = beta;
      row.seed = seed;
      try {
        std::optional<TsgModel> model;
        std::unique_ptr<RolloutEnv> rollout;
        if (env.kind == EnvSpec::Kind::scenario2) {
          rollout = std::make_unique<MicrogridRolloutEnv>(build_scenario2_sampler(beta, seed));
        } else {
          model.emplace(build_exact_model(env, beta, beta_explicit));
          rollout = std::make_unique<ModelEnv>(*model);
        }
        MatrpoConfig config = base_config;
        config.seed = seed;
        config.exact_eval_every = env.kind == EnvSpec::Kind::scenario2 ? 0 : eval_every;
        config.validate();

        const TrainResult result = train(*rollout, config);
        const TraceRow& last = result.trace.back();
        const fs::path dir = base / run_dir_name(beta, seed);
        fs::create_directories(dir);
        write_matrpo_trace_csv((dir / "trace.csv").string(), result.trace);

        json report;
        report["beta"] = beta;
        report["seed"] = seed;
        report["iterations"] = static_cast<int>(result.trace.size());
        report["variant"] = config.variant == StepVariant::clip ? "clip" : "trust_region";
        report["eta_hat"] = last.eta_hat;
        report["zeta_hat"] = last.zeta_hat;
        report["j_hat"] = last.j_hat;
        if (last.has_exact) {
          report["eta_exact"] = last.eta_exact;
          report["zeta_exact"] = last.zeta_exact;
          report["j_exact"] = last.j_exact;
        }
        json logits = json::array();
        for (const SoftmaxPolicy& policy : result.state.policies) {
          json rows_json = json::array();
          for (int s = 0; s < policy.logits.rows(); ++s) {
            std::vector<double> r(static_cast<std::size_t>(policy.logits.cols()));
            for (int a = 0; a < policy.logits.cols(); ++a) {
              r[static_cast<std::size_t>(a)] = policy.logits(s, a);
            }
            rows_json.push_back(r);
          }
          logits.push_back(std::move(rows_json));
        }
        report["policy_logits"] = std::move(logits);
        write_json(dir / "report.json", report);

        final_eta.push_back(last.has_exact ? last.eta_exact : last.eta_hat);
        final_zeta.push_back(last.has_exact ? last.zeta_exact : last.zeta_hat);
        final_j.push_back(last.has_exact ? last.j_exact : last.j_hat);

        std::cout << compact(beta) << ',' << seed << ',' << format_double(last.eta_hat)
                  << ',' << format_double(last.zeta_hat) << ',' << format_double(last.j_hat);
        if (last.has_exact) {
          std::cout << ',' << format_double(last.eta_exact) << ','
                    << format_double(last.zeta_exact) << ',' << format_double(last.j_exact);
        } else {
          std::cout << ",,,";
        }
        std::cout << '\n';
        report.erase("policy_logits");
        row.ok = true;
        row.detail = std::move(report);
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }

    if (!final_j.empty()) {
      auto mean_std = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) {
          mean += x;
        }
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) {
          var += (x - mean) * (x - mean);
        }
        var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
        return std::pair<double, double>(mean, std::sqrt(var));
      };
      const auto [eta_mean, eta_std] = mean_std(final_eta);
      const auto [zeta_mean, zeta_std] = mean_std(final_zeta);
      const auto [j_mean, j_std] = mean_std(final_j);
      summary_by_beta[compact(beta)] = {
          {"runs", final_j.size()},       {"eta_mean", eta_mean},   {"eta_std", eta_std},
          {"zeta_mean", zeta_mean},       {"zeta_std", zeta_std},   {"j_mean", j_mean},
          {"j_std", j_std}};
      std::cout << "beta=" << compact(beta) << " mean_eta=" << format_double(eta_mean)
                << " mean_zeta=" << format_double(zeta_mean)
                << " mean_j=" << format_double(j_mean) << " over " << final_j.size()
                << " seeds\n";
    }
  }

  int failures = 0;
  for (const RunRow& row : rows) {
    if (!row.ok) {
      ++failures;
      std::cerr << "run beta=" << compact(row.beta) << " seed=" << row.seed
                << " failed: " << row.error << '\n';
    }
  }
  json summary;
  summary["runs"] = rows_to_json(rows);
  summary["failed_runs"] = failures;
  summary["by_beta"] = std::move(summary_by_beta);
  write_json(base / "summary.json", summary);
  return failures == static_cast<int>(rows.size()) && !rows.empty() ? 1 : 0;
}

// ---------------------------------------------------------------------------

int cmd_verify(const VerifyOptions& options, const fs::path& out) {
  const fs::path dir = out / "verify";
  fs::create_directories(dir);
  const std::vector<SuiteResult> suites = run_all_suites(options);
  json report;
  report["games"] = options.games;
  report["seed"] = options.seed;
  json suites_json = json::array();
  bool all_passed = true;
  int total_checks = 0;
  int total_failures = 0;
  for (const SuiteResult& suite : suites) {
    std::cout << suite.name << ": " << (suite.passed() ? "pass" : "FAIL") << " ("
              << suite.checks << " checks, " << suite.failures
              << " failures, worst residual " << format_double(suite.worst_residual) << ")\n";
    all_passed = all_passed && suite.passed();
    total_checks += suite.checks;
    total_failures += suite.failures;
    json entry;
    entry["name"] = suite.name;
    entry["checks"] = suite.checks;
    entry["failures"] = suite.failures;
    entry["worst_residual"] = suite.worst_residual;
    entry["notes"] = suite.failure_notes;
    suites_json.push_back(std::move(entry));
  }
  report["suites"] = std::move(suites_json);
  report["total_checks"] = total_checks;
  report["total_failures"] = total_failures;
  write_json(dir / "report.json", report);
  std::cout << "total: " << total_checks << " checks, " << total_failures << " failures\n";
  return all_passed ? 0 : 1;
}

// ---------------------------------------------------------------------------

int cmd_enumerate(const EnvSpec& env, double beta, bool beta_explicit, const fs::path& out,
                  bool table) {
  const TsgModel model = build_exact_model(env, beta, beta_explicit);
  const EnumerationResult result = exhaustive_search(model, table);
  const fs::path dir = out / "enumerate" / env.tag;
  fs::create_directories(dir);

  json summary;
  summary["beta"] = model.beta();
  summary["global_max_j"] = result.global_max_j;
  summary["global_argmax"] = result.global_argmax.action;
  summary["ne_count"] = result.ne_set.size();
  summary["kemeny_star"] = result.kemeny_star;
  write_json(dir / "summary.json", summary);

  if (table) {
    std::ofstream csv(dir / "table.csv");
    csv << "index,j_value,eta,zeta\n";
    for (std::size_t i = 0; i < result.table.size(); ++i) {
      csv << i << ',' << format_double(result.table[i].j_value) << ','
          << format_double(result.table[i].eta) << ',' << format_double(result.table[i].zeta)
          << '\n';
    }
  }

  std::cout << "states=" << model.num_states() << " joint_actions=" << model.num_joint_actions()
            << '\n';
  std::cout << "global_max_j=" << format_double(result.global_max_j)
            << " ne_count=" << result.ne_set.size()
            << " kemeny_star=" << format_double(result.kemeny_star) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Solver toolkit for long-run mean-variance team stochastic games"};
  app.require_subcommand(1);

  std::string env_text = "scenario1";
  std::string beta_text = "0,0.1,0.5,1,2";
  std::string seed_text = "1..6";
  std::string out_text = "runs";
  std::string config_path;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--env", env_text, "scenario1 | scenario2 | toy:SEED:N:S:A | file:PATH");
    cmd->add_option("--beta", beta_text, "comma-separated trade-off coefficients");
    cmd->add_option("--seed", seed_text, "comma list and a..b ranges");
    cmd->add_option("--out", out_text, "output directory root");
    cmd->add_option("--config", config_path, "JSON file with defaults for these flags");
  };

  CLI::App* mapi = app.add_subcommand("mapi", "sequential best-response solver runs");
  CLI::App* mapi_mod =
      app.add_subcommand("mapi-modified", "best-response runs with saddle-escape restarts");
  bool all_starts = false;
  bool no_classify = false;
  for (CLI::App* cmd : {mapi, mapi_mod}) {
    add_common(cmd);
    cmd->add_flag("--all-starts", all_starts,
                  "run every deterministic start (enumerable games only)");
    cmd->add_flag("--no-classify", no_classify, "skip stationary-point classification");
  }

  CLI::App* matrpo = app.add_subcommand("matrpo", "sampled-rollout policy-gradient training");
  add_common(matrpo);
  MatrpoConfig train_config;
  std::string variant_text = "trust_region";
  int eval_every = 10;
  matrpo->add_option("--total-steps", train_config.total_steps, "environment steps overall");
  matrpo->add_option("--num-envs", train_config.num_envs, "trajectories per iteration");
  matrpo->add_option("--episode-length", train_config.episode_length, "steps per trajectory");
  matrpo->add_option("--num-minibatch", train_config.num_minibatch, "clip minibatches per epoch");
  matrpo->add_option("--lr", train_config.lr, "gradient-descent learning rate");
  matrpo->add_option("--epochs", train_config.epochs, "critic and clip epochs");
  matrpo->add_option("--max-grad-norm", train_config.max_grad_norm, "gradient clipping norm");
  matrpo->add_option("--gae-lambda", train_config.gae_lambda, "advantage smoothing weight");
  matrpo->add_option("--alpha", train_config.alpha, "running-statistics step size");
  matrpo->add_option("--avc-coefficient", train_config.avc_coefficient,
                     "critic mean-pinning weight");
  matrpo->add_option("--kl-epsilon", train_config.kl_epsilon, "trust-region radius");
  matrpo->add_option("--clip-epsilon", train_config.clip_epsilon, "ratio clipping band");
  matrpo->add_option("--variant", variant_text, "trust_region | clip");
  matrpo->add_option("--eval-every", eval_every,
                     "exact-evaluation cadence on exact games (0 disables)");

  CLI::App* verify = app.add_subcommand("verify", "formula and bound verification suites");
  VerifyOptions verify_options;
  verify->add_option("--games", verify_options.games, "instances per suite");
  verify->add_option("--seed", verify_options.seed, "master seed");
  verify->add_option("--pairs", verify_options.pairs_per_game, "policy pairs per bound game");
  verify->add_option("--sim-steps", verify_options.simulation_steps,
                     "steps per consistency rollout");
  verify->add_option("--out", out_text, "output directory root");
  verify
      ->add_flag("--flip-difference-quadratic", verify_options.flip_difference_quadratic,
                 "fault-injection hook; a healthy build must fail the difference suite")
      ->group("");  // hidden

  CLI::App* enumerate = app.add_subcommand("enumerate", "exhaustive deterministic-policy search");
  add_common(enumerate);
  bool dump_table = false;
  enumerate->add_flag("--table", dump_table, "write the full per-policy listing");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* active = app.get_subcommands().front();
    ConfigFile config(active, config_path);
    if (active == verify) {
      return cmd_verify(verify_options, fs::path(out_text));
    }
    config.apply("--env", "env", env_text);
    config.apply_list("--beta", "beta", beta_text);
    config.apply_list("--seed", "seed", seed_text);
    config.apply("--out", "out", out_text);

    const bool beta_explicit = active->count("--beta") > 0 || config.has("beta");
    const std::vector<double> betas = parse_beta_list(beta_text);
    const std::vector<std::uint64_t> seeds = parse_seed_list(seed_text);
    const fs::path out(out_text);

    if (active == mapi || active == mapi_mod) {
      const EnvSpec env = parse_env(env_text);
      return cmd_mapi(env, betas, seeds, beta_explicit, out, active == mapi_mod, all_starts,
                      !no_classify);
    }
    if (active == matrpo) {
      config.apply("--total-steps", "total_steps", train_config.total_steps);
      config.apply("--num-envs", "num_envs", train_config.num_envs);
      config.apply("--episode-length", "episode_length", train_config.episode_length);
      config.apply("--num-minibatch", "num_minibatch", train_config.num_minibatch);
      config.apply("--lr", "lr", train_config.lr);
      config.apply("--epochs", "epochs", train_config.epochs);
      config.apply("--max-grad-norm", "max_grad_norm", train_config.max_grad_norm);
      config.apply("--gae-lambda", "gae_lambda", train_config.gae_lambda);
      config.apply("--alpha", "alpha", train_config.alpha);
      config.apply("--avc-coefficient", "avc_coefficient", train_config.avc_coefficient);
      config.apply("--kl-epsilon", "kl_epsilon", train_config.kl_epsilon);
      config.apply("--clip-epsilon", "clip_epsilon", train_config.clip_epsilon);
      config.apply("--variant", "variant", variant_text);
      if (variant_text == "clip") {
        train_config.variant = StepVariant::clip;
      } else if (variant_text == "trust_region" || variant_text == "trust-region") {
        train_config.variant = StepVariant::trust_region;
      } else {
        throw CLI::ValidationError("--variant", "expected trust_region or clip");
      }
      const EnvSpec env = parse_env(env_text);
      return cmd_matrpo(env, betas, seeds, beta_explicit, out, train_config, eval_every);
    }
    if (active == enumerate) {
      const EnvSpec env = parse_env(env_text);
      return cmd_enumerate(env, betas.front(), beta_explicit, out, dump_table);
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
