#pragma once

#include <string>
#include <vector>

#include "mvtsg/mapi.hpp"
#include "mvtsg/matrpo.hpp"
#include "mvtsg/model.hpp"

namespace mvtsg {

/// Shortest fixed formatting that round-trips doubles exactly (printf %.17g).
/// All emitted files use it so reruns are byte-identical.
std::string format_double(double value);

/// Model files are JSON objects with keys num_agents, states, action_sets,
/// transition ([state][joint_action][next_state], row-major) and reward
/// ([state][joint_action]) plus beta. load throws PreconditionError on
/// missing keys, shape mismatches or malformed rows.
TsgModel load_model(const std::string& path);
void save_model(const TsgModel& model, const std::string& path);
/// Same schema through strings, for in-memory round trips.
TsgModel model_from_json_text(const std::string& text);
std::string model_to_json_text(const TsgModel& model);

/// Best-response trace: one row per evaluation.
/// Header: outer,inner,agent,eta,zeta,j_value,changed_states
void write_mapi_trace_csv(const std::string& path, const SweepTrace& trace);
std::vector<SweepRecord> read_mapi_trace_csv(const std::string& path);

/// Training trace: running estimates, optional exact columns (blank when the
/// row carries none) and one trailing KL column per agent.
/// Header: iteration,eta_hat,zeta_hat,j_hat,eta_exact,zeta_exact,j_exact,
///         mean_kl_0,...
void write_matrpo_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);
std::vector<TraceRow> read_matrpo_trace_csv(const std::string& path);

}  // namespace mvtsg
