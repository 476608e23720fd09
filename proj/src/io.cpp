#include "mvtsg/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mvtsg/errors.hpp"

namespace mvtsg {

using nlohmann::json;

std::string format_double(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

namespace {

json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw PreconditionError("cannot open " + path);
  }
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) {
    throw PreconditionError("malformed JSON in " + path);
  }
  return doc;
}

json model_to_json(const TsgModel& model) {
  json doc;
  doc["num_agents"] = model.num_agents();
  doc["states"] = model.num_states();
  doc["action_sets"] = model.action_counts();
  doc["beta"] = model.beta();
  json transition = json::array();
  json reward = json::array();
  for (int s = 0; s < model.num_states(); ++s) {
    json t_row = json::array();
    json r_row = json::array();
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      std::vector<double> dense(static_cast<std::size_t>(model.num_states()), 0.0);
      const TsgModel::SparseRow row = model.transition_row(s, a);
      for (std::size_t k = 0; k < row.next.size(); ++k) {
        dense[static_cast<std::size_t>(row.next[k])] = row.prob[k];
      }
      t_row.push_back(dense);
      r_row.push_back(model.reward(s, a));
    }
    transition.push_back(std::move(t_row));
    reward.push_back(std::move(r_row));
  }
  doc["transition"] = std::move(transition);
  doc["reward"] = std::move(reward);
  return doc;
}

TsgModel model_from_json(const json& doc) {
  for (const char* key : {"num_agents", "states", "action_sets", "transition", "reward", "beta"}) {
    if (!doc.contains(key)) {
      throw PreconditionError(std::string("model document missing key ") + key);
    }
  }
  const int num_agents = doc["num_agents"].get<int>();
  const int states = doc["states"].get<int>();
  const std::vector<int> action_sets = doc["action_sets"].get<std::vector<int>>();
  const double beta = doc["beta"].get<double>();
  if (static_cast<int>(action_sets.size()) != num_agents) {
    throw PreconditionError("action_sets length does not match num_agents");
  }
  const auto transition = doc["transition"].get<std::vector<std::vector<std::vector<double>>>>();
  const auto reward = doc["reward"].get<std::vector<std::vector<double>>>();
  if (static_cast<int>(transition.size()) != states ||
      static_cast<int>(reward.size()) != states) {
    throw PreconditionError("transition/reward outer length does not match states");
  }
  return TsgModel::from_dense(num_agents, states, action_sets, transition, reward, beta);
}

}  // namespace

TsgModel load_model(const std::string& path) { return model_from_json(parse_file(path)); }

void save_model(const TsgModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw PreconditionError("cannot write " + path);
  }
  out << model_to_json(model).dump(1) << '\n';
}

TsgModel model_from_json_text(const std::string& text) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) {
    throw PreconditionError("malformed JSON model text");
  }
  return model_from_json(doc);
}

std::string model_to_json_text(const TsgModel& model) { return model_to_json(model).dump(1); }

void write_mapi_trace_csv(const std::string& path, const SweepTrace& trace) {
  std::ofstream out(path);
  if (!out) {
    throw PreconditionError("cannot write " + path);
  }
  out << "outer,inner,agent,eta,zeta,j_value,changed_states\n";
  for (const SweepRecord& rec : trace.iterations) {
    out << rec.outer << ',' << rec.inner << ',' << rec.agent << ',' << format_double(rec.eta)
        << ',' << format_double(rec.zeta) << ',' << format_double(rec.j_value) << ','
        << rec.changed_states << '\n';
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') {
    cells.push_back("");
  }
  return cells;
}

double parse_double(const std::string& cell, const std::string& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) {
      throw std::invalid_argument(cell);
    }
    return v;
  } catch (const std::exception&) {
    throw PreconditionError("bad numeric cell '" + cell + "' in " + path);
  }
}

int parse_int(const std::string& cell, const std::string& path) {
  return static_cast<int>(parse_double(cell, path));
}

}  // namespace

std::vector<SweepRecord> read_mapi_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw PreconditionError("cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line) || line != "outer,inner,agent,eta,zeta,j_value,changed_states") {
    throw PreconditionError("unexpected header in " + path);
  }
  std::vector<SweepRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != 7) {
      throw PreconditionError("wrong column count in " + path);
    }
    SweepRecord rec;
    rec.outer = parse_int(cells[0], path);
    rec.inner = parse_int(cells[1], path);
    rec.agent = parse_int(cells[2], path);
    rec.eta = parse_double(cells[3], path);
    rec.zeta = parse_double(cells[4], path);
    rec.j_value = parse_double(cells[5], path);
    rec.changed_states = parse_int(cells[6], path);
    rows.push_back(rec);
  }
  return rows;
}

void write_matrpo_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) {
    throw PreconditionError("cannot write " + path);
  }
  const std::size_t agents = trace.empty() ? 0 : trace.front().mean_kl.size();
  out << "iteration,eta_hat,zeta_hat,j_hat,eta_exact,zeta_exact,j_exact";
  for (std::size_t i = 0; i < agents; ++i) {
    out << ",mean_kl_" << i;
  }
  out << '\n';
  for (const TraceRow& row : trace) {
    out << row.iteration << ',' << format_double(row.eta_hat) << ','
        << format_double(row.zeta_hat) << ',' << format_double(row.j_hat) << ',';
    if (row.has_exact) {
      out << format_double(row.eta_exact) << ',' << format_double(row.zeta_exact) << ','
          << format_double(row.j_exact);
    } else {
      out << ",,";
    }
    for (double kl : row.mean_kl) {
      out << ',' << format_double(kl);
    }
    out << '\n';
  }
}

std::vector<TraceRow> read_matrpo_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw PreconditionError("cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw PreconditionError("empty trace file " + path);
  }
  const std::vector<std::string> header = split_line(line);
  if (header.size() < 7 || header[0] != "iteration" || header[4] != "eta_exact") {
    throw PreconditionError("unexpected header in " + path);
  }
  const std::size_t agents = header.size() - 7;
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) {
      throw PreconditionError("wrong column count in " + path);
    }
    TraceRow row;
    row.iteration = parse_int(cells[0], path);
    row.eta_hat = parse_double(cells[1], path);
    row.zeta_hat = parse_double(cells[2], path);
    row.j_hat = parse_double(cells[3], path);
    row.has_exact = !cells[4].empty();
    if (row.has_exact) {
      row.eta_exact = parse_double(cells[4], path);
      row.zeta_exact = parse_double(cells[5], path);
      row.j_exact = parse_double(cells[6], path);
    } else if (!cells[5].empty() || !cells[6].empty()) {
      throw PreconditionError("partial exact columns in " + path);
    }
    for (std::size_t i = 0; i < agents; ++i) {
      row.mean_kl.push_back(parse_double(cells[7 + i], path));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mvtsg
