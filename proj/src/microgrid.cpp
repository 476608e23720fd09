#include "mvtsg/microgrid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mvtsg/errors.hpp"

namespace mvtsg {

namespace {

Eigen::MatrixXd wind_kernel() {
  Eigen::MatrixXd p(6, 6);
  p << 0.53, 0.18, 0.19, 0.04, 0.01, 0.05,  //
      0.51, 0.08, 0.20, 0.08, 0.02, 0.11,   //
      0.35, 0.11, 0.19, 0.11, 0.03, 0.21,   //
      0.27, 0.15, 0.15, 0.14, 0.03, 0.26,   //
      0.14, 0.11, 0.13, 0.15, 0.05, 0.42,   //
      0.09, 0.03, 0.06, 0.06, 0.03, 0.73;
  return p;
}

Eigen::MatrixXd load_kernel() {
  Eigen::MatrixXd p(6, 6);
  p << 0.96, 0.04, 0.00, 0.00, 0.00, 0.00,  //
      0.12, 0.74, 0.14, 0.00, 0.00, 0.00,   //
      0.00, 0.14, 0.66, 0.19, 0.01, 0.00,   //
      0.00, 0.00, 0.06, 0.77, 0.16, 0.01,   //
      0.00, 0.00, 0.01, 0.22, 0.61, 0.16,   //
      0.00, 0.00, 0.00, 0.01, 0.16, 0.83;
  return p;
}

void normalize_rows(Eigen::MatrixXd& p, const char* label) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double sum = p.row(i).sum();
    if (p.row(i).minCoeff() < 0.0 || sum <= 0.0) {
      throw PreconditionError("transition table has an invalid row");
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      std::fprintf(stderr, "warning: %s row %ld sums to %.12g, renormalizing\n", label,
                   static_cast<long>(i), sum);
    }
    p.row(i) /= sum;
  }
}

struct AgentAction {
  int charge;       // requested discharge in MW, negative = charging
  int curtailment;  // requested curtailment in MW, 0 when unavailable
};

/// Charge index is most significant so all curtailment choices for one
/// charge level are adjacent.
AgentAction decode_action(const MicrogridSpec& spec, int microgrid, int action) {
  AgentAction out{};
  const int charge_span = spec.charge_max - spec.charge_min + 1;
  if (spec.has_generator[microgrid] && spec.abandonment_allowed[microgrid]) {
    const int levels = static_cast<int>(spec.wind_levels.size());
    out.charge = spec.charge_min + action / levels;
    out.curtailment = action % levels;
  } else {
    out.charge = spec.charge_min + action % charge_span;
    out.curtailment = 0;
  }
  return out;
}

}  // namespace

int MicrogridSpec::actions_for(int microgrid) const {
  const int charge_span = charge_max - charge_min + 1;
  if (has_generator[microgrid] && abandonment_allowed[microgrid]) {
    return charge_span * static_cast<int>(wind_levels.size());
  }
  return charge_span;
}

void MicrogridSpec::validate_and_normalize() {
  const int n = num_microgrids();
  if (n <= 0 || static_cast<int>(has_load.size()) != n ||
      static_cast<int>(abandonment_allowed.size()) != n) {
    throw PreconditionError("microgrid flag lists must be nonempty and equal length");
  }
  if (storage_capacity < 1 || charge_min > 0 || charge_max < 0 || charge_min > charge_max) {
    throw PreconditionError("storage bounds are inconsistent");
  }
  if (wind_levels.empty() || storage_levels.size() != static_cast<size_t>(storage_capacity) + 1) {
    throw PreconditionError("level lists do not match the storage capacity");
  }
  auto increasing = [](const std::vector<double>& v) {
    for (std::size_t k = 1; k < v.size(); ++k) {
      if (v[k] <= v[k - 1]) return false;
    }
    return true;
  };
  if (!increasing(wind_levels) || !increasing(load_levels) || !increasing(storage_levels)) {
    throw PreconditionError("level lists must be strictly increasing");
  }
  if (wind_transition.rows() != static_cast<Eigen::Index>(wind_levels.size()) ||
      wind_transition.cols() != wind_transition.rows()) {
    throw PreconditionError("wind transition table has the wrong shape");
  }
  normalize_rows(wind_transition, "wind transition");
  const bool any_load = std::find(has_load.begin(), has_load.end(), true) != has_load.end();
  if (any_load) {
    if (load_transition.rows() != static_cast<Eigen::Index>(load_levels.size()) ||
        load_transition.cols() != load_transition.rows()) {
      throw PreconditionError("load transition table has the wrong shape");
    }
    normalize_rows(load_transition, "load transition");
  }
}

MicrogridSpec MicrogridSpec::scenario1() {
  MicrogridSpec spec;
  spec.has_generator = {true, false, false};
  spec.has_load = {false, false, false};
  spec.abandonment_allowed = {true, false, false};
  spec.wind_levels = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  spec.load_levels = {0.6, 1.2, 1.8, 2.4, 3.0, 3.6};
  spec.storage_levels = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  spec.wind_transition = wind_kernel();
  spec.load_transition = load_kernel();
  spec.validate_and_normalize();
  return spec;
}

MicrogridSpec MicrogridSpec::scenario2() {
  MicrogridSpec spec;
  spec.has_generator.assign(5, true);
  spec.has_load.assign(5, true);
  spec.abandonment_allowed.assign(5, true);
  spec.wind_levels = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  spec.load_levels = {0.6, 1.2, 1.8, 2.4, 3.0, 3.6};
  spec.storage_levels = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  spec.wind_transition = wind_kernel();
  spec.load_transition = load_kernel();
  spec.validate_and_normalize();
  return spec;
}

int feasible_effective_action(int storage_level, int c, int charge_min, int charge_max,
                              int capacity) {
  const int lo = std::max(charge_min, storage_level - capacity);
  const int hi = std::min(charge_max, storage_level);
  return std::clamp(c, lo, hi);
}

TsgModel build_scenario1(double beta) {
  MicrogridSpec spec = MicrogridSpec::scenario1();
  const int levels = static_cast<int>(spec.wind_levels.size());
  const int storage_states = spec.storage_capacity + 1;
  const int num_states = levels * storage_states * storage_states * storage_states;
  const std::vector<int> actions = {spec.actions_for(0), spec.actions_for(1), spec.actions_for(2)};
  const int num_joint = actions[0] * actions[1] * actions[2];

  auto encode = [&](int g, int e1, int e2, int e3) {
    return ((g * storage_states + e1) * storage_states + e2) * storage_states + e3;
  };

  std::vector<std::vector<std::pair<int, double>>> rows(
      static_cast<size_t>(num_states) * num_joint);
  std::vector<double> reward(static_cast<size_t>(num_states) * num_joint);

  std::vector<AgentAction> decoded[3];
  for (int i = 0; i < 3; ++i) {
    decoded[i].resize(actions[i]);
    for (int a = 0; a < actions[i]; ++a) decoded[i][a] = decode_action(spec, i, a);
  }

  for (int g = 0; g < levels; ++g) {
    for (int e1 = 0; e1 < storage_states; ++e1) {
      for (int e2 = 0; e2 < storage_states; ++e2) {
        for (int e3 = 0; e3 < storage_states; ++e3) {
          const int s = encode(g, e1, e2, e3);
          for (int a1 = 0; a1 < actions[0]; ++a1) {
            const AgentAction d1 = decoded[0][a1];
            const int c1 = feasible_effective_action(e1, d1.charge, spec.charge_min,
                                                     spec.charge_max, spec.storage_capacity);
            const int v1 = std::min(d1.curtailment, g);
            for (int a2 = 0; a2 < actions[1]; ++a2) {
              const int c2 = feasible_effective_action(e2, decoded[1][a2].charge, spec.charge_min,
                                                       spec.charge_max, spec.storage_capacity);
              for (int a3 = 0; a3 < actions[2]; ++a3) {
                const int c3 = feasible_effective_action(e3, decoded[2][a3].charge,
                                                         spec.charge_min, spec.charge_max,
                                                         spec.storage_capacity);
                const int joint = (a1 * actions[1] + a2) * actions[2] + a3;
                const size_t flat = static_cast<size_t>(s) * num_joint + joint;
                // Total power exchanged with the main grid; no local loads.
                reward[flat] = (spec.wind_levels[g] - v1) + c1 + c2 + c3;
                auto& row = rows[flat];
                row.reserve(levels);
                const int ns1 = e1 - c1, ns2 = e2 - c2, ns3 = e3 - c3;
                for (int gn = 0; gn < levels; ++gn) {
                  row.emplace_back(encode(gn, ns1, ns2, ns3), spec.wind_transition(g, gn));
                }
              }
            }
          }
        }
      }
    }
  }

  TsgModel model = TsgModel::from_sparse(3, num_states, actions, rows, reward, beta);
  if (!uniform_policy_chain_is_ergodic(model)) {
    throw NonErgodicError("scenario1 model failed the ergodicity screen");
  }
  return model;
}

SampledEnv::SampledEnv(MicrogridSpec spec, double beta, std::uint64_t seed)
    : spec_(std::move(spec)), beta_(beta), rng_(0) {
  spec_.validate_and_normalize();
  auto to_rows = [](const Eigen::MatrixXd& p) {
    std::vector<std::vector<double>> rows(p.rows());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      rows[i].resize(p.cols());
      for (Eigen::Index j = 0; j < p.cols(); ++j) rows[i][j] = p(i, j);
    }
    return rows;
  };
  wind_rows_ = to_rows(spec_.wind_transition);
  load_rows_ = to_rows(spec_.load_transition);
  reset(seed);
}

void SampledEnv::reset(std::uint64_t seed) {
  rng_ = Rng(derive_seed(seed, 0x656e76ULL));
  wind_.assign(num_microgrids(), 0);
  load_.assign(num_microgrids(), 0);
  storage_.assign(num_microgrids(), 0);
}

int SampledEnv::local_observation(int microgrid) const {
  const int loads = static_cast<int>(spec_.load_levels.size());
  const int stores = spec_.storage_capacity + 1;
  return (wind_[microgrid] * loads + load_[microgrid]) * stores + storage_[microgrid];
}

int SampledEnv::local_observation_count() const {
  return static_cast<int>(spec_.wind_levels.size() * spec_.load_levels.size()) *
         (spec_.storage_capacity + 1);
}

double SampledEnv::step(const std::vector<int>& joint_action) {
  const int n = num_microgrids();
  if (static_cast<int>(joint_action.size()) != n) {
    throw PreconditionError("joint action size does not match the microgrid count");
  }
  double reward = 0.0;
  std::vector<int> effective(n);
  for (int i = 0; i < n; ++i) {
    const int a = joint_action[i];
    if (a < 0 || a >= spec_.actions_for(i)) {
      throw PreconditionError("action index out of range");
    }
    const AgentAction d = decode_action(spec_, i, a);
    const int c = feasible_effective_action(storage_[i], d.charge, spec_.charge_min,
                                            spec_.charge_max, spec_.storage_capacity);
    effective[i] = c;
    double gen = 0.0;
    if (spec_.has_generator[i]) {
      const int v = std::min(d.curtailment, wind_[i]);
      gen = spec_.wind_levels[wind_[i]] - v;
    }
    const double demand = spec_.has_load[i] ? spec_.load_levels[load_[i]] : 0.0;
    reward += gen - demand + c;
  }
  for (int i = 0; i < n; ++i) {
    storage_[i] -= effective[i];
    if (spec_.has_generator[i]) wind_[i] = rng_.next_weighted(wind_rows_[wind_[i]]);
    if (spec_.has_load[i]) load_[i] = rng_.next_weighted(load_rows_[load_[i]]);
  }
  return reward;
}

SampledEnv build_scenario2_sampler(double beta, std::uint64_t seed) {
  return SampledEnv(MicrogridSpec::scenario2(), beta, seed);
}

}  // namespace mvtsg
