#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "mvtsg/model.hpp"
#include "mvtsg/rng.hpp"

namespace mvtsg {

/// Parameters of the multi-microgrid energy-management benchmark. Wind and
/// load evolve as exogenous Markov chains; each storage unit shifts energy
/// across time steps within hard feasibility bounds.
struct MicrogridSpec {
  std::vector<bool> has_generator;
  std::vector<bool> has_load;
  std::vector<bool> abandonment_allowed;  // curtailment action available
  int storage_capacity = 5;               // E max, MWh
  int charge_min = -2;                    // C min, MW (negative = charging)
  int charge_max = 2;                     // C max, MW
  std::vector<double> wind_levels;        // MW
  std::vector<double> load_levels;        // MW
  std::vector<double> storage_levels;     // MWh
  Eigen::MatrixXd wind_transition;        // row-stochastic
  Eigen::MatrixXd load_transition;        // row-stochastic

  int num_microgrids() const { return static_cast<int>(has_generator.size()); }
  /// Actions per agent: charge choices times curtailment choices (if any).
  int actions_for(int microgrid) const;

  /// Three microgrids, storage everywhere, one generator, no loads.
  static MicrogridSpec scenario1();
  /// Five microgrids, each with generator, load and storage.
  static MicrogridSpec scenario2();

  /// Checks level lists and transition rows. Every row is renormalized to
  /// machine precision; a row whose sum is off by more than 1e-9 additionally
  /// logs a warning. Negative entries throw.
  void validate_and_normalize();
};

/// Storage feasibility clamp: the realized discharge keeps the next level in
/// [0, capacity] and respects the charge bounds,
/// clamp(c, max(charge_min, level - capacity), min(charge_max, level)).
int feasible_effective_action(int storage_level, int c, int charge_min, int charge_max,
                              int capacity);

/// Exact game for the three-microgrid scenario: states (G1, E1, E2, E3),
/// 1296 in total; agent 0 has 30 actions (charge x curtailment), agents 1-2
/// have 5; the common reward is the total power exchanged with the main grid.
/// Infeasible actions are clamped, not masked, so action sets are
/// state-independent. The construction verifies ergodicity under the uniform
/// policy.
TsgModel build_scenario1(double beta);

/// Sampling-only environment for larger scenarios; the joint state space is
/// never materialized.
class SampledEnv {
 public:
  SampledEnv(MicrogridSpec spec, double beta, std::uint64_t seed);

  void reset(std::uint64_t seed);
  /// Applies one joint action (one action index per microgrid), returns the
  /// common reward, then advances wind/load/storage.
  double step(const std::vector<int>& joint_action);

  const MicrogridSpec& spec() const { return spec_; }
  double beta() const { return beta_; }
  int num_microgrids() const { return spec_.num_microgrids(); }
  const std::vector<int>& wind_index() const { return wind_; }
  const std::vector<int>& load_index() const { return load_; }
  const std::vector<int>& storage_index() const { return storage_; }

  /// Observation local to one microgrid: its (wind, load, storage) indices
  /// flattened, wind most significant.
  int local_observation(int microgrid) const;
  int local_observation_count() const;

 private:
  MicrogridSpec spec_;
  double beta_;
  Rng rng_;
  std::vector<int> wind_, load_, storage_;
  std::vector<std::vector<double>> wind_rows_, load_rows_;  // sampling weights
};

SampledEnv build_scenario2_sampler(double beta, std::uint64_t seed);

}  // namespace mvtsg
