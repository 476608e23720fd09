#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "mvtsg/chain.hpp"
#include "mvtsg/microgrid.hpp"
#include "mvtsg/model.hpp"
#include "mvtsg/rng.hpp"

namespace mvtsg {

/// Sampling interface shared by explicit games and simulation-only scenarios.
/// Observations index each agent's policy table; critic features are the
/// active indices of a sparse binary encoding of the global state, so a
/// linear critic over them is tabular whenever the encoding is one-hot.
class RolloutEnv {
 public:
  virtual ~RolloutEnv() = default;

  virtual int num_agents() const = 0;
  virtual int observation_count(int agent) const = 0;
  virtual int action_count(int agent) const = 0;
  virtual int feature_count() const = 0;
  virtual double beta() const = 0;

  /// Reseeds the environment's private stream and resets its state.
  virtual void reset(std::uint64_t seed) = 0;
  virtual int observation(int agent) const = 0;
  /// Overwrites `out` with the active feature indices of the current state.
  virtual void active_features(std::vector<int>& out) const = 0;
  /// Applies the joint action, returns the shared reward, advances the state.
  virtual double step(const std::vector<int>& actions) = 0;

  /// Non-null when the environment wraps an explicit game, enabling exact
  /// side-channel evaluation of learned policies.
  virtual const TsgModel* exact_model() const { return nullptr; }
};

/// Explicit-game rollout: every agent observes the global state and the
/// critic features one-hot encode it. Holds a non-owning pointer; the model
/// must outlive the environment. reset() draws a uniform starting state.
class ModelEnv final : public RolloutEnv {
 public:
  explicit ModelEnv(const TsgModel& model) : model_(&model) {}

  int num_agents() const override { return model_->num_agents(); }
  int observation_count(int) const override { return model_->num_states(); }
  int action_count(int agent) const override { return model_->action_count(agent); }
  int feature_count() const override { return model_->num_states(); }
  double beta() const override { return model_->beta(); }

  void reset(std::uint64_t seed) override;
  int observation(int) const override { return state_; }
  void active_features(std::vector<int>& out) const override {
    out.assign(1, state_);
  }
  double step(const std::vector<int>& actions) override;

  const TsgModel* exact_model() const override { return model_; }

 private:
  const TsgModel* model_;
  int state_ = 0;
  Rng rng_{0};
};

/// Sampling-only microgrid rollout: each agent observes its local
/// (wind, load, storage) index and the critic features multi-hot encode the
/// level of every component chain (18 features per microgrid).
class MicrogridRolloutEnv final : public RolloutEnv {
 public:
  explicit MicrogridRolloutEnv(SampledEnv env) : env_(std::move(env)) {}

  int num_agents() const override { return env_.num_microgrids(); }
  int observation_count(int) const override { return env_.local_observation_count(); }
  int action_count(int agent) const override { return env_.spec().actions_for(agent); }
  int feature_count() const override { return 18 * env_.num_microgrids(); }
  double beta() const override { return env_.beta(); }

  void reset(std::uint64_t seed) override { env_.reset(seed); }
  int observation(int agent) const override { return env_.local_observation(agent); }
  void active_features(std::vector<int>& out) const override;
  double step(const std::vector<int>& actions) override { return env_.step(actions); }

 private:
  SampledEnv env_;
};

/// Tabular softmax policy for one agent at temperature 1: one logit row per
/// observation; probabilities are strictly positive and sum to 1.
struct SoftmaxPolicy {
  Eigen::MatrixXd logits;  // observations x actions

  int observation_count() const { return static_cast<int>(logits.rows()); }
  int action_count() const { return static_cast<int>(logits.cols()); }

  static SoftmaxPolicy zeros(int observations, int actions);

  Eigen::VectorXd probabilities(int obs) const;
  double probability(int obs, int action) const;
  int sample(int obs, Rng& rng) const;
};

/// Zero-logit (uniform) policies shaped for the environment.
std::vector<SoftmaxPolicy> initial_policies(const RolloutEnv& env);

/// Lowers per-state softmax tables to a stochastic JointPolicy for exact
/// evaluation. Only meaningful when observations are global states.
JointPolicy lower_to_joint(const TsgModel& model, const std::vector<SoftmaxPolicy>& policies);

/// Linear critic over sparse binary features plus a bias term. With one-hot
/// features it is exactly a tabular value function.
struct LinearCritic {
  Eigen::VectorXd weights;
  double bias = 0.0;

  static LinearCritic zeros(int feature_count);
  double value(const std::vector<int>& active) const;
};

enum class StepVariant { trust_region, clip };

/// Hyperparameters. Field names mirror the config-file keys.
struct MatrpoConfig {
  long long total_steps = 200'000;  // iterations = total_steps / (num_envs * episode_length)
  int num_envs = 8;                 // trajectories per batch
  int episode_length = 1000;        // steps per trajectory
  int num_minibatch = 40;
  double lr = 5e-3;
  int epochs = 5;
  double max_grad_norm = 0.5;
  double gae_lambda = 0.95;
  double alpha = 0.1;  // running-estimate step size
  double avc_coefficient = 0.01;
  double kl_epsilon = 0.01;
  double clip_epsilon = 0.2;
  StepVariant variant = StepVariant::trust_region;
  std::uint64_t seed = 0;
  /// Exact side-channel evaluation cadence for explicit games; 0 disables it.
  /// The final iteration is always evaluated when enabled.
  int exact_eval_every = 1;

  int iterations() const;
  void validate() const;
};

struct LearnerState {
  std::vector<SoftmaxPolicy> policies;
  LinearCritic critic;
  double eta_hat = 0.0;
  double zeta_hat = 0.0;
  double j_hat = 0.0;  // always eta_hat - beta * zeta_hat
  double beta = 0.0;
  int iteration = 0;
  MatrpoConfig config;
};

LearnerState initial_learner_state(const RolloutEnv& env, const MatrpoConfig& config);

/// One rollout: T steps plus the trailing state's observations and features.
struct Trajectory {
  std::vector<std::vector<int>> observations;  // (T+1) x num_agents
  std::vector<std::vector<int>> features;      // (T+1) x active indices
  std::vector<std::vector<int>> actions;       // T x num_agents
  std::vector<double> rewards;                 // T
};

struct Batch {
  std::vector<Trajectory> trajectories;
  // Derived per-step tables in the same (trajectory, step) layout. `values`
  // holds T+1 critic values per trajectory; the rest hold T entries.
  std::vector<std::vector<double>> surrogate_rewards;  // f = r - beta (r - eta_hat)^2
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> advantages;
  std::vector<std::vector<double>> critic_targets;
  std::vector<std::vector<double>> m_weights;

  long long total_steps() const;
};

/// Rolls out `num_trajectories` independent trajectories of `episode_length`
/// steps under the product of per-agent softmax policies. Each trajectory
/// reseeds the environment and the action sampler from its own derived
/// stream, so batches are reproducible given (policies, seed).
Batch collect(RolloutEnv& env, const std::vector<SoftmaxPolicy>& policies, int num_trajectories,
              int episode_length, std::uint64_t seed);

/// EMA updates in line order: eta_hat first, then zeta_hat measured around
/// the post-update eta_hat, then j_hat = eta_hat - beta * zeta_hat.
void update_running_stats(LearnerState& state, const Batch& batch);

/// f = r - beta (r - eta_hat)^2 per step, from the current running mean.
void compute_surrogate_rewards(Batch& batch, const LearnerState& state);

/// Fills values, advantages and the initial m_weights. TD error
/// delta_t = f_t - j_hat + V(s_{t+1}) - V(s_t); backward recursion
/// A_n = delta_n + lambda A_{n+1} with A_T = 0.
void compute_gae(Batch& batch, const LearnerState& state, const LinearCritic& critic);

/// Targets V_hat = A + V(s) against the values captured by compute_gae.
void avc_critic_targets(Batch& batch);

/// Mean squared error to critic_targets plus
/// avc_coefficient * (mean predicted value)^2.
double critic_loss(const LinearCritic& critic, const Batch& batch, double avc_coefficient);

/// Full-batch gradient descent on critic_loss: `epochs` passes at rate `lr`
/// with the gradient clipped to max_grad_norm in global L2 norm.
void fit_critic(LinearCritic& critic, const Batch& batch, double avc_coefficient, int epochs,
                double lr, double max_grad_norm);

/// Multiplies each step's m_weight by new/old probability of the logged
/// action of `agent`. Throws NumericalError when a denominator is below
/// 1e-12 (cannot occur for finite-logit softmax policies).
void propagate_m_weights(Batch& batch, int agent, const SoftmaxPolicy& old_policy,
                         const SoftmaxPolicy& new_policy);

/// Outcome of one policy update attempt; surrogate values are sample means
/// of ratio-weighted m_weights over the batch.
struct StepReport {
  bool accepted = false;  // false: parameters returned unchanged
  double surrogate_before = 0.0;
  double surrogate_after = 0.0;
  double mean_kl = 0.0;  // measured KL(old || new) over batch observations
  int backtracks = 0;
};

/// Natural-gradient ascent on the sampled surrogate under a mean-KL trust
/// region: conjugate-gradient solve of the visitation-weighted Fisher (10
/// iterations, damping 1e-5), step sqrt(2 eps / g'H^-1 g), then backtracking
/// (up to 10 halvings) until the surrogate improves and the measured mean KL
/// stays within kl_epsilon. Falls back to the unchanged policy.
SoftmaxPolicy trust_region_step(int agent, const Batch& batch, const LearnerState& state,
                                StepReport* report = nullptr);

/// Clipped-surrogate gradient ascent: epochs x minibatch passes maximizing
/// min(ratio * M, clip(ratio, 1 +- clip_epsilon) * M).
SoftmaxPolicy clip_step(int agent, const Batch& batch, const LearnerState& state,
                        std::uint64_t seed, StepReport* report = nullptr);

struct TraceRow {
  int iteration = 0;
  double eta_hat = 0.0;
  double zeta_hat = 0.0;
  double j_hat = 0.0;
  bool has_exact = false;
  double eta_exact = 0.0;
  double zeta_exact = 0.0;
  double j_exact = 0.0;
  std::vector<double> mean_kl;  // per agent, accepted steps only (else 0)
};

struct TrainResult {
  LearnerState state;
  std::vector<TraceRow> trace;
};

/// Full training loop: collect, update running stats, surrogate rewards and
/// advantages, critic targets, then a random-permutation sequential sweep of
/// per-agent steps with m-weight propagation, and finally the critic fit.
TrainResult train(RolloutEnv& env, const MatrpoConfig& config);

/// Both sides of the sequential-advantage estimator identity at one state,
/// computed by full joint-action summation through two independent routes:
/// `direct` re-weights the advantage table by the updated prefix policies;
/// `ratio_form` takes the base-policy expectation of probability ratios.
/// `position` indexes the agent being updated within `order`.
struct EstimatorCheck {
  double direct = 0.0;
  double ratio_form = 0.0;
};
EstimatorCheck sequential_estimator_check(const TsgModel& model, const PolicyEval& eval_mu,
                                          const JointPolicy& mu, const JointPolicy& mu_prime,
                                          const std::vector<int>& order, int position, int state);

/// Per-position terms of the sequential lower bound
///   J(mu') >= J(mu) + sum_h [L_h - W_h],
/// W_h = (kappa* - 1) eps_f sqrt(2 E_{s~pi} KL(mu'_h || mu_h)).
struct SequentialBound {
  std::vector<double> surrogate_gains;  // L_h, update order h = 1..N
  std::vector<double> penalties;        // W_h
  double eps_f = 0.0;                   // max_s |E_{a~mu'} A_f(s,.)|
  double lower_bound = 0.0;             // J(mu) + sum (L_h - W_h)
  double actual = 0.0;                  // J(mu')
};
SequentialBound sequential_improvement_bound(const TsgModel& model, const JointPolicy& mu,
                                             const JointPolicy& mu_prime,
                                             const std::vector<int>& order, double kemeny_star,
                                             const Tolerances& tol = {});

}  // namespace mvtsg
