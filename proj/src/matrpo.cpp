#include "mvtsg/matrpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <utility>

#include "mvtsg/errors.hpp"

namespace mvtsg {

namespace {

constexpr double kCgDamping = 1e-5;
constexpr int kCgIterations = 10;
constexpr int kBacktrackLimit = 10;
constexpr double kRatioDenominatorFloor = 1e-12;

Eigen::VectorXd softmax_row(const Eigen::MatrixXd& logits, int row) {
  Eigen::VectorXd z = logits.row(row).transpose();
  const double peak = z.maxCoeff();
  Eigen::VectorXd p = (z.array() - peak).exp();
  return p / p.sum();
}

Eigen::MatrixXd softmax_table(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd probs(logits.rows(), logits.cols());
  for (int row = 0; row < logits.rows(); ++row) {
    probs.row(row) = softmax_row(logits, row).transpose();
  }
  return probs;
}

// KL(p || q) for strictly positive rows.
double row_kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double kl = 0.0;
  for (int a = 0; a < p.size(); ++a) {
    kl += p[a] * (std::log(p[a]) - std::log(q[a]));
  }
  return kl;
}

// Per-agent flat view of the batch: one entry per (trajectory, step).
struct AgentSteps {
  std::vector<int> obs;
  std::vector<int> act;
  std::vector<double> m;
};

AgentSteps flatten_agent_steps(const Batch& batch, int agent) {
  AgentSteps steps;
  const std::size_t total = static_cast<std::size_t>(batch.total_steps());
  steps.obs.reserve(total);
  steps.act.reserve(total);
  steps.m.reserve(total);
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const Trajectory& traj = batch.trajectories[b];
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      steps.obs.push_back(traj.observations[t][static_cast<std::size_t>(agent)]);
      steps.act.push_back(traj.actions[t][static_cast<std::size_t>(agent)]);
      steps.m.push_back(batch.m_weights[b][t]);
    }
  }
  return steps;
}

// Scales the (matrix, scalar-free) gradient down to the norm cap in place.
void clip_global_norm(Eigen::MatrixXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm && norm > 0.0) {
    grad *= max_norm / norm;
  }
}

void require_derived_tables(const Batch& batch, const char* op) {
  if (batch.surrogate_rewards.size() != batch.trajectories.size()) {
    throw PreconditionError(std::string(op) + ": surrogate rewards not computed");
  }
}

}  // namespace

void ModelEnv::reset(std::uint64_t seed) {
  rng_ = Rng(derive_seed(seed, 0x6d64656cULL));
  state_ = rng_.next_int(model_->num_states());
}

double ModelEnv::step(const std::vector<int>& actions) {
  if (static_cast<int>(actions.size()) != model_->num_agents()) {
    throw PreconditionError("ModelEnv::step: joint action arity mismatch");
  }
  const int joint = model_->encode_joint(actions);
  const double reward = model_->reward(state_, joint);
  const TsgModel::SparseRow row = model_->transition_row(state_, joint);
  const double u = rng_.next_double();
  double acc = 0.0;
  int next = row.next.empty() ? state_ : row.next.back();
  for (std::size_t k = 0; k < row.next.size(); ++k) {
    acc += row.prob[k];
    if (u < acc) {
      next = row.next[k];
      break;
    }
  }
  state_ = next;
  return reward;
}

void MicrogridRolloutEnv::active_features(std::vector<int>& out) const {
  const int n = env_.num_microgrids();
  out.clear();
  out.reserve(static_cast<std::size_t>(3 * n));
  for (int i = 0; i < n; ++i) {
    const int base = 18 * i;
    out.push_back(base + env_.wind_index()[static_cast<std::size_t>(i)]);
    out.push_back(base + 6 + env_.load_index()[static_cast<std::size_t>(i)]);
    out.push_back(base + 12 + env_.storage_index()[static_cast<std::size_t>(i)]);
  }
}

SoftmaxPolicy SoftmaxPolicy::zeros(int observations, int actions) {
  if (observations <= 0 || actions <= 0) {
    throw PreconditionError("SoftmaxPolicy: table dimensions must be positive");
  }
  SoftmaxPolicy policy;
  policy.logits = Eigen::MatrixXd::Zero(observations, actions);
  return policy;
}

Eigen::VectorXd SoftmaxPolicy::probabilities(int obs) const { return softmax_row(logits, obs); }

double SoftmaxPolicy::probability(int obs, int action) const {
  return probabilities(obs)[action];
}

int SoftmaxPolicy::sample(int obs, Rng& rng) const {
  const Eigen::VectorXd p = probabilities(obs);
  const double u = rng.next_double();
  double acc = 0.0;
  for (int a = 0; a + 1 < p.size(); ++a) {
    acc += p[a];
    if (u < acc) {
      return a;
    }
  }
  return static_cast<int>(p.size()) - 1;
}

std::vector<SoftmaxPolicy> initial_policies(const RolloutEnv& env) {
  std::vector<SoftmaxPolicy> policies;
  policies.reserve(static_cast<std::size_t>(env.num_agents()));
  for (int i = 0; i < env.num_agents(); ++i) {
    policies.push_back(SoftmaxPolicy::zeros(env.observation_count(i), env.action_count(i)));
  }
  return policies;
}

JointPolicy lower_to_joint(const TsgModel& model, const std::vector<SoftmaxPolicy>& policies) {
  if (static_cast<int>(policies.size()) != model.num_agents()) {
    throw PreconditionError("lower_to_joint: policy count mismatch");
  }
  JointPolicy joint;
  joint.kind = PolicyKind::stochastic;
  joint.per_agent.reserve(policies.size());
  for (int i = 0; i < model.num_agents(); ++i) {
    const SoftmaxPolicy& policy = policies[static_cast<std::size_t>(i)];
    if (policy.observation_count() != model.num_states() ||
        policy.action_count() != model.action_count(i)) {
      throw PreconditionError("lower_to_joint: table shape mismatch");
    }
    AgentPolicy table = AgentPolicy::zeros(model.num_states(), model.action_count(i));
    for (int s = 0; s < model.num_states(); ++s) {
      const Eigen::VectorXd p = policy.probabilities(s);
      for (int a = 0; a < model.action_count(i); ++a) {
        table.at(s, a) = p[a];
      }
    }
    joint.per_agent.push_back(std::move(table));
  }
  return joint;
}

LinearCritic LinearCritic::zeros(int feature_count) {
  if (feature_count <= 0) {
    throw PreconditionError("LinearCritic: feature count must be positive");
  }
  LinearCritic critic;
  critic.weights = Eigen::VectorXd::Zero(feature_count);
  critic.bias = 0.0;
  return critic;
}

double LinearCritic::value(const std::vector<int>& active) const {
  double v = bias;
  for (int f : active) {
    v += weights[f];
  }
  return v;
}

int MatrpoConfig::iterations() const {
  const long long per_batch =
      static_cast<long long>(num_envs) * static_cast<long long>(episode_length);
  return static_cast<int>(std::max(1LL, total_steps / per_batch));
}

void MatrpoConfig::validate() const {
  if (total_steps <= 0 || num_envs <= 0 || episode_length < 2 || num_minibatch <= 0 ||
      epochs <= 0) {
    throw PreconditionError("MatrpoConfig: counts must be positive (episode_length >= 2)");
  }
  if (!(lr > 0.0) || !(max_grad_norm > 0.0) || !(kl_epsilon > 0.0) || !(clip_epsilon > 0.0)) {
    throw PreconditionError("MatrpoConfig: rates and radii must be positive");
  }
  if (!(alpha > 0.0) || alpha > 1.0 || gae_lambda < 0.0 || gae_lambda > 1.0 ||
      avc_coefficient < 0.0) {
    throw PreconditionError("MatrpoConfig: alpha in (0,1], lambda in [0,1], avc >= 0");
  }
  if (exact_eval_every < 0) {
    throw PreconditionError("MatrpoConfig: exact_eval_every must be >= 0");
  }
}

LearnerState initial_learner_state(const RolloutEnv& env, const MatrpoConfig& config) {
  config.validate();
  LearnerState state;
  state.policies = initial_policies(env);
  state.critic = LinearCritic::zeros(env.feature_count());
  state.beta = env.beta();
  state.config = config;
  return state;
}

long long Batch::total_steps() const {
  long long total = 0;
  for (const Trajectory& traj : trajectories) {
    total += static_cast<long long>(traj.rewards.size());
  }
  return total;
}

Batch collect(RolloutEnv& env, const std::vector<SoftmaxPolicy>& policies, int num_trajectories,
              int episode_length, std::uint64_t seed) {
  const int n = env.num_agents();
  if (static_cast<int>(policies.size()) != n) {
    throw PreconditionError("collect: one policy per agent required");
  }
  if (num_trajectories <= 0 || episode_length < 2) {
    throw PreconditionError("collect: need at least one trajectory of length >= 2");
  }
  for (int i = 0; i < n; ++i) {
    const SoftmaxPolicy& policy = policies[static_cast<std::size_t>(i)];
    if (policy.observation_count() != env.observation_count(i) ||
        policy.action_count() != env.action_count(i)) {
      throw PreconditionError("collect: policy table shape mismatch");
    }
  }

  Batch batch;
  batch.trajectories.resize(static_cast<std::size_t>(num_trajectories));
  std::vector<int> actions(static_cast<std::size_t>(n));
  for (int b = 0; b < num_trajectories; ++b) {
    Trajectory& traj = batch.trajectories[static_cast<std::size_t>(b)];
    env.reset(derive_seed(seed, static_cast<std::uint64_t>(b), 1));
    Rng action_rng(derive_seed(seed, static_cast<std::uint64_t>(b), 2));
    traj.observations.reserve(static_cast<std::size_t>(episode_length) + 1);
    traj.features.reserve(static_cast<std::size_t>(episode_length) + 1);
    traj.actions.reserve(static_cast<std::size_t>(episode_length));
    traj.rewards.reserve(static_cast<std::size_t>(episode_length));

    auto record_state = [&] {
      std::vector<int> obs(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        obs[static_cast<std::size_t>(i)] = env.observation(i);
      }
      traj.observations.push_back(std::move(obs));
      std::vector<int> active;
      env.active_features(active);
      traj.features.push_back(std::move(active));
    };

    record_state();
    for (int t = 0; t < episode_length; ++t) {
      for (int i = 0; i < n; ++i) {
        actions[static_cast<std::size_t>(i)] =
            policies[static_cast<std::size_t>(i)].sample(traj.observations.back()[static_cast<std::size_t>(i)],
                                                         action_rng);
      }
      const double reward = env.step(actions);
      traj.actions.push_back(actions);
      traj.rewards.push_back(reward);
      record_state();
    }
  }
  return batch;
}

void update_running_stats(LearnerState& state, const Batch& batch) {
  const long long total = batch.total_steps();
  if (total == 0) {
    throw PreconditionError("update_running_stats: empty batch");
  }
  const double alpha = state.config.alpha;
  double reward_sum = 0.0;
  for (const Trajectory& traj : batch.trajectories) {
    reward_sum = std::accumulate(traj.rewards.begin(), traj.rewards.end(), reward_sum);
  }
  state.eta_hat = (1.0 - alpha) * state.eta_hat + alpha * reward_sum / static_cast<double>(total);
  // The deviation is measured around the freshly updated mean.
  double dev_sum = 0.0;
  for (const Trajectory& traj : batch.trajectories) {
    for (double r : traj.rewards) {
      const double d = r - state.eta_hat;
      dev_sum += d * d;
    }
  }
  state.zeta_hat = (1.0 - alpha) * state.zeta_hat + alpha * dev_sum / static_cast<double>(total);
  state.j_hat = state.eta_hat - state.beta * state.zeta_hat;
}

void compute_surrogate_rewards(Batch& batch, const LearnerState& state) {
  batch.surrogate_rewards.resize(batch.trajectories.size());
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const std::vector<double>& rewards = batch.trajectories[b].rewards;
    std::vector<double>& f = batch.surrogate_rewards[b];
    f.resize(rewards.size());
    for (std::size_t t = 0; t < rewards.size(); ++t) {
      const double d = rewards[t] - state.eta_hat;
      f[t] = rewards[t] - state.beta * d * d;
    }
  }
}

void compute_gae(Batch& batch, const LearnerState& state, const LinearCritic& critic) {
  require_derived_tables(batch, "compute_gae");
  const double lambda = state.config.gae_lambda;
  batch.values.resize(batch.trajectories.size());
  batch.advantages.resize(batch.trajectories.size());
  batch.m_weights.resize(batch.trajectories.size());
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const Trajectory& traj = batch.trajectories[b];
    const std::size_t steps = traj.rewards.size();
    std::vector<double>& values = batch.values[b];
    values.resize(steps + 1);
    for (std::size_t t = 0; t <= steps; ++t) {
      values[t] = critic.value(traj.features[t]);
    }
    std::vector<double>& adv = batch.advantages[b];
    adv.resize(steps);
    double carry = 0.0;
    for (std::size_t t = steps; t-- > 0;) {
      const double delta =
          batch.surrogate_rewards[b][t] - state.j_hat + values[t + 1] - values[t];
      carry = delta + lambda * carry;
      adv[t] = carry;
    }
    batch.m_weights[b] = adv;
  }
}

void avc_critic_targets(Batch& batch) {
  if (batch.advantages.size() != batch.trajectories.size()) {
    throw PreconditionError("avc_critic_targets: advantages not computed");
  }
  batch.critic_targets.resize(batch.trajectories.size());
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const std::vector<double>& adv = batch.advantages[b];
    std::vector<double>& targets = batch.critic_targets[b];
    targets.resize(adv.size());
    for (std::size_t t = 0; t < adv.size(); ++t) {
      targets[t] = adv[t] + batch.values[b][t];
    }
  }
}

double critic_loss(const LinearCritic& critic, const Batch& batch, double avc_coefficient) {
  const double total = static_cast<double>(batch.total_steps());
  double mse = 0.0;
  double mean_value = 0.0;
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const Trajectory& traj = batch.trajectories[b];
    for (std::size_t t = 0; t < traj.rewards.size(); ++t) {
      const double v = critic.value(traj.features[t]);
      const double e = v - batch.critic_targets[b][t];
      mse += e * e;
      mean_value += v;
    }
  }
  mse /= total;
  mean_value /= total;
  return mse + avc_coefficient * mean_value * mean_value;
}

void fit_critic(LinearCritic& critic, const Batch& batch, double avc_coefficient, int epochs,
                double lr, double max_grad_norm) {
  if (batch.critic_targets.size() != batch.trajectories.size()) {
    throw PreconditionError("fit_critic: targets not computed");
  }
  const double total = static_cast<double>(batch.total_steps());
  Eigen::VectorXd grad_w(critic.weights.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    grad_w.setZero();
    double grad_b = 0.0;
    double mean_value = 0.0;
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      const Trajectory& traj = batch.trajectories[b];
      for (std::size_t t = 0; t < traj.rewards.size(); ++t) {
        const double v = critic.value(traj.features[t]);
        mean_value += v;
        const double e = 2.0 * (v - batch.critic_targets[b][t]) / total;
        grad_b += e;
        for (int f : traj.features[t]) {
          grad_w[f] += e;
        }
      }
    }
    mean_value /= total;
    const double pull = 2.0 * avc_coefficient * mean_value;
    grad_b += pull;
    for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
      const Trajectory& traj = batch.trajectories[b];
      for (std::size_t t = 0; t < traj.rewards.size(); ++t) {
        for (int f : traj.features[t]) {
          grad_w[f] += pull / total;
        }
      }
    }
    const double norm = std::sqrt(grad_w.squaredNorm() + grad_b * grad_b);
    double scale = 1.0;
    if (norm > max_grad_norm && norm > 0.0) {
      scale = max_grad_norm / norm;
    }
    critic.weights -= (lr * scale) * grad_w;
    critic.bias -= lr * scale * grad_b;
  }
}

void propagate_m_weights(Batch& batch, int agent, const SoftmaxPolicy& old_policy,
                         const SoftmaxPolicy& new_policy) {
  if (batch.m_weights.size() != batch.trajectories.size()) {
    throw PreconditionError("propagate_m_weights: m_weights not initialized");
  }
  const Eigen::MatrixXd old_probs = softmax_table(old_policy.logits);
  const Eigen::MatrixXd new_probs = softmax_table(new_policy.logits);
  for (std::size_t b = 0; b < batch.trajectories.size(); ++b) {
    const Trajectory& traj = batch.trajectories[b];
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      const int obs = traj.observations[t][static_cast<std::size_t>(agent)];
      const int act = traj.actions[t][static_cast<std::size_t>(agent)];
      const double denom = old_probs(obs, act);
      if (denom < kRatioDenominatorFloor) {
        throw NumericalError("propagate_m_weights: degenerate probability ratio denominator");
      }
      batch.m_weights[b][t] *= new_probs(obs, act) / denom;
    }
  }
}

SoftmaxPolicy trust_region_step(int agent, const Batch& batch, const LearnerState& state,
                                StepReport* report) {
  const SoftmaxPolicy& policy = state.policies[static_cast<std::size_t>(agent)];
  const double eps = state.config.kl_epsilon;
  const AgentSteps steps = flatten_agent_steps(batch, agent);
  const double bt = static_cast<double>(steps.m.size());

  StepReport local;
  StepReport& rep = report ? *report : local;
  rep = StepReport{};
  rep.surrogate_before =
      std::accumulate(steps.m.begin(), steps.m.end(), 0.0) / bt;
  rep.surrogate_after = rep.surrogate_before;

  const Eigen::MatrixXd probs = softmax_table(policy.logits);
  Eigen::VectorXd visits = Eigen::VectorXd::Zero(policy.observation_count());
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(policy.observation_count(), policy.action_count());
  for (std::size_t t = 0; t < steps.m.size(); ++t) {
    const int o = steps.obs[t];
    visits[o] += 1.0;
    g.row(o) -= steps.m[t] * probs.row(o);
    g(o, steps.act[t]) += steps.m[t];
  }
  g /= bt;
  if (!g.allFinite()) {
    throw NumericalError("trust_region_step: non-finite surrogate gradient");
  }
  std::vector<int> visited;
  for (int o = 0; o < visits.size(); ++o) {
    if (visits[o] > 0.0) {
      visited.push_back(o);
    }
  }
  const Eigen::VectorXd nu = visits / bt;

  if (g.norm() < 1e-14) {
    return policy;
  }

  auto fisher_product = [&](const Eigen::MatrixXd& v) {
    Eigen::MatrixXd out = kCgDamping * v;
    for (int o : visited) {
      const double pv = probs.row(o).dot(v.row(o));
      out.row(o) += nu[o] * (probs.row(o).cwiseProduct(v.row(o)) - pv * probs.row(o));
    }
    return out;
  };

  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(g.rows(), g.cols());
  Eigen::MatrixXd r = g;
  Eigen::MatrixXd p = r;
  double rs = r.squaredNorm();
  for (int it = 0; it < kCgIterations && rs > 1e-22; ++it) {
    const Eigen::MatrixXd ap = fisher_product(p);
    const double pap = (p.array() * ap.array()).sum();
    if (!(pap > 0.0)) {
      break;
    }
    const double step = rs / pap;
    x += step * p;
    r -= step * ap;
    const double rs_next = r.squaredNorm();
    p = r + (rs_next / rs) * p;
    rs = rs_next;
  }

  const double ghg = (g.array() * x.array()).sum();
  if (!(ghg > 1e-15) || !x.allFinite()) {
    return policy;
  }
  const Eigen::MatrixXd direction = std::sqrt(2.0 * eps / ghg) * x;

  double scale = 1.0;
  for (int attempt = 0; attempt < kBacktrackLimit; ++attempt, scale *= 0.5) {
    SoftmaxPolicy candidate;
    candidate.logits = policy.logits + scale * direction;
    const Eigen::MatrixXd cand_probs = softmax_table(candidate.logits);
    double surrogate = 0.0;
    for (std::size_t t = 0; t < steps.m.size(); ++t) {
      surrogate += cand_probs(steps.obs[t], steps.act[t]) / probs(steps.obs[t], steps.act[t]) *
                   steps.m[t];
    }
    surrogate /= bt;
    double kl = 0.0;
    for (int o : visited) {
      kl += nu[o] * row_kl(probs.row(o).transpose(), cand_probs.row(o).transpose());
    }
    if (surrogate > rep.surrogate_before && kl <= eps) {
      rep.accepted = true;
      rep.surrogate_after = surrogate;
      rep.mean_kl = kl;
      rep.backtracks = attempt;
      return candidate;
    }
  }
  rep.backtracks = kBacktrackLimit;
  return policy;
}

SoftmaxPolicy clip_step(int agent, const Batch& batch, const LearnerState& state,
                        std::uint64_t seed, StepReport* report) {
  const SoftmaxPolicy& policy = state.policies[static_cast<std::size_t>(agent)];
  const double eps = state.config.clip_epsilon;
  const AgentSteps steps = flatten_agent_steps(batch, agent);
  const std::size_t total = steps.m.size();
  const double bt = static_cast<double>(total);

  StepReport local;
  StepReport& rep = report ? *report : local;
  rep = StepReport{};
  rep.surrogate_before = std::accumulate(steps.m.begin(), steps.m.end(), 0.0) / bt;

  const Eigen::MatrixXd base_probs = softmax_table(policy.logits);
  std::vector<double> denom(total);
  for (std::size_t t = 0; t < total; ++t) {
    denom[t] = base_probs(steps.obs[t], steps.act[t]);
    if (denom[t] < kRatioDenominatorFloor) {
      throw NumericalError("clip_step: degenerate probability ratio denominator");
    }
  }

  SoftmaxPolicy updated = policy;
  const int rows = policy.observation_count();
  const int cols = policy.action_count();
  Eigen::MatrixXd grad(rows, cols);
  Eigen::MatrixXd row_cache(rows, cols);
  std::vector<long long> row_stamp(static_cast<std::size_t>(rows), -1);
  long long stamp = 0;

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const int minibatches = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(state.config.num_minibatch), total));

  for (int epoch = 0; epoch < state.config.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, static_cast<std::uint64_t>(epoch), 0x636c6970ULL));
    shuffle_rng.shuffle(order);
    std::size_t cursor = 0;
    for (int mb = 0; mb < minibatches; ++mb) {
      const std::size_t remaining = total - cursor;
      const std::size_t size = remaining / static_cast<std::size_t>(minibatches - mb) +
                               (remaining % static_cast<std::size_t>(minibatches - mb) ? 1 : 0);
      grad.setZero();
      ++stamp;
      for (std::size_t k = cursor; k < cursor + size; ++k) {
        const std::size_t t = order[k];
        const int o = steps.obs[t];
        if (row_stamp[static_cast<std::size_t>(o)] != stamp) {
          row_cache.row(o) = softmax_row(updated.logits, o).transpose();
          row_stamp[static_cast<std::size_t>(o)] = stamp;
        }
        const double ratio = row_cache(o, steps.act[t]) / denom[t];
        const double m = steps.m[t];
        const double unclipped = ratio * m;
        const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * m;
        const bool inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
        if (unclipped < clipped || inside) {
          grad.row(o) -= unclipped * row_cache.row(o);
          grad(o, steps.act[t]) += unclipped;
        }
      }
      grad /= static_cast<double>(size);
      if (!grad.allFinite()) {
        throw NumericalError("clip_step: non-finite surrogate gradient");
      }
      clip_global_norm(grad, state.config.max_grad_norm);
      updated.logits += state.config.lr * grad;
      cursor += size;
    }
  }

  const Eigen::MatrixXd new_probs = softmax_table(updated.logits);
  double surrogate = 0.0;
  double kl = 0.0;
  Eigen::VectorXd visits = Eigen::VectorXd::Zero(rows);
  for (std::size_t t = 0; t < total; ++t) {
    const double ratio = new_probs(steps.obs[t], steps.act[t]) / denom[t];
    surrogate += std::min(ratio * steps.m[t],
                          std::clamp(ratio, 1.0 - eps, 1.0 + eps) * steps.m[t]);
    visits[steps.obs[t]] += 1.0;
  }
  for (int o = 0; o < rows; ++o) {
    if (visits[o] > 0.0) {
      kl += visits[o] / bt *
            row_kl(base_probs.row(o).transpose(), new_probs.row(o).transpose());
    }
  }
  rep.accepted = true;
  rep.surrogate_after = surrogate / bt;
  rep.mean_kl = kl;
  return updated;
}

TrainResult train(RolloutEnv& env, const MatrpoConfig& config) {
  config.validate();
  LearnerState state = initial_learner_state(env, config);
  const int iterations = config.iterations();
  const int n = env.num_agents();

  TrainResult result;
  result.trace.reserve(static_cast<std::size_t>(iterations));
  for (int k = 0; k < iterations; ++k) {
    Batch batch = collect(env, state.policies, config.num_envs, config.episode_length,
                          derive_seed(config.seed, static_cast<std::uint64_t>(k), 0x626174ULL));
    update_running_stats(state, batch);
    compute_surrogate_rewards(batch, state);
    compute_gae(batch, state, state.critic);
    avc_critic_targets(batch);

    Rng perm_rng(derive_seed(config.seed, static_cast<std::uint64_t>(k), 0x7065726dULL));
    const std::vector<int> order = perm_rng.permutation(n);
    std::vector<double> mean_kl(static_cast<std::size_t>(n), 0.0);
    for (int h = 0; h < n; ++h) {
      const int agent = order[static_cast<std::size_t>(h)];
      StepReport rep;
      SoftmaxPolicy updated =
          config.variant == StepVariant::trust_region
              ? trust_region_step(agent, batch, state, &rep)
              : clip_step(agent, batch, state,
                          derive_seed(config.seed, static_cast<std::uint64_t>(k),
                                      0x10000ULL + static_cast<std::uint64_t>(agent)),
                          &rep);
      // The last agent's ratios would never be read again this iteration.
      if (h + 1 < n) {
        propagate_m_weights(batch, agent, state.policies[static_cast<std::size_t>(agent)],
                            updated);
      }
      state.policies[static_cast<std::size_t>(agent)] = std::move(updated);
      mean_kl[static_cast<std::size_t>(agent)] = rep.accepted ? rep.mean_kl : 0.0;
    }

    fit_critic(state.critic, batch, config.avc_coefficient, config.epochs, config.lr,
               config.max_grad_norm);
    state.iteration = k + 1;

    TraceRow row;
    row.iteration = k;
    row.eta_hat = state.eta_hat;
    row.zeta_hat = state.zeta_hat;
    row.j_hat = state.j_hat;
    row.mean_kl = std::move(mean_kl);
    const TsgModel* model = env.exact_model();
    if (model != nullptr && config.exact_eval_every > 0 &&
        (k % config.exact_eval_every == 0 || k + 1 == iterations)) {
      const PolicyEval eval = evaluate(*model, lower_to_joint(*model, state.policies));
      row.has_exact = true;
      row.eta_exact = eval.eta;
      row.zeta_exact = eval.zeta;
      row.j_exact = eval.j_value;
    }
    result.trace.push_back(std::move(row));
  }
  result.state = std::move(state);
  return result;
}

EstimatorCheck sequential_estimator_check(const TsgModel& model, const PolicyEval& eval_mu,
                                          const JointPolicy& mu, const JointPolicy& mu_prime,
                                          const std::vector<int>& order, int position,
                                          int state) {
  model.check_state(state);
  if (static_cast<int>(order.size()) != model.num_agents() || position < 0 ||
      position >= model.num_agents()) {
    throw PreconditionError("sequential_estimator_check: invalid order or position");
  }
  const int n = model.num_agents();
  // role[i]: 0 = base policy, 1 = updated prefix, 2 = the agent being updated.
  std::vector<int> role(static_cast<std::size_t>(n), 0);
  for (int h = 0; h < position; ++h) {
    role[static_cast<std::size_t>(order[static_cast<std::size_t>(h)])] = 1;
  }
  role[static_cast<std::size_t>(order[static_cast<std::size_t>(position)])] = 2;

  EstimatorCheck check;
  for (int joint = 0; joint < model.num_joint_actions(); ++joint) {
    const std::span<const int> parts = model.joint_components(joint);
    const double adv = eval_mu.advantage(state, joint);

    double with_candidate = 1.0;  // prefix ~ mu', updated agent ~ mu'
    double with_base = 1.0;       // prefix ~ mu', updated agent ~ mu
    double base = 1.0;            // all agents ~ mu
    double prefix_ratio = 1.0;
    double candidate_ratio = 1.0;
    bool ratio_valid = true;
    for (int i = 0; i < n; ++i) {
      const int a = parts[static_cast<std::size_t>(i)];
      const double p_mu = mu.per_agent[static_cast<std::size_t>(i)].at(state, a);
      const double p_new = mu_prime.per_agent[static_cast<std::size_t>(i)].at(state, a);
      base *= p_mu;
      with_candidate *= role[static_cast<std::size_t>(i)] == 0 ? p_mu : p_new;
      with_base *= role[static_cast<std::size_t>(i)] == 1 ? p_new : p_mu;
      if (role[static_cast<std::size_t>(i)] != 0) {
        if (p_mu <= 0.0) {
          ratio_valid = false;
        } else if (role[static_cast<std::size_t>(i)] == 1) {
          prefix_ratio *= p_new / p_mu;
        } else {
          candidate_ratio = p_new / p_mu;
        }
      }
    }
    check.direct += (with_candidate - with_base) * adv;
    if (base > 0.0) {
      if (!ratio_valid) {
        throw NumericalError("sequential_estimator_check: zero base probability under ratio");
      }
      check.ratio_form += base * (candidate_ratio - 1.0) * prefix_ratio * adv;
    }
  }
  return check;
}

SequentialBound sequential_improvement_bound(const TsgModel& model, const JointPolicy& mu,
                                             const JointPolicy& mu_prime,
                                             const std::vector<int>& order, double kemeny_star,
                                             const Tolerances& tol) {
  if (static_cast<int>(order.size()) != model.num_agents()) {
    throw PreconditionError("sequential_improvement_bound: order must cover all agents");
  }
  const int n = model.num_agents();
  const PolicyEval eval = evaluate(model, mu, tol);
  const Eigen::VectorXd& pi = eval.stationary;

  // Expected advantage under the hybrid that updates the first h agents of
  // the order; differences of consecutive hybrids give the per-position
  // surrogate gains.
  auto hybrid_expectation = [&](int h) {
    JointPolicy hybrid = mu;
    for (int j = 0; j < h; ++j) {
      const std::size_t agent = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
      hybrid.per_agent[agent] = mu_prime.per_agent[agent];
    }
    const PolicyTable table = to_table(model, hybrid);
    Eigen::VectorXd per_state = Eigen::VectorXd::Zero(model.num_states());
    for (int s = 0; s < model.num_states(); ++s) {
      double acc = 0.0;
      for (int joint = 0; joint < model.num_joint_actions(); ++joint) {
        acc += table.at(s, joint) * eval.advantage(s, joint);
      }
      per_state[s] = acc;
    }
    return per_state;
  };

  SequentialBound bound;
  Eigen::VectorXd previous = hybrid_expectation(0);
  Eigen::VectorXd full;
  for (int h = 1; h <= n; ++h) {
    Eigen::VectorXd current = hybrid_expectation(h);
    bound.surrogate_gains.push_back(pi.dot(current - previous));
    previous = current;
    if (h == n) {
      full = current;
    }
  }
  bound.eps_f = full.cwiseAbs().maxCoeff();

  for (int h = 0; h < n; ++h) {
    const std::size_t agent = static_cast<std::size_t>(order[static_cast<std::size_t>(h)]);
    const AgentPolicy& p_new = mu_prime.per_agent[agent];
    const AgentPolicy& p_old = mu.per_agent[agent];
    double expected_kl = 0.0;
    for (int s = 0; s < model.num_states(); ++s) {
      double kl = 0.0;
      for (int a = 0; a < p_new.num_actions; ++a) {
        const double p = p_new.at(s, a);
        if (p <= 0.0) {
          continue;
        }
        const double q = p_old.at(s, a);
        if (q <= 0.0) {
          kl = std::numeric_limits<double>::infinity();
          break;
        }
        kl += p * (std::log(p) - std::log(q));
      }
      expected_kl += pi[s] * kl;
    }
    bound.penalties.push_back((kemeny_star - 1.0) * bound.eps_f * std::sqrt(2.0 * expected_kl));
  }

  bound.lower_bound = eval.j_value;
  for (int h = 0; h < n; ++h) {
    bound.lower_bound += bound.surrogate_gains[static_cast<std::size_t>(h)] -
                         bound.penalties[static_cast<std::size_t>(h)];
  }
  bound.actual = evaluate(model, mu_prime, tol).j_value;
  return bound;
}

}  // namespace mvtsg
