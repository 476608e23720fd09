#include "mvtsg/chain.hpp"

#include <cmath>
#include <numeric>
#include <queue>
#include <vector>

namespace mvtsg {

namespace {

void check_square_stochastic(const Eigen::MatrixXd& chain, double row_tol) {
  if (chain.rows() == 0 || chain.rows() != chain.cols())
    throw PreconditionError("chain: matrix must be square and nonempty");
  for (Eigen::Index i = 0; i < chain.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < chain.cols(); ++j) {
      double p = chain(i, j);
      if (!std::isfinite(p) || p < 0.0)
        throw PreconditionError("chain: entries must be in [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > row_tol)
      throw PreconditionError("chain: row does not sum to 1");
  }
}

// Number of closed communicating classes of the positive-support graph. The
// stationary distribution is unique iff there is exactly one (unichain);
// residual checks alone cannot detect multichain inputs because any convex
// mix of per-class distributions satisfies pi P = pi exactly.
int closed_class_count(const Eigen::MatrixXd& chain) {
  const int n = static_cast<int>(chain.rows());
  std::vector<std::vector<int>> fwd(static_cast<std::size_t>(n)), bwd(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (chain(i, j) > 0.0) {
        fwd[static_cast<std::size_t>(i)].push_back(j);
        bwd[static_cast<std::size_t>(j)].push_back(i);
      }

  // Kosaraju: finish order on the forward graph, then components on the
  // reverse graph.
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(n));
  std::vector<std::pair<int, std::size_t>> stack;
  for (int start = 0; start < n; ++start) {
    if (seen[static_cast<std::size_t>(start)]) continue;
    seen[static_cast<std::size_t>(start)] = 1;
    stack.emplace_back(start, 0);
    while (!stack.empty()) {
      auto& [u, k] = stack.back();
      const auto& out = fwd[static_cast<std::size_t>(u)];
      if (k < out.size()) {
        int v = out[k++];
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          stack.emplace_back(v, 0);
        }
      } else {
        order.push_back(u);
        stack.pop_back();
      }
    }
  }

  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  int num_comps = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (comp[static_cast<std::size_t>(*it)] >= 0) continue;
    std::vector<int> dfs{*it};
    comp[static_cast<std::size_t>(*it)] = num_comps;
    while (!dfs.empty()) {
      int u = dfs.back();
      dfs.pop_back();
      for (int v : bwd[static_cast<std::size_t>(u)])
        if (comp[static_cast<std::size_t>(v)] < 0) {
          comp[static_cast<std::size_t>(v)] = num_comps;
          dfs.push_back(v);
        }
    }
    ++num_comps;
  }

  std::vector<char> closed(static_cast<std::size_t>(num_comps), 1);
  for (int u = 0; u < n; ++u)
    for (int v : fwd[static_cast<std::size_t>(u)])
      if (comp[static_cast<std::size_t>(u)] != comp[static_cast<std::size_t>(v)])
        closed[static_cast<std::size_t>(comp[static_cast<std::size_t>(u)])] = 0;
  int count = 0;
  for (char c : closed) count += c;
  return count;
}

// Expected advantage of `direction` under the state weights `weights`:
// sum_s weights(s) sum_a direction(a|s) table(s, a).
double weighted_table_expectation(const TsgModel& model, const JointPolicy& direction,
                                  const Eigen::VectorXd& weights, const Eigen::MatrixXd& table) {
  double total = 0.0;
  for (int s = 0; s < model.num_states(); ++s) {
    if (weights(s) == 0.0) continue;
    double inner = 0.0;
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      double p = joint_probability(model, direction, s, a);
      if (p != 0.0) inner += p * table(s, a);
    }
    total += weights(s) * inner;
  }
  return total;
}

// max_s |sum_a direction(a|s) table(s, a)|.
double max_state_expectation(const TsgModel& model, const JointPolicy& direction,
                             const Eigen::MatrixXd& table) {
  double worst = 0.0;
  for (int s = 0; s < model.num_states(); ++s) {
    double inner = 0.0;
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      double p = joint_probability(model, direction, s, a);
      if (p != 0.0) inner += p * table(s, a);
    }
    worst = std::max(worst, std::abs(inner));
  }
  return worst;
}

// Evaluation core over any mu(s, a) probability functor.
template <typename ProbFn>
PolicyEval evaluate_impl(const TsgModel& model, ProbFn&& mu, const Tolerances& tol) {
  const int ns = model.num_states();
  const int na = model.num_joint_actions();
  const double beta = model.beta();

  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(ns, ns);
  Eigen::VectorXd r_mu = Eigen::VectorXd::Zero(ns);
  for (int s = 0; s < ns; ++s)
    for (int a = 0; a < na; ++a) {
      double p = mu(s, a);
      if (p == 0.0) continue;
      auto row = model.transition_row(s, a);
      for (std::size_t k = 0; k < row.next.size(); ++k) P(s, row.next[k]) += p * row.prob[k];
      r_mu(s) += p * model.reward(s, a);
    }

  PolicyEval out;
  out.stationary = stationary_distribution(P, tol);
  out.eta = out.stationary.dot(r_mu);

  out.zeta = 0.0;
  for (int s = 0; s < ns; ++s) {
    if (out.stationary(s) == 0.0) continue;
    double inner = 0.0;
    for (int a = 0; a < na; ++a) {
      double p = mu(s, a);
      if (p == 0.0) continue;
      double d = model.reward(s, a) - out.eta;
      inner += p * d * d;
    }
    out.zeta += out.stationary(s) * inner;
  }
  out.j_value = out.eta - beta * out.zeta;

  out.surrogate_reward.resize(ns, na);
  Eigen::VectorXd f_mu = Eigen::VectorXd::Zero(ns);
  for (int s = 0; s < ns; ++s)
    for (int a = 0; a < na; ++a) {
      double d = model.reward(s, a) - out.eta;
      double f = model.reward(s, a) - beta * d * d;
      out.surrogate_reward(s, a) = f;
      double p = mu(s, a);
      if (p != 0.0) f_mu(s) += p * f;
    }

  // Fundamental-matrix system (I - P + e pi^T) V = f_mu; the solution
  // satisfies the Poisson equation with pi V = J.
  Eigen::MatrixXd M = Eigen::MatrixXd::Identity(ns, ns) - P;
  M.rowwise() += out.stationary.transpose();
  out.value = M.partialPivLu().solve(f_mu);
  double solve_residual = (M * out.value - f_mu).lpNorm<Eigen::Infinity>();
  if (!out.value.allFinite() || solve_residual > tol.fundamental_solve)
    throw NumericalError("evaluate: fundamental-matrix solve residual too large");

  out.q_value.resize(ns, na);
  out.advantage.resize(ns, na);
  for (int s = 0; s < ns; ++s)
    for (int a = 0; a < na; ++a) {
      auto row = model.transition_row(s, a);
      double next_value = 0.0;
      for (std::size_t k = 0; k < row.next.size(); ++k)
        next_value += row.prob[k] * out.value(row.next[k]);
      out.q_value(s, a) = out.surrogate_reward(s, a) - out.j_value + next_value;
      out.advantage(s, a) = out.q_value(s, a) - out.value(s);
    }
  return out;
}

}  // namespace

InducedChain induced_chain(const TsgModel& model, const JointPolicy& policy) {
  policy.validate();
  const int ns = model.num_states();
  const int na = model.num_joint_actions();
  InducedChain out;
  out.transition = Eigen::MatrixXd::Zero(ns, ns);
  out.reward = Eigen::VectorXd::Zero(ns);
  for (int s = 0; s < ns; ++s)
    for (int a = 0; a < na; ++a) {
      double p = joint_probability(model, policy, s, a);
      if (p == 0.0) continue;
      auto row = model.transition_row(s, a);
      for (std::size_t k = 0; k < row.next.size(); ++k)
        out.transition(s, row.next[k]) += p * row.prob[k];
      out.reward(s) += p * model.reward(s, a);
    }
  return out;
}

InducedChain induced_chain(const TsgModel& model, const PolicyTable& policy) {
  policy.validate();
  if (policy.num_states != model.num_states() ||
      policy.num_joint_actions != model.num_joint_actions())
    throw PreconditionError("induced_chain: policy table shape mismatch");
  const int ns = model.num_states();
  InducedChain out;
  out.transition = Eigen::MatrixXd::Zero(ns, ns);
  out.reward = Eigen::VectorXd::Zero(ns);
  for (int s = 0; s < ns; ++s)
    for (int a = 0; a < policy.num_joint_actions; ++a) {
      double p = policy.at(s, a);
      if (p == 0.0) continue;
      auto row = model.transition_row(s, a);
      for (std::size_t k = 0; k < row.next.size(); ++k)
        out.transition(s, row.next[k]) += p * row.prob[k];
      out.reward(s) += p * model.reward(s, a);
    }
  return out;
}

InducedChain induced_chain(const TsgModel& model, const DeterministicPolicy& policy) {
  const int ns = model.num_states();
  InducedChain out;
  out.transition = Eigen::MatrixXd::Zero(ns, ns);
  out.reward.resize(ns);
  for (int s = 0; s < ns; ++s) {
    int a = policy.joint_action_at(model, s);
    auto row = model.transition_row(s, a);
    for (std::size_t k = 0; k < row.next.size(); ++k) out.transition(s, row.next[k]) = row.prob[k];
    out.reward(s) = model.reward(s, a);
  }
  return out;
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& chain, const Tolerances& tol) {
  check_square_stochastic(chain, tol.row_sum);
  const Eigen::Index n = chain.rows();

  if (closed_class_count(chain) != 1)
    throw NonErgodicError("stationary_distribution: multiple closed classes; no unique distribution");

  // pi (I - P) = 0 transposed, with the last equation replaced by pi e = 1.
  Eigen::MatrixXd A = (Eigen::MatrixXd::Identity(n, n) - chain).transpose();
  A.row(n - 1).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  b(n - 1) = 1.0;
  Eigen::VectorXd pi = A.partialPivLu().solve(b);

  if (!pi.allFinite()) throw NonErgodicError("stationary_distribution: singular system");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (pi(i) < -1e-12)
      throw NonErgodicError("stationary_distribution: negative entry; no unique distribution");
    if (pi(i) < 0.0) pi(i) = 0.0;
  }
  pi /= pi.sum();

  double residual = (chain.transpose() * pi - pi).lpNorm<Eigen::Infinity>();
  if (residual > tol.stationary_residual)
    throw NonErgodicError("stationary_distribution: residual exceeds tolerance; chain has no unique stationary distribution");
  return pi;
}

PolicyEval evaluate(const TsgModel& model, const JointPolicy& policy, const Tolerances& tol) {
  policy.validate();
  if (policy.num_agents() != model.num_agents())
    throw PreconditionError("evaluate: agent count mismatch");
  for (int i = 0; i < model.num_agents(); ++i)
    if (policy.per_agent[static_cast<std::size_t>(i)].num_states != model.num_states() ||
        policy.per_agent[static_cast<std::size_t>(i)].num_actions != model.action_count(i))
      throw PreconditionError("evaluate: policy shape mismatch");
  return evaluate_impl(
      model,
      [&](int s, int a) {
        auto comps = model.joint_components(a);
        double p = 1.0;
        for (int i = 0; i < model.num_agents(); ++i)
          p *= policy.per_agent[static_cast<std::size_t>(i)].at(s, comps[static_cast<std::size_t>(i)]);
        return p;
      },
      tol);
}

PolicyEval evaluate(const TsgModel& model, const PolicyTable& policy, const Tolerances& tol) {
  policy.validate();
  if (policy.num_states != model.num_states() ||
      policy.num_joint_actions != model.num_joint_actions())
    throw PreconditionError("evaluate: policy table shape mismatch");
  return evaluate_impl(model, [&](int s, int a) { return policy.at(s, a); }, tol);
}

PolicyEval evaluate(const TsgModel& model, const DeterministicPolicy& policy,
                    const Tolerances& tol) {
  std::vector<int> chosen(static_cast<std::size_t>(model.num_states()));
  for (int s = 0; s < model.num_states(); ++s)
    chosen[static_cast<std::size_t>(s)] = policy.joint_action_at(model, s);
  return evaluate_impl(
      model, [&](int s, int a) { return a == chosen[static_cast<std::size_t>(s)] ? 1.0 : 0.0; },
      tol);
}

bool chain_is_ergodic(const Eigen::MatrixXd& chain) {
  const int n = static_cast<int>(chain.rows());
  if (n == 0 || chain.rows() != chain.cols()) return false;
  std::vector<std::vector<int>> fwd(static_cast<std::size_t>(n)), bwd(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (chain(i, j) > 0.0) {
        fwd[static_cast<std::size_t>(i)].push_back(j);
        bwd[static_cast<std::size_t>(j)].push_back(i);
      }

  auto reach_all = [n](const std::vector<std::vector<int>>& adj) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> q;
    q.push(0);
    seen[0] = 1;
    int count = 0;
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      ++count;
      for (int v : adj[static_cast<std::size_t>(u)])
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          q.push(v);
        }
    }
    return count == n;
  };
  if (!reach_all(fwd) || !reach_all(bwd)) return false;

  std::vector<int> depth(static_cast<std::size_t>(n), -1);
  std::queue<int> q;
  q.push(0);
  depth[0] = 0;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : fwd[static_cast<std::size_t>(u)])
      if (depth[static_cast<std::size_t>(v)] < 0) {
        depth[static_cast<std::size_t>(v)] = depth[static_cast<std::size_t>(u)] + 1;
        q.push(v);
      }
  }
  int g = 0;
  for (int u = 0; u < n; ++u)
    for (int v : fwd[static_cast<std::size_t>(u)])
      g = std::gcd(g, std::abs(depth[static_cast<std::size_t>(u)] + 1 -
                               depth[static_cast<std::size_t>(v)]));
  return g == 1;
}

double kemeny_constant(const Eigen::MatrixXd& chain, const Tolerances& tol) {
  check_square_stochastic(chain, tol.row_sum);
  if (!chain_is_ergodic(chain))
    throw NonErgodicError("kemeny_constant: chain is not irreducible and aperiodic");
  const Eigen::Index n = chain.rows();
  Eigen::VectorXd pi = stationary_distribution(chain, tol);

  // Mean first-passage times into each target j: for i != j,
  // m_ij = 1 + sum_{k != j} P(i,k) m_kj, an (n-1)-dimensional solve per j.
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    m(j, j) = 1.0 / pi(j);  // expected return time
    if (n == 1) continue;
    Eigen::MatrixXd B(n - 1, n - 1);
    for (Eigen::Index i = 0, bi = 0; i < n; ++i) {
      if (i == j) continue;
      for (Eigen::Index k = 0, bk = 0; k < n; ++k) {
        if (k == j) continue;
        B(bi, bk) = (i == k ? 1.0 : 0.0) - chain(i, k);
        ++bk;
      }
      ++bi;
    }
    Eigen::VectorXd x = B.partialPivLu().solve(Eigen::VectorXd::Ones(n - 1));
    if (!x.allFinite()) throw NumericalError("kemeny_constant: first-passage solve failed");
    for (Eigen::Index i = 0, bi = 0; i < n; ++i) {
      if (i == j) continue;
      m(i, j) = x(bi++);
    }
  }

  double first = 0.0, total = 0.0, worst_spread = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double k_i = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) k_i += pi(j) * m(i, j);
    if (i == 0) first = k_i;
    worst_spread = std::max(worst_spread, std::abs(k_i - first));
    total += k_i;
  }
  if (worst_spread > tol.kemeny_start_independence)
    throw NumericalError("kemeny_constant: start-state dependence exceeds tolerance");
  return total / static_cast<double>(n);
}

double performance_difference_residual(const TsgModel& model, const JointPolicy& mu,
                                       const JointPolicy& mu_prime, const Tolerances& tol) {
  PolicyEval base = evaluate(model, mu, tol);
  PolicyEval other = evaluate(model, mu_prime, tol);
  double expected_advantage =
      weighted_table_expectation(model, mu_prime, other.stationary, base.advantage);
  double eta_gap = other.eta - base.eta;
  double rhs = expected_advantage + model.beta() * eta_gap * eta_gap;
  return std::abs((other.j_value - base.j_value) - rhs);
}

double performance_derivative(const TsgModel& model, const JointPolicy& mu,
                              const JointPolicy& direction, const Tolerances& tol) {
  return performance_derivative(model, evaluate(model, mu, tol), direction);
}

double performance_derivative(const TsgModel& model, const PolicyEval& eval_mu,
                              const JointPolicy& direction) {
  return weighted_table_expectation(model, direction, eval_mu.stationary, eval_mu.advantage);
}

BoundReport trust_region_bound(const TsgModel& model, const JointPolicy& mu,
                               const JointPolicy& mu_prime, double kemeny_star,
                               const Tolerances& tol) {
  PolicyEval base = evaluate(model, mu, tol);
  PolicyEval other = evaluate(model, mu_prime, tol);

  // Mean-reward advantage of mu (the beta = 0 surrogate), sharing mu's chain.
  InducedChain chain = induced_chain(model, mu);
  Eigen::MatrixXd M =
      Eigen::MatrixXd::Identity(chain.transition.rows(), chain.transition.cols()) -
      chain.transition;
  M.rowwise() += base.stationary.transpose();
  Eigen::VectorXd v_eta = M.partialPivLu().solve(chain.reward);
  if (!v_eta.allFinite() || (M * v_eta - chain.reward).lpNorm<Eigen::Infinity>() > tol.fundamental_solve)
    throw NumericalError("trust_region_bound: mean-reward value solve failed");
  Eigen::MatrixXd a_eta(model.num_states(), model.num_joint_actions());
  for (int s = 0; s < model.num_states(); ++s)
    for (int a = 0; a < model.num_joint_actions(); ++a) {
      auto row = model.transition_row(s, a);
      double next_value = 0.0;
      for (std::size_t k = 0; k < row.next.size(); ++k)
        next_value += row.prob[k] * v_eta(row.next[k]);
      a_eta(s, a) = model.reward(s, a) - base.eta + next_value - v_eta(s);
    }

  BoundReport rep;
  rep.kemeny_star = kemeny_star;
  rep.surrogate_gain = weighted_table_expectation(model, mu_prime, base.stationary, base.advantage);
  rep.eta_surrogate_gain = weighted_table_expectation(model, mu_prime, base.stationary, a_eta);
  rep.eps_f = max_state_expectation(model, mu_prime, base.advantage);
  rep.eps_eta = max_state_expectation(model, mu_prime, a_eta);

  rep.tv_divergence = 0.0;
  for (int s = 0; s < model.num_states(); ++s) {
    if (base.stationary(s) == 0.0) continue;
    double tv = 0.0;
    for (int a = 0; a < model.num_joint_actions(); ++a)
      tv += std::abs(joint_probability(model, mu_prime, s, a) -
                     joint_probability(model, mu, s, a));
    rep.tv_divergence += base.stationary(s) * 0.5 * tv;
  }

  double eta_penalty = 2.0 * (kemeny_star - 1.0) * rep.eps_eta * rep.tv_divergence;
  rep.h_term = std::max({0.0, rep.eta_surrogate_gain - eta_penalty,
                         -rep.eta_surrogate_gain - eta_penalty});
  rep.lower_bound = rep.surrogate_gain -
                    2.0 * (kemeny_star - 1.0) * rep.eps_f * rep.tv_divergence +
                    model.beta() * rep.h_term * rep.h_term;
  rep.actual_difference = other.j_value - base.j_value;
  return rep;
}

}  // namespace mvtsg
