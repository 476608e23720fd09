#pragma once

#include <Eigen/Dense>

#include "mvtsg/model.hpp"

namespace mvtsg {

/// Numeric tolerances shared by the exact-evaluation and optimization layers.
/// Defaults reflect double-precision LU accuracy on chains up to ~1300 states.
struct Tolerances {
  double row_sum = 1e-12;                  // transition/policy row validation
  double stationary_residual = 1e-8;       // ||pi P - pi||_inf; also non-ergodicity detection
  double fundamental_solve = 1e-9;         // ||(I - P + e pi)V - f||_inf
  double poisson_residual = 1e-8;          // per-state Poisson equation check
  double advantage_balance = 1e-8;         // sum_a mu(a|s) A_f(s,a) = 0
  double kemeny_start_independence = 1e-8;
  double kemeny_trace_identity = 1e-10;
  double zero_derivative = 1e-9;           // |expected advantage| treated as a tie
  double eta_equality = 1e-9;              // eta comparison between tied deviations
  double stationarity = 1e-9;              // first-order stationarity threshold
  double switch_margin = 1e-10;            // improvement needed to change an action
  double monotonicity_slack = 1e-10;
  double escape_min_gain = 1e-12;          // measured J improvement required to restart
};

/// State-level chain induced by a joint policy: P(s'|s) and expected reward.
struct InducedChain {
  Eigen::MatrixXd transition;  // S x S, rows sum to 1
  Eigen::VectorXd reward;      // S
};

InducedChain induced_chain(const TsgModel& model, const JointPolicy& policy);
InducedChain induced_chain(const TsgModel& model, const PolicyTable& policy);
InducedChain induced_chain(const TsgModel& model, const DeterministicPolicy& policy);

/// Unique solution of {pi(I - P) = 0, pi e = 1}, solved by replacing one
/// equation with the normalization row. Accepts periodic irreducible chains.
/// Throws NonErgodicError when the solve is degenerate or the residual
/// ||pi P - pi||_inf exceeds tolerance (multichain input).
Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& chain, const Tolerances& tol = {});

/// Full exact evaluation of a joint policy.
struct PolicyEval {
  Eigen::VectorXd stationary;        // pi
  double eta = 0.0;                  // long-run mean reward
  double zeta = 0.0;                 // long-run reward variance
  double j_value = 0.0;              // eta - beta * zeta
  Eigen::MatrixXd surrogate_reward;  // f(s,a) = r - beta (r - eta)^2, S x A
  Eigen::VectorXd value;             // V_f, normalized so pi V = J
  Eigen::MatrixXd q_value;           // Q_f(s,a) = f - J + sum_s' P(s'|s,a) V(s')
  Eigen::MatrixXd advantage;         // A_f = Q_f - V_f
};

/// Evaluates eta, zeta, J and the f-based value/Q/advantage tables. V_f comes
/// from the fundamental-matrix linear system (I - P + e pi)V = f, solved by
/// dense LU; the solve residual is checked against tol.fundamental_solve.
PolicyEval evaluate(const TsgModel& model, const JointPolicy& policy, const Tolerances& tol = {});
PolicyEval evaluate(const TsgModel& model, const PolicyTable& policy, const Tolerances& tol = {});
PolicyEval evaluate(const TsgModel& model, const DeterministicPolicy& policy,
                    const Tolerances& tol = {});

/// True iff the positive-support graph of the chain is irreducible and
/// aperiodic.
bool chain_is_ergodic(const Eigen::MatrixXd& chain);

/// Kemeny constant: sum_j pi_j m_ij from mean first-passage times, with the
/// return-time convention m_jj = 1/pi_j included, which makes the value equal
/// the trace of (I - P + e pi)^{-1}. Computed from per-target first-passage
/// solves (not the trace) so the trace identity stays an independent check;
/// start-row independence is asserted internally.
double kemeny_constant(const Eigen::MatrixXd& chain, const Tolerances& tol = {});

/// |J(mu') - J(mu) - E_{s~pi',a~mu'}[A_f^mu(s,a)] - beta (eta' - eta)^2|,
/// the two-policy performance difference identity evaluated exactly.
double performance_difference_residual(const TsgModel& model, const JointPolicy& mu,
                                       const JointPolicy& mu_prime, const Tolerances& tol = {});

/// dJ(mix(mu, direction, delta))/d delta at delta = 0:
/// sum_s pi^mu(s) sum_a direction(a|s) A_f^mu(s,a).
double performance_derivative(const TsgModel& model, const JointPolicy& mu,
                              const JointPolicy& direction, const Tolerances& tol = {});
/// Same derivative given a precomputed evaluation of mu.
double performance_derivative(const TsgModel& model, const PolicyEval& eval_mu,
                              const JointPolicy& direction);

/// Evidence bundle for the mean-variance trust-region lower bound
///   J(mu') - J(mu) >= L_f - 2(kappa* - 1) eps_f D_TV + beta H^2.
struct BoundReport {
  double surrogate_gain = 0.0;      // L_f = E_{s~pi, a~mu'}[A_f]
  double eta_surrogate_gain = 0.0;  // same with the mean-reward advantage
  double kemeny_star = 0.0;         // caller-supplied upper bound
  double eps_f = 0.0;               // max_s |E_{a~mu'} A_f(s,.)|
  double eps_eta = 0.0;
  double tv_divergence = 0.0;       // E_{s~pi} [TV(mu'(.|s), mu(.|s))]
  double h_term = 0.0;
  double lower_bound = 0.0;
  double actual_difference = 0.0;   // J(mu') - J(mu)
};

/// Evaluates every term of the lower bound exactly. kemeny_star must upper
/// bound the Kemeny constants of the policies involved (exhaustively
/// computable only on enumerable games; reported as an assumption otherwise).
BoundReport trust_region_bound(const TsgModel& model, const JointPolicy& mu,
                               const JointPolicy& mu_prime, double kemeny_star,
                               const Tolerances& tol = {});

}  // namespace mvtsg
