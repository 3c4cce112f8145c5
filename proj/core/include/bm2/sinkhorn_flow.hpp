#pragma once

#include "bm2/types.hpp"

#include <array>
#include <string>
#include <vector>

namespace bm2 {

/// F_{1|0} = N(A_f x0 + a_f, v_f) and B_{0|1} = N(A_b x1 + a_b, v_b).
struct GaussFlowState {
  double A_f = 1.0, a_f = 0.0, v_f = 1.0;
  double A_b = 1.0, a_b = 0.0, v_b = 1.0;

  [[nodiscard]] bool valid() const;
};

/// 1-D marginals N(mu0, var0), N(mu1, var1) and reference scale sigma.
struct FlowProblem {
  double mu0 = -2.0, var0 = 1.0;
  double mu1 = 2.0, var1 = 1.0;
  double sigma = 1.0;

  void validate() const;
  /// Null-drift start: A = 1, a = 0, v = sigma^2 in both directions.
  [[nodiscard]] GaussFlowState initial_state() const;
};

/// d/dl of the six parameters.
struct FlowDerivative {
  double A_f = 0.0, a_f = 0.0, v_f = 0.0;
  double A_b = 0.0, a_b = 0.0, v_b = 0.0;

  [[nodiscard]] double max_abs() const;
};

/// Right-hand side of the flow
///   d log f(x1|x0)/dl = -log f(x1|x0) + log b(x0|x1) + log psi1(x1) + K_f(x0),
///   K_f(x0) = int f(x1|x0) log[f(x1|x0) / (b(x0|x1) psi1(x1))] dx1,
/// and its mirror for b, solved for the parameter derivatives at three collocation pairs per direction.
FlowDerivative flow_rhs(const GaussFlowState& state, const FlowProblem& prob);

/// Right-hand side of the forward (or backward) equation at one point.
double flow_equation_rhs(const GaussFlowState& state, const FlowProblem& prob, bool forward, double x0, double x1);

/// d/dl log f(x1|x0) (or log b(x0|x1)) implied by a parameter derivative.
double flow_equation_lhs(const GaussFlowState& state, const FlowDerivative& deriv, bool forward, double x0, double x1);

/// Largest |lhs - rhs| over held-out points not used by the collocation solve.
double flow_heldout_residual(const GaussFlowState& state, const FlowProblem& prob);

/// Analytic SB conditionals: the fixed point of the flow.
GaussFlowState flow_analytic_state(const FlowProblem& prob);

struct FlowRow {
  double l = 0.0;
  GaussFlowState state;
  double mean_x1 = 0.0;
  double var_x1 = 0.0;
  double cov_x0x1 = 0.0;
};

/// E[X1] = A_f mu0 + a_f, V[X1] = A_f^2 var0 + v_f, C[X0, X1] = A_f var0.
FlowRow flow_moments(double l, const GaussFlowState& state, const FlowProblem& prob);

/// Classical RK4 in (A, a, log v) from the null-drift state; one row per step including l = 0.
/// Throws NumericalError if a variance leaves (0, inf).
std::vector<FlowRow> flow_integrate(const FlowProblem& prob, double l_max = 20.0, double dl = 1e-3);

/// Trajectory CSV: l, A_f, a_f, v_f, A_b, a_b, v_b, E_F_X1, V_F_X1, C_F_X0X1. Every
/// `stride`-th row plus the last.
void write_flow_csv(const std::string& path, const std::vector<FlowRow>& rows, int stride = 1);

}  // namespace bm2
