#include "bm2/sinkhorn_flow.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bm2 {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double log_normal(double x, double m, double v) {
  const double r = x - m;
  return -0.5 * (kLog2Pi + std::log(v) + r * r / v);
}

std::string dump(const GaussFlowState& s) {
  std::ostringstream os;
  os << std::setprecision(17) << "A_f=" << s.A_f << " a_f=" << s.a_f << " v_f=" << s.v_f << " A_b=" << s.A_b
     << " a_b=" << s.a_b << " v_b=" << s.v_b;
  return os.str();
}

/// One direction seen generically: p(y|x) = N(A x + a, v) is being updated, q(x|y) = N(B y + b, w) is
/// the other conditional and the target marginal of y is N(mu_y, var_y).
struct Side {
  double A, a, v;
  double B, b, w;
  double mu_y, var_y;
};

Side forward_side(const GaussFlowState& s, const FlowProblem& p) {
  return Side{s.A_f, s.a_f, s.v_f, s.A_b, s.a_b, s.v_b, p.mu1, p.var1};
}

Side backward_side(const GaussFlowState& s, const FlowProblem& p) {
  return Side{s.A_b, s.a_b, s.v_b, s.A_f, s.a_f, s.v_f, p.mu0, p.var0};
}

double side_rhs(const Side& s, double x, double y, const GaussFlowState& state) {
  // log q_tilde(y) = log N(x; B y + b, w) + log N(y; mu_y, var_y) has y^2 coefficient
  // -B^2 / (2 w) - 1 / (2 var_y), which must stay negative.
  const double quad = -s.B * s.B / (2.0 * s.w) - 1.0 / (2.0 * s.var_y);
  if (!(quad < 0.0)) throw NumericalError("flow_rhs: non-integrable second argument at state " + dump(state));
  const double m = s.A * x + s.a;
  const double k = (-0.5 * (kLog2Pi + std::log(s.v)) - 0.5) -
                   (-0.5 * (kLog2Pi + std::log(s.w)) -
                    ((x - s.B * m - s.b) * (x - s.B * m - s.b) + s.B * s.B * s.v) / (2.0 * s.w)) -
                   (-0.5 * (kLog2Pi + std::log(s.var_y)) - ((m - s.mu_y) * (m - s.mu_y) + s.v) / (2.0 * s.var_y));
  return -log_normal(y, m, s.v) + log_normal(x, s.B * y + s.b, s.w) + log_normal(y, s.mu_y, s.var_y) + k;
}

double side_lhs(const Side& s, double dA, double da, double dv, double x, double y) {
  const double u = y - (s.A * x + s.a);
  return u * (x * dA + da) / s.v + (u * u / (2.0 * s.v * s.v) - 1.0 / (2.0 * s.v)) * dv;
}

/// Solve for (dA, da, dv) from three collocation pairs.
std::array<double, 3> side_solve(const Side& s, double x_lo, double x_hi, const GaussFlowState& state) {
  const double sd = std::sqrt(s.v);
  const std::array<std::array<double, 2>, 3> pts{{{x_lo, s.A * x_lo + s.a + sd},
                                                  {x_hi, s.A * x_hi + s.a + sd},
                                                  {x_lo, s.A * x_lo + s.a}}};
  Eigen::Matrix3d m;
  Eigen::Vector3d rhs;
  for (int r = 0; r < 3; ++r) {
    const double x = pts[r][0];
    const double y = pts[r][1];
    const double u = y - (s.A * x + s.a);
    m(r, 0) = u * x / s.v;
    m(r, 1) = u / s.v;
    m(r, 2) = u * u / (2.0 * s.v * s.v) - 1.0 / (2.0 * s.v);
    rhs[r] = side_rhs(s, x, y, state);
  }
  const Eigen::Vector3d sol = m.fullPivLu().solve(rhs);
  return {sol[0], sol[1], sol[2]};
}

}  // namespace

bool GaussFlowState::valid() const {
  return std::isfinite(A_f) && std::isfinite(a_f) && std::isfinite(A_b) && std::isfinite(a_b) && v_f > 0.0 &&
         v_b > 0.0 && std::isfinite(v_f) && std::isfinite(v_b);
}

void FlowProblem::validate() const {
  if (!(var0 > 0.0 && var1 > 0.0)) throw InvalidArgument("flow: marginal variances must be positive");
  if (!(sigma > 0.0)) throw InvalidArgument("flow: sigma must be positive");
  if (!std::isfinite(mu0) || !std::isfinite(mu1)) throw InvalidArgument("flow: means must be finite");
}

GaussFlowState FlowProblem::initial_state() const {
  const double s2 = sigma * sigma;
  return GaussFlowState{1.0, 0.0, s2, 1.0, 0.0, s2};
}

double FlowDerivative::max_abs() const {
  return std::max({std::abs(A_f), std::abs(a_f), std::abs(v_f), std::abs(A_b), std::abs(a_b), std::abs(v_b)});
}

FlowDerivative flow_rhs(const GaussFlowState& state, const FlowProblem& prob) {
  if (!state.valid()) throw NumericalError("flow_rhs: invalid state " + dump(state));
  const double sd0 = std::sqrt(prob.var0);
  const double sd1 = std::sqrt(prob.var1);
  const auto f = side_solve(forward_side(state, prob), prob.mu0, prob.mu0 + sd0, state);
  const auto b = side_solve(backward_side(state, prob), prob.mu1, prob.mu1 + sd1, state);
  return FlowDerivative{f[0], f[1], f[2], b[0], b[1], b[2]};
}

double flow_equation_rhs(const GaussFlowState& state, const FlowProblem& prob, bool forward, double x0, double x1) {
  return forward ? side_rhs(forward_side(state, prob), x0, x1, state)
                 : side_rhs(backward_side(state, prob), x1, x0, state);
}

double flow_equation_lhs(const GaussFlowState& state, const FlowDerivative& d, bool forward, double x0, double x1) {
  const FlowProblem unused;
  return forward ? side_lhs(forward_side(state, unused), d.A_f, d.a_f, d.v_f, x0, x1)
                 : side_lhs(backward_side(state, unused), d.A_b, d.a_b, d.v_b, x1, x0);
}

double flow_heldout_residual(const GaussFlowState& state, const FlowProblem& prob) {
  const FlowDerivative d = flow_rhs(state, prob);
  const double sd0 = std::sqrt(prob.var0);
  const double sd1 = std::sqrt(prob.var1);
  double worst = 0.0;
  for (double k : {-1.0, 2.0, 0.5}) {
    for (double j : {-1.0, 2.0, 0.3}) {
      const double x0 = prob.mu0 + k * sd0;
      const double x1 = state.A_f * x0 + state.a_f + j * std::sqrt(state.v_f);
      worst = std::max(worst, std::abs(flow_equation_lhs(state, d, true, x0, x1) -
                                       flow_equation_rhs(state, prob, true, x0, x1)));
      const double y1 = prob.mu1 + k * sd1;
      const double y0 = state.A_b * y1 + state.a_b + j * std::sqrt(state.v_b);
      worst = std::max(worst, std::abs(flow_equation_lhs(state, d, false, y0, y1) -
                                       flow_equation_rhs(state, prob, false, y0, y1)));
    }
  }
  return worst;
}

GaussFlowState flow_analytic_state(const FlowProblem& prob) {
  prob.validate();
  const double s2 = prob.sigma * prob.sigma;
  const double c = 0.5 * (-s2 + std::sqrt(s2 * s2 + 4.0 * prob.var0 * prob.var1));
  GaussFlowState s;
  s.A_f = c / prob.var0;
  s.a_f = prob.mu1 - s.A_f * prob.mu0;
  s.v_f = prob.var1 - c * c / prob.var0;
  s.A_b = c / prob.var1;
  s.a_b = prob.mu0 - s.A_b * prob.mu1;
  s.v_b = prob.var0 - c * c / prob.var1;
  return s;
}

FlowRow flow_moments(double l, const GaussFlowState& s, const FlowProblem& p) {
  return FlowRow{l, s, s.A_f * p.mu0 + s.a_f, s.A_f * s.A_f * p.var0 + s.v_f, s.A_f * p.var0};
}

std::vector<FlowRow> flow_integrate(const FlowProblem& prob, double l_max, double dl) {
  prob.validate();
  if (!(dl > 0.0) || !(l_max >= 0.0)) throw InvalidArgument("flow_integrate: need dl > 0 and l_max >= 0");
  using Y = Eigen::Matrix<double, 6, 1>;
  auto pack = [](const GaussFlowState& s) {
    Y y;
    y << s.A_f, s.a_f, std::log(s.v_f), s.A_b, s.a_b, std::log(s.v_b);
    return y;
  };
  auto unpack = [](const Y& y) {
    return GaussFlowState{y[0], y[1], std::exp(y[2]), y[3], y[4], std::exp(y[5])};
  };
  auto deriv = [&](const Y& y) {
    const GaussFlowState s = unpack(y);
    const FlowDerivative d = flow_rhs(s, prob);
    Y out;
    out << d.A_f, d.a_f, d.v_f / s.v_f, d.A_b, d.a_b, d.v_b / s.v_b;
    return out;
  };

  const auto steps = static_cast<long>(std::llround(l_max / dl));
  std::vector<FlowRow> rows;
  rows.reserve(static_cast<std::size_t>(steps) + 1);
  Y y = pack(prob.initial_state());
  rows.push_back(flow_moments(0.0, unpack(y), prob));
  for (long k = 0; k < steps; ++k) {
    const Y k1 = deriv(y);
    const Y k2 = deriv(y + 0.5 * dl * k1);
    const Y k3 = deriv(y + 0.5 * dl * k2);
    const Y k4 = deriv(y + dl * k3);
    y += dl / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    const GaussFlowState s = unpack(y);
    if (!s.valid()) {
      std::ostringstream msg;
      msg << "flow_integrate: variance left (0, inf) at step " << k + 1 << " (step too large?) " << dump(s);
      throw NumericalError(msg.str());
    }
    rows.push_back(flow_moments(static_cast<double>(k + 1) * dl, s, prob));
  }
  return rows;
}

void write_flow_csv(const std::string& path, const std::vector<FlowRow>& rows, int stride) {
  if (stride < 1) throw InvalidArgument("write_flow_csv: stride must be >= 1");
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write trajectory CSV " + path);
  os << "l,A_f,a_f,v_f,A_b,a_b,v_b,E_F_X1,V_F_X1,C_F_X0X1\n" << std::setprecision(12);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i % static_cast<std::size_t>(stride) != 0 && i + 1 != rows.size()) continue;
    const FlowRow& r = rows[i];
    os << r.l << ',' << r.state.A_f << ',' << r.state.a_f << ',' << r.state.v_f << ',' << r.state.A_b << ','
       << r.state.a_b << ',' << r.state.v_b << ',' << r.mean_x1 << ',' << r.var_x1 << ',' << r.cov_x0x1 << '\n';
  }
}

}  // namespace bm2
