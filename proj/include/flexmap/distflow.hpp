#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "flexmap/net_model.hpp"

namespace flexmap::distflow {

/// Net controllable injection at a bus, p.u., consumption-positive
/// (same sign convention as loads and as the interface coordinates).
struct Injection {
  int bus = 0;  // bus id
  double p = 0.0;
  double q = 0.0;
};

/// Solution of the DistFlow equations. v is squared voltage magnitude;
/// flows are sending-end (upstream) values; ell is squared current.
/// Indexed like RadialNetwork::buses / ::lines.
struct NetworkState {
  std::vector<double> v;
  std::vector<double> p_flow;
  std::vector<double> q_flow;
  std::vector<double> ell;
  double losses_p = 0.0;
  double losses_q = 0.0;
  double interface_p = 0.0;  // drawn from the upstream grid, consumption-positive
  double interface_q = 0.0;
  bool empty() const { return v.empty(); }
};

struct PowerFlowOptions {
  double tol = 1e-10;  // max equation residual, p.u.
  int max_iter = 100;
};

/// Non-convergence is an outcome, not an exception: a sweep records the
/// operating point as infeasible-by-collapse and moves on.
struct PowerFlowOutcome {
  bool converged = false;
  int iterations = 0;
  double residual = std::numeric_limits<double>::infinity();
};

/// Backward/forward sweep solver. Holds per-network scratch buffers so that
/// tight loops (OPF inner iterations, brute-force oracles) can reuse one
/// instance without allocating; the solve itself is a pure function of
/// (network, injections, options, warm-start state).
class PowerFlowSolver {
 public:
  explicit PowerFlowSolver(const net::RadialNetwork& net);

  /// warm_start = true reuses state.v / state.ell as the starting iterate
  /// when they have the right dimensions; the fixed point reached is the
  /// same, it is just reached in fewer sweeps.
  PowerFlowOutcome solve(std::span<const Injection> injections,
                         const PowerFlowOptions& opts, NetworkState& state,
                         bool warm_start = false);

  const net::RadialNetwork& network() const { return net_; }

 private:
  const net::RadialNetwork& net_;
  std::vector<double> inj_p_, inj_q_;  // per-bus accumulation
};

struct PowerFlowResult {
  PowerFlowOutcome outcome;
  NetworkState state;
};

PowerFlowResult solve_power_flow(const net::RadialNetwork& net,
                                 std::span<const Injection> injections,
                                 const PowerFlowOptions& opts = {});

/// Max absolute residual of the DistFlow equations (nodal balance, voltage
/// drop, current definition, slack/interface identities) evaluated directly
/// from their definitions. Throws std::invalid_argument on dimension mismatch.
double residual_norm(const net::RadialNetwork& net, const NetworkState& state,
                     std::span<const Injection> injections);

enum class ConstraintKind { voltage_low, voltage_high, thermal };

/// One violated constraint. slack is the signed margin in reporting units
/// (voltage magnitude p.u., apparent power p.u.); negative means violated,
/// and only violated constraints are listed.
struct Violation {
  ConstraintKind kind;
  int element_id;  // bus id for voltage, line index for thermal
  double slack;
};

std::vector<Violation> constraint_violations(const net::RadialNetwork& net,
                                             const NetworkState& state);

std::string describe(const Violation& v);

/// dPhi/d(state) seed for the adjoint solve: partial derivatives of a scalar
/// against each state variable. Sized like NetworkState.
struct AdjointSeed {
  std::vector<double> d_v;
  std::vector<double> d_p, d_q, d_ell;
  void resize(int n_bus, int n_line);
  void clear();
};

struct AdjointOutcome {
  bool converged = false;
  int iterations = 0;
  double residual = std::numeric_limits<double>::infinity();
};

/// Adjoint of the sweep: solves the transposed DistFlow sensitivity system
/// for the multipliers of the nodal-balance equations by the same
/// tree-structured two-pass iteration the forward solver uses. The gradient
/// of the seeded scalar w.r.t. the injection (p, q) at a non-slack bus b is
/// (alpha[parent_line[b]], beta[parent_line[b]]); injections at the slack bus
/// do not touch the network state and contribute only through direct terms.
class AdjointSolver {
 public:
  explicit AdjointSolver(const net::RadialNetwork& net);

  AdjointOutcome solve(const NetworkState& state, const AdjointSeed& seed,
                       std::vector<double>& alpha, std::vector<double>& beta,
                       double tol = 1e-13, int max_iter = 200);

 private:
  const net::RadialNetwork& net_;
  std::vector<double> gamma_, delta_;
};

}  // namespace flexmap::distflow
