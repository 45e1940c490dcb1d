#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "flexmap/distflow.hpp"
#include "flexmap/net_model.hpp"

namespace flexmap::flexopf {

/// Requested change of interface consumption relative to the initial
/// operating point, p.u.
struct FlexRequest {
  double dp = 0.0;
  double dq = 0.0;
};

/// Interface consumption at the TSO/DSO coupling, p.u.
struct InterfacePoint {
  double p = 0.0;
  double q = 0.0;
};

/// Per-unit setpoints and their up/down regulation split, p.u.
/// Vectors are aligned with the unit list the solve was given.
struct Dispatch {
  std::vector<double> p, q;
  std::vector<double> p_up, p_dn, q_up, q_dn;
  void resize(std::size_t n);
  std::size_t size() const { return p.size(); }
};

/// Minimal nonnegative split of a setpoint change: up - down = setpoint -
/// initial, up * down = 0.
std::pair<double, double> split_regulation(double setpoint, double initial);

/// Builds a Dispatch from raw setpoints, deriving the minimal split against
/// each unit's initial point.
Dispatch make_dispatch(std::span<const net::FlexUnit> units,
                       std::span<const double> p_set,
                       std::span<const double> q_set);

/// Exact linear regulation cost, $/h.
double evaluate_cost(std::span<const net::FlexUnit> units, const Dispatch& d);

/// Interface consumption with every unit at its initial setpoint.
/// Throws DataError if the base power flow does not converge.
InterfacePoint base_interface(const net::RadialNetwork& net,
                              std::span<const net::FlexUnit> units,
                              const distflow::PowerFlowOptions& pf = {});

enum class SolveStatus { optimal, infeasible, not_converged };
const char* to_string(SolveStatus s);

struct SolverOptions {
  double interface_tol = 1e-4;  // p.u. (1 kVA at 10 MVA base)
  double stat_tol = 1e-6;       // projected-gradient inf-norm
  double viol_tol = 1e-6;       // p.u. constraint violation
  int max_restarts = 4;         // random restarts after the deterministic set
  std::uint64_t seed = 0;
  enum class Gradient { adjoint, fd };
  Gradient gradient = Gradient::adjoint;

  // augmented-Lagrangian / inner-solver knobs
  int al_max_outer = 25;
  int inner_max_iter = 400;
  double rho_init = 1e3;
  double rho_growth = 10.0;
  double rho_max = 1e8;

  distflow::PowerFlowOptions pf{};
};

/// Multiplier/penalty state carried between neighbouring sweep cells so a
/// warm-started solve usually converges in one or two outer iterations.
struct WarmStart {
  Dispatch dispatch;
  double mu_p = 0.0, mu_q = 0.0;
  std::vector<double> sigma;  // inequality multipliers
  double rho = 0.0;
  bool valid = false;
};

struct FlexSolveResult {
  SolveStatus status = SolveStatus::not_converged;
  Dispatch dispatch;
  double cost = 0.0;  // $/h, exact linear formula on the final split
  distflow::NetworkState state;
  double interface_error = std::numeric_limits<double>::infinity();  // p.u.
  double max_violation = 0.0;  // p.u.
  int restarts_used = 0;
  WarmStart carry;  // warm-start payload for an adjacent request
};

struct DispatchCheck {
  bool pf_converged = false;
  std::vector<distflow::Violation> violations;
  InterfacePoint achieved;
  distflow::NetworkState state;
};

/// Runs the power flow for a dispatch and reports achieved interface power
/// plus any constraint violations. This is the evaluation path brute-force
/// oracles and the swap-free mode build on.
DispatchCheck check_dispatch_feasible(const net::RadialNetwork& net,
                                      std::span<const net::FlexUnit> units,
                                      const Dispatch& d,
                                      const distflow::PowerFlowOptions& pf = {});

/// Least-cost regulation solver for one interface request. Reusable across
/// many requests on the same network/units (holds solver workspaces); each
/// solve is a pure function of (request, options, warm start).
class FlexOpfSolver {
 public:
  FlexOpfSolver(const net::RadialNetwork& net,
                std::vector<net::FlexUnit> units, SolverOptions opts);

  const InterfacePoint& base() const { return base_; }
  const std::vector<net::FlexUnit>& units() const { return units_; }
  const SolverOptions& options() const { return opts_; }

  FlexSolveResult solve(const FlexRequest& req,
                        const WarmStart* warm = nullptr);

 private:
  struct EvalContext;
  struct StartOutcome;
  double evaluate(EvalContext& ctx, std::span<const double> z);
  void gradient(EvalContext& ctx, std::span<const double> z,
                std::span<double> grad);
  /// Projected quasi-Newton within the boxes: orthant-wise BFGS that treats
  /// the piecewise-linear regulation cost exactly, so inactive units come to
  /// rest exactly on their initial setpoints and the stationarity certificate
  /// (pseudo-gradient inf-norm) reaches zero at a true local optimum.
  bool minimize_box(EvalContext& ctx, std::vector<double>& z, double stat_tol,
                    int max_iter, double* pg_norm_out);
  /// Steepest one-sided descent derivative of smooth + L1, masked at the box
  /// bounds; inf-norm is zero exactly at a first-order optimal point.
  double pseudo_gradient(std::span<const double> z, std::span<const double> g,
                         std::span<double> out) const;
  /// Finishing step for iterates where the orthant-projected BFGS stalls:
  /// freezes the incumbent's rail/kink/sign pattern, minimizes the smooth
  /// restricted problem with a plain projected BFGS, then re-tests the full
  /// certificate, releasing a pinned coordinate and repeating while its
  /// one-sided derivative still points downhill.
  bool polish_active_set(EvalContext& ctx, std::vector<double>& z, double tol,
                         double& pg_norm);
  StartOutcome run_start(const FlexRequest& req, std::vector<double> z,
                         const WarmStart* warm);

  const net::RadialNetwork& net_;
  std::vector<net::FlexUnit> units_;
  SolverOptions opts_;
  InterfacePoint base_;
  distflow::PowerFlowSolver pf_;
  distflow::AdjointSolver adjoint_;
  double cost_scale_ = 1.0;
  std::vector<int> rated_lines_;
  // workspaces
  std::vector<distflow::Injection> inj_;
  std::vector<double> lb_, ub_;
  std::vector<double> z0_, w_;  // per variable: initial setpoint, cost weight
  std::vector<double> alpha_, beta_;
  distflow::AdjointSeed seed_;
};

/// Convenience single-shot wrapper around FlexOpfSolver.
FlexSolveResult solve_flex_opf(const net::RadialNetwork& net,
                               std::span<const net::FlexUnit> units,
                               const FlexRequest& req,
                               const SolverOptions& opts = {});

/// Copies of the units with regulation boxes clamped to one sign per
/// channel: p_sign > 0 keeps [p0, p_max], p_sign < 0 keeps [p_min, p0],
/// 0 leaves the channel unrestricted. Used by the swap-free sweep mode.
std::vector<net::FlexUnit> restrict_boxes(std::span<const net::FlexUnit> units,
                                          int p_sign, int q_sign);

}  // namespace flexmap::flexopf
