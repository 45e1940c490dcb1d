#include "flexmap/distflow.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace flexmap::distflow {

namespace {

constexpr double kCollapseV = 1e-6;  // squared-voltage floor, p.u.

void accumulate_injections(const net::RadialNetwork& net,
                           std::span<const Injection> injections,
                           std::vector<double>& inj_p,
                           std::vector<double>& inj_q) {
  inj_p.assign(net.n_buses(), 0.0);
  inj_q.assign(net.n_buses(), 0.0);
  for (const Injection& inj : injections) {
    int b = net.bus_index(inj.bus);
    inj_p[b] += inj.p;
    inj_q[b] += inj.q;
  }
}

void check_dimensions(const net::RadialNetwork& net, const NetworkState& state) {
  if (static_cast<int>(state.v.size()) != net.n_buses() ||
      static_cast<int>(state.p_flow.size()) != net.n_lines() ||
      static_cast<int>(state.q_flow.size()) != net.n_lines() ||
      static_cast<int>(state.ell.size()) != net.n_lines())
    throw std::invalid_argument("network state dimensions do not match network");
}

void refresh_totals(const net::RadialNetwork& net, NetworkState& state,
                    const std::vector<double>& inj_p,
                    const std::vector<double>& inj_q) {
  const auto& topo = net.topo;
  state.losses_p = 0.0;
  state.losses_q = 0.0;
  for (int l = 0; l < net.n_lines(); ++l) {
    state.losses_p += net.lines[l].r * state.ell[l];
    state.losses_q += net.lines[l].x * state.ell[l];
  }
  state.interface_p = net.buses[topo.slack].load_p + inj_p[topo.slack];
  state.interface_q = net.buses[topo.slack].load_q + inj_q[topo.slack];
  for (int l : topo.child_lines[topo.slack]) {
    state.interface_p += state.p_flow[l];
    state.interface_q += state.q_flow[l];
  }
}

}  // namespace

PowerFlowSolver::PowerFlowSolver(const net::RadialNetwork& net) : net_(net) {
  inj_p_.resize(net.n_buses());
  inj_q_.resize(net.n_buses());
}

PowerFlowOutcome PowerFlowSolver::solve(std::span<const Injection> injections,
                                        const PowerFlowOptions& opts,
                                        NetworkState& state, bool warm_start) {
  const auto& topo = net_.topo;
  const int n_bus = net_.n_buses();
  const int n_line = net_.n_lines();

  const bool reuse = warm_start &&
                     static_cast<int>(state.v.size()) == n_bus &&
                     static_cast<int>(state.ell.size()) == n_line;
  state.p_flow.assign(n_line, 0.0);
  state.q_flow.assign(n_line, 0.0);
  if (!reuse) {
    state.v.assign(n_bus, net_.slack_v);
    state.ell.assign(n_line, 0.0);
  }
  state.v[topo.slack] = net_.slack_v;

  accumulate_injections(net_, injections, inj_p_, inj_q_);

  PowerFlowOutcome out;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    // backward: sending-end flows from the leaves up, with current ell
    for (auto it = topo.bus_order.rbegin(); it != topo.bus_order.rend(); ++it) {
      int j = *it;
      if (j == topo.slack) continue;
      int l = topo.parent_line[j];
      const net::Line& ln = net_.lines[l];
      double p = net_.buses[j].load_p + inj_p_[j] + ln.r * state.ell[l];
      double q = net_.buses[j].load_q + inj_q_[j] + ln.x * state.ell[l];
      for (int c : topo.child_lines[j]) {
        p += state.p_flow[c];
        q += state.q_flow[c];
      }
      state.p_flow[l] = p;
      state.q_flow[l] = q;
    }

    // forward: voltages from the root down
    bool collapsed = false;
    for (int l : topo.line_order) {
      const net::Line& ln = net_.lines[l];
      int i = topo.line_parent[l];
      int j = topo.line_child[l];
      state.v[j] = state.v[i] -
                   2.0 * (ln.r * state.p_flow[l] + ln.x * state.q_flow[l]) +
                   (ln.r * ln.r + ln.x * ln.x) * state.ell[l];
      if (!(state.v[j] > kCollapseV)) collapsed = true;
    }
    if (collapsed) {
      out.converged = false;
      out.iterations = iter + 1;
      out.residual = std::numeric_limits<double>::infinity();
      refresh_totals(net_, state, inj_p_, inj_q_);
      return out;
    }

    // current update from the fresh flows and voltages
    for (int l = 0; l < n_line; ++l) {
      int i = topo.line_parent[l];
      state.ell[l] = (state.p_flow[l] * state.p_flow[l] +
                      state.q_flow[l] * state.q_flow[l]) /
                     state.v[i];
    }

    refresh_totals(net_, state, inj_p_, inj_q_);
    out.iterations = iter + 1;
    out.residual = residual_norm(net_, state, injections);
    if (out.residual <= opts.tol) {
      out.converged = true;
      return out;
    }
    if (!std::isfinite(out.residual)) break;
  }
  out.converged = false;
  return out;
}

PowerFlowResult solve_power_flow(const net::RadialNetwork& net,
                                 std::span<const Injection> injections,
                                 const PowerFlowOptions& opts) {
  PowerFlowSolver solver(net);
  PowerFlowResult result;
  result.outcome = solver.solve(injections, opts, result.state);
  return result;
}

double residual_norm(const net::RadialNetwork& net, const NetworkState& state,
                     std::span<const Injection> injections) {
  check_dimensions(net, state);
  const auto& topo = net.topo;

  std::vector<double> inj_p, inj_q;
  accumulate_injections(net, injections, inj_p, inj_q);

  double worst = std::abs(state.v[topo.slack] - net.slack_v);
  auto track = [&worst](double r) { worst = std::max(worst, std::abs(r)); };

  for (int l = 0; l < net.n_lines(); ++l) {
    const net::Line& ln = net.lines[l];
    int i = topo.line_parent[l];
    int j = topo.line_child[l];
    double p = net.buses[j].load_p + inj_p[j] + ln.r * state.ell[l];
    double q = net.buses[j].load_q + inj_q[j] + ln.x * state.ell[l];
    for (int c : topo.child_lines[j]) {
      p += state.p_flow[c];
      q += state.q_flow[c];
    }
    track(state.p_flow[l] - p);  // nodal P balance
    track(state.q_flow[l] - q);  // nodal Q balance
    track(state.v[j] - state.v[i] +
          2.0 * (ln.r * state.p_flow[l] + ln.x * state.q_flow[l]) -
          (ln.r * ln.r + ln.x * ln.x) * state.ell[l]);  // voltage drop
    track(state.ell[l] * state.v[i] -
          state.p_flow[l] * state.p_flow[l] -
          state.q_flow[l] * state.q_flow[l]);  // current definition
  }

  double if_p = net.buses[topo.slack].load_p + inj_p[topo.slack];
  double if_q = net.buses[topo.slack].load_q + inj_q[topo.slack];
  for (int l : topo.child_lines[topo.slack]) {
    if_p += state.p_flow[l];
    if_q += state.q_flow[l];
  }
  track(state.interface_p - if_p);
  track(state.interface_q - if_q);
  return worst;
}

std::vector<Violation> constraint_violations(const net::RadialNetwork& net,
                                             const NetworkState& state) {
  check_dimensions(net, state);
  std::vector<Violation> out;
  for (int i = 0; i < net.n_buses(); ++i) {
    const net::Bus& b = net.buses[i];
    double vm = state.v[i] > 0.0 ? std::sqrt(state.v[i]) : 0.0;
    if (vm - b.v_min_pu < 0.0)
      out.push_back({ConstraintKind::voltage_low, b.id, vm - b.v_min_pu});
    if (b.v_max_pu - vm < 0.0)
      out.push_back({ConstraintKind::voltage_high, b.id, b.v_max_pu - vm});
  }
  for (int l = 0; l < net.n_lines(); ++l) {
    if (net.lines[l].s_max <= 0.0) continue;
    double s = std::hypot(state.p_flow[l], state.q_flow[l]);
    if (net.lines[l].s_max - s < 0.0)
      out.push_back({ConstraintKind::thermal, l, net.lines[l].s_max - s});
  }
  return out;
}

std::string describe(const Violation& v) {
  std::ostringstream ss;
  switch (v.kind) {
    case ConstraintKind::voltage_low:
      ss << "bus " << v.element_id << " voltage " << -v.slack
         << " p.u. below its lower limit";
      break;
    case ConstraintKind::voltage_high:
      ss << "bus " << v.element_id << " voltage " << -v.slack
         << " p.u. above its upper limit";
      break;
    case ConstraintKind::thermal:
      ss << "line " << v.element_id << " loading " << -v.slack
         << " p.u. above its rating";
      break;
  }
  return ss.str();
}

void AdjointSeed::resize(int n_bus, int n_line) {
  d_v.assign(n_bus, 0.0);
  d_p.assign(n_line, 0.0);
  d_q.assign(n_line, 0.0);
  d_ell.assign(n_line, 0.0);
}

void AdjointSeed::clear() {
  std::fill(d_v.begin(), d_v.end(), 0.0);
  std::fill(d_p.begin(), d_p.end(), 0.0);
  std::fill(d_q.begin(), d_q.end(), 0.0);
  std::fill(d_ell.begin(), d_ell.end(), 0.0);
}

AdjointSolver::AdjointSolver(const net::RadialNetwork& net) : net_(net) {
  gamma_.resize(net.n_lines());
  delta_.resize(net.n_lines());
}

AdjointOutcome AdjointSolver::solve(const NetworkState& state,
                                    const AdjointSeed& seed,
                                    std::vector<double>& alpha,
                                    std::vector<double>& beta, double tol,
                                    int max_iter) {
  check_dimensions(net_, state);
  const auto& topo = net_.topo;
  const int n_line = net_.n_lines();
  if (static_cast<int>(seed.d_v.size()) != net_.n_buses() ||
      static_cast<int>(seed.d_p.size()) != n_line ||
      static_cast<int>(seed.d_q.size()) != n_line ||
      static_cast<int>(seed.d_ell.size()) != n_line)
    throw std::invalid_argument("adjoint seed dimensions do not match network");

  alpha.assign(n_line, 0.0);
  beta.assign(n_line, 0.0);
  std::fill(gamma_.begin(), gamma_.end(), 0.0);
  std::fill(delta_.begin(), delta_.end(), 0.0);

  double scale = 1.0;
  for (double g : seed.d_v) scale = std::max(scale, std::abs(g));
  for (double g : seed.d_p) scale = std::max(scale, std::abs(g));
  for (double g : seed.d_q) scale = std::max(scale, std::abs(g));
  for (double g : seed.d_ell) scale = std::max(scale, std::abs(g));

  AdjointOutcome out;
  for (int iter = 0; iter < max_iter; ++iter) {
    // upward: multipliers of the voltage-drop rows, children first,
    // lagged by one iteration in the current-definition multipliers
    for (auto it = topo.bus_order.rbegin(); it != topo.bus_order.rend(); ++it) {
      int j = *it;
      if (j == topo.slack) continue;
      double g = seed.d_v[j];
      for (int c : topo.child_lines[j])
        g += gamma_[c] - state.ell[c] * delta_[c];
      gamma_[topo.parent_line[j]] = g;
    }

    // downward: each line's (alpha, beta, delta) block solved exactly given
    // its parent's multipliers and this pass's gamma
    for (int l : topo.line_order) {
      const net::Line& ln = net_.lines[l];
      int i = topo.line_parent[l];
      double a0 = seed.d_p[l] - 2.0 * ln.r * gamma_[l];
      double b0 = seed.d_q[l] - 2.0 * ln.x * gamma_[l];
      if (i != topo.slack) {
        int m = topo.parent_line[i];
        a0 += alpha[m];
        b0 += beta[m];
      }
      double c0 = seed.d_ell[l] + (ln.r * ln.r + ln.x * ln.x) * gamma_[l];
      double denom = state.v[i] - 2.0 * (ln.r * state.p_flow[l] +
                                         ln.x * state.q_flow[l]);
      if (!(std::abs(denom) > kCollapseV)) {
        out.residual = std::numeric_limits<double>::infinity();
        out.iterations = iter + 1;
        return out;
      }
      delta_[l] = (c0 + ln.r * a0 + ln.x * b0) / denom;
      alpha[l] = a0 + 2.0 * state.p_flow[l] * delta_[l];
      beta[l] = b0 + 2.0 * state.q_flow[l] * delta_[l];
    }

    // only the voltage-drop rows can lag; evaluate their residual directly
    double worst = 0.0;
    for (auto it = topo.bus_order.rbegin(); it != topo.bus_order.rend(); ++it) {
      int j = *it;
      if (j == topo.slack) continue;
      double g = seed.d_v[j];
      for (int c : topo.child_lines[j])
        g += gamma_[c] - state.ell[c] * delta_[c];
      worst = std::max(worst, std::abs(gamma_[topo.parent_line[j]] - g));
    }
    out.iterations = iter + 1;
    out.residual = worst;
    if (worst <= tol * scale) {
      out.converged = true;
      return out;
    }
  }
  return out;
}

}  // namespace flexmap::distflow
