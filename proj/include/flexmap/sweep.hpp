#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flexmap/flexopf.hpp"

namespace flexmap::sweep {

/// Discretisation of the interface P-Q request plane, p.u.
/// Cell (ip, iq) is the request (dp_min + ip*step, dq_min + iq*step).
struct GridSpec {
  double dp_min = 0.0, dp_max = 0.0;
  double dq_min = 0.0, dq_max = 0.0;
  double step = 0.0;

  static int axis_cells(double lo, double hi, double step);
  int n_dp() const { return axis_cells(dp_min, dp_max, step); }
  int n_dq() const { return axis_cells(dq_min, dq_max, step); }
  int n_cells() const { return n_dp() * n_dq(); }
  double dp_at(int ip) const { return dp_min + ip * step; }
  double dq_at(int iq) const { return dq_min + iq * step; }
  void validate() const;  // throws DataError
  bool same_grid(const GridSpec& other) const;
};

/// Default sweep extent: the aggregate unit-capability box around the
/// initial operating point, padded by one grid step.
GridSpec default_grid(std::span<const net::FlexUnit> units, double step);

enum class SweepMode { full, swap_free };
const char* to_string(SweepMode m);

struct SweepCell {
  flexopf::SolveStatus status = flexopf::SolveStatus::not_converged;
  double cost = 0.0;            // $/h
  double interface_err = 0.0;   // p.u.
  double vmin = 0.0;            // magnitude p.u. (0 when no state available)
  int vmin_bus = -1;
  int restarts = 0;
  bool has_values = false;      // dispatch/vmin fields populated
  bool solved = false;          // the solver ran this cell (resume skips it)
};

struct SweepMetadata {
  std::string network_file, units_file;
  std::uint64_t network_hash = 0, units_hash = 0;
  double base_mva = 0.0, base_kv = 0.0;
  flexopf::InterfacePoint base;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string timestamp;  // ISO 8601 UTC; informational only
  double duration_s = 0.0;
};

struct SweepResult {
  GridSpec spec;
  SweepMode mode = SweepMode::full;
  int n_units = 0;
  std::vector<std::string> unit_names;
  std::vector<SweepCell> cells;       // n_cells, index = iq * n_dp + ip
  std::vector<double> delta_p;        // n_cells * n_units, regulation p.u.
  std::vector<double> delta_q;
  SweepMetadata meta;

  int idx(int ip, int iq) const { return iq * spec.n_dp() + ip; }
  bool optimal(int c) const {
    return cells[c].status == flexopf::SolveStatus::optimal;
  }
  int count(flexopf::SolveStatus s) const;
};

using ProgressFn = std::function<void(int done, int total)>;

/// Solves the flexibility OPF at every grid cell. Cells are chained per row
/// (warm start marches outward from the column nearest dp = 0; the first
/// cell of each row is solved cold), rows are distributed over `workers`
/// threads. Results are identical for any worker count and, for a fixed
/// seed, across runs. `resume` carries over cells already solved in a
/// previous run of the same grid.
SweepResult run_sweep(const net::RadialNetwork& net,
                      std::span<const net::FlexUnit> units,
                      const GridSpec& spec, const flexopf::SolverOptions& opts,
                      SweepMode mode, int workers = 1,
                      const SweepResult* resume = nullptr,
                      ProgressFn progress = nullptr);

struct BoundaryPoint {
  double dp = 0.0, dq = 0.0;
};
using Polyline = std::vector<BoundaryPoint>;

struct Boundary {
  std::vector<Polyline> loops;  // closed; first point == last point
  double enclosed_area = 0.0;   // p.u.^2
  bool degenerate = false;      // all-feasible or all-infeasible grid
  std::string notice;
};

/// Marching squares over the optimal-cell indicator; loops pass through
/// cell-edge midpoints. An all-feasible or all-infeasible grid yields an
/// empty result with a notice.
Boundary extract_boundary(const SweepResult& sweep);
Boundary extract_boundary_mask(const std::vector<char>& mask, const GridSpec& spec);

/// Signed regulation of one unit/channel per cell; NaN where not optimal.
enum class Channel { p, q };
std::vector<double> heatmap_layer(const SweepResult& sweep, int unit,
                                  Channel channel);

struct RefinementViolation {
  int ip_coarse = 0, iq_coarse = 0;
  flexopf::SolveStatus fine_status = flexopf::SolveStatus::not_converged;
};

/// Checks that every optimal coarse cell maps onto an optimal fine cell
/// (fine grid must share the origin and halve the step). Violations are
/// returned for auditing, never silently dropped.
std::vector<RefinementViolation> audit_refinement(const SweepResult& coarse,
                                                  const SweepResult& fine);

}  // namespace flexmap::sweep
