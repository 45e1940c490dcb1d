#pragma once

#include <string>
#include <vector>

#include "flexmap/sweep.hpp"

namespace flexmap::analysis {

struct Point {
  double x = 0.0, y = 0.0;
};

/// Monotone-chain convex hull, counter-clockwise, vertices are input points.
/// Degenerate inputs collapse to a point or a 2-point segment.
std::vector<Point> convex_hull(std::vector<Point> points);

double polygon_area(const std::vector<Point>& poly);

/// Boundary counts as inside.
bool point_in_polygon(const Point& p, const std::vector<Point>& poly);

struct GridCellRef {
  int ip = 0, iq = 0;
  double dp = 0.0, dq = 0.0;  // p.u.
};

struct SwapCell {
  GridCellRef cell;
  sweep::Channel channel;
  std::vector<int> producers;  // unit indices with regulation < -threshold
  std::vector<int> consumers;  // unit indices with regulation > +threshold
};

struct ShiftHotspot {
  GridCellRef from, to;  // adjacent optimal cells
  int unit = 0;
  sweep::Channel channel;
  double jump = 0.0;  // p.u., |setpoint difference|
};

/// Geometry of the feasible set at the sweep's resolution. Areas are counted
/// in whole cells (count * step^2); the hull area is counted the same way
/// (cells whose centre lies in the hull of the optimal-cell centres) so that
/// feasible_area <= hull_area holds exactly and a filled convex mask gets
/// gap = 0.
struct AreaReport {
  double feasible_area = 0.0;       // p.u.^2
  double hull_area = 0.0;           // p.u.^2
  double nonconvexity_gap = 0.0;    // (hull - feasible) / hull, in [0, 1]
  std::vector<Point> hull;          // polygon over optimal-cell centres
  std::vector<GridCellRef> hull_infeasible_cells;
  std::vector<SwapCell> swap_cells;
  std::vector<ShiftHotspot> shift_hotspots;
};

AreaReport nonconvexity_report(const sweep::SweepResult& sweep);

/// Cells where, in one channel, some unit regulates above +threshold while
/// another regulates below -threshold (simultaneous consumption and
/// production of the same power component).
std::vector<SwapCell> detect_swaps(const sweep::SweepResult& sweep,
                                   double threshold);

/// Adjacent optimal-cell pairs whose dispatch jumps by more than
/// jump_threshold in some unit/channel while the request moves by one grid
/// step. Sorted by jump magnitude, largest first.
std::vector<ShiftHotspot> detect_shifts(const sweep::SweepResult& sweep,
                                        double jump_threshold);

/// Full diagnostic bundle with the default thresholds (10 kW swap dust
/// threshold, half a typical box width for shifts) converted to p.u.
AreaReport analyze(const sweep::SweepResult& sweep, double swap_threshold,
                   double jump_threshold);

}  // namespace flexmap::analysis
