#include "flexmap/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace flexmap::analysis {

namespace {

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool on_segment(const Point& p, const Point& a, const Point& b) {
  double scale = std::max({std::abs(a.x), std::abs(a.y), std::abs(b.x),
                           std::abs(b.y), 1.0});
  if (std::abs(cross(a, b, p)) > 1e-12 * scale * scale) return false;
  return p.x >= std::min(a.x, b.x) - 1e-15 &&
         p.x <= std::max(a.x, b.x) + 1e-15 &&
         p.y >= std::min(a.y, b.y) - 1e-15 &&
         p.y <= std::max(a.y, b.y) + 1e-15;
}

}  // namespace

std::vector<Point> convex_hull(std::vector<Point> points) {
  std::sort(points.begin(), points.end(), [](const Point& a, const Point& b) {
    return a.x != b.x ? a.x < b.x : a.y < b.y;
  });
  points.erase(std::unique(points.begin(), points.end(),
                           [](const Point& a, const Point& b) {
                             return a.x == b.x && a.y == b.y;
                           }),
               points.end());
  const std::size_t n = points.size();
  if (n <= 2) return points;

  std::vector<Point> hull(2 * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {  // lower chain
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], points[i]) <= 0.0) --k;
    hull[k++] = points[i];
  }
  for (std::size_t i = n - 1, lo = k + 1; i-- > 0;) {  // upper chain
    while (k >= lo && cross(hull[k - 2], hull[k - 1], points[i]) <= 0.0) --k;
    hull[k++] = points[i];
  }
  hull.resize(k - 1);  // last point repeats the first
  if (hull.size() < 3) return {points.front(), points.back()};  // collinear
  return hull;
}

double polygon_area(const std::vector<Point>& poly) {
  if (poly.size() < 3) return 0.0;
  double area2 = 0.0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
    area2 += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  return std::abs(area2) * 0.5;
}

bool point_in_polygon(const Point& p, const std::vector<Point>& poly) {
  if (poly.empty()) return false;
  if (poly.size() == 1) return on_segment(p, poly[0], poly[0]);
  if (poly.size() == 2) return on_segment(p, poly[0], poly[1]);
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if (on_segment(p, poly[j], poly[i])) return true;
    bool crosses = (poly[i].y > p.y) != (poly[j].y > p.y);
    if (crosses) {
      double x_at = poly[j].x + (poly[i].x - poly[j].x) * (p.y - poly[j].y) /
                                    (poly[i].y - poly[j].y);
      if (p.x < x_at) inside = !inside;
    }
  }
  return inside;
}

AreaReport nonconvexity_report(const sweep::SweepResult& sw) {
  AreaReport rep;
  const auto& spec = sw.spec;
  const double cell_area = spec.step * spec.step;

  std::vector<Point> centres;
  for (int iq = 0; iq < spec.n_dq(); ++iq)
    for (int ip = 0; ip < spec.n_dp(); ++ip)
      if (sw.optimal(sw.idx(ip, iq)))
        centres.push_back({spec.dp_at(ip), spec.dq_at(iq)});
  rep.feasible_area = static_cast<double>(centres.size()) * cell_area;
  if (centres.empty()) return rep;

  rep.hull = convex_hull(centres);

  // hull area in the same cell-counting currency as the feasible area, so
  // the gap is exactly the in-hull infeasible fraction
  int hull_cells = 0;
  for (int iq = 0; iq < spec.n_dq(); ++iq)
    for (int ip = 0; ip < spec.n_dp(); ++ip) {
      Point c{spec.dp_at(ip), spec.dq_at(iq)};
      if (!point_in_polygon(c, rep.hull)) continue;
      ++hull_cells;
      if (!sw.optimal(sw.idx(ip, iq)))
        rep.hull_infeasible_cells.push_back({ip, iq, c.x, c.y});
    }
  rep.hull_area = hull_cells * cell_area;
  rep.nonconvexity_gap =
      rep.hull_area > 0.0
          ? (rep.hull_area - rep.feasible_area) / rep.hull_area
          : 0.0;
  return rep;
}

std::vector<SwapCell> detect_swaps(const sweep::SweepResult& sw,
                                   double threshold) {
  std::vector<SwapCell> swaps;
  const auto& spec = sw.spec;
  for (int iq = 0; iq < spec.n_dq(); ++iq)
    for (int ip = 0; ip < spec.n_dp(); ++ip) {
      int c = sw.idx(ip, iq);
      if (!sw.optimal(c)) continue;
      for (sweep::Channel ch : {sweep::Channel::p, sweep::Channel::q}) {
        const auto& deltas =
            ch == sweep::Channel::p ? sw.delta_p : sw.delta_q;
        SwapCell sc;
        for (int k = 0; k < sw.n_units; ++k) {
          double d = deltas[static_cast<std::size_t>(c) * sw.n_units + k];
          if (d < -threshold) sc.producers.push_back(k);
          if (d > threshold) sc.consumers.push_back(k);
        }
        if (!sc.producers.empty() && !sc.consumers.empty()) {
          sc.cell = {ip, iq, spec.dp_at(ip), spec.dq_at(iq)};
          sc.channel = ch;
          swaps.push_back(std::move(sc));
        }
      }
    }
  return swaps;
}

std::vector<ShiftHotspot> detect_shifts(const sweep::SweepResult& sw,
                                        double jump_threshold) {
  std::vector<ShiftHotspot> shifts;
  const auto& spec = sw.spec;
  auto scan_pair = [&](int ip, int iq, int jp, int jq) {
    int a = sw.idx(ip, iq), b = sw.idx(jp, jq);
    if (!sw.optimal(a) || !sw.optimal(b)) return;
    for (sweep::Channel ch : {sweep::Channel::p, sweep::Channel::q}) {
      const auto& deltas = ch == sweep::Channel::p ? sw.delta_p : sw.delta_q;
      for (int k = 0; k < sw.n_units; ++k) {
        double jump =
            std::abs(deltas[static_cast<std::size_t>(b) * sw.n_units + k] -
                     deltas[static_cast<std::size_t>(a) * sw.n_units + k]);
        if (jump > jump_threshold)
          shifts.push_back({{ip, iq, spec.dp_at(ip), spec.dq_at(iq)},
                            {jp, jq, spec.dp_at(jp), spec.dq_at(jq)},
                            k,
                            ch,
                            jump});
      }
    }
  };
  for (int iq = 0; iq < spec.n_dq(); ++iq)
    for (int ip = 0; ip < spec.n_dp(); ++ip) {
      if (ip + 1 < spec.n_dp()) scan_pair(ip, iq, ip + 1, iq);
      if (iq + 1 < spec.n_dq()) scan_pair(ip, iq, ip, iq + 1);
    }
  std::stable_sort(shifts.begin(), shifts.end(),
                   [](const ShiftHotspot& a, const ShiftHotspot& b) {
                     return a.jump > b.jump;
                   });
  return shifts;
}

AreaReport analyze(const sweep::SweepResult& sw, double swap_threshold,
                   double jump_threshold) {
  AreaReport rep = nonconvexity_report(sw);
  rep.swap_cells = detect_swaps(sw, swap_threshold);
  rep.shift_hotspots = detect_shifts(sw, jump_threshold);
  return rep;
}

}  // namespace flexmap::analysis
