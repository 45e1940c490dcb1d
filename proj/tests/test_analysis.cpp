#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "flexmap/analysis.hpp"

using namespace flexmap;
using analysis::Point;
using sweep::GridSpec;

namespace {

bool same_point(const Point& a, const Point& b) {
  return a.x == b.x && a.y == b.y;
}

bool same_hull(const std::vector<Point>& a, const std::vector<Point>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_point(a[i], b[i])) return false;
  return true;
}

double signed_area2(const std::vector<Point>& poly) {
  double s = 0.0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
    s += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  return s;
}

/// Synthetic sweep: every cell infeasible until marked, deltas zeroed.
sweep::SweepResult make_sweep(const GridSpec& g, int n_units) {
  sweep::SweepResult sw;
  sw.spec = g;
  sw.n_units = n_units;
  for (int k = 0; k < n_units; ++k)
    sw.unit_names.push_back("U" + std::to_string(k));
  sw.cells.assign(g.n_cells(), {});
  for (auto& c : sw.cells) c.status = flexopf::SolveStatus::infeasible;
  sw.delta_p.assign(static_cast<std::size_t>(g.n_cells()) * n_units, 0.0);
  sw.delta_q.assign(static_cast<std::size_t>(g.n_cells()) * n_units, 0.0);
  return sw;
}

void mark_optimal(sweep::SweepResult& sw, int ip, int iq) {
  auto& c = sw.cells[sw.idx(ip, iq)];
  c.status = flexopf::SolveStatus::optimal;
  c.has_values = true;
  c.solved = true;
}

void set_delta(sweep::SweepResult& sw, int ip, int iq, int unit,
               double dp, double dq) {
  std::size_t at = static_cast<std::size_t>(sw.idx(ip, iq)) * sw.n_units +
                   static_cast<std::size_t>(unit);
  sw.delta_p[at] = dp;
  sw.delta_q[at] = dq;
}

}  // namespace

TEST_CASE("hull of a square with an interior point is its four corners") {
  std::vector<Point> pts{{0, 0}, {2, 0}, {2, 2}, {0, 2}, {1, 1}};
  auto h = analysis::convex_hull(pts);
  REQUIRE(h.size() == 4);
  CHECK(signed_area2(h) > 0.0);  // counter-clockwise
  CHECK(analysis::polygon_area(h) == doctest::Approx(4.0));
  for (const Point& corner :
       {Point{0, 0}, Point{2, 0}, Point{2, 2}, Point{0, 2}}) {
    bool found = false;
    for (const auto& v : h) found = found || same_point(v, corner);
    CHECK(found);
  }
}

TEST_CASE("degenerate hulls collapse to a point or a segment") {
  auto seg = analysis::convex_hull({{0, 0}, {1, 1}, {2, 2}, {0.5, 0.5}});
  REQUIRE(seg.size() == 2);
  CHECK(same_point(seg[0], {0, 0}));
  CHECK(same_point(seg[1], {2, 2}));

  auto one = analysis::convex_hull({{3, 4}, {3, 4}, {3, 4}});
  REQUIRE(one.size() == 1);
  CHECK(same_point(one[0], {3, 4}));

  CHECK(analysis::convex_hull({}).empty());
  CHECK(analysis::polygon_area(seg) == 0.0);
  CHECK(analysis::polygon_area(one) == 0.0);
}

TEST_CASE("hull is idempotent and contains every input point") {
  std::mt19937 rng(7703);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Point> pts;
    int n = 3 + static_cast<int>(rng() % 200);
    for (int i = 0; i < n; ++i) pts.push_back({coord(rng), coord(rng)});
    auto h = analysis::convex_hull(pts);
    CHECK(same_hull(analysis::convex_hull(h), h));
    for (const auto& p : pts) CHECK(analysis::point_in_polygon(p, h));
  }
}

TEST_CASE("hull of random disk samples approaches the disk from inside") {
  std::mt19937 rng(40049);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Point> pts;
  for (int i = 0; i < 1000; ++i) {
    double r = std::sqrt(unit(rng)), a = angle(rng);
    pts.push_back({r * std::cos(a), r * std::sin(a)});
  }
  double area = analysis::polygon_area(analysis::convex_hull(pts));
  CHECK(area <= std::numbers::pi);
  CHECK(area >= 0.9 * std::numbers::pi);
}

TEST_CASE("polygon area matches shoelace references") {
  CHECK(analysis::polygon_area({{0, 0}, {1, 0}, {1, 1}, {0, 1}}) ==
        doctest::Approx(1.0));
  CHECK(analysis::polygon_area({{0, 0}, {4, 0}, {0, 3}}) ==
        doctest::Approx(6.0));
  // orientation does not change the magnitude
  CHECK(analysis::polygon_area({{0, 0}, {0, 3}, {4, 0}}) ==
        doctest::Approx(6.0));
}

TEST_CASE("point membership includes the polygon boundary") {
  std::vector<Point> sq{{0, 0}, {2, 0}, {2, 2}, {0, 2}};
  CHECK(analysis::point_in_polygon({1, 1}, sq));
  CHECK(analysis::point_in_polygon({0, 0}, sq));   // vertex
  CHECK(analysis::point_in_polygon({1, 0}, sq));   // edge midpoint
  CHECK(analysis::point_in_polygon({2, 1}, sq));   // right edge
  CHECK_FALSE(analysis::point_in_polygon({3, 1}, sq));
  CHECK_FALSE(analysis::point_in_polygon({-1e-3, 1}, sq));
  CHECK_FALSE(analysis::point_in_polygon({1, 2.001}, sq));

  std::vector<Point> seg{{0, 0}, {2, 2}};
  CHECK(analysis::point_in_polygon({1, 1}, seg));
  CHECK_FALSE(analysis::point_in_polygon({1, 1.1}, seg));
  CHECK_FALSE(analysis::point_in_polygon({3, 3}, seg));  // past the end
}

TEST_CASE("a filled rectangle has zero nonconvexity gap") {
  GridSpec g{0.0, 0.5, 0.0, 0.4, 0.1};  // 6x5
  auto sw = make_sweep(g, 1);
  for (int iq = 0; iq < g.n_dq(); ++iq)
    for (int ip = 0; ip < g.n_dp(); ++ip) mark_optimal(sw, ip, iq);

  auto rep = analysis::nonconvexity_report(sw);
  CHECK(rep.feasible_area == doctest::Approx(30 * 0.01));
  CHECK(rep.hull_area == doctest::Approx(rep.feasible_area));
  CHECK(rep.nonconvexity_gap == doctest::Approx(0.0));
  CHECK(rep.hull_infeasible_cells.empty());
  REQUIRE(rep.hull.size() == 4);
}

TEST_CASE("an L-shaped region exposes the notch cells inside its hull") {
  GridSpec g{0.0, 0.9, 0.0, 0.9, 0.1};  // 10x10
  auto sw = make_sweep(g, 1);
  for (int iq = 0; iq < 10; ++iq)
    for (int ip = 0; ip < 10; ++ip)
      if (!(ip >= 5 && iq >= 5)) mark_optimal(sw, ip, iq);

  auto rep = analysis::nonconvexity_report(sw);
  double s2 = g.step * g.step;
  CHECK(rep.feasible_area == doctest::Approx(75 * s2));
  // the hull closes the notch with the chord from (0.9,0.4) to (0.4,0.9);
  // notch centres on or under that chord (ip+iq <= 13) fall inside
  CHECK(rep.hull_area == doctest::Approx(85 * s2));
  CHECK(rep.nonconvexity_gap == doctest::Approx(10.0 / 85.0));
  REQUIRE(rep.hull_infeasible_cells.size() == 10);
  for (const auto& c : rep.hull_infeasible_cells) {
    CHECK(c.ip >= 5);
    CHECK(c.iq >= 5);
    CHECK(c.ip + c.iq <= 13);
    CHECK(c.dp == doctest::Approx(0.1 * c.ip));
    CHECK(c.dq == doctest::Approx(0.1 * c.iq));
  }
}

TEST_CASE("reports on empty feasible sets stay well-defined") {
  GridSpec g{0.0, 0.3, 0.0, 0.3, 0.1};
  auto sw = make_sweep(g, 2);
  auto rep = analysis::nonconvexity_report(sw);
  CHECK(rep.feasible_area == 0.0);
  CHECK(rep.hull_area == 0.0);
  CHECK(rep.nonconvexity_gap == 0.0);
  CHECK(rep.hull.empty());
  CHECK(rep.hull_infeasible_cells.empty());

  // a single optimal cell: hull is a point, gap still zero
  mark_optimal(sw, 1, 2);
  rep = analysis::nonconvexity_report(sw);
  CHECK(rep.feasible_area == doctest::Approx(0.01));
  CHECK(rep.hull_area == doctest::Approx(0.01));
  CHECK(rep.nonconvexity_gap == doctest::Approx(0.0));
  REQUIRE(rep.hull.size() == 1);
}

TEST_CASE("swap detection flags opposing regulation in one channel") {
  GridSpec g{0.0, 0.2, 0.0, 0.1, 0.1};  // 3x2
  auto sw = make_sweep(g, 3);
  mark_optimal(sw, 0, 0);
  mark_optimal(sw, 1, 0);
  mark_optimal(sw, 2, 1);

  // cell (1,0): unit 0 consumes q, unit 1 produces q; p moves one way only
  set_delta(sw, 1, 0, 0, 0.010, 0.020);
  set_delta(sw, 1, 0, 1, 0.020, -0.015);
  // cell (2,1): an opposing p pair exactly at the threshold (must not trip)
  set_delta(sw, 2, 1, 0, 0.001, 0.0);
  set_delta(sw, 2, 1, 1, -0.001, 0.0);
  // infeasible cell with a blatant swap must be ignored
  set_delta(sw, 0, 1, 0, 0.05, 0.05);
  set_delta(sw, 0, 1, 1, -0.05, -0.05);

  auto swaps = analysis::detect_swaps(sw, 0.001);
  REQUIRE(swaps.size() == 1);
  CHECK(swaps[0].cell.ip == 1);
  CHECK(swaps[0].cell.iq == 0);
  CHECK(swaps[0].cell.dp == doctest::Approx(0.1));
  CHECK(swaps[0].cell.dq == doctest::Approx(0.0));
  CHECK(swaps[0].channel == sweep::Channel::q);
  REQUIRE(swaps[0].producers == std::vector<int>{1});
  REQUIRE(swaps[0].consumers == std::vector<int>{0});
}

TEST_CASE("swap detection is symmetric under relabelling and sign flips") {
  std::mt19937 rng(2214);
  std::uniform_real_distribution<double> d(-0.05, 0.05);
  GridSpec g{0.0, 0.4, 0.0, 0.4, 0.1};  // 5x5
  const int n_units = 4;
  auto sw = make_sweep(g, n_units);
  for (int iq = 0; iq < 5; ++iq)
    for (int ip = 0; ip < 5; ++ip) {
      if (rng() % 4 == 0) continue;  // leave some cells infeasible
      mark_optimal(sw, ip, iq);
      for (int k = 0; k < n_units; ++k)
        set_delta(sw, ip, iq, k, d(rng), d(rng));
    }
  const double thr = 0.01;
  auto base = analysis::detect_swaps(sw, thr);
  REQUIRE(!base.empty());

  // reverse the unit order
  auto rev = sw;
  for (int c = 0; c < g.n_cells(); ++c)
    for (int k = 0; k < n_units; ++k) {
      std::size_t a = static_cast<std::size_t>(c) * n_units + k;
      std::size_t b = static_cast<std::size_t>(c) * n_units +
                      (n_units - 1 - k);
      rev.delta_p[a] = sw.delta_p[b];
      rev.delta_q[a] = sw.delta_q[b];
    }
  auto relabeled = analysis::detect_swaps(rev, thr);
  REQUIRE(relabeled.size() == base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(relabeled[i].cell.ip == base[i].cell.ip);
    CHECK(relabeled[i].cell.iq == base[i].cell.iq);
    CHECK(relabeled[i].channel == base[i].channel);
    auto remap = [&](std::vector<int> v) {
      for (int& k : v) k = n_units - 1 - k;
      std::sort(v.begin(), v.end());
      return v;
    };
    CHECK(remap(base[i].producers) == relabeled[i].producers);
    CHECK(remap(base[i].consumers) == relabeled[i].consumers);
  }

  // negate every setpoint: producers and consumers trade places
  auto neg = sw;
  for (auto& v : neg.delta_p) v = -v;
  for (auto& v : neg.delta_q) v = -v;
  auto flipped = analysis::detect_swaps(neg, thr);
  REQUIRE(flipped.size() == base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(flipped[i].cell.ip == base[i].cell.ip);
    CHECK(flipped[i].channel == base[i].channel);
    CHECK(flipped[i].producers == base[i].consumers);
    CHECK(flipped[i].consumers == base[i].producers);
  }
}

TEST_CASE("a single unit never swaps") {
  std::mt19937 rng(515);
  std::uniform_real_distribution<double> d(-0.1, 0.1);
  GridSpec g{0.0, 0.3, 0.0, 0.3, 0.1};
  auto sw = make_sweep(g, 1);
  for (int iq = 0; iq < 4; ++iq)
    for (int ip = 0; ip < 4; ++ip) {
      mark_optimal(sw, ip, iq);
      set_delta(sw, ip, iq, 0, d(rng), d(rng));
    }
  for (double thr : {0.0, 1e-6, 0.01})
    CHECK(analysis::detect_swaps(sw, thr).empty());
}

TEST_CASE("shift detection finds jumps between neighbours, largest first") {
  GridSpec g{0.0, 0.2, 0.0, 0.1, 0.1};  // 3x2
  auto sw = make_sweep(g, 2);
  for (int iq = 0; iq < 2; ++iq)
    for (int ip = 0; ip < 3; ++ip) mark_optimal(sw, ip, iq);

  // smooth ramp in unit 0 (below threshold), one hard p jump in unit 1
  // between (1,0) and (2,0), and a bigger q jump between (0,0) and (0,1)
  for (int ip = 0; ip < 3; ++ip) set_delta(sw, ip, 0, 0, 0.001 * ip, 0.0);
  set_delta(sw, 1, 0, 1, 0.001, 0.0);
  set_delta(sw, 2, 0, 1, 0.045, 0.0);
  set_delta(sw, 0, 1, 1, 0.0, 0.060);

  // each spike registers on both of its sides: up to the jump and back down
  auto shifts = analysis::detect_shifts(sw, 0.01);
  REQUIRE(shifts.size() == 4);
  CHECK(shifts[0].jump == doctest::Approx(0.060));
  CHECK(shifts[0].channel == sweep::Channel::q);
  CHECK(shifts[0].unit == 1);
  CHECK(shifts[0].from.ip == 0);
  CHECK(shifts[0].from.iq == 0);
  CHECK(shifts[0].to.iq == 1);
  CHECK(shifts[1].jump == doctest::Approx(0.060));
  CHECK(shifts[2].jump == doctest::Approx(0.045));
  CHECK(shifts[3].jump == doctest::Approx(0.044));
  CHECK(shifts[3].channel == sweep::Channel::p);
  CHECK(shifts[3].from.ip == 1);
  CHECK(shifts[3].to.ip == 2);

  // a non-optimal cell breaks the adjacency on both of its sides
  sw.cells[sw.idx(1, 0)].status = flexopf::SolveStatus::not_converged;
  auto after = analysis::detect_shifts(sw, 0.01);
  REQUIRE(after.size() == 3);
  for (const auto& s : after) {
    CHECK(!(s.from.ip == 1 && s.from.iq == 0));
    CHECK(!(s.to.ip == 1 && s.to.iq == 0));
  }
}

TEST_CASE("shift jumps on a real sweep stay inside the unit boxes") {
  // two units on a three-bus feeder, as in the sweep tests
  net::RadialNetwork n;
  n.base_mva = 10.0;
  n.base_kv = 1.0;
  n.slack_bus = 1;
  n.buses.push_back({.id = 1});
  n.buses.push_back({.id = 2, .load_p_kw = 200.0, .load_q_kvar = 100.0});
  n.buses.push_back({.id = 3, .load_p_kw = 150.0, .load_q_kvar = 80.0});
  n.lines.push_back({.from = 1, .to = 2, .r_ohm = 0.004, .x_ohm = 0.003});
  n.lines.push_back({.from = 2, .to = 3, .r_ohm = 0.003, .x_ohm = 0.002});
  n.finalize();
  std::vector<net::FlexUnit> units;
  auto mk = [&](const char* name, int bus, double cp, double cq) {
    net::FlexUnit u;
    u.name = name;
    u.bus = bus;
    u.p_min_kw = -20.0;
    u.p_max_kw = 20.0;
    u.q_min_kvar = -10.0;
    u.q_max_kvar = 10.0;
    u.cost_p_usd_per_kwh = cp;
    u.cost_q_usd_per_kvarh = cq;
    units.push_back(u);
  };
  mk("U1", 2, 0.5, 0.25);
  mk("U2", 3, 0.3, 0.15);
  net::finalize_units(units, n);

  GridSpec g{-0.004, 0.004, -0.002, 0.002, 0.002};  // 5x3
  auto res = sweep::run_sweep(n, units, g, {}, sweep::SweepMode::full);
  auto shifts = analysis::detect_shifts(res, 1e-12);
  CHECK(!shifts.empty());
  for (const auto& s : shifts) {
    const auto& u = units[s.unit];
    double width = s.channel == sweep::Channel::p ? u.p_max - u.p_min
                                                  : u.q_max - u.q_min;
    CHECK(s.jump <= width + 1e-12);
  }
  // sorted largest-first
  for (std::size_t i = 1; i < shifts.size(); ++i)
    CHECK(shifts[i - 1].jump >= shifts[i].jump);
}

TEST_CASE("analyze bundles geometry, swaps, and shifts") {
  GridSpec g{0.0, 0.9, 0.0, 0.9, 0.1};
  auto sw = make_sweep(g, 2);
  for (int iq = 0; iq < 10; ++iq)
    for (int ip = 0; ip < 10; ++ip)
      if (!(ip >= 5 && iq >= 5)) mark_optimal(sw, ip, iq);
  set_delta(sw, 2, 2, 0, 0.03, 0.02);
  set_delta(sw, 2, 2, 1, -0.03, -0.02);
  set_delta(sw, 7, 2, 0, 0.08, 0.0);

  auto rep = analysis::analyze(sw, 0.01, 0.05);
  CHECK(rep.nonconvexity_gap == doctest::Approx(10.0 / 85.0));
  CHECK(rep.swap_cells.size() ==
        analysis::detect_swaps(sw, 0.01).size());
  CHECK(rep.shift_hotspots.size() ==
        analysis::detect_shifts(sw, 0.05).size());
  REQUIRE(!rep.swap_cells.empty());
  REQUIRE(!rep.shift_hotspots.empty());
}
