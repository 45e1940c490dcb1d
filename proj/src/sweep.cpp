#include "flexmap/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include "flexmap/net_model.hpp"

namespace flexmap::sweep {

int GridSpec::axis_cells(double lo, double hi, double step) {
  if (step <= 0.0 || hi < lo) return 0;
  return static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
}

void GridSpec::validate() const {
  if (!(step > 0.0) || !std::isfinite(step))
    throw net::DataError("grid step must be positive, got " +
                         std::to_string(step));
  if (!std::isfinite(dp_min) || !std::isfinite(dp_max) ||
      !std::isfinite(dq_min) || !std::isfinite(dq_max))
    throw net::DataError("grid ranges must be finite");
  if (dp_max < dp_min)
    throw net::DataError("grid dp range is inverted: [" +
                         std::to_string(dp_min) + ", " +
                         std::to_string(dp_max) + "]");
  if (dq_max < dq_min)
    throw net::DataError("grid dq range is inverted: [" +
                         std::to_string(dq_min) + ", " +
                         std::to_string(dq_max) + "]");
}

bool GridSpec::same_grid(const GridSpec& other) const {
  return dp_min == other.dp_min && dp_max == other.dp_max &&
         dq_min == other.dq_min && dq_max == other.dq_max &&
         step == other.step;
}

GridSpec default_grid(std::span<const net::FlexUnit> units, double step) {
  GridSpec g;
  g.step = step;
  for (const auto& u : units) {
    g.dp_min += u.p_min - u.p0;
    g.dp_max += u.p_max - u.p0;
    g.dq_min += u.q_min - u.q0;
    g.dq_max += u.q_max - u.q0;
  }
  g.dp_min -= step;
  g.dp_max += step;
  g.dq_min -= step;
  g.dq_max += step;
  g.validate();
  return g;
}

const char* to_string(SweepMode m) {
  return m == SweepMode::full ? "full" : "swap_free";
}

int SweepResult::count(flexopf::SolveStatus s) const {
  return static_cast<int>(
      std::count_if(cells.begin(), cells.end(),
                    [&](const SweepCell& c) { return c.status == s; }));
}

namespace {

// Loss effects bound how far the interface can move beyond the aggregate
// regulation box; 0.1 p.u. (1 MW at 10 MVA) is far above any realistic loss
// delta on a distribution feeder, so requests outside the box by more than
// this margin are provably unreachable for the given (sign-restricted) boxes.
constexpr double kLossMargin = 0.1;

struct ComboReach {
  double dp_lo = 0.0, dp_hi = 0.0, dq_lo = 0.0, dq_hi = 0.0;
};

ComboReach reach_of(std::span<const net::FlexUnit> units) {
  ComboReach r;
  for (const auto& u : units) {
    r.dp_lo += u.p_min - u.p0;
    r.dp_hi += u.p_max - u.p0;
    r.dq_lo += u.q_min - u.q0;
    r.dq_hi += u.q_max - u.q0;
  }
  r.dp_lo -= kLossMargin;
  r.dp_hi += kLossMargin;
  r.dq_lo -= kLossMargin;
  r.dq_hi += kLossMargin;
  return r;
}

double reach_distance(const ComboReach& r, const flexopf::FlexRequest& req) {
  double dp = std::max({r.dp_lo - req.dp, req.dp - r.dp_hi, 0.0});
  double dq = std::max({r.dq_lo - req.dq, req.dq - r.dq_hi, 0.0});
  return std::max(dp, dq);
}

void record_cell(SweepResult& out, int c,
                 std::span<const net::FlexUnit> units,
                 const flexopf::FlexSolveResult& res,
                 const net::RadialNetwork& net) {
  SweepCell& cell = out.cells[c];
  cell.status = res.status;
  cell.cost = res.cost;
  cell.interface_err = res.interface_error;
  cell.restarts = res.restarts_used;
  cell.solved = true;
  cell.has_values = !res.state.empty() && res.dispatch.size() == units.size();
  if (cell.has_values) {
    double vmin = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int b = 0; b < net.n_buses(); ++b)
      if (res.state.v[b] < vmin) {
        vmin = res.state.v[b];
        arg = b;
      }
    cell.vmin = std::sqrt(vmin);
    cell.vmin_bus = net.buses[arg].id;
    for (std::size_t k = 0; k < units.size(); ++k) {
      out.delta_p[c * out.n_units + static_cast<int>(k)] =
          res.dispatch.p[k] - units[k].p0;
      out.delta_q[c * out.n_units + static_cast<int>(k)] =
          res.dispatch.q[k] - units[k].q0;
    }
  }
}

std::string utc_timestamp() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

SweepResult run_sweep(const net::RadialNetwork& net,
                      std::span<const net::FlexUnit> units,
                      const GridSpec& spec, const flexopf::SolverOptions& opts,
                      SweepMode mode, int workers, const SweepResult* resume,
                      ProgressFn progress) {
  spec.validate();
  auto t0 = std::chrono::steady_clock::now();

  SweepResult out;
  out.spec = spec;
  out.mode = mode;
  out.n_units = static_cast<int>(units.size());
  for (const auto& u : units) out.unit_names.push_back(u.name);
  out.cells.assign(spec.n_cells(), SweepCell{});
  out.delta_p.assign(static_cast<std::size_t>(spec.n_cells()) * out.n_units,
                     0.0);
  out.delta_q.assign(static_cast<std::size_t>(spec.n_cells()) * out.n_units,
                     0.0);

  if (resume) {
    if (!resume->spec.same_grid(spec) || resume->mode != mode ||
        resume->n_units != out.n_units)
      throw net::DataError(
          "resume data does not match the requested grid/mode");
  }

  const int n_dp = spec.n_dp(), n_dq = spec.n_dq();
  // march origin: the column whose request is nearest dp = 0
  int ip0 = 0;
  for (int ip = 1; ip < n_dp; ++ip)
    if (std::abs(spec.dp_at(ip)) < std::abs(spec.dp_at(ip0))) ip0 = ip;

  // swap-free mode: per channel all units share one regulation sign, so each
  // cell tries the four sign-restricted box combinations and keeps the best
  std::vector<std::vector<net::FlexUnit>> combo_units;
  std::vector<ComboReach> combo_reach;
  if (mode == SweepMode::swap_free) {
    for (int ps : {+1, -1})
      for (int qs : {+1, -1}) {
        combo_units.push_back(flexopf::restrict_boxes(units, ps, qs));
        combo_reach.push_back(reach_of(combo_units.back()));
      }
  } else {
    combo_units.push_back({units.begin(), units.end()});
    combo_reach.push_back(reach_of(combo_units.back()));
  }
  const int n_combo = static_cast<int>(combo_units.size());

  std::atomic<int> next_row{0};
  std::atomic<int> done_cells{0};
  std::mutex progress_mu;
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto row_resumable = [&](int iq) {
    if (!resume) return false;
    for (int ip = 0; ip < n_dp; ++ip)
      if (!resume->cells[resume->idx(ip, iq)].solved) return false;
    return true;
  };

  auto worker_fn = [&]() {
    try {
      std::vector<flexopf::FlexOpfSolver> solvers;
      solvers.reserve(n_combo);
      for (int c = 0; c < n_combo; ++c)
        solvers.emplace_back(net, combo_units[c], opts);

      std::vector<flexopf::WarmStart> carry(n_combo);
      std::vector<flexopf::FlexSolveResult> res(n_combo);

      auto solve_cell = [&](int ip, int iq, bool cold) {
        flexopf::FlexRequest req{spec.dp_at(ip), spec.dq_at(iq)};
        int cell = out.idx(ip, iq);
        int best = -1;
        for (int c = 0; c < n_combo; ++c) {
          double dist = reach_distance(combo_reach[c], req);
          if (dist > 0.0) {
            // outside the aggregate box by more than any loss effect:
            // infeasible without solving
            res[c] = flexopf::FlexSolveResult{};
            res[c].status = flexopf::SolveStatus::infeasible;
            res[c].interface_error = dist;
            carry[c].valid = false;
            continue;
          }
          const flexopf::WarmStart* w =
              !cold && carry[c].valid ? &carry[c] : nullptr;
          res[c] = solvers[c].solve(req, w);
          carry[c] = res[c].carry;
        }
        for (int c = 0; c < n_combo; ++c) {
          if (best < 0) {
            best = c;
            continue;
          }
          bool b_opt = res[best].status == flexopf::SolveStatus::optimal;
          bool c_opt = res[c].status == flexopf::SolveStatus::optimal;
          if (c_opt != b_opt) {
            if (c_opt) best = c;
          } else if (c_opt) {
            if (res[c].cost < res[best].cost) best = c;
          } else if (res[c].interface_error < res[best].interface_error) {
            best = c;
          }
        }
        record_cell(out, cell, units, res[best], net);
        if (res[best].status != flexopf::SolveStatus::optimal &&
            mode == SweepMode::swap_free) {
          // the cell is infeasible only if every combination is; an
          // exhausted budget anywhere leaves the verdict open
          bool any_nc = false;
          for (int c = 0; c < n_combo; ++c)
            any_nc |= res[c].status == flexopf::SolveStatus::not_converged;
          out.cells[cell].status = any_nc
                                       ? flexopf::SolveStatus::not_converged
                                       : flexopf::SolveStatus::infeasible;
        }
      };

      for (;;) {
        int iq = next_row.fetch_add(1);
        if (iq >= n_dq) break;
        if (row_resumable(iq)) {
          for (int ip = 0; ip < n_dp; ++ip) {
            int c = out.idx(ip, iq);
            out.cells[c] = resume->cells[resume->idx(ip, iq)];
            for (int k = 0; k < out.n_units; ++k) {
              out.delta_p[c * out.n_units + k] =
                  resume->delta_p[resume->idx(ip, iq) * out.n_units + k];
              out.delta_q[c * out.n_units + k] =
                  resume->delta_q[resume->idx(ip, iq) * out.n_units + k];
            }
          }
        } else {
          // warm chains march outward from the origin column; the first
          // cell is solved cold so rows stay independent of each other
          solve_cell(ip0, iq, /*cold=*/true);
          std::vector<flexopf::WarmStart> at_origin = carry;
          for (int ip = ip0 + 1; ip < n_dp; ++ip) solve_cell(ip, iq, false);
          carry = at_origin;
          for (int ip = ip0 - 1; ip >= 0; --ip) solve_cell(ip, iq, false);
        }
        int done = done_cells.fetch_add(n_dp) + n_dp;
        if (progress) {
          std::lock_guard lock(progress_mu);
          progress(done, spec.n_cells());
        }
      }
    } catch (...) {
      std::lock_guard lock(error_mu);
      if (!first_error) first_error = std::current_exception();
    }
  };

  workers = std::max(1, workers);
  if (workers == 1) {
    worker_fn();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker_fn);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  out.meta.base_mva = net.base_mva;
  out.meta.base_kv = net.base_kv;
  out.meta.base = flexopf::base_interface(net, units, opts.pf);
  out.meta.seed = opts.seed;
  out.meta.workers = workers;
  out.meta.timestamp = utc_timestamp();
  out.meta.duration_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return out;
}

namespace {

// Marching squares over the padded cell-centre indicator. Segments are
// oriented with the feasible side on the left, so chained outer loops come
// out counter-clockwise and hole loops clockwise; the signed shoelace sum is
// then the net enclosed area directly.
struct SegKey {
  int x2 = 0, y2 = 0;  // doubled coordinates, exact for edge midpoints
  bool operator<(const SegKey& o) const {
    return x2 != o.x2 ? x2 < o.x2 : y2 < o.y2;
  }
  bool operator==(const SegKey& o) const { return x2 == o.x2 && y2 == o.y2; }
};

}  // namespace

Boundary extract_boundary_mask(const std::vector<char>& mask,
                               const GridSpec& spec) {
  Boundary b;
  const int n_dp = spec.n_dp(), n_dq = spec.n_dq();
  if (static_cast<int>(mask.size()) != n_dp * n_dq)
    throw net::DataError("boundary mask size does not match the grid");

  int n_set = static_cast<int>(std::count(mask.begin(), mask.end(), 1));
  if (n_set == 0 || n_set == n_dp * n_dq) {
    b.degenerate = true;
    b.notice = n_set == 0 ? "grid has no feasible cells; no boundary exists"
                          : "entire grid is feasible; no boundary exists";
    return b;
  }

  // pad one ring of zeros so regions touching the grid edge still close
  const int W = n_dp + 2, H = n_dq + 2;
  auto at = [&](int i, int j) -> int {
    if (i < 1 || i > n_dp || j < 1 || j > n_dq) return 0;
    return mask[(j - 1) * n_dp + (i - 1)] ? 1 : 0;
  };

  // one oriented segment per case bit-pattern, saddles split
  std::map<SegKey, std::pair<SegKey, bool>> next;  // start -> (end, used)
  auto add_seg = [&](SegKey a, SegKey e) { next[a] = {e, false}; };
  for (int j = 0; j + 1 < H; ++j)
    for (int i = 0; i + 1 < W; ++i) {
      int code = at(i, j) | (at(i + 1, j) << 1) | (at(i + 1, j + 1) << 2) |
                 (at(i, j + 1) << 3);
      SegKey B{2 * i + 1, 2 * j}, R{2 * i + 2, 2 * j + 1},
          T{2 * i + 1, 2 * j + 2}, L{2 * i, 2 * j + 1};
      switch (code) {
        case 1: add_seg(B, L); break;
        case 2: add_seg(R, B); break;
        case 3: add_seg(R, L); break;
        case 4: add_seg(T, R); break;
        case 5: add_seg(B, L); add_seg(T, R); break;
        case 6: add_seg(T, B); break;
        case 7: add_seg(T, L); break;
        case 8: add_seg(L, T); break;
        case 9: add_seg(B, T); break;
        case 10: add_seg(R, B); add_seg(L, T); break;
        case 11: add_seg(R, T); break;
        case 12: add_seg(L, R); break;
        case 13: add_seg(B, R); break;
        case 14: add_seg(L, B); break;
        default: break;  // 0, 15: no boundary
      }
    }

  // chain segments into closed loops; padded index (i,j) sits at request
  // (dp_min + (i-1) step, dq_min + (j-1) step)
  auto to_point = [&](const SegKey& k) {
    return BoundaryPoint{spec.dp_min + (k.x2 * 0.5 - 1.0) * spec.step,
                         spec.dq_min + (k.y2 * 0.5 - 1.0) * spec.step};
  };
  double area2 = 0.0;
  for (auto& [start, entry] : next) {
    if (entry.second) continue;
    Polyline loop;
    SegKey cur = start;
    while (true) {
      auto it = next.find(cur);
      if (it == next.end() || it->second.second) break;
      it->second.second = true;
      loop.push_back(to_point(cur));
      cur = it->second.first;
      if (cur == start) break;
    }
    if (loop.size() < 3) continue;
    loop.push_back(loop.front());  // close
    for (std::size_t k = 0; k + 1 < loop.size(); ++k)
      area2 += loop[k].dp * loop[k + 1].dq - loop[k + 1].dp * loop[k].dq;
    b.loops.push_back(std::move(loop));
  }
  b.enclosed_area = 0.5 * area2;
  return b;
}

Boundary extract_boundary(const SweepResult& sweep) {
  std::vector<char> mask(sweep.cells.size());
  for (std::size_t c = 0; c < sweep.cells.size(); ++c)
    mask[c] = sweep.optimal(static_cast<int>(c)) ? 1 : 0;
  return extract_boundary_mask(mask, sweep.spec);
}

std::vector<double> heatmap_layer(const SweepResult& sweep, int unit,
                                  Channel channel) {
  if (unit < 0 || unit >= sweep.n_units)
    throw net::DataError("heatmap unit index out of range: " +
                         std::to_string(unit));
  const auto& deltas =
      channel == Channel::p ? sweep.delta_p : sweep.delta_q;
  std::vector<double> layer(sweep.cells.size(),
                            std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < sweep.cells.size(); ++c)
    if (sweep.optimal(static_cast<int>(c)))
      layer[c] = deltas[c * sweep.n_units + unit];
  return layer;
}

std::vector<RefinementViolation> audit_refinement(const SweepResult& coarse,
                                                  const SweepResult& fine) {
  if (fine.spec.dp_min != coarse.spec.dp_min ||
      fine.spec.dq_min != coarse.spec.dq_min ||
      std::abs(fine.spec.step * 2.0 - coarse.spec.step) >
          1e-12 * coarse.spec.step)
    throw net::DataError(
        "refinement audit needs a fine grid with the same origin and half "
        "the step");
  std::vector<RefinementViolation> violations;
  for (int iq = 0; iq < coarse.spec.n_dq(); ++iq)
    for (int ip = 0; ip < coarse.spec.n_dp(); ++ip) {
      if (!coarse.optimal(coarse.idx(ip, iq))) continue;
      int fip = 2 * ip, fiq = 2 * iq;
      if (fip >= fine.spec.n_dp() || fiq >= fine.spec.n_dq()) continue;
      const auto& fc = fine.cells[fine.idx(fip, fiq)];
      if (fc.status != flexopf::SolveStatus::optimal)
        violations.push_back({ip, iq, fc.status});
    }
  return violations;
}

}  // namespace flexmap::sweep
