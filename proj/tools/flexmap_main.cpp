#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flexmap/analysis.hpp"
#include "flexmap/distflow.hpp"
#include "flexmap/flexopf.hpp"
#include "flexmap/net_model.hpp"
#include "flexmap/render.hpp"
#include "flexmap/sweep.hpp"
#include "flexmap/sweep_io.hpp"

namespace {

using namespace flexmap;
using nlohmann::json;

constexpr int kOk = 0;         // success
constexpr int kUsage = 1;      // usage / config error
constexpr int kData = 2;       // unreadable or inconsistent input data
constexpr int kNumerical = 3;  // solver did not produce a usable answer

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void summary(const json& j) { std::cerr << "summary " << j.dump() << "\n"; }

/// All options of all subcommands; a JSON config file supplies defaults
/// (keys are the long flag names with '-' -> '_'), flags override it.
struct Options {
  std::string net, units;
  std::vector<double> dp_range_kw, dq_range_kw;
  double step_kva = 16.66;
  std::string mode = "full";
  int workers = 1;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  std::string out_name = "sweep";
  std::string resume;
  double dp_kw = 0.0, dq_kvar = 0.0;  // opf request
  // solver knobs
  double interface_tol_kva = 1.0;
  double stat_tol = 1e-6;
  double viol_tol = 1e-6;
  int max_restarts = 4;
  std::string gradient = "adjoint";
  // render / analyze
  std::string sweep_csv, swapfree_csv;
  double scale_kw = 0.0;
  int cell_px = 6;
  double base_kw = 0.0;  // fallback scale for CSVs without a sidecar
  double swap_threshold_kw = 10.0;
  double jump_threshold_kw = 250.0;
};

json load_config(int argc, char** argv) {
  std::string path;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--config" && i + 1 < argc)
      path = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0)
      path = a.substr(9);
  }
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CLI::ValidationError("--config", "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", path + ": " + e.what());
  }
}

void apply_config(const json& cfg, Options& o) {
  auto num = [&](const char* k, double& v) {
    if (cfg.contains(k)) v = cfg.at(k).get<double>();
  };
  auto integer = [&](const char* k, auto& v) {
    if (cfg.contains(k)) v = cfg.at(k).get<std::decay_t<decltype(v)>>();
  };
  auto str = [&](const char* k, std::string& v) {
    if (cfg.contains(k)) v = cfg.at(k).get<std::string>();
  };
  auto range = [&](const char* k, std::vector<double>& v) {
    if (cfg.contains(k)) v = cfg.at(k).get<std::vector<double>>();
  };
  str("net", o.net);
  str("units", o.units);
  range("dp_range_kw", o.dp_range_kw);
  range("dq_range_kw", o.dq_range_kw);
  num("step_kva", o.step_kva);
  str("mode", o.mode);
  integer("workers", o.workers);
  integer("seed", o.seed);
  str("out_dir", o.out_dir);
  str("out_name", o.out_name);
  str("resume", o.resume);
  num("dp_kw", o.dp_kw);
  num("dq_kvar", o.dq_kvar);
  num("interface_tol_kva", o.interface_tol_kva);
  num("stat_tol", o.stat_tol);
  num("viol_tol", o.viol_tol);
  integer("max_restarts", o.max_restarts);
  str("gradient", o.gradient);
  str("sweep_csv", o.sweep_csv);
  str("swapfree_csv", o.swapfree_csv);
  num("scale_kw", o.scale_kw);
  integer("cell_px", o.cell_px);
  num("base_kw", o.base_kw);
  num("swap_threshold_kw", o.swap_threshold_kw);
  num("jump_threshold_kw", o.jump_threshold_kw);
}

[[noreturn]] void usage_error(const std::string& msg) {
  throw CLI::ValidationError("flexmap", msg);
}

net::RadialNetwork load_net(const Options& o) {
  if (o.net.empty()) usage_error("--net is required");
  return net::load_network(o.net);
}

std::vector<net::FlexUnit> load_units(const Options& o,
                                      const net::RadialNetwork& n) {
  if (o.units.empty()) usage_error("--units is required");
  return net::load_units(o.units, n);
}

flexopf::SolverOptions solver_options(const Options& o, double base_kw) {
  flexopf::SolverOptions s;
  s.interface_tol = o.interface_tol_kva / base_kw;
  s.stat_tol = o.stat_tol;
  s.viol_tol = o.viol_tol;
  s.max_restarts = o.max_restarts;
  s.seed = o.seed;
  if (o.gradient == "adjoint")
    s.gradient = flexopf::SolverOptions::Gradient::adjoint;
  else if (o.gradient == "fd")
    s.gradient = flexopf::SolverOptions::Gradient::fd;
  else
    usage_error("--gradient must be adjoint or fd");
  return s;
}

sweep::SweepMode parse_mode(const std::string& m) {
  if (m == "full") return sweep::SweepMode::full;
  if (m == "swap-free" || m == "swap_free") return sweep::SweepMode::swap_free;
  usage_error("--mode must be full or swap-free");
}

/// Recover the external kW scale of a reread sweep: the sidecar records the
/// MVA base; a bare CSV needs --base-kw.
double sweep_base_kw(const sweep::SweepResult& sw, const Options& o) {
  if (sw.meta.base_mva > 0.0) return sw.meta.base_mva * 1000.0;
  if (o.base_kw > 0.0) return o.base_kw;
  usage_error("sweep has no metadata sidecar; pass --base-kw");
}

int cmd_pf(const Options& o) {
  auto n = load_net(o);
  std::vector<distflow::Injection> inj;
  if (!o.units.empty())
    for (const auto& u : net::load_units(o.units, n))
      inj.push_back({u.bus, u.p0, u.q0});

  auto res = distflow::solve_power_flow(n, inj);
  if (!res.outcome.converged) {
    std::cerr << "power flow did not converge after " << res.outcome.iterations
              << " iterations (residual " << fmt(res.outcome.residual)
              << ")\n";
    summary({{"cmd", "pf"}, {"status", "not_converged"}});
    return kNumerical;
  }
  const auto& st = res.state;
  double base = n.base_kw();
  std::cout << "bus,v_pu\n";
  for (int b = 0; b < n.n_buses(); ++b)
    std::cout << n.buses[b].id << ',' << fmt(std::sqrt(st.v[b])) << '\n';
  std::cout << "\nfrom,to,p_kw,q_kvar,loss_p_kw,loss_q_kvar\n";
  for (int l = 0; l < n.n_lines(); ++l) {
    const auto& ln = n.lines[l];
    std::cout << ln.from << ',' << ln.to << ',' << fmt(st.p_flow[l] * base)
              << ',' << fmt(st.q_flow[l] * base) << ','
              << fmt(ln.r * st.ell[l] * base) << ','
              << fmt(ln.x * st.ell[l] * base) << '\n';
  }
  summary({{"cmd", "pf"},
           {"status", "converged"},
           {"iterations", res.outcome.iterations},
           {"residual", res.outcome.residual},
           {"interface_p_kw", st.interface_p * base},
           {"interface_q_kvar", st.interface_q * base},
           {"loss_p_kw", st.losses_p * base}});
  return kOk;
}

int cmd_opf(const Options& o) {
  auto n = load_net(o);
  auto units = load_units(o, n);
  double base = n.base_kw();
  flexopf::FlexOpfSolver solver(n, units, solver_options(o, base));
  flexopf::FlexRequest req{o.dp_kw / base, o.dq_kvar / base};
  auto res = solver.solve(req);

  json out;
  out["format_version"] = 1;
  out["status"] = flexopf::to_string(res.status);
  out["request"] = {{"dp_kw", o.dp_kw}, {"dq_kvar", o.dq_kvar}};
  out["base_interface"] = {{"p_kw", solver.base().p * base},
                           {"q_kvar", solver.base().q * base}};
  out["cost_usd"] = res.cost;
  out["interface_err_kva"] = res.interface_error * base;
  out["max_violation_pu"] = res.max_violation;
  out["restarts"] = res.restarts_used;
  json dispatch = json::array();
  for (std::size_t k = 0; k < units.size(); ++k) {
    const auto& u = units[k];
    json d;
    d["unit"] = u.name;
    d["bus"] = u.bus;
    if (res.dispatch.size() == units.size()) {
      d["p_kw"] = res.dispatch.p[k] * base;
      d["q_kvar"] = res.dispatch.q[k] * base;
      d["dp_kw"] = (res.dispatch.p[k] - u.p0) * base;
      d["dq_kvar"] = (res.dispatch.q[k] - u.q0) * base;
    }
    dispatch.push_back(std::move(d));
  }
  out["dispatch"] = std::move(dispatch);
  if (!res.state.empty()) {
    double vmin = res.state.v[0];
    int arg = 0;
    for (int b = 1; b < n.n_buses(); ++b)
      if (res.state.v[b] < vmin) {
        vmin = res.state.v[b];
        arg = b;
      }
    out["vmin_pu"] = std::sqrt(vmin);
    out["vmin_bus"] = n.buses[arg].id;
  }
  std::cout << out.dump(2) << "\n";
  summary({{"cmd", "opf"},
           {"status", flexopf::to_string(res.status)},
           {"cost_usd", res.cost}});
  return res.status == flexopf::SolveStatus::optimal ? kOk : kNumerical;
}

int cmd_sweep(const Options& o) {
  auto n = load_net(o);
  auto units = load_units(o, n);
  double base = n.base_kw();
  if (o.step_kva <= 0.0) usage_error("--step-kva must be positive");
  double step = o.step_kva / base;

  sweep::GridSpec grid = sweep::default_grid(units, step);
  auto override_range = [&](const std::vector<double>& r, double& lo,
                            double& hi, const char* flag) {
    if (r.empty()) return;
    if (r.size() != 2) usage_error(std::string(flag) + " takes two values");
    lo = r[0] / base;
    hi = r[1] / base;
  };
  override_range(o.dp_range_kw, grid.dp_min, grid.dp_max, "--dp-range");
  override_range(o.dq_range_kw, grid.dq_min, grid.dq_max, "--dq-range");
  grid.validate();

  sweep::SweepMode mode = parse_mode(o.mode);
  if (o.workers < 1) usage_error("--workers must be at least 1");

  sweep::SweepResult resume;
  bool have_resume = false;
  if (!o.resume.empty()) {
    resume = io::read_sweep_csv(o.resume, o.base_kw);
    if (!resume.spec.same_grid(grid))
      throw net::DataError("--resume: " + o.resume +
                           " was swept on a different grid");
    std::uint64_t net_hash = net::file_hash(o.net);
    std::uint64_t units_hash = net::file_hash(o.units);
    if (resume.meta.network_hash != 0 &&
        resume.meta.network_hash != net_hash)
      throw net::DataError("--resume: network file changed since " +
                           o.resume + " was written");
    if (resume.meta.units_hash != 0 && resume.meta.units_hash != units_hash)
      throw net::DataError("--resume: units file changed since " + o.resume +
                           " was written");
    have_resume = true;
  }

  auto t0 = std::chrono::steady_clock::now();
  auto progress = [&](int done, int total) {
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count();
    std::cerr << "\r" << done << "/" << total << " cells";
    if (dt > 0.0)
      std::cerr << " (" << static_cast<int>(done / dt) << " cells/s)";
    std::cerr << std::flush;
  };

  auto res = sweep::run_sweep(n, units, grid, solver_options(o, base), mode,
                              o.workers, have_resume ? &resume : nullptr,
                              progress);
  std::cerr << "\n";
  res.meta.network_file = o.net;
  res.meta.units_file = o.units;
  res.meta.network_hash = net::file_hash(o.net);
  res.meta.units_hash = net::file_hash(o.units);

  std::filesystem::create_directories(o.out_dir);
  auto csv = std::filesystem::path(o.out_dir) / (o.out_name + ".csv");
  io::write_sweep_csv(res, base, csv);
  io::write_sweep_meta(res, base, io::meta_path_for(csv));

  summary({{"cmd", "sweep"},
           {"mode", sweep::to_string(mode)},
           {"cells", grid.n_cells()},
           {"optimal", res.count(flexopf::SolveStatus::optimal)},
           {"infeasible", res.count(flexopf::SolveStatus::infeasible)},
           {"not_converged", res.count(flexopf::SolveStatus::not_converged)},
           {"duration_s", res.meta.duration_s},
           {"csv", csv.string()}});
  return kOk;
}

int cmd_render(const Options& o) {
  if (o.sweep_csv.empty()) usage_error("render needs a sweep CSV");
  auto sw = io::read_sweep_csv(o.sweep_csv, o.base_kw);
  double base = sweep_base_kw(sw, o);

  sweep::SweepResult sf;
  bool have_sf = false;
  if (!o.swapfree_csv.empty()) {
    sf = io::read_sweep_csv(o.swapfree_csv, o.base_kw);
    have_sf = true;
  }
  render::RenderOptions ropts{o.scale_kw, o.cell_px};
  auto files = render::render_heatmaps(sw, base, have_sf ? &sf : nullptr,
                                       ropts, o.out_dir);
  auto overlay = render::render_boundary_overlay(
      sw, base, have_sf ? &sf : nullptr, ropts, o.out_dir);
  files.push_back(overlay);

  json names = json::array();
  for (const auto& f : files) names.push_back(f.string());
  summary({{"cmd", "render"}, {"files", names}});
  return kOk;
}

int cmd_analyze(const Options& o) {
  if (o.sweep_csv.empty()) usage_error("analyze needs a sweep CSV");
  auto full = io::read_sweep_csv(o.sweep_csv, o.base_kw);
  double base = sweep_base_kw(full, o);
  double swap_thr = o.swap_threshold_kw / base;
  double jump_thr = o.jump_threshold_kw / base;

  auto rep = analysis::analyze(full, swap_thr, jump_thr);

  sweep::SweepResult sf;
  analysis::AreaReport rep_sf;
  bool have_sf = false;
  if (!o.swapfree_csv.empty()) {
    sf = io::read_sweep_csv(o.swapfree_csv, o.base_kw);
    if (!sf.spec.same_grid(full.spec))
      throw net::DataError("analyze: the two sweeps use different grids");
    rep_sf = analysis::analyze(sf, swap_thr, jump_thr);
    have_sf = true;
  }

  std::filesystem::create_directories(o.out_dir);
  auto dir = std::filesystem::path(o.out_dir);
  io::write_report_json(rep, full, have_sf ? &rep_sf : nullptr,
                        have_sf ? &sf : nullptr, base, dir / "report.json");
  io::write_swaps_csv(rep.swap_cells, full, base, dir / "swaps.csv");
  io::write_shifts_csv(rep.shift_hotspots, full, base, dir / "shifts.csv");

  json s{{"cmd", "analyze"},
         {"nonconvexity_gap", rep.nonconvexity_gap},
         {"swap_cells", rep.swap_cells.size()},
         {"shift_hotspots", rep.shift_hotspots.size()},
         {"report", (dir / "report.json").string()}};
  if (have_sf) s["swapfree_gap"] = rep_sf.nonconvexity_gap;
  summary(s);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{
      "flexmap: P-Q flexibility maps of radial distribution networks.\n"
      "A JSON file passed via --config supplies option defaults (keys are\n"
      "the long flag names with '-' replaced by '_'); flags override it."};
  app.require_subcommand(1);

  try {
    apply_config(load_config(argc, argv), o);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const json::exception& e) {
    std::cerr << "config: " << e.what() << "\n";
    return kUsage;
  }

  std::string config_path;  // parsed in the pre-scan; registered for help
  app.add_option("--config", config_path, "JSON config file with defaults");

  auto add_solver_flags = [&](CLI::App* c) {
    c->add_option("--interface-tol", o.interface_tol_kva,
                  "interface matching tolerance, kVA");
    c->add_option("--stat-tol", o.stat_tol,
                  "stationarity tolerance (projected-gradient norm, p.u.)");
    c->add_option("--viol-tol", o.viol_tol,
                  "constraint violation tolerance, p.u.");
    c->add_option("--max-restarts", o.max_restarts,
                  "random restarts after the deterministic starts");
    c->add_option("--gradient", o.gradient, "gradient method: adjoint|fd");
    c->add_option("--seed", o.seed, "random-restart seed");
    c->add_option("--config", config_path, "JSON config file with defaults");
  };

  auto* pf = app.add_subcommand(
      "pf", "solve the base power flow; bus voltage and line flow CSV");
  pf->add_option("--net", o.net, "network JSON file");
  pf->add_option("--units", o.units,
                 "units JSON file (initial setpoints injected)");
  pf->add_option("--config", config_path, "JSON config file with defaults");

  auto* opf = app.add_subcommand(
      "opf", "least-cost dispatch for one interface request");
  opf->add_option("--net", o.net, "network JSON file");
  opf->add_option("--units", o.units, "flexible units JSON file");
  opf->add_option("--dp-kw", o.dp_kw, "requested interface P change, kW");
  opf->add_option("--dq-kvar", o.dq_kvar,
                  "requested interface Q change, kVAr");
  add_solver_flags(opf);

  auto* sw = app.add_subcommand(
      "sweep", "solve the flexibility OPF over a grid of requests");
  sw->add_option("--net", o.net, "network JSON file");
  sw->add_option("--units", o.units, "flexible units JSON file");
  sw->add_option("--dp-range", o.dp_range_kw,
                 "interface P range, kW (two values: lo hi)")
      ->expected(2);
  sw->add_option("--dq-range", o.dq_range_kw,
                 "interface Q range, kVAr (two values: lo hi)")
      ->expected(2);
  sw->add_option("--step-kva", o.step_kva, "grid step, kVA");
  sw->add_option("--mode", o.mode, "full | swap-free");
  sw->add_option("--workers", o.workers, "worker threads");
  sw->add_option("--out-dir", o.out_dir, "output directory");
  sw->add_option("--out-name", o.out_name,
                 "output stem: <out-name>.csv + <out-name>_meta.json");
  sw->add_option("--resume", o.resume,
                 "previous sweep CSV; its solved cells are reused");
  sw->add_option("--base-kw", o.base_kw,
                 "kW scale of a --resume CSV without a metadata sidecar");
  add_solver_flags(sw);

  auto* rd = app.add_subcommand("render", "heatmap and boundary SVGs");
  rd->add_option("sweep_csv", o.sweep_csv, "sweep CSV to draw");
  rd->add_option("swapfree_csv", o.swapfree_csv,
                 "swap-free sweep CSV (dashed boundary overlay)");
  rd->add_option("--out-dir", o.out_dir, "output directory");
  rd->add_option("--scale-kw", o.scale_kw,
                 "colour scale limit, kW (0 = shared max |regulation|)");
  rd->add_option("--cell-px", o.cell_px, "pixels per grid cell");
  rd->add_option("--base-kw", o.base_kw,
                 "kW scale of a CSV without a metadata sidecar");
  rd->add_option("--config", config_path, "JSON config file with defaults");

  auto* an = app.add_subcommand(
      "analyze", "nonconvexity report plus swap and shift tables");
  an->add_option("sweep_csv", o.sweep_csv, "full sweep CSV");
  an->add_option("swapfree_csv", o.swapfree_csv,
                 "swap-free sweep CSV for the comparison section");
  an->add_option("--out-dir", o.out_dir, "output directory");
  an->add_option("--swap-threshold-kw", o.swap_threshold_kw,
                 "regulation magnitude that counts as a swap participant");
  an->add_option("--jump-threshold-kw", o.jump_threshold_kw,
                 "setpoint jump between adjacent cells that counts as rapid");
  an->add_option("--base-kw", o.base_kw,
                 "kW scale of a CSV without a metadata sidecar");
  an->add_option("--config", config_path, "JSON config file with defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (pf->parsed()) return cmd_pf(o);
    if (opf->parsed()) return cmd_opf(o);
    if (sw->parsed()) return cmd_sweep(o);
    if (rd->parsed()) return cmd_render(o);
    if (an->parsed()) return cmd_analyze(o);
    std::cerr << app.help();
    return kUsage;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const net::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
}
