#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexmap/render.hpp"
#include "flexmap/sweep_io.hpp"

using namespace flexmap;
using sweep::GridSpec;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t at = hay.find(needle); at != std::string::npos;
       at = hay.find(needle, at + needle.size()))
    ++n;
  return n;
}

/// Synthetic sweep with n units; all cells start infeasible with no state.
sweep::SweepResult make_sweep(const GridSpec& g, int n_units) {
  sweep::SweepResult sw;
  sw.spec = g;
  sw.n_units = n_units;
  for (int k = 0; k < n_units; ++k)
    sw.unit_names.push_back("U" + std::to_string(k + 1));
  sw.cells.assign(g.n_cells(), {});
  for (auto& c : sw.cells) {
    c.status = flexopf::SolveStatus::infeasible;
    c.solved = true;
  }
  sw.delta_p.assign(static_cast<std::size_t>(g.n_cells()) * n_units, 0.0);
  sw.delta_q.assign(static_cast<std::size_t>(g.n_cells()) * n_units, 0.0);
  sw.meta.base_mva = 10.0;
  sw.meta.base_kv = 12.66;
  sw.meta.network_file = "net.json";
  sw.meta.units_file = "units.json";
  sw.meta.network_hash = 0x0123456789abcdefULL;
  sw.meta.units_hash = 0xfedcba9876543210ULL;
  sw.meta.seed = 42;
  sw.meta.workers = 3;
  sw.meta.timestamp = "2025-01-02T03:04:05Z";
  sw.meta.duration_s = 1.75;
  return sw;
}

void mark_optimal(sweep::SweepResult& sw, int ip, int iq, double cost) {
  auto& c = sw.cells[sw.idx(ip, iq)];
  c.status = flexopf::SolveStatus::optimal;
  c.has_values = true;
  c.solved = true;
  c.cost = cost;
  c.vmin = 0.95;
  c.vmin_bus = 18;
  c.restarts = 1;
  c.interface_err = 1e-9;
}

void set_delta(sweep::SweepResult& sw, int ip, int iq, int unit,
               double dp, double dq) {
  std::size_t at = static_cast<std::size_t>(sw.idx(ip, iq)) * sw.n_units +
                   static_cast<std::size_t>(unit);
  sw.delta_p[at] = dp;
  sw.delta_q[at] = dq;
}

}  // namespace

TEST_CASE("the CSV header is pinned, with one kW/kvar pair per unit") {
  auto sw2 = make_sweep({0, 0.1, 0, 0.1, 0.1}, 2);
  CHECK(io::sweep_csv_header(sw2) ==
        "dp_kw,dq_kvar,status,cost_usd,p_U1_kw,q_U1_kvar,p_U2_kw,q_U2_kvar,"
        "vmin_pu,vmin_bus,restarts,interface_err_kva");

  auto sw4 = make_sweep({0, 0.1, 0, 0.1, 0.1}, 4);
  sw4.unit_names = {"A", "B", "C", "D"};
  CHECK(io::sweep_csv_header(sw4) ==
        "dp_kw,dq_kvar,status,cost_usd,p_A_kw,q_A_kvar,p_B_kw,q_B_kvar,"
        "p_C_kw,q_C_kvar,p_D_kw,q_D_kvar,vmin_pu,vmin_bus,restarts,"
        "interface_err_kva");
}

TEST_CASE("rows iterate dq outer, dp inner, in kW") {
  TempDir dir("flexmap_io_roworder");
  GridSpec g{-0.001, 0.001, 0.0, 0.0005, 0.0005};  // 5x2
  auto sw = make_sweep(g, 1);
  const double base_kw = 10000.0;
  auto csv = dir.path / "sweep.csv";
  io::write_sweep_csv(sw, base_kw, csv);

  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == io::sweep_csv_header(sw));
  std::vector<std::pair<double, double>> seen;
  while (std::getline(in, line)) {
    auto c1 = line.find(',');
    auto c2 = line.find(',', c1 + 1);
    seen.push_back({std::stod(line.substr(0, c1)),
                    std::stod(line.substr(c1 + 1, c2 - c1 - 1))});
  }
  REQUIRE(seen.size() == 10);
  for (int iq = 0; iq < 2; ++iq)
    for (int ip = 0; ip < 5; ++ip) {
      const auto& [dp, dq] = seen[iq * 5 + ip];
      CHECK(dp == doctest::Approx(-10.0 + 5.0 * ip));
      CHECK(dq == doctest::Approx(5.0 * iq));
    }
}

TEST_CASE("a sweep round-trips through CSV plus its metadata sidecar") {
  TempDir dir("flexmap_io_roundtrip");
  GridSpec g{-1.0 / 3.0, 1.0 / 3.0, -0.1, 0.1, 1.0 / 30.0};
  auto sw = make_sweep(g, 2);
  sw.mode = sweep::SweepMode::swap_free;
  sw.meta.base.p = 0.39176771;
  sw.meta.base.q = 0.24351409;
  mark_optimal(sw, 3, 1, 12.3456789012345);
  set_delta(sw, 3, 1, 0, 1.0 / 7.0, -2.0 / 7.0);
  set_delta(sw, 3, 1, 1, -0.05, 0.0625);
  mark_optimal(sw, 0, 0, 0.0);
  sw.cells[sw.idx(1, 0)].status = flexopf::SolveStatus::not_converged;
  sw.cells[sw.idx(1, 0)].interface_err = 0.0123;
  sw.cells[sw.idx(2, 2)].solved = false;  // never ran (e.g. interrupted)
  sw.cells[sw.idx(2, 2)].status = flexopf::SolveStatus::not_converged;

  // power-of-two base: kW <-> p.u. conversion is exact, so the byte-identity
  // check below sees only the writer/reader logic, not decimal noise
  const double base_kw = 8192.0;
  auto csv = dir.path / "run.csv";
  io::write_sweep_csv(sw, base_kw, csv);
  io::write_sweep_meta(sw, base_kw, io::meta_path_for(csv));
  CHECK(io::meta_path_for(csv) == dir.path / "run_meta.json");

  auto rt = io::read_sweep_csv(csv);
  CHECK(rt.spec.same_grid(sw.spec));  // sidecar keeps full precision
  CHECK(rt.mode == sweep::SweepMode::swap_free);
  CHECK(rt.n_units == 2);
  CHECK(rt.unit_names == sw.unit_names);
  CHECK(rt.meta.base_mva == 10.0);
  CHECK(rt.meta.network_hash == sw.meta.network_hash);
  CHECK(rt.meta.units_hash == sw.meta.units_hash);
  CHECK(rt.meta.seed == 42);
  CHECK(rt.meta.timestamp == sw.meta.timestamp);
  CHECK(rt.meta.base.p == doctest::Approx(sw.meta.base.p).epsilon(1e-12));

  REQUIRE(rt.cells.size() == sw.cells.size());
  for (std::size_t c = 0; c < sw.cells.size(); ++c) {
    CAPTURE(c);
    CHECK(rt.cells[c].status == sw.cells[c].status);
    CHECK(rt.cells[c].solved == sw.cells[c].solved);
    CHECK(rt.cells[c].has_values == sw.cells[c].has_values);
    CHECK(rt.cells[c].cost == doctest::Approx(sw.cells[c].cost).epsilon(1e-14));
    CHECK(rt.cells[c].vmin_bus == sw.cells[c].vmin_bus);
    CHECK(rt.cells[c].restarts == sw.cells[c].restarts);
    if (sw.cells[c].solved)
      CHECK(rt.cells[c].interface_err ==
            doctest::Approx(sw.cells[c].interface_err).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < sw.delta_p.size(); ++i) {
    CHECK(rt.delta_p[i] == doctest::Approx(sw.delta_p[i]).epsilon(1e-12));
    CHECK(rt.delta_q[i] == doctest::Approx(sw.delta_q[i]).epsilon(1e-12));
  }

  // writing the reread sweep reproduces the file byte-for-byte
  auto csv2 = dir.path / "run2.csv";
  io::write_sweep_csv(rt, base_kw, csv2);
  CHECK(slurp(csv2) == slurp(csv));
}

TEST_CASE("reading without the sidecar infers the grid from the rows") {
  TempDir dir("flexmap_io_nosidecar");
  GridSpec g{-0.002, 0.002, -0.001, 0.001, 0.001};  // 5x3
  auto sw = make_sweep(g, 1);
  mark_optimal(sw, 2, 1, 1.5);
  const double base_kw = 10000.0;
  auto csv = dir.path / "bare.csv";
  io::write_sweep_csv(sw, base_kw, csv);

  auto rt = io::read_sweep_csv(csv, base_kw);
  CHECK(rt.spec.n_dp() == 5);
  CHECK(rt.spec.n_dq() == 3);
  CHECK(rt.spec.dp_min == doctest::Approx(-0.002).epsilon(1e-12));
  CHECK(rt.spec.step == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(rt.optimal(rt.idx(2, 1)));
  CHECK(rt.cells[rt.idx(2, 1)].cost == doctest::Approx(1.5));

  // without a sidecar the p.u. scale cannot be guessed
  CHECK_THROWS_AS(io::read_sweep_csv(csv), net::DataError);
}

TEST_CASE("malformed sweep CSVs are rejected with data errors") {
  TempDir dir("flexmap_io_malformed");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir.path / name, std::ios::binary);
    out << text;
    return dir.path / name;
  };

  auto bad_header = write("h.csv", "dp_kw,dq_kvar,foo\n1,2,3\n");
  CHECK_THROWS_AS(io::read_sweep_csv(bad_header, 1.0), net::DataError);

  auto empty = write("e.csv", "");
  CHECK_THROWS_AS(io::read_sweep_csv(empty, 1.0), net::DataError);

  std::string head =
      "dp_kw,dq_kvar,status,cost_usd,p_X_kw,q_X_kvar,vmin_pu,vmin_bus,"
      "restarts,interface_err_kva\n";
  auto no_rows = write("n.csv", head);
  CHECK_THROWS_AS(io::read_sweep_csv(no_rows, 1.0), net::DataError);

  auto short_row = write("s.csv", head + "0,0,optimal\n");
  CHECK_THROWS_AS(io::read_sweep_csv(short_row, 1.0), net::DataError);

  auto bad_status =
      write("t.csv", head + "0,0,great,1,0,0,1,1,0,0\n1,0,great,1,0,0,1,1,0,0\n");
  CHECK_THROWS_AS(io::read_sweep_csv(bad_status, 1.0), net::DataError);

  auto off_grid = write("o.csv", head +
                                     "0,0,optimal,1,0,0,1,1,0,0\n"
                                     "1,0,optimal,1,0,0,1,1,0,0\n"
                                     "2.43,0,optimal,1,0,0,1,1,0,0\n");
  CHECK_THROWS_AS(io::read_sweep_csv(off_grid, 1.0), net::DataError);
}

TEST_CASE("report json captures both sweeps and the nesting check") {
  TempDir dir("flexmap_io_report");
  GridSpec g{0.0, 0.3, 0.0, 0.3, 0.1};  // 4x4
  auto full = make_sweep(g, 2);
  auto sf = make_sweep(g, 2);
  for (int iq = 0; iq < 4; ++iq)
    for (int ip = 0; ip < 4; ++ip) {
      mark_optimal(full, ip, iq, 1.0);
      if (ip + iq <= 3) mark_optimal(sf, ip, iq, 1.5);  // strict subset
    }
  auto rep_full = analysis::analyze(full, 1e-3, 0.025);
  auto rep_sf = analysis::analyze(sf, 1e-3, 0.025);

  auto path = dir.path / "report.json";
  io::write_report_json(rep_full, full, &rep_sf, &sf, 10000.0, path);

  auto j = nlohmann::json::parse(slurp(path));
  CHECK(j.at("format_version") == 1);
  CHECK(j.at("full").at("n_optimal") == 16);
  CHECK(j.at("full").at("nonconvexity_gap").get<double>() ==
        doctest::Approx(0.0));
  CHECK(j.at("swap_free").at("n_optimal") == 10);
  CHECK(j.at("swap_free").at("subset_of_full") == true);
  CHECK(j.at("swap_free").at("optimal_cells_not_in_full") == 0);
  CHECK(j.at("swap_free").at("optimal_cells_lost") == 6);
  CHECK(j.at("full").at("hull_kw").size() >= 3);

  // mismatched grids are refused
  auto other = make_sweep({0.0, 0.2, 0.0, 0.3, 0.1}, 2);
  auto rep_other = analysis::nonconvexity_report(other);
  CHECK_THROWS_AS(io::write_report_json(rep_full, full, &rep_other, &other,
                                        10000.0, dir.path / "bad.json"),
                  net::DataError);
}

TEST_CASE("swap and shift tables list names and kW magnitudes") {
  TempDir dir("flexmap_io_tables");
  GridSpec g{0.0, 0.1, 0.0, 0.1, 0.1};  // 2x2
  auto sw = make_sweep(g, 2);
  mark_optimal(sw, 0, 0, 0.0);
  mark_optimal(sw, 1, 0, 1.0);
  set_delta(sw, 1, 0, 0, 0.02, 0.03);
  set_delta(sw, 1, 0, 1, 0.05, -0.03);

  auto swaps = analysis::detect_swaps(sw, 1e-3);
  REQUIRE(swaps.size() == 1);
  io::write_swaps_csv(swaps, sw, 10000.0, dir.path / "swaps.csv");
  auto swaps_text = slurp(dir.path / "swaps.csv");
  CHECK(swaps_text.find("dp_kw,dq_kvar,channel,producers,consumers\n") == 0);
  CHECK(swaps_text.find(",q,U2,U1") != std::string::npos);

  auto shifts = analysis::detect_shifts(sw, 0.01);
  REQUIRE(!shifts.empty());
  io::write_shifts_csv(shifts, sw, 10000.0, dir.path / "shifts.csv");
  auto shifts_text = slurp(dir.path / "shifts.csv");
  CHECK(shifts_text.find("from_dp_kw,from_dq_kvar,to_dp_kw,to_dq_kvar,unit,"
                         "channel,jump_kw_kvar\n") == 0);
  CHECK(count_of(shifts_text, "\n") == shifts.size() + 1);
  CHECK(shifts_text.find("500") != std::string::npos);  // 0.05 p.u. jump
}

TEST_CASE("heatmaps: one SVG per unit and channel, shared diverging scale") {
  TempDir dir("flexmap_render_heatmaps");
  GridSpec g{-0.002, 0.002, -0.001, 0.001, 0.001};  // 5x3
  auto sw = make_sweep(g, 4);
  sw.unit_names = {"A", "B", "C", "D"};
  for (int iq = 0; iq < 3; ++iq)
    for (int ip = 0; ip < 5; ++ip)
      if (ip + iq >= 1) mark_optimal(sw, ip, iq, 1.0);
  set_delta(sw, 2, 1, 0, 0.05, -0.05);  // scale setter: 500 kW
  set_delta(sw, 2, 1, 1, 0.025, 0.0);
  sw.cells[sw.idx(4, 2)].status = flexopf::SolveStatus::not_converged;

  auto files =
      render::render_heatmaps(sw, 10000.0, nullptr, {}, dir.path / "fig");
  REQUIRE(files.size() == 8);
  for (const auto& f : files) {
    CAPTURE(f.string());
    CHECK(std::filesystem::exists(f));
    auto text = slurp(f);
    CHECK(text.find("<svg ") != std::string::npos);
    CHECK(text.find("</svg>") != std::string::npos);
    CHECK(count_of(text, "<rect ") >= 15);   // one per cell plus chrome
    CHECK(text.find("<line ") != std::string::npos);  // cross marker
    CHECK(text.find("#e6b94d") != std::string::npos);  // not_converged cell
    CHECK(text.find("#3f3f3f") != std::string::npos);  // infeasible cell
  }
  CHECK(files[0].filename() == "heatmap_A_p.svg");
  CHECK(files[1].filename() == "heatmap_A_q.svg");
  CHECK(files[7].filename() == "heatmap_D_q.svg");

  // unit A hits the shared +-500 kW scale: saturated red and blue cells
  auto a_p = slurp(files[0]);
  CHECK(a_p.find("#ff0000") != std::string::npos);
  auto a_q = slurp(files[1]);
  CHECK(a_q.find("#0000ff") != std::string::npos);
  // unit B reaches only half the shared scale in P
  auto b_p = slurp(files[2]);
  CHECK(b_p.find("#ff0000") == std::string::npos);
  CHECK(b_p.find("#ff8080") != std::string::npos);

  // rendering is deterministic
  auto again =
      render::render_heatmaps(sw, 10000.0, nullptr, {}, dir.path / "fig2");
  CHECK(slurp(again[0]) == a_p);
}

TEST_CASE("single-unit sweeps produce two heatmaps; zero layers sit mid-scale") {
  TempDir dir("flexmap_render_single");
  GridSpec g{0.0, 0.002, 0.0, 0.001, 0.001};  // 3x2
  auto sw = make_sweep(g, 1);
  for (int iq = 0; iq < 2; ++iq)
    for (int ip = 0; ip < 3; ++ip) mark_optimal(sw, ip, iq, 0.0);

  auto files = render::render_heatmaps(sw, 10000.0, nullptr, {}, dir.path);
  REQUIRE(files.size() == 2);
  for (const auto& f : files) {
    auto text = slurp(f);
    // all-zero regulation: every cell paints the mid-scale colour
    CHECK(count_of(text, "fill=\"#ffffff\"") >= 6);
    CHECK(text.find("#ff0000") == std::string::npos);
    CHECK(text.find("#0000ff") == std::string::npos);
  }
}

TEST_CASE("swap-free boundary overlays dashed on heatmaps and the overlay") {
  TempDir dir("flexmap_render_overlay");
  GridSpec g{-0.002, 0.002, -0.002, 0.002, 0.001};  // 5x5
  auto full = make_sweep(g, 2);
  auto sf = make_sweep(g, 2);
  for (int iq = 0; iq < 5; ++iq)
    for (int ip = 0; ip < 5; ++ip) {
      mark_optimal(full, ip, iq, 1.0);
      if (std::abs(ip - 2) + std::abs(iq - 2) <= 1) mark_optimal(sf, ip, iq, 1.0);
    }

  auto files = render::render_heatmaps(full, 10000.0, &sf, {}, dir.path);
  auto text = slurp(files[0]);
  CHECK(text.find("stroke-dasharray") != std::string::npos);
  CHECK(text.find("<polyline ") != std::string::npos);

  auto overlay = render::render_boundary_overlay(full, 10000.0, &sf, {},
                                                 dir.path);
  CHECK(overlay.filename() == "boundary.svg");
  auto otext = slurp(overlay);
  CHECK(count_of(otext, "<polyline ") >= 1);
  CHECK(otext.find("stroke-dasharray") != std::string::npos);

  // grid mismatch is refused
  auto other = make_sweep({0.0, 0.002, 0.0, 0.002, 0.001}, 2);
  CHECK_THROWS_AS(
      render::render_heatmaps(full, 10000.0, &other, {}, dir.path),
      net::DataError);
}
