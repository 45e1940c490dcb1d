#include "flexmap/sweep_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <system_error>

#include "json.hpp"

namespace flexmap::io {

namespace {

using nlohmann::json;

/// Shortest decimal that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || p != s.data() + s.size())
    throw net::DataError("bad hash '" + s + "'");
  return v;
}

[[noreturn]] void fail(const std::string& msg) { throw net::DataError(msg); }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  return out;
}

double parse_num(const std::string& field, const std::string& what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || p != field.data() + field.size())
    fail(what + ": bad number '" + field + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

const char* channel_name(sweep::Channel ch) {
  return ch == sweep::Channel::p ? "p" : "q";
}

json grid_json(const sweep::GridSpec& g) {
  return {{"dp_min", g.dp_min},
          {"dp_max", g.dp_max},
          {"dq_min", g.dq_min},
          {"dq_max", g.dq_max},
          {"step", g.step}};
}

sweep::GridSpec grid_from_json(const json& j) {
  sweep::GridSpec g;
  g.dp_min = j.at("dp_min").get<double>();
  g.dp_max = j.at("dp_max").get<double>();
  g.dq_min = j.at("dq_min").get<double>();
  g.dq_max = j.at("dq_max").get<double>();
  g.step = j.at("step").get<double>();
  return g;
}

json report_side(const analysis::AreaReport& rep,
                 const sweep::SweepResult& sw, double base_kw) {
  json side;
  side["n_cells"] = sw.spec.n_cells();
  side["n_optimal"] = sw.count(flexopf::SolveStatus::optimal);
  side["n_infeasible"] = sw.count(flexopf::SolveStatus::infeasible);
  side["n_not_converged"] = sw.count(flexopf::SolveStatus::not_converged);
  side["feasible_area_pu2"] = rep.feasible_area;
  side["hull_area_pu2"] = rep.hull_area;
  side["nonconvexity_gap"] = rep.nonconvexity_gap;
  side["n_hull_infeasible_cells"] = rep.hull_infeasible_cells.size();
  side["n_swap_cells"] = rep.swap_cells.size();
  side["n_shift_hotspots"] = rep.shift_hotspots.size();
  json hull = json::array();
  for (const auto& v : rep.hull)
    hull.push_back({v.x * base_kw, v.y * base_kw});
  side["hull_kw"] = std::move(hull);
  // detail list capped to keep the report readable; the count above is exact
  constexpr std::size_t kMaxCells = 512;
  json cells = json::array();
  for (std::size_t i = 0;
       i < rep.hull_infeasible_cells.size() && i < kMaxCells; ++i) {
    const auto& c = rep.hull_infeasible_cells[i];
    cells.push_back({{"ip", c.ip},
                     {"iq", c.iq},
                     {"dp_kw", c.dp * base_kw},
                     {"dq_kvar", c.dq * base_kw}});
  }
  side["hull_infeasible_cells"] = std::move(cells);
  side["hull_infeasible_truncated"] =
      rep.hull_infeasible_cells.size() > kMaxCells;
  return side;
}

}  // namespace

std::string sweep_csv_header(const sweep::SweepResult& sweep) {
  std::string h = "dp_kw,dq_kvar,status,cost_usd";
  for (const auto& name : sweep.unit_names)
    h += ",p_" + name + "_kw,q_" + name + "_kvar";
  h += ",vmin_pu,vmin_bus,restarts,interface_err_kva";
  return h;
}

void write_sweep_csv(const sweep::SweepResult& sweep, double base_kw,
                     const std::filesystem::path& path) {
  auto out = open_out(path);
  out << sweep_csv_header(sweep) << '\n';
  const auto& g = sweep.spec;
  for (int iq = 0; iq < g.n_dq(); ++iq)
    for (int ip = 0; ip < g.n_dp(); ++ip) {
      int c = sweep.idx(ip, iq);
      const auto& cell = sweep.cells[c];
      out << fmt(g.dp_at(ip) * base_kw) << ',' << fmt(g.dq_at(iq) * base_kw)
          << ',';
      if (cell.solved) out << flexopf::to_string(cell.status);
      out << ',';
      if (cell.has_values) out << fmt(cell.cost);
      for (int k = 0; k < sweep.n_units; ++k) {
        std::size_t at = static_cast<std::size_t>(c) * sweep.n_units + k;
        out << ',';
        if (cell.has_values) out << fmt(sweep.delta_p[at] * base_kw);
        out << ',';
        if (cell.has_values) out << fmt(sweep.delta_q[at] * base_kw);
      }
      out << ',';
      if (cell.has_values) out << fmt(cell.vmin);
      out << ',';
      if (cell.has_values) out << cell.vmin_bus;
      out << ',';
      if (cell.solved)
        out << cell.restarts << ',' << fmt(cell.interface_err * base_kw);
      else
        out << ',';
      out << '\n';
    }
  if (!out) fail("failed writing " + path.string());
}

std::string sweep_meta_json(const sweep::SweepResult& sweep, double base_kw) {
  const auto& m = sweep.meta;
  json j;
  j["format_version"] = 1;
  j["kind"] = "flexmap_sweep";
  j["grid"] = grid_json(sweep.spec);
  j["mode"] = sweep::to_string(sweep.mode);
  j["units"] = sweep.unit_names;
  j["base_kw"] = base_kw;
  j["base_mva"] = m.base_mva;
  j["base_kv"] = m.base_kv;
  j["base_interface"] = {{"p_kw", m.base.p * base_kw},
                         {"q_kvar", m.base.q * base_kw}};
  j["network_file"] = m.network_file;
  j["units_file"] = m.units_file;
  j["network_hash"] = hex64(m.network_hash);
  j["units_hash"] = hex64(m.units_hash);
  j["seed"] = m.seed;
  j["workers"] = m.workers;
  j["timestamp"] = m.timestamp;
  j["duration_s"] = m.duration_s;
  return j.dump(2) + "\n";
}

void write_sweep_meta(const sweep::SweepResult& sweep, double base_kw,
                      const std::filesystem::path& path) {
  auto out = open_out(path);
  out << sweep_meta_json(sweep, base_kw);
  if (!out) fail("failed writing " + path.string());
}

std::filesystem::path meta_path_for(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_filename(csv_path.stem().string() + "_meta.json");
  return p;
}

sweep::SweepResult read_sweep_csv(const std::filesystem::path& csv_path,
                                  double base_kw) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) fail("cannot read " + csv_path.string());

  std::string line;
  if (!std::getline(in, line)) fail(csv_path.string() + ": empty file");
  auto header = split_csv(line);
  if (header.size() < 8 || header[0] != "dp_kw" || header[1] != "dq_kvar" ||
      header[2] != "status" || header[3] != "cost_usd")
    fail(csv_path.string() + ": unrecognised sweep CSV header");
  std::size_t tail = header.size() - 4;  // vmin_pu,vmin_bus,restarts,err
  if (header[tail] != "vmin_pu" || header.back() != "interface_err_kva" ||
      (tail - 4) % 2 != 0)
    fail(csv_path.string() + ": unrecognised sweep CSV header");

  sweep::SweepResult sw;
  sw.n_units = static_cast<int>((tail - 4) / 2);
  for (int k = 0; k < sw.n_units; ++k) {
    const std::string& col = header[4 + 2 * k];
    if (col.size() < 5 || col.substr(0, 2) != "p_" ||
        col.substr(col.size() - 3) != "_kw")
      fail(csv_path.string() + ": bad unit column '" + col + "'");
    sw.unit_names.push_back(col.substr(2, col.size() - 5));
  }

  // the sidecar carries the exact grid and scale; fall back to inferring
  // them from the rows when it is missing
  auto meta_path = meta_path_for(csv_path);
  bool have_meta = std::filesystem::exists(meta_path);
  if (have_meta) {
    std::ifstream min(meta_path, std::ios::binary);
    json j;
    try {
      j = json::parse(min);
    } catch (const json::exception& e) {
      fail(meta_path.string() + ": " + e.what());
    }
    try {
      if (j.at("format_version").get<int>() != 1)
        fail(meta_path.string() + ": unsupported format_version");
      sw.spec = grid_from_json(j.at("grid"));
      base_kw = j.at("base_kw").get<double>();
      std::string mode = j.at("mode").get<std::string>();
      sw.mode = mode == "swap_free" ? sweep::SweepMode::swap_free
                                    : sweep::SweepMode::full;
      auto names = j.at("units").get<std::vector<std::string>>();
      if (names != sw.unit_names)
        fail(meta_path.string() + ": unit list does not match the CSV");
      sw.meta.base_mva = j.value("base_mva", 0.0);
      sw.meta.base_kv = j.value("base_kv", 0.0);
      if (j.contains("base_interface")) {
        sw.meta.base.p = j["base_interface"].value("p_kw", 0.0) / base_kw;
        sw.meta.base.q = j["base_interface"].value("q_kvar", 0.0) / base_kw;
      }
      sw.meta.network_file = j.value("network_file", "");
      sw.meta.units_file = j.value("units_file", "");
      sw.meta.network_hash = parse_hex64(j.value("network_hash", "0"));
      sw.meta.units_hash = parse_hex64(j.value("units_hash", "0"));
      sw.meta.seed = j.value("seed", std::uint64_t{0});
      sw.meta.workers = j.value("workers", 1);
      sw.meta.timestamp = j.value("timestamp", "");
      sw.meta.duration_s = j.value("duration_s", 0.0);
    } catch (const json::exception& e) {
      fail(meta_path.string() + ": " + e.what());
    }
  }

  struct Row {
    double dp = 0.0, dq = 0.0;
    std::vector<std::string> fields;
  };
  std::vector<Row> rows;
  double dp_lo = 0.0, dp_hi = 0.0, dq_lo = 0.0, dq_hi = 0.0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Row r;
    r.fields = split_csv(line);
    if (r.fields.size() != header.size())
      fail(csv_path.string() + ": row with " +
           std::to_string(r.fields.size()) + " fields, expected " +
           std::to_string(header.size()));
    r.dp = parse_num(r.fields[0], "dp_kw");
    r.dq = parse_num(r.fields[1], "dq_kvar");
    if (rows.empty()) {
      dp_lo = dp_hi = r.dp;
      dq_lo = dq_hi = r.dq;
    } else {
      dp_lo = std::min(dp_lo, r.dp);
      dp_hi = std::max(dp_hi, r.dp);
      dq_lo = std::min(dq_lo, r.dq);
      dq_hi = std::max(dq_hi, r.dq);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) fail(csv_path.string() + ": no data rows");

  if (!have_meta) {
    if (base_kw <= 0.0)
      fail(csv_path.string() +
           ": no metadata sidecar; base_kw must be supplied");
    // smallest positive spacing between distinct axis values is the step
    double step_kw = 0.0;
    double scale = std::max({1.0, std::abs(dp_lo), std::abs(dp_hi),
                             std::abs(dq_lo), std::abs(dq_hi)});
    auto note_gap = [&](double gap) {
      if (gap > 1e-9 * scale && (step_kw == 0.0 || gap < step_kw))
        step_kw = gap;
    };
    std::vector<double> dps, dqs;
    for (const auto& r : rows) {
      dps.push_back(r.dp);
      dqs.push_back(r.dq);
    }
    std::sort(dps.begin(), dps.end());
    std::sort(dqs.begin(), dqs.end());
    for (std::size_t i = 1; i < dps.size(); ++i) note_gap(dps[i] - dps[i - 1]);
    for (std::size_t i = 1; i < dqs.size(); ++i) note_gap(dqs[i] - dqs[i - 1]);
    if (step_kw == 0.0)
      fail(csv_path.string() + ": cannot infer the grid step from one cell");
    sw.spec = {dp_lo / base_kw, dp_hi / base_kw, dq_lo / base_kw,
               dq_hi / base_kw, step_kw / base_kw};
  }
  sw.spec.validate();

  const auto& g = sw.spec;
  sw.cells.assign(g.n_cells(), {});
  sw.delta_p.assign(static_cast<std::size_t>(g.n_cells()) * sw.n_units, 0.0);
  sw.delta_q.assign(static_cast<std::size_t>(g.n_cells()) * sw.n_units, 0.0);

  for (const auto& r : rows) {
    double fp = (r.dp / base_kw - g.dp_min) / g.step;
    double fq = (r.dq / base_kw - g.dq_min) / g.step;
    int ip = static_cast<int>(std::lround(fp));
    int iq = static_cast<int>(std::lround(fq));
    if (ip < 0 || ip >= g.n_dp() || iq < 0 || iq >= g.n_dq() ||
        std::abs(fp - ip) > 0.01 || std::abs(fq - iq) > 0.01)
      fail(csv_path.string() + ": row (" + r.fields[0] + ", " + r.fields[1] +
           ") lies off the grid");
    int c = sw.idx(ip, iq);
    auto& cell = sw.cells[c];
    const auto& f = r.fields;
    if (!f[2].empty()) {
      cell.solved = true;
      if (f[2] == "optimal")
        cell.status = flexopf::SolveStatus::optimal;
      else if (f[2] == "infeasible")
        cell.status = flexopf::SolveStatus::infeasible;
      else if (f[2] == "not_converged")
        cell.status = flexopf::SolveStatus::not_converged;
      else
        fail(csv_path.string() + ": unknown status '" + f[2] + "'");
    }
    if (!f[3].empty()) {
      cell.has_values = true;
      cell.cost = parse_num(f[3], "cost_usd");
      for (int k = 0; k < sw.n_units; ++k) {
        std::size_t at = static_cast<std::size_t>(c) * sw.n_units + k;
        sw.delta_p[at] = parse_num(f[4 + 2 * k], "p_kw") / base_kw;
        sw.delta_q[at] = parse_num(f[5 + 2 * k], "q_kvar") / base_kw;
      }
      std::size_t t = 4 + 2 * static_cast<std::size_t>(sw.n_units);
      cell.vmin = parse_num(f[t], "vmin_pu");
      cell.vmin_bus = static_cast<int>(parse_num(f[t + 1], "vmin_bus"));
    }
    std::size_t t = 4 + 2 * static_cast<std::size_t>(sw.n_units);
    if (!f[t + 2].empty())
      cell.restarts = static_cast<int>(parse_num(f[t + 2], "restarts"));
    if (!f[t + 3].empty())
      cell.interface_err = parse_num(f[t + 3], "interface_err_kva") / base_kw;
  }
  return sw;
}

void write_report_json(const analysis::AreaReport& full_report,
                       const sweep::SweepResult& full_sweep,
                       const analysis::AreaReport* swapfree_report,
                       const sweep::SweepResult* swapfree_sweep,
                       double base_kw, const std::filesystem::path& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "flexmap_report";
  j["grid"] = grid_json(full_sweep.spec);
  j["base_kw"] = base_kw;
  j["full"] = report_side(full_report, full_sweep, base_kw);
  if (swapfree_report && swapfree_sweep) {
    if (!swapfree_sweep->spec.same_grid(full_sweep.spec))
      fail("report: the two sweeps use different grids");
    json side = report_side(*swapfree_report, *swapfree_sweep, base_kw);
    // nesting check: removing the swap freedom must never add cells
    int extra = 0;
    for (int c = 0; c < full_sweep.spec.n_cells(); ++c)
      if (swapfree_sweep->optimal(c) && !full_sweep.optimal(c)) ++extra;
    side["optimal_cells_not_in_full"] = extra;
    side["subset_of_full"] = extra == 0;
    side["optimal_cells_lost"] =
        full_sweep.count(flexopf::SolveStatus::optimal) -
        swapfree_sweep->count(flexopf::SolveStatus::optimal);
    j["swap_free"] = std::move(side);
  }
  auto out = open_out(path);
  out << j.dump(2) << "\n";
  if (!out) fail("failed writing " + path.string());
}

void write_swaps_csv(const std::vector<analysis::SwapCell>& swaps,
                     const sweep::SweepResult& sweep, double base_kw,
                     const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "dp_kw,dq_kvar,channel,producers,consumers\n";
  auto names = [&](const std::vector<int>& ks) {
    std::string s;
    for (int k : ks) {
      if (!s.empty()) s += '|';
      s += sweep.unit_names[k];
    }
    return s;
  };
  for (const auto& sc : swaps)
    out << fmt(sc.cell.dp * base_kw) << ',' << fmt(sc.cell.dq * base_kw)
        << ',' << channel_name(sc.channel) << ',' << names(sc.producers)
        << ',' << names(sc.consumers) << '\n';
  if (!out) fail("failed writing " + path.string());
}

void write_shifts_csv(const std::vector<analysis::ShiftHotspot>& shifts,
                      const sweep::SweepResult& sweep, double base_kw,
                      const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "from_dp_kw,from_dq_kvar,to_dp_kw,to_dq_kvar,unit,channel,"
         "jump_kw_kvar\n";
  for (const auto& s : shifts)
    out << fmt(s.from.dp * base_kw) << ',' << fmt(s.from.dq * base_kw) << ','
        << fmt(s.to.dp * base_kw) << ',' << fmt(s.to.dq * base_kw) << ','
        << sweep.unit_names[s.unit] << ',' << channel_name(s.channel) << ','
        << fmt(s.jump * base_kw) << '\n';
  if (!out) fail("failed writing " + path.string());
}

}  // namespace flexmap::io
