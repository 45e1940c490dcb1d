#include "flexmap/net_model.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace flexmap::net {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

[[noreturn]] void fail(const std::string& msg) { throw DataError(msg); }

void require_finite(double value, const std::string& what) {
  if (!std::isfinite(value)) fail(what + " is not finite");
}

json parse_json(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) fail("failed to parse " + what + ": invalid JSON");
  return j;
}

void check_version(const json& j, const std::string& what) {
  if (!j.contains("format_version") || !j["format_version"].is_number_integer())
    fail(what + ": missing format_version");
  int v = j["format_version"].get<int>();
  if (v != kFormatVersion)
    fail(what + ": unsupported format_version " + std::to_string(v));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  out << text;
}

}  // namespace

int RadialNetwork::bus_index(int id) const {
  auto it = id_to_index_.find(id);
  if (it == id_to_index_.end())
    fail("unknown bus id " + std::to_string(id));
  return it->second;
}

void RadialNetwork::finalize() {
  if (buses.empty()) fail("network has no buses");
  if (!(base_mva > 0.0)) fail("base_mva must be positive");
  if (!(base_kv > 0.0)) fail("base_kv must be positive");
  if (!(slack_v_pu > 0.0) || !std::isfinite(slack_v_pu))
    fail("slack_v must be positive");
  slack_v = slack_v_pu * slack_v_pu;

  id_to_index_.clear();
  for (int i = 0; i < n_buses(); ++i) {
    Bus& b = buses[i];
    if (id_to_index_.count(b.id))
      fail("duplicate bus id " + std::to_string(b.id));
    id_to_index_[b.id] = i;
    require_finite(b.load_p_kw, "bus " + std::to_string(b.id) + " load_p");
    require_finite(b.load_q_kvar, "bus " + std::to_string(b.id) + " load_q");
    if (!(b.v_min_pu > 0.0 && b.v_min_pu < b.v_max_pu))
      fail("bus " + std::to_string(b.id) +
           ": voltage bounds must satisfy 0 < v_min < v_max");
    b.load_p = b.load_p_kw / base_kw();
    b.load_q = b.load_q_kvar / base_kw();
    b.v_min = b.v_min_pu * b.v_min_pu;
    b.v_max = b.v_max_pu * b.v_max_pu;
  }
  if (!has_bus(slack_bus))
    fail("slack bus " + std::to_string(slack_bus) + " does not exist");

  const double z_base = z_base_ohm();
  for (std::size_t li = 0; li < lines.size(); ++li) {
    Line& l = lines[li];
    const std::string tag =
        "line " + std::to_string(l.from) + "-" + std::to_string(l.to);
    if (!has_bus(l.from)) fail(tag + ": dangling reference to bus " +
                               std::to_string(l.from));
    if (!has_bus(l.to)) fail(tag + ": dangling reference to bus " +
                             std::to_string(l.to));
    if (l.from == l.to) fail(tag + ": self-loop");
    require_finite(l.r_ohm, tag + " r");
    require_finite(l.x_ohm, tag + " x");
    if (l.r_ohm < 0.0 || l.x_ohm < 0.0) fail(tag + ": negative impedance");
    if (l.r_ohm == 0.0 && l.x_ohm == 0.0) fail(tag + ": r and x both zero");
    if (l.s_max_kva >= 0.0 && !(l.s_max_kva > 0.0))
      fail(tag + ": s_max must be positive when present");
    l.r = l.r_ohm / z_base;
    l.x = l.x_ohm / z_base;
    l.s_max = l.s_max_kva > 0.0 ? l.s_max_kva / base_kw() : -1.0;
  }

  // radiality: |L| = |K| - 1 and connected from the slack
  if (n_lines() != n_buses() - 1)
    fail("not radial: " + std::to_string(n_lines()) + " lines for " +
         std::to_string(n_buses()) + " buses (expected " +
         std::to_string(n_buses() - 1) + ")");

  Topology t;
  t.slack = bus_index(slack_bus);
  t.parent_line.assign(n_buses(), -1);
  t.parent_bus.assign(n_buses(), -1);
  t.line_parent.assign(n_lines(), -1);
  t.line_child.assign(n_lines(), -1);
  t.child_lines.assign(n_buses(), {});
  t.bus_order.reserve(n_buses());
  t.line_order.reserve(n_lines());

  std::vector<std::vector<std::pair<int, int>>> adj(n_buses());  // (bus, line)
  for (int li = 0; li < n_lines(); ++li) {
    int a = bus_index(lines[li].from);
    int b = bus_index(lines[li].to);
    adj[a].push_back({b, li});
    adj[b].push_back({a, li});
  }

  std::vector<char> seen(n_buses(), 0);
  std::deque<int> queue{t.slack};
  seen[t.slack] = 1;
  while (!queue.empty()) {
    int b = queue.front();
    queue.pop_front();
    t.bus_order.push_back(b);
    for (auto [nb, li] : adj[b]) {
      if (seen[nb]) continue;  // with |L| == |K|-1 a revisit cannot occur
      seen[nb] = 1;
      t.parent_bus[nb] = b;
      t.parent_line[nb] = li;
      t.line_parent[li] = b;
      t.line_child[li] = nb;
      t.child_lines[b].push_back(li);
      t.line_order.push_back(li);
      queue.push_back(nb);
    }
  }
  for (int i = 0; i < n_buses(); ++i)
    if (!seen[i])
      fail("not radial: bus " + std::to_string(buses[i].id) +
           " is disconnected from the slack (cycle elsewhere)");

  topo = std::move(t);
}

RadialNetwork network_from_json(const std::string& text) {
  json j = parse_json(text, "network file");
  check_version(j, "network file");
  RadialNetwork net;
  try {
    net.base_mva = j.at("base_mva").get<double>();
    net.base_kv = j.at("base_kv").get<double>();
    net.slack_bus = j.at("slack_bus").get<int>();
    net.slack_v_pu = j.value("slack_v", 1.0);
    for (const auto& jb : j.at("buses")) {
      Bus b;
      b.id = jb.at("id").get<int>();
      b.load_p_kw = jb.value("load_p_kw", 0.0);
      b.load_q_kvar = jb.value("load_q_kvar", 0.0);
      b.v_min_pu = jb.value("v_min_pu", 0.9);
      b.v_max_pu = jb.value("v_max_pu", 1.1);
      net.buses.push_back(b);
    }
    for (const auto& jl : j.at("lines")) {
      Line l;
      l.from = jl.at("from").get<int>();
      l.to = jl.at("to").get<int>();
      l.r_ohm = jl.at("r_ohm").get<double>();
      l.x_ohm = jl.at("x_ohm").get<double>();
      l.s_max_kva = jl.value("s_max_kva", -1.0);
      net.lines.push_back(l);
    }
  } catch (const json::exception& e) {
    fail(std::string("network file: ") + e.what());
  }
  net.finalize();
  return net;
}

RadialNetwork load_network(const std::filesystem::path& path) {
  return network_from_json(read_file(path));
}

std::string network_to_json(const RadialNetwork& net) {
  json j;
  j["format_version"] = kFormatVersion;
  j["base_mva"] = net.base_mva;
  j["base_kv"] = net.base_kv;
  j["slack_bus"] = net.slack_bus;
  j["slack_v"] = net.slack_v_pu;
  j["buses"] = json::array();
  for (const Bus& b : net.buses) {
    json jb{{"id", b.id},
            {"load_p_kw", b.load_p_kw},
            {"load_q_kvar", b.load_q_kvar},
            {"v_min_pu", b.v_min_pu},
            {"v_max_pu", b.v_max_pu}};
    j["buses"].push_back(jb);
  }
  j["lines"] = json::array();
  for (const Line& l : net.lines) {
    json jl{{"from", l.from},
            {"to", l.to},
            {"r_ohm", l.r_ohm},
            {"x_ohm", l.x_ohm}};
    if (l.s_max_kva > 0.0) jl["s_max_kva"] = l.s_max_kva;
    j["lines"].push_back(jl);
  }
  return j.dump(2) + "\n";
}

void save_network(const RadialNetwork& net, const std::filesystem::path& path) {
  write_file(path, network_to_json(net));
}

void finalize_units(std::vector<FlexUnit>& units, const RadialNetwork& net) {
  const double base_kw = net.base_kw();
  for (FlexUnit& u : units) {
    const std::string tag = "unit " + u.name;
    if (!net.has_bus(u.bus))
      fail(tag + ": unknown bus " + std::to_string(u.bus));
    for (double v : {u.p0_kw, u.q0_kvar, u.p_min_kw, u.p_max_kw, u.q_min_kvar,
                     u.q_max_kvar})
      require_finite(v, tag + " parameter");
    if (u.p_min_kw > u.p_max_kw) fail(tag + ": inverted P box (min > max)");
    if (u.q_min_kvar > u.q_max_kvar) fail(tag + ": inverted Q box (min > max)");
    if (!(u.p0_kw >= u.p_min_kw && u.p0_kw <= u.p_max_kw))
      fail(tag + ": p0 outside regulation box");
    if (!(u.q0_kvar >= u.q_min_kvar && u.q0_kvar <= u.q_max_kvar))
      fail(tag + ": q0 outside regulation box");
    if (!(u.cost_p_usd_per_kwh > 0.0)) fail(tag + ": cost_p must be > 0");
    if (!(u.cost_q_usd_per_kvarh > 0.0)) fail(tag + ": cost_q must be > 0");
    u.p0 = u.p0_kw / base_kw;
    u.q0 = u.q0_kvar / base_kw;
    u.p_min = u.p_min_kw / base_kw;
    u.p_max = u.p_max_kw / base_kw;
    u.q_min = u.q_min_kvar / base_kw;
    u.q_max = u.q_max_kvar / base_kw;
    // $/h per p.u. of regulation volume
    u.cost_p = u.cost_p_usd_per_kwh * base_kw;
    u.cost_q = u.cost_q_usd_per_kvarh * base_kw;
  }
}

std::vector<FlexUnit> units_from_json(const std::string& text,
                                      const RadialNetwork& net) {
  json j = parse_json(text, "units file");
  check_version(j, "units file");
  std::vector<FlexUnit> units;
  try {
    for (const auto& ju : j.at("units")) {
      FlexUnit u;
      u.name = ju.at("name").get<std::string>();
      u.bus = ju.at("bus").get<int>();
      u.p0_kw = ju.value("p0_kw", 0.0);
      u.q0_kvar = ju.value("q0_kvar", 0.0);
      u.p_min_kw = ju.at("p_min_kw").get<double>();
      u.p_max_kw = ju.at("p_max_kw").get<double>();
      u.q_min_kvar = ju.at("q_min_kvar").get<double>();
      u.q_max_kvar = ju.at("q_max_kvar").get<double>();
      u.cost_p_usd_per_kwh = ju.at("cost_p_usd_per_kwh").get<double>();
      u.cost_q_usd_per_kvarh = ju.at("cost_q_usd_per_kvarh").get<double>();
      units.push_back(std::move(u));
    }
  } catch (const json::exception& e) {
    fail(std::string("units file: ") + e.what());
  }
  finalize_units(units, net);
  return units;
}

std::vector<FlexUnit> load_units(const std::filesystem::path& path,
                                 const RadialNetwork& net) {
  return units_from_json(read_file(path), net);
}

std::string units_to_json(const std::vector<FlexUnit>& units) {
  json j;
  j["format_version"] = kFormatVersion;
  j["units"] = json::array();
  for (const FlexUnit& u : units) {
    j["units"].push_back({{"name", u.name},
                          {"bus", u.bus},
                          {"p0_kw", u.p0_kw},
                          {"q0_kvar", u.q0_kvar},
                          {"p_min_kw", u.p_min_kw},
                          {"p_max_kw", u.p_max_kw},
                          {"q_min_kvar", u.q_min_kvar},
                          {"q_max_kvar", u.q_max_kvar},
                          {"cost_p_usd_per_kwh", u.cost_p_usd_per_kwh},
                          {"cost_q_usd_per_kvarh", u.cost_q_usd_per_kvarh}});
  }
  return j.dump(2) + "\n";
}

void save_units(const std::vector<FlexUnit>& units,
                const std::filesystem::path& path) {
  write_file(path, units_to_json(units));
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace flexmap::net
