#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace flexmap::net {

/// Thrown for malformed input files and model validation failures.
/// The message names the offending element (bus/line/unit id).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct Bus {
  int id = 0;
  // as loaded (external units)
  double load_p_kw = 0.0;
  double load_q_kvar = 0.0;
  double v_min_pu = 0.9;   // voltage magnitude bounds, p.u.
  double v_max_pu = 1.1;
  // derived at finalize()
  double load_p = 0.0;     // p.u.
  double load_q = 0.0;     // p.u.
  double v_min = 0.81;     // squared magnitude, p.u.^2
  double v_max = 1.21;
};

struct Line {
  int from = 0;
  int to = 0;
  double r_ohm = 0.0;
  double x_ohm = 0.0;
  double s_max_kva = -1.0;  // < 0 means unbounded
  // derived at finalize()
  double r = 0.0;           // p.u.
  double x = 0.0;           // p.u.
  double s_max = -1.0;      // p.u., < 0 unbounded
};

/// Slack-rooted orientation of the line graph, built once at finalize().
/// All vectors are indexed by position in RadialNetwork::buses / ::lines.
struct Topology {
  int slack = -1;                            // bus index of the slack
  std::vector<int> parent_line;              // per bus: line feeding it (-1 for slack)
  std::vector<int> parent_bus;               // per bus: upstream bus (-1 for slack)
  std::vector<int> line_parent;              // per line: upstream endpoint (bus index)
  std::vector<int> line_child;               // per line: downstream endpoint (bus index)
  std::vector<std::vector<int>> child_lines; // per bus: lines fed from it
  std::vector<int> bus_order;                // BFS order from slack (slack first)
  std::vector<int> line_order;               // lines, parent side always visited first
};

class RadialNetwork {
 public:
  double base_mva = 0.0;
  double base_kv = 0.0;
  int slack_bus = 0;
  double slack_v_pu = 1.0;  // magnitude, p.u.

  std::vector<Bus> buses;
  std::vector<Line> lines;

  // derived at finalize()
  double slack_v = 1.0;     // squared magnitude, p.u.^2
  Topology topo;

  double base_kw() const { return base_mva * 1000.0; }
  double z_base_ohm() const { return base_kv * base_kv / base_mva; }

  int n_buses() const { return static_cast<int>(buses.size()); }
  int n_lines() const { return static_cast<int>(lines.size()); }

  /// Bus id -> index into buses. Throws DataError for unknown ids.
  int bus_index(int id) const;
  bool has_bus(int id) const { return id_to_index_.count(id) != 0; }

  /// Validates invariants (radiality, references, bounds), converts external
  /// units to p.u. and builds the slack-rooted topology. Must be called after
  /// any direct mutation of buses/lines; load_network() calls it.
  void finalize();

 private:
  std::unordered_map<int, int> id_to_index_;
};

struct FlexUnit {
  std::string name;
  int bus = 0;
  // as loaded (external units)
  double p0_kw = 0.0;
  double q0_kvar = 0.0;
  double p_min_kw = 0.0;
  double p_max_kw = 0.0;
  double q_min_kvar = 0.0;
  double q_max_kvar = 0.0;
  double cost_p_usd_per_kwh = 0.0;
  double cost_q_usd_per_kvarh = 0.0;
  // derived (p.u. on the network base; costs in $/h per p.u. volume)
  double p0 = 0.0, q0 = 0.0;
  double p_min = 0.0, p_max = 0.0, q_min = 0.0, q_max = 0.0;
  double cost_p = 0.0;
  double cost_q = 0.0;
};

RadialNetwork load_network(const std::filesystem::path& path);
RadialNetwork network_from_json(const std::string& text);
std::string network_to_json(const RadialNetwork& net);
void save_network(const RadialNetwork& net, const std::filesystem::path& path);

std::vector<FlexUnit> load_units(const std::filesystem::path& path, const RadialNetwork& net);
std::vector<FlexUnit> units_from_json(const std::string& text, const RadialNetwork& net);
std::string units_to_json(const std::vector<FlexUnit>& units);
void save_units(const std::vector<FlexUnit>& units, const std::filesystem::path& path);

/// Re-derives the p.u. fields of a unit list against a network base.
void finalize_units(std::vector<FlexUnit>& units, const RadialNetwork& net);

/// FNV-1a over a file's bytes; used to stamp sweep outputs with their inputs.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace flexmap::net
