#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdlib>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vopf/common.hpp"

namespace vopf {

// ---------------------------------------------------------------------------
// Domain types. All quantities per-unit on base_mva, angles in radians.
// ---------------------------------------------------------------------------

struct Bus {
  int index = 0;  // external id from the case file
  double Pd = 0.0, Qd = 0.0;
  double Gs = 0.0, Bs = 0.0;
  double Vmin = 0.9, Vmax = 1.1;
  bool is_reference = false;
};

struct Branch {
  int from = 0, to = 0;  // external bus ids
  double r = 0.0, x = 0.0;
  double b_ch = 0.0;          // total line-charging susceptance
  double tap = 1.0;           // off-nominal turns ratio
  double shift = 0.0;         // phase-shift angle (rad)
  double Smax = 0.0;          // apparent-power rating; 0 = unlimited
  double theta_min = -kInf;   // angle-difference bounds (rad)
  double theta_max = kInf;
};

struct Generator {
  int bus = 0;  // external bus id
  double Pmin = 0.0, Pmax = 0.0;
  double Qmin = 0.0, Qmax = 0.0;
  std::array<double, 3> cost = {0.0, 0.0, 0.0};  // c2, c1, c0 ($/h on MW scale)
};

struct Network {
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  Eigen::MatrixXcd ybus;

  // derived at construction
  int ref_pos = -1;  // internal position of the reference bus
  std::unordered_map<int, int> pos_of_id;

  int n_bus() const { return static_cast<int>(buses.size()); }
  int n_branch() const { return static_cast<int>(branches.size()); }
  int n_gen() const { return static_cast<int>(generators.size()); }

  int pos(int external_id) const {
    auto it = pos_of_id.find(external_id);
    if (it == pos_of_id.end())
      throw ValidationError("unknown bus id " + std::to_string(external_id));
    return it->second;
  }

  /// Internal bus positions that host at least one generator, ascending.
  std::vector<int> gen_bus_positions() const {
    std::vector<char> has(buses.size(), 0);
    for (const auto& g : generators) has[static_cast<std::size_t>(pos(g.bus))] = 1;
    std::vector<int> out;
    for (int i = 0; i < n_bus(); ++i)
      if (has[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
  }
};

struct BranchAdmittance {
  std::complex<double> yff, yft, ytf, ytt;
};

/// Pi-model terminal admittances of one branch, including tap and shift.
inline BranchAdmittance branch_admittance(const Branch& br) {
  if (br.r == 0.0 && br.x == 0.0)
    throw ValidationError("branch " + std::to_string(br.from) + "-" +
                          std::to_string(br.to) + " has zero series impedance");
  const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
  const std::complex<double> ysh(0.0, br.b_ch / 2.0);
  const std::complex<double> t = br.tap * std::exp(std::complex<double>(0.0, br.shift));
  BranchAdmittance a;
  a.yff = (ys + ysh) / (br.tap * br.tap);
  a.ytt = ys + ysh;
  a.yft = -ys / std::conj(t);
  a.ytf = -ys / t;
  return a;
}

/// Complex bus admittance matrix: branch pi-models plus bus shunts.
inline Eigen::MatrixXcd build_ybus(const Network& net) {
  const int n = net.n_bus();
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(n, n);
  for (const auto& br : net.branches) {
    const auto a = branch_admittance(br);
    const int f = net.pos(br.from), t = net.pos(br.to);
    Y(f, f) += a.yff;
    Y(t, t) += a.ytt;
    Y(f, t) += a.yft;
    Y(t, f) += a.ytf;
  }
  for (int i = 0; i < n; ++i)
    Y(i, i) += std::complex<double>(net.buses[static_cast<std::size_t>(i)].Gs,
                                    net.buses[static_cast<std::size_t>(i)].Bs);
  return Y;
}

namespace detail {

inline void check_connectivity_or_throw(const Network& net) {
  const int n = net.n_bus();
  if (n == 0) throw ValidationError("network has no buses");
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& br : net.branches) {
    int f = net.pos(br.from), t = net.pos(br.to);
    adj[static_cast<std::size_t>(f)].push_back(t);
    adj[static_cast<std::size_t>(t)].push_back(f);
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int v : adj[static_cast<std::size_t>(u)])
      if (!seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        stack.push_back(v);
      }
  }
  for (int i = 0; i < n; ++i)
    if (!seen[static_cast<std::size_t>(i)])
      throw ValidationError("isolated bus " +
                            std::to_string(net.buses[static_cast<std::size_t>(i)].index) +
                            " (unreachable from bus " +
                            std::to_string(net.buses[0].index) + ")");
}

}  // namespace detail

/// Builds lookup tables and the admittance matrix, and enforces the
/// structural preconditions every downstream consumer assumes: known bus
/// ids, exactly one reference bus, a connected graph, positive taps.
/// Softer data issues are left to validate_network().
inline Network finalize_network(Network net) {
  net.pos_of_id.clear();
  for (int i = 0; i < net.n_bus(); ++i) {
    const Bus& b = net.buses[static_cast<std::size_t>(i)];
    if (!net.pos_of_id.emplace(b.index, i).second)
      throw ValidationError("duplicate bus id " + std::to_string(b.index));
  }
  net.ref_pos = -1;
  for (int i = 0; i < net.n_bus(); ++i) {
    if (net.buses[static_cast<std::size_t>(i)].is_reference) {
      if (net.ref_pos >= 0)
        throw ValidationError("duplicate reference bus (ids " +
                              std::to_string(net.buses[static_cast<std::size_t>(net.ref_pos)].index) +
                              ", " + std::to_string(net.buses[static_cast<std::size_t>(i)].index) + ")");
      net.ref_pos = i;
    }
  }
  if (net.ref_pos < 0) throw ValidationError("no reference bus");
  for (const auto& br : net.branches) {
    net.pos(br.from);
    net.pos(br.to);
    if (!(br.tap > 0.0))
      throw ValidationError("branch " + std::to_string(br.from) + "-" +
                            std::to_string(br.to) + " has non-positive tap");
  }
  for (const auto& g : net.generators) net.pos(g.bus);
  detail::check_connectivity_or_throw(net);
  net.ybus = build_ybus(net);
  return net;
}

// ---------------------------------------------------------------------------
// MATPOWER case text parser
// ---------------------------------------------------------------------------

namespace detail {

inline std::string strip_comments(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_comment = false;
  for (char c : text) {
    if (c == '%') in_comment = true;
    if (c == '\n') in_comment = false;
    out.push_back(in_comment ? ' ' : c);
  }
  return out;
}

/// Rows of `mpc.<key> = [ ... ];`. Returns nullopt when the key is absent.
inline std::optional<std::vector<std::vector<double>>> find_table(
    const std::string& text, const std::string& key) {
  const std::string needle = "mpc." + key;
  std::size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    std::size_t p = pos + needle.size();
    while (p < text.size() && (text[p] == ' ' || text[p] == '\t')) ++p;
    if (p < text.size() && text[p] == '=') {
      ++p;
      while (p < text.size() && std::isspace(static_cast<unsigned char>(text[p]))) ++p;
      if (p >= text.size() || text[p] != '[')
        throw ParseError("table " + key + ": expected '[' after '='");
      ++p;
      std::size_t end = text.find(']', p);
      if (end == std::string::npos)
        throw ParseError("table " + key + ": missing closing ']'");
      std::vector<std::vector<double>> rows;
      std::vector<double> row;
      std::size_t q = p;
      auto flush_row = [&] {
        if (!row.empty()) {
          rows.push_back(row);
          row.clear();
        }
      };
      while (q < end) {
        char c = text[q];
        if (c == ';' || c == '\n') {
          flush_row();
          ++q;
        } else if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
          ++q;
        } else {
          char* after = nullptr;
          double v = std::strtod(text.c_str() + q, &after);
          if (after == text.c_str() + q)
            throw ParseError("table " + key + ", row " +
                             std::to_string(rows.size() + 1) +
                             ": unexpected token '" + std::string(1, c) + "'");
          row.push_back(v);
          q = static_cast<std::size_t>(after - text.c_str());
        }
      }
      flush_row();
      return rows;
    }
    pos += needle.size();
  }
  return std::nullopt;
}

inline double find_scalar(const std::string& text, const std::string& key) {
  const std::string needle = "mpc." + key;
  std::size_t pos = text.find(needle);
  while (pos != std::string::npos) {
    std::size_t p = pos + needle.size();
    while (p < text.size() && (text[p] == ' ' || text[p] == '\t')) ++p;
    if (p < text.size() && text[p] == '=') {
      ++p;
      char* after = nullptr;
      double v = std::strtod(text.c_str() + p, &after);
      if (after == text.c_str() + p) throw ParseError(key + ": expected a number");
      return v;
    }
    pos = text.find(needle, pos + needle.size());
  }
  throw ParseError("missing mpc." + key);
}

inline void require_cols(const std::vector<double>& row, std::size_t ncols,
                         const std::string& table, std::size_t rownum) {
  if (row.size() < ncols)
    throw ParseError("table " + table + ", row " + std::to_string(rownum) +
                     ": expected at least " + std::to_string(ncols) +
                     " columns, got " + std::to_string(row.size()));
}

/// MATPOWER angle-difference bounds: |bound| >= 360 deg, or the (0, 0)
/// pair, mean unconstrained.
inline std::pair<double, double> angle_bounds_rad(double lo_deg, double hi_deg) {
  if (lo_deg == 0.0 && hi_deg == 0.0) return {-kInf, kInf};
  double lo = lo_deg <= -360.0 ? -kInf : deg2rad(lo_deg);
  double hi = hi_deg >= 360.0 ? kInf : deg2rad(hi_deg);
  return {lo, hi};
}

}  // namespace detail

/// Parses MATPOWER case text (baseMVA/bus/gen/branch/gencost tables) into a
/// validated per-unit Network. Out-of-service branches and generators are
/// dropped; all MW/MVAr/MVA columns divided by baseMVA; degrees to radians.
inline Network parse_matpower(const std::string& source) {
  const std::string text = detail::strip_comments(source);
  Network net;
  net.base_mva = detail::find_scalar(text, "baseMVA");
  if (!(net.base_mva > 0.0)) throw ParseError("baseMVA must be positive");
  const double base = net.base_mva;

  auto bus_tab = detail::find_table(text, "bus");
  if (!bus_tab) throw ParseError("missing mpc.bus table");
  auto gen_tab = detail::find_table(text, "gen");
  if (!gen_tab) throw ParseError("missing mpc.gen table");
  auto branch_tab = detail::find_table(text, "branch");
  if (!branch_tab) throw ParseError("missing mpc.branch table");
  auto cost_tab = detail::find_table(text, "gencost");
  if (!cost_tab) throw ParseError("missing mpc.gencost table");

  for (std::size_t i = 0; i < bus_tab->size(); ++i) {
    const auto& r = (*bus_tab)[i];
    detail::require_cols(r, 13, "bus", i + 1);
    const int type = static_cast<int>(r[1]);
    if (type == 4)
      throw ValidationError("bus " + std::to_string(static_cast<int>(r[0])) +
                            " is marked isolated");
    Bus b;
    b.index = static_cast<int>(r[0]);
    b.Pd = r[2] / base;
    b.Qd = r[3] / base;
    b.Gs = r[4] / base;
    b.Bs = r[5] / base;
    b.Vmax = r[11];
    b.Vmin = r[12];
    b.is_reference = (type == 3);
    net.buses.push_back(b);
  }

  if (cost_tab->size() < gen_tab->size())
    throw ParseError("gencost has " + std::to_string(cost_tab->size()) +
                     " rows for " + std::to_string(gen_tab->size()) + " generators");
  if (cost_tab->size() != gen_tab->size() && cost_tab->size() != 2 * gen_tab->size())
    throw ParseError("gencost must have ngen or 2*ngen rows");

  for (std::size_t i = 0; i < gen_tab->size(); ++i) {
    const auto& r = (*gen_tab)[i];
    detail::require_cols(r, 10, "gen", i + 1);
    if (r[7] <= 0.0) continue;  // out of service
    Generator g;
    g.bus = static_cast<int>(r[0]);
    g.Qmax = r[3] / base;
    g.Qmin = r[4] / base;
    g.Pmax = r[8] / base;
    g.Pmin = r[9] / base;
    const auto& c = (*cost_tab)[i];
    detail::require_cols(c, 4, "gencost", i + 1);
    if (static_cast<int>(c[0]) != 2)
      throw ParseError("gencost row " + std::to_string(i + 1) +
                       ": only polynomial cost model 2 is supported");
    const int ncost = static_cast<int>(c[3]);
    detail::require_cols(c, static_cast<std::size_t>(4 + ncost), "gencost", i + 1);
    if (ncost > 3)
      throw ParseError("gencost row " + std::to_string(i + 1) +
                       ": polynomial degree above quadratic is not supported");
    g.cost = {0.0, 0.0, 0.0};
    for (int k = 0; k < ncost; ++k) g.cost[static_cast<std::size_t>(3 - ncost + k)] = c[static_cast<std::size_t>(4 + k)];
    net.generators.push_back(g);
  }

  for (std::size_t i = 0; i < branch_tab->size(); ++i) {
    const auto& r = (*branch_tab)[i];
    detail::require_cols(r, 13, "branch", i + 1);
    if (r[10] <= 0.0) continue;  // out of service
    Branch br;
    br.from = static_cast<int>(r[0]);
    br.to = static_cast<int>(r[1]);
    br.r = r[2];
    br.x = r[3];
    br.b_ch = r[4];
    br.Smax = r[5] / base;  // 0 stays 0: unlimited
    br.tap = r[8] == 0.0 ? 1.0 : r[8];
    br.shift = deg2rad(r[9]);
    std::tie(br.theta_min, br.theta_max) = detail::angle_bounds_rad(r[11], r[12]);
    net.branches.push_back(br);
  }

  return finalize_network(std::move(net));
}

// ---------------------------------------------------------------------------
// JSON mirror schema (angles in degrees in the file, radians in memory)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json_case(const Network& net) {
  nlohmann::json j;
  j["base_mva"] = net.base_mva;
  auto& buses = j["buses"] = nlohmann::json::array();
  for (const auto& b : net.buses)
    buses.push_back({{"index", b.index},
                     {"Pd", b.Pd},
                     {"Qd", b.Qd},
                     {"Gs", b.Gs},
                     {"Bs", b.Bs},
                     {"Vmin", b.Vmin},
                     {"Vmax", b.Vmax},
                     {"is_reference", b.is_reference}});
  auto& branches = j["branches"] = nlohmann::json::array();
  for (const auto& br : net.branches) {
    double lo = std::isinf(br.theta_min) ? -360.0 : rad2deg_exact(br.theta_min);
    double hi = std::isinf(br.theta_max) ? 360.0 : rad2deg_exact(br.theta_max);
    branches.push_back({{"from", br.from},
                        {"to", br.to},
                        {"r", br.r},
                        {"x", br.x},
                        {"b_ch", br.b_ch},
                        {"tap", br.tap},
                        {"shift", rad2deg_exact(br.shift)},
                        {"Smax", br.Smax},
                        {"theta_min", lo},
                        {"theta_max", hi}});
  }
  auto& gens = j["generators"] = nlohmann::json::array();
  for (const auto& g : net.generators)
    gens.push_back({{"bus", g.bus},
                    {"Pmin", g.Pmin},
                    {"Pmax", g.Pmax},
                    {"Qmin", g.Qmin},
                    {"Qmax", g.Qmax},
                    {"cost", g.cost}});
  return j;
}

inline Network parse_json_case(const std::string& source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(source);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid JSON case: ") + e.what());
  }
  Network net;
  try {
    net.base_mva = j.at("base_mva").get<double>();
    for (const auto& jb : j.at("buses")) {
      Bus b;
      b.index = jb.at("index").get<int>();
      b.Pd = jb.at("Pd").get<double>();
      b.Qd = jb.at("Qd").get<double>();
      b.Gs = jb.at("Gs").get<double>();
      b.Bs = jb.at("Bs").get<double>();
      b.Vmin = jb.at("Vmin").get<double>();
      b.Vmax = jb.at("Vmax").get<double>();
      b.is_reference = jb.at("is_reference").get<bool>();
      net.buses.push_back(b);
    }
    for (const auto& jb : j.at("branches")) {
      Branch br;
      br.from = jb.at("from").get<int>();
      br.to = jb.at("to").get<int>();
      br.r = jb.at("r").get<double>();
      br.x = jb.at("x").get<double>();
      br.b_ch = jb.at("b_ch").get<double>();
      br.tap = jb.at("tap").get<double>();
      br.shift = deg2rad(jb.at("shift").get<double>());
      std::tie(br.theta_min, br.theta_max) = detail::angle_bounds_rad(
          jb.at("theta_min").get<double>(), jb.at("theta_max").get<double>());
      net.branches.push_back(br);
    }
    for (const auto& jg : j.at("generators")) {
      Generator g;
      g.bus = jg.at("bus").get<int>();
      g.Pmin = jg.at("Pmin").get<double>();
      g.Pmax = jg.at("Pmax").get<double>();
      g.Qmin = jg.at("Qmin").get<double>();
      g.Qmax = jg.at("Qmax").get<double>();
      auto c = jg.at("cost");
      if (!c.is_array() || c.size() != 3)
        throw ParseError("generator cost must be [c2, c1, c0]");
      g.cost = {c[0].get<double>(), c[1].get<double>(), c[2].get<double>()};
      net.generators.push_back(g);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("JSON case schema error: ") + e.what());
  }
  return finalize_network(std::move(net));
}

/// Auto-detects MATPOWER text vs the JSON mirror schema.
inline Network parse_case(const std::string& source) {
  for (char c : source) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    return c == '{' ? parse_json_case(source) : parse_matpower(source);
  }
  throw ParseError("empty case source");
}

// ---------------------------------------------------------------------------
// Diagnostics and fingerprint
// ---------------------------------------------------------------------------

/// Non-throwing check of every type invariant plus connectivity; returns one
/// human-readable diagnostic per violation.
inline std::vector<std::string> validate_network(const Network& net) {
  std::vector<std::string> diags;
  auto add = [&](std::string msg) { diags.push_back(std::move(msg)); };

  int refs = 0;
  for (const auto& b : net.buses) {
    if (!(b.Vmin > 0.0)) add("bus " + std::to_string(b.index) + ": Vmin must be positive");
    if (!(b.Vmin <= b.Vmax)) add("bus " + std::to_string(b.index) + ": Vmin > Vmax");
    if (b.is_reference) ++refs;
  }
  if (refs == 0) add("network: no reference bus");
  if (refs > 1) add("network: " + std::to_string(refs) + " reference buses");

  for (const auto& br : net.branches) {
    const std::string name = "branch " + std::to_string(br.from) + "-" + std::to_string(br.to);
    if (br.r == 0.0 && br.x == 0.0) add(name + ": zero series impedance");
    if (!(br.tap > 0.0)) add(name + ": non-positive tap");
    if (!(br.theta_min <= br.theta_max)) add(name + ": theta_min > theta_max");
    if (!(br.Smax >= 0.0)) add(name + ": negative rating");
    if (!net.pos_of_id.count(br.from)) add(name + ": unknown from-bus");
    if (!net.pos_of_id.count(br.to)) add(name + ": unknown to-bus");
  }
  for (const auto& g : net.generators) {
    const std::string name = "generator at bus " + std::to_string(g.bus);
    if (!(g.Pmin <= g.Pmax)) add(name + ": Pmin > Pmax");
    if (!(g.Qmin <= g.Qmax)) add(name + ": Qmin > Qmax");
    if (g.cost[0] < 0.0) add(name + ": negative quadratic cost coefficient");
    if (!net.pos_of_id.count(g.bus)) add(name + ": unknown bus");
  }

  // connectivity, reported as data rather than thrown
  const int n = net.n_bus();
  if (n > 0) {
    std::vector<int> degree(static_cast<std::size_t>(n), 0);
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (const auto& br : net.branches) {
      auto f = net.pos_of_id.find(br.from);
      auto t = net.pos_of_id.find(br.to);
      if (f == net.pos_of_id.end() || t == net.pos_of_id.end()) continue;
      ++degree[static_cast<std::size_t>(f->second)];
      ++degree[static_cast<std::size_t>(t->second)];
      adj[static_cast<std::size_t>(f->second)].push_back(t->second);
      adj[static_cast<std::size_t>(t->second)].push_back(f->second);
    }
    for (int i = 0; i < n; ++i)
      if (degree[static_cast<std::size_t>(i)] == 0)
        add("bus " + std::to_string(net.buses[static_cast<std::size_t>(i)].index) +
            ": isolated (touches no branch)");
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int reached = 1;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      for (int v : adj[static_cast<std::size_t>(u)])
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          ++reached;
          stack.push_back(v);
        }
    }
    if (reached != n)
      add("network: disconnected (" + std::to_string(n - reached) +
          " buses unreachable from bus " + std::to_string(net.buses[0].index) + ")");
  }

  if (net.ybus.rows() != n || net.ybus.cols() != n)
    add("network: ybus dimension mismatch");
  return diags;
}

/// Content hash of the model (canonical JSON, FNV-1a). Used to pair datasets
/// and trained models with the exact case they were produced from.
inline std::string network_fingerprint(const Network& net) {
  return to_hex(fnv1a64(to_json_case(net).dump()));
}

inline bool operator==(const Bus& a, const Bus& b) {
  return a.index == b.index && a.Pd == b.Pd && a.Qd == b.Qd && a.Gs == b.Gs &&
         a.Bs == b.Bs && a.Vmin == b.Vmin && a.Vmax == b.Vmax &&
         a.is_reference == b.is_reference;
}
inline bool operator==(const Branch& a, const Branch& b) {
  return a.from == b.from && a.to == b.to && a.r == b.r && a.x == b.x &&
         a.b_ch == b.b_ch && a.tap == b.tap && a.shift == b.shift &&
         a.Smax == b.Smax && a.theta_min == b.theta_min && a.theta_max == b.theta_max;
}
inline bool operator==(const Generator& a, const Generator& b) {
  return a.bus == b.bus && a.Pmin == b.Pmin && a.Pmax == b.Pmax &&
         a.Qmin == b.Qmin && a.Qmax == b.Qmax && a.cost == b.cost;
}
inline bool operator==(const Network& a, const Network& b) {
  return a.base_mva == b.base_mva && a.buses == b.buses &&
         a.branches == b.branches && a.generators == b.generators;
}

}  // namespace vopf
