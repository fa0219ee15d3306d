#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vopf/acpf.hpp"
#include "vopf/common.hpp"
#include "vopf/netmodel.hpp"
#include "vopf/oracle.hpp"

namespace vopf {

struct Sample {
  Loads loads;
  VoltageState target_state;
  double objective = 0.0;    // $/h
  double oracle_time = 0.0;  // seconds
};

struct Scaler {
  Eigen::VectorXd in_min, in_max;
  bool fitted = false;
};

struct Dataset {
  std::string case_fingerprint;
  std::vector<int> bus_ids;
  std::vector<Sample> samples;
  Scaler scaler;
  std::vector<int> train_idx, test_idx;
  std::uint64_t sample_seed = 0, split_seed = 0;
  double variation = 0.0;
  double solver_tol = 0.0;
  double train_fraction = 0.0;
  int dropped = 0;
};

// ---------------------------------------------------------------------------
// Scenario sampling and labeling
// ---------------------------------------------------------------------------

inline std::vector<Loads> sample_loads(const Network& net, double variation, int count,
                                       std::uint64_t seed) {
  if (variation < 0.0 || variation >= 1.0)
    throw ValidationError("load variation must be in [0, 1)");
  if (count < 0) throw ValidationError("scenario count must be nonnegative");
  Rng rng(seed);
  const Loads nominal = nominal_loads(net);
  std::vector<Loads> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Loads l;
    l.pd.resize(net.n_bus());
    l.qd.resize(net.n_bus());
    for (int i = 0; i < net.n_bus(); ++i) {
      l.pd(i) = nominal.pd(i) * (1.0 - variation + 2.0 * variation * rng.uniform01());
      l.qd(i) = nominal.qd(i) * (1.0 - variation + 2.0 * variation * rng.uniform01());
    }
    out.push_back(std::move(l));
  }
  return out;
}

namespace detail {

/// Max per-bus mismatch between the injections implied by the state and the
/// generation minus load recorded in the solution.
inline double balance_residual(const Network& net, const Loads& loads, const VoltageState& st,
                               const Eigen::VectorXd& pg, const Eigen::VectorXd& qg) {
  const Injection inj = bus_injections(net, st);
  Eigen::VectorXd gp = Eigen::VectorXd::Zero(net.n_bus());
  Eigen::VectorXd gq = Eigen::VectorXd::Zero(net.n_bus());
  for (int g = 0; g < net.n_gen(); ++g) {
    const int i = net.pos(net.generators[static_cast<std::size_t>(g)].bus);
    gp(i) += pg(g);
    gq(i) += qg(g);
  }
  double worst = 0.0;
  for (int i = 0; i < net.n_bus(); ++i) {
    worst = std::max(worst, std::abs(inj.p(i) + loads.pd(i) - gp(i)));
    worst = std::max(worst, std::abs(inj.q(i) + loads.qd(i) - gq(i)));
  }
  return worst;
}

}  // namespace detail

inline Dataset generate_dataset(const Network& net, const std::vector<Loads>& loads,
                                const SolverConfig& solver = {}, int threads = 0) {
  if (loads.empty()) throw ValidationError("no load scenarios to label");
  const int count = static_cast<int>(loads.size());
  if (threads <= 0)
    threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, count);

  std::vector<std::optional<Sample>> slots(static_cast<std::size_t>(count));
  const double recheck_tol = std::max(solver.tol, 1e-6);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int s = next.fetch_add(1);
      if (s >= count) return;
      const Loads& l = loads[static_cast<std::size_t>(s)];
      OpfSolution sol = solve_opf(net, l, solver);
      if (sol.status != SolveStatus::converged) continue;
      if (detail::balance_residual(net, l, sol.state, sol.pg, sol.qg) > recheck_tol) continue;
      Sample smp;
      smp.loads = l;
      smp.target_state = sol.state;
      smp.target_state.va.array() -= sol.state.va(net.ref_pos);
      smp.objective = sol.objective;
      smp.oracle_time = sol.solve_time;
      slots[static_cast<std::size_t>(s)] = std::move(smp);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  Dataset ds;
  ds.case_fingerprint = network_fingerprint(net);
  for (const Bus& b : net.buses) ds.bus_ids.push_back(b.index);
  ds.solver_tol = solver.tol;
  for (auto& slot : slots)
    if (slot) ds.samples.push_back(std::move(*slot));
  ds.dropped = count - static_cast<int>(ds.samples.size());
  if (2 * static_cast<int>(ds.samples.size()) < count) {
    std::ostringstream msg;
    msg << "only " << ds.samples.size() << " of " << count
        << " scenarios produced converged labels";
    throw SolverError(msg.str());
  }
  return ds;
}

inline void split_dataset(Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ValidationError("train fraction must be in (0, 1)");
  const int n = static_cast<int>(ds.samples.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  int ntrain = static_cast<int>(std::llround(train_fraction * n));
  ntrain = std::clamp(ntrain, n > 1 ? 1 : 0, n > 1 ? n - 1 : n);
  ds.train_idx.assign(perm.begin(), perm.begin() + ntrain);
  ds.test_idx.assign(perm.begin() + ntrain, perm.end());
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  std::sort(ds.test_idx.begin(), ds.test_idx.end());
  ds.split_seed = seed;
  ds.train_fraction = train_fraction;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline Eigen::VectorXd input_vector(const Sample& s) {
  Eigen::VectorXd x(s.loads.pd.size() + s.loads.qd.size());
  x << s.loads.pd, s.loads.qd;
  return x;
}

inline Eigen::VectorXd target_vector(const Sample& s) {
  Eigen::VectorXd y(s.target_state.vm.size() + s.target_state.va.size());
  y << (s.target_state.vm.array() - 1.0).matrix(), s.target_state.va;
  return y;
}

inline VoltageState state_from_target(const Eigen::VectorXd& y) {
  const Eigen::Index n = y.size() / 2;
  VoltageState st;
  st.vm = y.head(n).array() + 1.0;
  st.va = y.tail(n);
  return st;
}

inline void fit_scaler(Dataset& ds) {
  if (ds.train_idx.empty()) throw ValidationError("cannot fit scaler before splitting");
  const Eigen::Index dim = input_vector(ds.samples[0]).size();
  ds.scaler.in_min = Eigen::VectorXd::Constant(dim, kInf);
  ds.scaler.in_max = Eigen::VectorXd::Constant(dim, -kInf);
  for (int idx : ds.train_idx) {
    const Eigen::VectorXd x = input_vector(ds.samples[static_cast<std::size_t>(idx)]);
    ds.scaler.in_min = ds.scaler.in_min.cwiseMin(x);
    ds.scaler.in_max = ds.scaler.in_max.cwiseMax(x);
  }
  ds.scaler.fitted = true;
}

inline Eigen::VectorXd apply_scaler(const Scaler& sc, const Eigen::VectorXd& x) {
  if (!sc.fitted) throw ValidationError("scaler has not been fitted");
  if (x.size() != sc.in_min.size()) throw ValidationError("scaler dimension mismatch");
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double span = sc.in_max(i) - sc.in_min(i);
    out(i) = span > 0.0 ? (x(i) - sc.in_min(i)) / span : 0.5;
  }
  return out;
}

inline Eigen::VectorXd invert_scaler(const Scaler& sc, const Eigen::VectorXd& z) {
  if (!sc.fitted) throw ValidationError("scaler has not been fitted");
  if (z.size() != sc.in_min.size()) throw ValidationError("scaler dimension mismatch");
  Eigen::VectorXd out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double span = sc.in_max(i) - sc.in_min(i);
    out(i) = span > 0.0 ? sc.in_min(i) + z(i) * span : sc.in_min(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Hash over everything that influences training: the case, the labeled
/// data, the split, and the scaler. Oracle wall times are excluded so a
/// regenerated dataset with identical config fingerprints identically.
inline std::string dataset_fingerprint(const Dataset& ds) {
  std::ostringstream ss;
  ss << ds.case_fingerprint << '|' << ds.sample_seed << '|' << ds.split_seed << '|'
     << format_g17(ds.variation) << '|' << format_g17(ds.train_fraction) << '|';
  for (const Sample& s : ds.samples) {
    for (Eigen::Index i = 0; i < s.loads.pd.size(); ++i) ss << format_g17(s.loads.pd(i)) << ',';
    for (Eigen::Index i = 0; i < s.loads.qd.size(); ++i) ss << format_g17(s.loads.qd(i)) << ',';
    for (Eigen::Index i = 0; i < s.target_state.vm.size(); ++i)
      ss << format_g17(s.target_state.vm(i)) << ',';
    for (Eigen::Index i = 0; i < s.target_state.va.size(); ++i)
      ss << format_g17(s.target_state.va(i)) << ',';
    ss << format_g17(s.objective) << ';';
  }
  ss << '|';
  for (int i : ds.train_idx) ss << i << ',';
  ss << '|';
  for (int i : ds.test_idx) ss << i << ',';
  ss << '|';
  if (ds.scaler.fitted) {
    for (Eigen::Index i = 0; i < ds.scaler.in_min.size(); ++i)
      ss << format_g17(ds.scaler.in_min(i)) << ',' << format_g17(ds.scaler.in_max(i)) << ',';
  }
  return to_hex(fnv1a64(ss.str()));
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double_field(const std::string& s, const std::string& where) {
  const char* p = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(p, &end);
  if (end == p) throw ParseError("bad numeric field in " + where + ": '" + s + "'");
  return v;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json meta;
  meta["case_fingerprint"] = ds.case_fingerprint;
  meta["sample_seed"] = ds.sample_seed;
  meta["split_seed"] = ds.split_seed;
  meta["variation"] = ds.variation;
  meta["solver_tol"] = ds.solver_tol;
  meta["train_fraction"] = ds.train_fraction;
  meta["dropped"] = ds.dropped;
  meta["train_idx"] = ds.train_idx;
  meta["test_idx"] = ds.test_idx;
  meta["scaler"]["fitted"] = ds.scaler.fitted;
  if (ds.scaler.fitted) {
    meta["scaler"]["in_min"] = std::vector<double>(
        ds.scaler.in_min.data(), ds.scaler.in_min.data() + ds.scaler.in_min.size());
    meta["scaler"]["in_max"] = std::vector<double>(
        ds.scaler.in_max.data(), ds.scaler.in_max.data() + ds.scaler.in_max.size());
  }
  std::ofstream mf(fs::path(dir) / "meta.json", std::ios::binary);
  if (!mf) throw ParseError("cannot write " + dir + "/meta.json");
  mf << meta.dump(2) << '\n';

  std::ofstream cf(fs::path(dir) / "samples.csv", std::ios::binary);
  if (!cf) throw ParseError("cannot write " + dir + "/samples.csv");
  const int n = static_cast<int>(ds.bus_ids.size());
  std::ostringstream header;
  for (int i = 0; i < n; ++i) header << "pd_" << ds.bus_ids[static_cast<std::size_t>(i)] << ',';
  for (int i = 0; i < n; ++i) header << "qd_" << ds.bus_ids[static_cast<std::size_t>(i)] << ',';
  for (int i = 0; i < n; ++i) header << "vm_" << ds.bus_ids[static_cast<std::size_t>(i)] << ',';
  for (int i = 0; i < n; ++i) header << "va_" << ds.bus_ids[static_cast<std::size_t>(i)] << ',';
  header << "objective,oracle_time_s";
  cf << header.str() << '\n';
  for (const Sample& s : ds.samples) {
    std::ostringstream row;
    for (int i = 0; i < n; ++i) row << format_g17(s.loads.pd(i)) << ',';
    for (int i = 0; i < n; ++i) row << format_g17(s.loads.qd(i)) << ',';
    for (int i = 0; i < n; ++i) row << format_g17(s.target_state.vm(i)) << ',';
    for (int i = 0; i < n; ++i) row << format_g17(s.target_state.va(i)) << ',';
    row << format_g17(s.objective) << ',' << format_g17(s.oracle_time);
    cf << row.str() << '\n';
  }
}

inline Dataset read_dataset(const std::string& dir, const Network* expected_case = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "meta.json", std::ios::binary);
  if (!mf) throw ParseError("cannot read " + dir + "/meta.json");
  nlohmann::json meta;
  try {
    mf >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid dataset metadata: ") + e.what());
  }

  Dataset ds;
  try {
    ds.case_fingerprint = meta.at("case_fingerprint").get<std::string>();
    ds.sample_seed = meta.at("sample_seed").get<std::uint64_t>();
    ds.split_seed = meta.at("split_seed").get<std::uint64_t>();
    ds.variation = meta.at("variation").get<double>();
    ds.solver_tol = meta.at("solver_tol").get<double>();
    ds.train_fraction = meta.at("train_fraction").get<double>();
    ds.dropped = meta.at("dropped").get<int>();
    ds.train_idx = meta.at("train_idx").get<std::vector<int>>();
    ds.test_idx = meta.at("test_idx").get<std::vector<int>>();
    const auto& sc = meta.at("scaler");
    ds.scaler.fitted = sc.at("fitted").get<bool>();
    if (ds.scaler.fitted) {
      const auto mn = sc.at("in_min").get<std::vector<double>>();
      const auto mx = sc.at("in_max").get<std::vector<double>>();
      ds.scaler.in_min = Eigen::Map<const Eigen::VectorXd>(mn.data(),
                                                           static_cast<Eigen::Index>(mn.size()));
      ds.scaler.in_max = Eigen::Map<const Eigen::VectorXd>(mx.data(),
                                                           static_cast<Eigen::Index>(mx.size()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset metadata missing field: ") + e.what());
  }
  if (expected_case && network_fingerprint(*expected_case) != ds.case_fingerprint)
    throw ValidationError("dataset was generated from a different case (fingerprint mismatch)");

  std::ifstream cf(fs::path(dir) / "samples.csv", std::ios::binary);
  if (!cf) throw ParseError("cannot read " + dir + "/samples.csv");
  std::string line;
  if (!std::getline(cf, line)) throw ParseError("samples.csv is empty");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header.back() != "oracle_time_s" ||
      header[header.size() - 2] != "objective")
    throw ParseError("samples.csv header must end with objective,oracle_time_s");
  const int n = static_cast<int>((header.size() - 2) / 4);
  if (static_cast<std::size_t>(4 * n + 2) != header.size())
    throw ParseError("samples.csv header has an unexpected column count");
  static const char* kPrefix[4] = {"pd_", "qd_", "vm_", "va_"};
  for (int blk = 0; blk < 4; ++blk) {
    for (int i = 0; i < n; ++i) {
      const std::string& col = header[static_cast<std::size_t>(blk * n + i)];
      if (col.rfind(kPrefix[blk], 0) != 0)
        throw ParseError("samples.csv column '" + col + "' does not start with " + kPrefix[blk]);
      const int id = static_cast<int>(
          detail::parse_double_field(col.substr(3), "samples.csv header"));
      if (blk == 0)
        ds.bus_ids.push_back(id);
      else if (ds.bus_ids[static_cast<std::size_t>(i)] != id)
        throw ParseError("samples.csv column '" + col + "' bus id does not match pd block");
    }
  }

  int lineno = 1;
  while (std::getline(cf, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError("samples.csv line " + std::to_string(lineno) + " has " +
                       std::to_string(f.size()) + " fields, expected " +
                       std::to_string(header.size()));
    const std::string where = "samples.csv line " + std::to_string(lineno);
    Sample s;
    s.loads.pd.resize(n);
    s.loads.qd.resize(n);
    s.target_state.vm.resize(n);
    s.target_state.va.resize(n);
    int c = 0;
    for (int i = 0; i < n; ++i) s.loads.pd(i) = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    for (int i = 0; i < n; ++i) s.loads.qd(i) = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    for (int i = 0; i < n; ++i) s.target_state.vm(i) = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    for (int i = 0; i < n; ++i) s.target_state.va(i) = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    s.objective = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    s.oracle_time = detail::parse_double_field(f[static_cast<std::size_t>(c++)], where);
    ds.samples.push_back(std::move(s));
  }
  for (int idx : ds.train_idx)
    if (idx < 0 || idx >= static_cast<int>(ds.samples.size()))
      throw ParseError("train index out of range in dataset metadata");
  for (int idx : ds.test_idx)
    if (idx < 0 || idx >= static_cast<int>(ds.samples.size()))
      throw ParseError("test index out of range in dataset metadata");
  return ds;
}

/// External scenario file: loads only, in the same pd/qd column layout.
inline std::vector<Loads> read_scenarios(const std::string& path, const Network& net) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read scenario file " + path);
  std::string line;
  if (!std::getline(f, line)) throw ParseError("scenario file is empty");
  const auto header = detail::split_csv_line(line);
  const int n = net.n_bus();
  if (static_cast<int>(header.size()) != 2 * n)
    throw ParseError("scenario header has " + std::to_string(header.size()) +
                     " columns, expected " + std::to_string(2 * n));
  for (int i = 0; i < n; ++i) {
    const std::string want_pd = "pd_" + std::to_string(net.buses[static_cast<std::size_t>(i)].index);
    const std::string want_qd = "qd_" + std::to_string(net.buses[static_cast<std::size_t>(i)].index);
    if (header[static_cast<std::size_t>(i)] != want_pd)
      throw ParseError("scenario column " + std::to_string(i) + " is '" +
                       header[static_cast<std::size_t>(i)] + "', expected '" + want_pd + "'");
    if (header[static_cast<std::size_t>(n + i)] != want_qd)
      throw ParseError("scenario column " + std::to_string(n + i) + " is '" +
                       header[static_cast<std::size_t>(n + i)] + "', expected '" + want_qd + "'");
  }
  std::vector<Loads> out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (static_cast<int>(fields.size()) != 2 * n)
      throw ParseError("scenario line " + std::to_string(lineno) + " has " +
                       std::to_string(fields.size()) + " fields, expected " +
                       std::to_string(2 * n));
    const std::string where = "scenario line " + std::to_string(lineno);
    Loads l;
    l.pd.resize(n);
    l.qd.resize(n);
    for (int i = 0; i < n; ++i)
      l.pd(i) = detail::parse_double_field(fields[static_cast<std::size_t>(i)], where);
    for (int i = 0; i < n; ++i)
      l.qd(i) = detail::parse_double_field(fields[static_cast<std::size_t>(n + i)], where);
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace vopf
