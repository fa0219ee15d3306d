#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "vopf/acpf.hpp"
#include "vopf/netmodel.hpp"

namespace testsup {

inline std::string data_path(const std::string& name) {
  return std::string(VOPF_DATA_DIR) + "/" + name;
}

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline vopf::Network load_case(const std::string& name) {
  return vopf::parse_case(slurp(data_path(name)));
}

/// Two buses joined by one lossless x=0.1 line, generator at bus 1 (slack),
/// optional load at bus 2. Cost (0.01, 40, 0) on the MW scale.
inline std::string two_bus_case(double pd_mw = 0.0, double qd_mvar = 0.0,
                                double rate_mva = 0.0) {
  char buf[1024];
  std::snprintf(buf, sizeof(buf),
                "function mpc = case2\n"
                "mpc.version = '2';\n"
                "mpc.baseMVA = 100;\n"
                "mpc.bus = [\n"
                "\t1\t3\t0\t0\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
                "\t2\t1\t%.17g\t%.17g\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
                "];\n"
                "mpc.gen = [\n"
                "\t1\t0\t0\t80\t-80\t1\t100\t1\t150\t0;\n"
                "];\n"
                "mpc.branch = [\n"
                "\t1\t2\t0\t0.1\t0\t%.17g\t0\t0\t0\t0\t1\t-360\t360;\n"
                "];\n"
                "mpc.gencost = [\n"
                "\t2\t0\t0\t3\t0.01\t40\t0;\n"
                "];\n",
                pd_mw, qd_mvar, rate_mva);
  return buf;
}

inline vopf::Network two_bus_network(double pd_mw = 0.0, double qd_mvar = 0.0,
                                     double rate_mva = 0.0) {
  return vopf::parse_case(two_bus_case(pd_mw, qd_mvar, rate_mva));
}

/// Chain 1-2-3: generator at bus 1, nothing at bus 2, load at bus 3.
inline std::string three_bus_case(double pd_mw = 40.0, double qd_mvar = 10.0) {
  char buf[1280];
  std::snprintf(buf, sizeof(buf),
                "function mpc = case3\n"
                "mpc.version = '2';\n"
                "mpc.baseMVA = 100;\n"
                "mpc.bus = [\n"
                "\t1\t3\t0\t0\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
                "\t2\t1\t0\t0\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
                "\t3\t1\t%.17g\t%.17g\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
                "];\n"
                "mpc.gen = [\n"
                "\t1\t0\t0\t80\t-80\t1\t100\t1\t150\t0;\n"
                "];\n"
                "mpc.branch = [\n"
                "\t1\t2\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
                "\t2\t3\t0.01\t0.08\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
                "];\n"
                "mpc.gencost = [\n"
                "\t2\t0\t0\t3\t0.01\t40\t0;\n"
                "];\n",
                pd_mw, qd_mvar);
  return buf;
}

/// Chain of five buses, used for partition-rule checks.
inline std::string five_bus_case() {
  return "function mpc = case5\n"
         "mpc.version = '2';\n"
         "mpc.baseMVA = 100;\n"
         "mpc.bus = [\n"
         "\t1\t3\t0\t0\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
         "\t2\t1\t20\t5\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
         "\t3\t1\t20\t5\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
         "\t4\t1\t20\t5\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
         "\t5\t1\t20\t5\t0\t0\t1\t1\t0\t135\t1\t1.1\t0.9;\n"
         "];\n"
         "mpc.gen = [\n"
         "\t1\t0\t0\t100\t-100\t1\t100\t1\t200\t0;\n"
         "];\n"
         "mpc.branch = [\n"
         "\t1\t2\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
         "\t2\t3\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
         "\t3\t4\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
         "\t4\t5\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n"
         "];\n"
         "mpc.gencost = [\n"
         "\t2\t0\t0\t3\t0.01\t40\t0;\n"
         "];\n";
}

struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("vopf_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

inline vopf::VoltageState random_state(const vopf::Network& net, vopf::Rng& rng,
                                       double vm_lo = 0.95, double vm_hi = 1.05,
                                       double va_span = 0.3) {
  vopf::VoltageState st;
  st.vm.resize(net.n_bus());
  st.va.resize(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) {
    st.vm(i) = rng.uniform(vm_lo, vm_hi);
    st.va(i) = rng.uniform(-va_span, va_span);
  }
  st.va(net.ref_pos) = 0.0;
  return st;
}

}  // namespace testsup
