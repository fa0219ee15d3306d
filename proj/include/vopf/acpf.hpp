#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "vopf/common.hpp"
#include "vopf/netmodel.hpp"

namespace vopf {

struct VoltageState {
  Eigen::VectorXd vm;  // p.u.
  Eigen::VectorXd va;  // rad, reference bus pinned to 0 by convention
};

struct Injection {
  Eigen::VectorXd p, q;  // net injection per bus, p.u.
};

struct BranchFlow {
  Eigen::VectorXd p_from, q_from, p_to, q_to;
  Eigen::VectorXd s_from, s_to;  // apparent-power magnitudes
};

/// A load scenario: per-bus demand overriding the case defaults.
struct Loads {
  Eigen::VectorXd pd, qd;  // p.u.
};

inline Loads nominal_loads(const Network& net) {
  Loads l;
  l.pd.resize(net.n_bus());
  l.qd.resize(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) {
    l.pd(i) = net.buses[static_cast<std::size_t>(i)].Pd;
    l.qd(i) = net.buses[static_cast<std::size_t>(i)].Qd;
  }
  return l;
}

namespace detail {

inline void check_state_dims(const Network& net, const VoltageState& st) {
  if (st.vm.size() != net.n_bus() || st.va.size() != net.n_bus())
    throw ValidationError("voltage state dimension " + std::to_string(st.vm.size()) +
                          "/" + std::to_string(st.va.size()) + " does not match " +
                          std::to_string(net.n_bus()) + " buses");
}

// One branch terminal. With o the own bus and r the remote bus:
//   S = conj(y_own) v_o^2 + W,  W = conj(y_xfer) v_o v_r e^{j(th_o - th_r)}
// First and second partials of S follow from W alone plus the y_own term.
struct FlowEnd {
  std::complex<double> S;
  std::complex<double> W;
  std::complex<double> y_own;
};

inline FlowEnd flow_end(std::complex<double> y_own, std::complex<double> y_xfer,
                        double v_o, double v_r, double th_o, double th_r) {
  FlowEnd e;
  e.y_own = y_own;
  e.W = std::conj(y_xfer) * v_o * v_r * std::exp(std::complex<double>(0.0, th_o - th_r));
  e.S = std::conj(y_own) * v_o * v_o + e.W;
  return e;
}

}  // namespace detail

inline VoltageState flat_state(const Network& net) {
  VoltageState st;
  st.vm = Eigen::VectorXd::Ones(net.n_bus());
  st.va = Eigen::VectorXd::Zero(net.n_bus());
  return st;
}

inline Eigen::VectorXcd complex_voltage(const VoltageState& st) {
  Eigen::VectorXcd v(st.vm.size());
  for (Eigen::Index i = 0; i < st.vm.size(); ++i)
    v(i) = std::polar(st.vm(i), st.va(i));
  return v;
}

inline Injection bus_injections(const Network& net, const VoltageState& st) {
  detail::check_state_dims(net, st);
  const int n = net.n_bus();
  Injection inj;
  inj.p = Eigen::VectorXd::Zero(n);
  inj.q = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    double pi = 0.0, qi = 0.0;
    for (int j = 0; j < n; ++j) {
      const std::complex<double> y = net.ybus(i, j);
      if (y == std::complex<double>(0.0, 0.0)) continue;
      const double G = y.real(), B = y.imag();
      const double th = st.va(i) - st.va(j);
      const double c = std::cos(th), s = std::sin(th);
      const double vv = st.vm(i) * st.vm(j);
      pi += vv * (G * c + B * s);
      qi += vv * (G * s - B * c);
    }
    inj.p(i) = pi;
    inj.q(i) = qi;
  }
  return inj;
}

inline BranchFlow branch_flows(const Network& net, const VoltageState& st) {
  detail::check_state_dims(net, st);
  const int nbr = net.n_branch();
  BranchFlow f;
  f.p_from.resize(nbr);
  f.q_from.resize(nbr);
  f.p_to.resize(nbr);
  f.q_to.resize(nbr);
  f.s_from.resize(nbr);
  f.s_to.resize(nbr);
  for (int k = 0; k < nbr; ++k) {
    const Branch& br = net.branches[static_cast<std::size_t>(k)];
    const auto a = branch_admittance(br);
    const int fb = net.pos(br.from), tb = net.pos(br.to);
    const auto ef = detail::flow_end(a.yff, a.yft, st.vm(fb), st.vm(tb), st.va(fb), st.va(tb));
    const auto et = detail::flow_end(a.ytt, a.ytf, st.vm(tb), st.vm(fb), st.va(tb), st.va(fb));
    f.p_from(k) = ef.S.real();
    f.q_from(k) = ef.S.imag();
    f.p_to(k) = et.S.real();
    f.q_to(k) = et.S.imag();
    f.s_from(k) = std::abs(ef.S);
    f.s_to(k) = std::abs(et.S);
  }
  return f;
}

/// Total generation cost in $/h. Dispatch is per-unit; the polynomial
/// coefficients act on MW, so pg is rescaled by base_mva first.
inline double objective_cost(const Network& net, const Eigen::VectorXd& pg) {
  if (pg.size() != net.n_gen())
    throw ValidationError("dispatch length " + std::to_string(pg.size()) +
                          " does not match " + std::to_string(net.n_gen()) +
                          " generators");
  double total = 0.0;
  for (int i = 0; i < net.n_gen(); ++i) {
    const auto& c = net.generators[static_cast<std::size_t>(i)].cost;
    const double mw = pg(i) * net.base_mva;
    total += c[0] * mw * mw + c[1] * mw + c[2];
  }
  return total;
}

/// Dense 2n x 2n Jacobian of stacked injections [p; q] with respect to
/// stacked voltages [va; vm]. The reference-angle column stays in place;
/// callers drop it when they need a nonsingular system.
inline Eigen::MatrixXd injection_jacobian(const Network& net, const VoltageState& st) {
  detail::check_state_dims(net, st);
  const int n = net.n_bus();
  const Injection inj = bus_injections(net, st);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (int i = 0; i < n; ++i) {
    const double vi = st.vm(i);
    for (int j = 0; j < n; ++j) {
      const std::complex<double> y = net.ybus(i, j);
      const double G = y.real(), B = y.imag();
      if (i == j) {
        J(i, i) = -inj.q(i) - B * vi * vi;                 // dP/dva
        J(i, n + i) = inj.p(i) / vi + G * vi;              // dP/dvm
        J(n + i, i) = inj.p(i) - G * vi * vi;              // dQ/dva
        J(n + i, n + i) = inj.q(i) / vi - B * vi;          // dQ/dvm
      } else {
        if (G == 0.0 && B == 0.0) continue;
        const double th = st.va(i) - st.va(j);
        const double c = std::cos(th), s = std::sin(th);
        const double vj = st.vm(j);
        J(i, j) = vi * vj * (G * s - B * c);
        J(i, n + j) = vi * (G * c + B * s);
        J(n + i, j) = -vi * vj * (G * c + B * s);
        J(n + i, n + j) = vi * (G * s - B * c);
      }
    }
  }
  return J;
}

/// Rows d s / d [va; vm] for every branch, from-end block then to-end block.
/// Ends with apparent power below the singularity floor get a zero row and
/// a flag instead of a division by ~0.
struct FlowJacobian {
  Eigen::MatrixXd d_s_from;  // n_branch x 2n
  Eigen::MatrixXd d_s_to;    // n_branch x 2n
  std::vector<bool> zero_from, zero_to;
  static constexpr double kSingularFloor = 1e-8;
};

inline FlowJacobian flow_jacobian(const Network& net, const VoltageState& st) {
  detail::check_state_dims(net, st);
  const int n = net.n_bus();
  const int nbr = net.n_branch();
  FlowJacobian out;
  out.d_s_from = Eigen::MatrixXd::Zero(nbr, 2 * n);
  out.d_s_to = Eigen::MatrixXd::Zero(nbr, 2 * n);
  out.zero_from.assign(static_cast<std::size_t>(nbr), false);
  out.zero_to.assign(static_cast<std::size_t>(nbr), false);

  for (int k = 0; k < nbr; ++k) {
    const Branch& br = net.branches[static_cast<std::size_t>(k)];
    const auto a = branch_admittance(br);
    const int fb = net.pos(br.from), tb = net.pos(br.to);

    auto fill = [&](Eigen::MatrixXd& M, std::vector<bool>& flags,
                    const detail::FlowEnd& e, int own, int rem) {
      const double s = std::abs(e.S);
      if (s < FlowJacobian::kSingularFloor) {
        flags[static_cast<std::size_t>(k)] = true;
        return;
      }
      const std::complex<double> jW(-e.W.imag(), e.W.real());
      const double v_o = st.vm(own), v_r = st.vm(rem);
      const std::complex<double> dS_dth_o = jW;
      const std::complex<double> dS_dth_r = -jW;
      const std::complex<double> dS_dv_o = 2.0 * std::conj(e.y_own) * v_o + e.W / v_o;
      const std::complex<double> dS_dv_r = e.W / v_r;
      const double P = e.S.real(), Q = e.S.imag();
      auto mag = [&](const std::complex<double>& dS) {
        return (P * dS.real() + Q * dS.imag()) / s;
      };
      M(k, own) += mag(dS_dth_o);
      M(k, rem) += mag(dS_dth_r);
      M(k, n + own) += mag(dS_dv_o);
      M(k, n + rem) += mag(dS_dv_r);
    };

    fill(out.d_s_from, out.zero_from,
         detail::flow_end(a.yff, a.yft, st.vm(fb), st.vm(tb), st.va(fb), st.va(tb)), fb, tb);
    fill(out.d_s_to, out.zero_to,
         detail::flow_end(a.ytt, a.ytf, st.vm(tb), st.vm(fb), st.va(tb), st.va(fb)), tb, fb);
  }
  return out;
}

}  // namespace vopf
