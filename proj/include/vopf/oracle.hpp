#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vopf/acpf.hpp"
#include "vopf/common.hpp"
#include "vopf/netmodel.hpp"

namespace vopf {

// ---------------------------------------------------------------------------
// Newton-Raphson power flow
// ---------------------------------------------------------------------------

/// Solves the mismatch equations for fixed generator dispatch and voltage
/// setpoints. Buses hosting a generator are magnitude-controlled (the first
/// generator's setpoint wins on shared buses); the reference bus supplies the
/// residual power. Throws SolverError on breakdown or non-convergence.
inline VoltageState solve_power_flow(const Network& net,
                                     const Eigen::VectorXd& pg_setpoints,
                                     const Eigen::VectorXd& vm_setpoints,
                                     const VoltageState& initial,
                                     double tol = 1e-8, int max_iter = 30) {
  if (pg_setpoints.size() != net.n_gen() || vm_setpoints.size() != net.n_gen())
    throw ValidationError("setpoint length does not match generator count");
  detail::check_state_dims(net, initial);
  const int n = net.n_bus();

  std::vector<int> first_gen(static_cast<std::size_t>(n), -1);
  for (int g = 0; g < net.n_gen(); ++g) {
    const int b = net.pos(net.generators[static_cast<std::size_t>(g)].bus);
    if (first_gen[static_cast<std::size_t>(b)] < 0) first_gen[static_cast<std::size_t>(b)] = g;
  }

  VoltageState st = initial;
  for (int i = 0; i < n; ++i)
    if (first_gen[static_cast<std::size_t>(i)] >= 0)
      st.vm(i) = vm_setpoints(first_gen[static_cast<std::size_t>(i)]);

  // scheduled injections
  Eigen::VectorXd p_sched = Eigen::VectorXd::Zero(n), q_sched = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    p_sched(i) = -net.buses[static_cast<std::size_t>(i)].Pd;
    q_sched(i) = -net.buses[static_cast<std::size_t>(i)].Qd;
  }
  for (int g = 0; g < net.n_gen(); ++g)
    p_sched(net.pos(net.generators[static_cast<std::size_t>(g)].bus)) += pg_setpoints(g);

  std::vector<int> pvpq, pq;  // angle unknowns; magnitude unknowns
  for (int i = 0; i < n; ++i) {
    if (i == net.ref_pos) continue;
    pvpq.push_back(i);
    if (first_gen[static_cast<std::size_t>(i)] < 0) pq.push_back(i);
  }
  const int na = static_cast<int>(pvpq.size()), nm = static_cast<int>(pq.size());

  auto mismatch = [&](const VoltageState& s) {
    const Injection inj = bus_injections(net, s);
    Eigen::VectorXd m(na + nm);
    for (int k = 0; k < na; ++k) m(k) = p_sched(pvpq[static_cast<std::size_t>(k)]) - inj.p(pvpq[static_cast<std::size_t>(k)]);
    for (int k = 0; k < nm; ++k) m(na + k) = q_sched(pq[static_cast<std::size_t>(k)]) - inj.q(pq[static_cast<std::size_t>(k)]);
    return m;
  };

  for (int it = 0; it <= max_iter; ++it) {
    const Eigen::VectorXd m = mismatch(st);
    if (m.size() == 0 || m.cwiseAbs().maxCoeff() <= tol) return st;
    if (it == max_iter) break;

    const Eigen::MatrixXd J = injection_jacobian(net, st);
    Eigen::MatrixXd Jr(na + nm, na + nm);
    for (int r = 0; r < na; ++r) {
      const int i = pvpq[static_cast<std::size_t>(r)];
      for (int c = 0; c < na; ++c) Jr(r, c) = J(i, pvpq[static_cast<std::size_t>(c)]);
      for (int c = 0; c < nm; ++c) Jr(r, na + c) = J(i, n + pq[static_cast<std::size_t>(c)]);
    }
    for (int r = 0; r < nm; ++r) {
      const int i = pq[static_cast<std::size_t>(r)];
      for (int c = 0; c < na; ++c) Jr(na + r, c) = J(n + i, pvpq[static_cast<std::size_t>(c)]);
      for (int c = 0; c < nm; ++c) Jr(na + r, na + c) = J(n + i, n + pq[static_cast<std::size_t>(c)]);
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(Jr);
    if (!lu.isInvertible())
      throw SolverError("power flow Jacobian is singular at iteration " + std::to_string(it));
    const Eigen::VectorXd dx = lu.solve(m);
    for (int k = 0; k < na; ++k) st.va(pvpq[static_cast<std::size_t>(k)]) += dx(k);
    for (int k = 0; k < nm; ++k) st.vm(pq[static_cast<std::size_t>(k)]) += dx(na + k);
  }
  throw SolverError("power flow did not converge in " + std::to_string(max_iter) +
                    " iterations");
}

// ---------------------------------------------------------------------------
// Interior-point AC optimal power flow
// ---------------------------------------------------------------------------

struct SolverConfig {
  double tol = 1e-6;        // KKT tolerance
  int max_iter = 150;
  double initial_mu = 1.0;  // starting barrier weight
  double step_reduction = 0.5;
};

enum class SolveStatus { converged, max_iter, infeasible };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::infeasible: return "infeasible";
  }
  return "?";
}

struct OpfSolution {
  VoltageState state;
  Eigen::VectorXd pg, qg;    // per generator, p.u.
  double objective = 0.0;    // $/h
  SolveStatus status = SolveStatus::max_iter;
  double solve_time = 0.0;   // seconds, wall clock
  int iterations = 0;

  // multipliers and slacks at the final iterate, for KKT diagnostics
  Eigen::VectorXd lam_eq;    // equality multipliers
  Eigen::VectorXd mu_ineq;   // inequality multipliers
  Eigen::VectorXd slack;     // inequality slacks
  double feasibility = kInf; // max of |g| and positive part of h at exit
};

namespace detail {

/// The OPF written as min f(x) s.t. g(x)=0, h(x)<=0 over
/// x = [va(non-ref); vm; pg; qg]. Degenerate box constraints (upper within
/// 1e-9 of lower) become equality rows pinning the variable.
struct OpfProblem {
  const Network* net;
  Loads loads;

  int n, ng, nx;
  std::vector<int> va_col;     // bus pos -> x column, -1 at reference
  std::vector<int> gen_pos;    // generator -> bus pos

  struct Box {
    int var;        // x column
    double lo, hi;
    bool pinned;    // hi - lo below threshold: handled as equality var = mid
  };
  std::vector<Box> boxes;          // pg, qg, vm boxes in that order
  std::vector<int> rated;          // branch indices with Smax > 0
  struct AngleRow {
    int branch;
    double lo, hi;                 // finite entries only generate rows
  };
  std::vector<AngleRow> angles;

  int neq, niq;

  explicit OpfProblem(const Network& network, Loads l)
      : net(&network), loads(std::move(l)) {
    n = net->n_bus();
    ng = net->n_gen();
    if (loads.pd.size() != n || loads.qd.size() != n)
      throw ValidationError("load profile dimension does not match bus count");
    if (!loads.pd.allFinite() || !loads.qd.allFinite())
      throw ValidationError("load profile contains non-finite entries");
    nx = (n - 1) + n + 2 * ng;
    va_col.assign(static_cast<std::size_t>(n), -1);
    int c = 0;
    for (int i = 0; i < n; ++i)
      if (i != net->ref_pos) va_col[static_cast<std::size_t>(i)] = c++;
    for (int g = 0; g < ng; ++g)
      gen_pos.push_back(net->pos(net->generators[static_cast<std::size_t>(g)].bus));

    auto add_box = [&](int var, double lo, double hi) {
      boxes.push_back({var, lo, hi, hi - lo < 1e-9});
    };
    for (int g = 0; g < ng; ++g)
      add_box(pg_col(g), net->generators[static_cast<std::size_t>(g)].Pmin,
              net->generators[static_cast<std::size_t>(g)].Pmax);
    for (int g = 0; g < ng; ++g)
      add_box(qg_col(g), net->generators[static_cast<std::size_t>(g)].Qmin,
              net->generators[static_cast<std::size_t>(g)].Qmax);
    for (int i = 0; i < n; ++i)
      add_box(vm_col(i), net->buses[static_cast<std::size_t>(i)].Vmin,
              net->buses[static_cast<std::size_t>(i)].Vmax);

    for (int k = 0; k < net->n_branch(); ++k)
      if (net->branches[static_cast<std::size_t>(k)].Smax > 0.0) rated.push_back(k);
    for (int k = 0; k < net->n_branch(); ++k) {
      const Branch& br = net->branches[static_cast<std::size_t>(k)];
      if (std::isfinite(br.theta_min) || std::isfinite(br.theta_max))
        angles.push_back({k, br.theta_min, br.theta_max});
    }

    neq = 2 * n;
    niq = 0;
    for (const auto& b : boxes) {
      if (b.pinned) ++neq;
      else niq += 2;
    }
    niq += 2 * static_cast<int>(rated.size());
    for (const auto& a : angles) {
      if (std::isfinite(a.hi)) ++niq;
      if (std::isfinite(a.lo)) ++niq;
    }
  }

  int vm_col(int bus_pos) const { return (n - 1) + bus_pos; }
  int pg_col(int g) const { return (n - 1) + n + g; }
  int qg_col(int g) const { return (n - 1) + n + ng + g; }

  VoltageState state_of(const Eigen::VectorXd& x) const {
    VoltageState st;
    st.vm = x.segment(n - 1, n);
    st.va.resize(n);
    for (int i = 0; i < n; ++i) {
      const int c = va_col[static_cast<std::size_t>(i)];
      st.va(i) = c < 0 ? 0.0 : x(c);
    }
    return st;
  }

  Eigen::VectorXd initial_point() const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(nx);
    for (int i = 0; i < n; ++i) {
      const Bus& b = net->buses[static_cast<std::size_t>(i)];
      x(vm_col(i)) = std::clamp(1.0, b.Vmin, b.Vmax);
    }
    for (int g = 0; g < ng; ++g) {
      const Generator& gen = net->generators[static_cast<std::size_t>(g)];
      x(pg_col(g)) = 0.5 * (gen.Pmin + gen.Pmax);
      x(qg_col(g)) = 0.5 * (gen.Qmin + gen.Qmax);
    }
    return x;
  }

  double cost(const Eigen::VectorXd& x) const {
    return objective_cost(*net, x.segment(pg_col(0), ng));
  }

  Eigen::VectorXd cost_gradient(const Eigen::VectorXd& x) const {
    Eigen::VectorXd df = Eigen::VectorXd::Zero(nx);
    const double base = net->base_mva;
    for (int g = 0; g < ng; ++g) {
      const auto& c = net->generators[static_cast<std::size_t>(g)].cost;
      df(pg_col(g)) = base * (2.0 * c[0] * base * x(pg_col(g)) + c[1]);
    }
    return df;
  }

  Eigen::VectorXd equalities(const Eigen::VectorXd& x) const {
    const VoltageState st = state_of(x);
    const Injection inj = bus_injections(*net, st);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(neq);
    for (int i = 0; i < n; ++i) {
      g(i) = inj.p(i) + loads.pd(i);
      g(n + i) = inj.q(i) + loads.qd(i);
    }
    for (int gi = 0; gi < ng; ++gi) {
      g(gen_pos[static_cast<std::size_t>(gi)]) -= x(pg_col(gi));
      g(n + gen_pos[static_cast<std::size_t>(gi)]) -= x(qg_col(gi));
    }
    int r = 2 * n;
    for (const auto& b : boxes)
      if (b.pinned) g(r++) = x(b.var) - 0.5 * (b.lo + b.hi);
    return g;
  }

  Eigen::VectorXd inequalities(const Eigen::VectorXd& x) const {
    const VoltageState st = state_of(x);
    Eigen::VectorXd h(niq);
    int r = 0;
    for (const auto& b : boxes) {
      if (b.pinned) continue;
      h(r++) = x(b.var) - b.hi;
      h(r++) = b.lo - x(b.var);
    }
    if (!rated.empty()) {
      const BranchFlow fl = branch_flows(*net, st);
      for (int k : rated) {
        const double cap = net->branches[static_cast<std::size_t>(k)].Smax;
        h(r++) = fl.p_from(k) * fl.p_from(k) + fl.q_from(k) * fl.q_from(k) - cap * cap;
        h(r++) = fl.p_to(k) * fl.p_to(k) + fl.q_to(k) * fl.q_to(k) - cap * cap;
      }
    }
    for (const auto& a : angles) {
      const Branch& br = net->branches[static_cast<std::size_t>(a.branch)];
      const double d = st.va(net->pos(br.from)) - st.va(net->pos(br.to));
      if (std::isfinite(a.hi)) h(r++) = d - a.hi;
      if (std::isfinite(a.lo)) h(r++) = a.lo - d;
    }
    return h;
  }

  void jacobians(const Eigen::VectorXd& x, Eigen::MatrixXd& Gx, Eigen::MatrixXd& Hx) const {
    const VoltageState st = state_of(x);
    const Eigen::MatrixXd J = injection_jacobian(*net, st);
    Gx = Eigen::MatrixXd::Zero(neq, nx);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const int ac = va_col[static_cast<std::size_t>(j)];
        if (ac >= 0) {
          Gx(i, ac) = J(i, j);
          Gx(n + i, ac) = J(n + i, j);
        }
        Gx(i, vm_col(j)) = J(i, n + j);
        Gx(n + i, vm_col(j)) = J(n + i, n + j);
      }
    }
    for (int gi = 0; gi < ng; ++gi) {
      Gx(gen_pos[static_cast<std::size_t>(gi)], pg_col(gi)) = -1.0;
      Gx(n + gen_pos[static_cast<std::size_t>(gi)], qg_col(gi)) = -1.0;
    }
    int r = 2 * n;
    for (const auto& b : boxes)
      if (b.pinned) Gx(r++, b.var) = 1.0;

    Hx = Eigen::MatrixXd::Zero(niq, nx);
    r = 0;
    for (const auto& b : boxes) {
      if (b.pinned) continue;
      Hx(r++, b.var) = 1.0;
      Hx(r++, b.var) = -1.0;
    }
    for (int k : rated) {
      const Branch& br = net->branches[static_cast<std::size_t>(k)];
      const auto a = branch_admittance(br);
      const int fb = net->pos(br.from), tb = net->pos(br.to);
      auto fill = [&](int row, const FlowEnd& e, int own, int rem) {
        const std::complex<double> jW(-e.W.imag(), e.W.real());
        const double v_o = st.vm(own), v_r = st.vm(rem);
        const std::complex<double> dS[4] = {
            jW, -jW, 2.0 * std::conj(e.y_own) * v_o + e.W / v_o, e.W / v_r};
        const int cols[4] = {va_col[static_cast<std::size_t>(own)],
                             va_col[static_cast<std::size_t>(rem)],
                             vm_col(own), vm_col(rem)};
        const double P = e.S.real(), Q = e.S.imag();
        for (int t = 0; t < 4; ++t)
          if (cols[t] >= 0)
            Hx(row, cols[t]) += 2.0 * (P * dS[t].real() + Q * dS[t].imag());
      };
      fill(r++, flow_end(a.yff, a.yft, st.vm(fb), st.vm(tb), st.va(fb), st.va(tb)), fb, tb);
      fill(r++, flow_end(a.ytt, a.ytf, st.vm(tb), st.vm(fb), st.va(tb), st.va(fb)), tb, fb);
    }
    for (const auto& a : angles) {
      const Branch& br = net->branches[static_cast<std::size_t>(a.branch)];
      const int fc = va_col[static_cast<std::size_t>(net->pos(br.from))];
      const int tc = va_col[static_cast<std::size_t>(net->pos(br.to))];
      if (std::isfinite(a.hi)) {
        if (fc >= 0) Hx(r, fc) = 1.0;
        if (tc >= 0) Hx(r, tc) = -1.0;
        ++r;
      }
      if (std::isfinite(a.lo)) {
        if (fc >= 0) Hx(r, fc) = -1.0;
        if (tc >= 0) Hx(r, tc) = 1.0;
        ++r;
      }
    }
  }

  /// Hessian of the Lagrangian f + lam'g + mu'h in x.
  Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& lam,
                                     const Eigen::VectorXd& mu) const {
    const VoltageState st = state_of(x);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nx, nx);
    const double base = net->base_mva;
    for (int g = 0; g < ng; ++g)
      H(pg_col(g), pg_col(g)) =
          2.0 * net->generators[static_cast<std::size_t>(g)].cost[0] * base * base;

    // balance rows: contraction lam_p'p + lam_q'q written as Re(c'S),
    // c = lam_p - j lam_q, differentiated twice in polar voltage coordinates
    const Eigen::VectorXcd V = complex_voltage(st);
    Eigen::VectorXcd cvec(n);
    for (int i = 0; i < n; ++i) cvec(i) = std::complex<double>(lam(i), -lam(n + i));
    const Eigen::MatrixXcd M =
        (cvec.asDiagonal() * net->ybus.conjugate()).cwiseProduct(V * V.adjoint());
    const Eigen::VectorXcd rsum = M.rowwise().sum();
    const Eigen::VectorXcd csum = M.transpose().rowwise().sum();
    Eigen::MatrixXcd Hthth = M + M.transpose();
    Eigen::MatrixXcd Hvv = M + M.transpose();
    Eigen::MatrixXcd Hthv = M - M.transpose();
    for (int i = 0; i < n; ++i) {
      Hthth(i, i) -= rsum(i) + csum(i);
      Hthv(i, i) += rsum(i) - csum(i);
    }
    const std::complex<double> im(0.0, 1.0);
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        Hvv(a, b) /= st.vm(a) * st.vm(b);
        Hthv(a, b) = im * Hthv(a, b) / st.vm(b);
      }
    }
    auto add = [&](int row, int col, double val) {
      if (row >= 0 && col >= 0) H(row, col) += val;
    };
    for (int a = 0; a < n; ++a) {
      const int ath = va_col[static_cast<std::size_t>(a)];
      for (int b = 0; b < n; ++b) {
        const int bth = va_col[static_cast<std::size_t>(b)];
        add(ath, bth, Hthth(a, b).real());
        add(vm_col(a), vm_col(b), Hvv(a, b).real());
        add(ath, vm_col(b), Hthv(a, b).real());
        add(vm_col(b), ath, Hthv(a, b).real());
      }
    }

    // rated-flow rows: grad-outer-product plus complex second partials
    int r = 0;
    for (const auto& b : boxes)
      if (!b.pinned) r += 2;
    for (int k : rated) {
      for (int end = 0; end < 2; ++end, ++r) {
        const double w = mu(r);
        if (w == 0.0) continue;
        const Branch& br = net->branches[static_cast<std::size_t>(k)];
        const auto a = branch_admittance(br);
        const int fb = net->pos(br.from), tb = net->pos(br.to);
        const int own = end == 0 ? fb : tb, rem = end == 0 ? tb : fb;
        const FlowEnd e = end == 0
            ? flow_end(a.yff, a.yft, st.vm(fb), st.vm(tb), st.va(fb), st.va(tb))
            : flow_end(a.ytt, a.ytf, st.vm(tb), st.vm(fb), st.va(tb), st.va(fb));
        const double v_o = st.vm(own), v_r = st.vm(rem);
        const std::complex<double> jW(-e.W.imag(), e.W.real());
        const std::complex<double> dS[4] = {
            jW, -jW, 2.0 * std::conj(e.y_own) * v_o + e.W / v_o, e.W / v_r};
        // index order: th_own, th_rem, v_own, v_rem
        std::complex<double> d2S[4][4] = {};
        d2S[0][0] = -e.W;
        d2S[0][1] = e.W;
        d2S[1][0] = e.W;
        d2S[1][1] = -e.W;
        d2S[0][2] = d2S[2][0] = jW / v_o;
        d2S[0][3] = d2S[3][0] = jW / v_r;
        d2S[1][2] = d2S[2][1] = -jW / v_o;
        d2S[1][3] = d2S[3][1] = -jW / v_r;
        d2S[2][2] = 2.0 * std::conj(e.y_own);
        d2S[2][3] = d2S[3][2] = e.W / (v_o * v_r);
        const int cols[4] = {va_col[static_cast<std::size_t>(own)],
                             va_col[static_cast<std::size_t>(rem)],
                             vm_col(own), vm_col(rem)};
        const double P = e.S.real(), Q = e.S.imag();
        for (int s = 0; s < 4; ++s) {
          for (int t = 0; t < 4; ++t) {
            const double val =
                2.0 * (dS[s].real() * dS[t].real() + P * d2S[s][t].real() +
                       dS[s].imag() * dS[t].imag() + Q * d2S[s][t].imag());
            add(cols[s], cols[t], w * val);
          }
        }
      }
    }
    return H;
  }
};

}  // namespace detail

struct KktResidual {
  double feasibility = 0.0;      // max(|g|, h_+), unscaled p.u.
  double gradient = 0.0;         // ||Lx||_inf / (1 + max multiplier)
  double complementarity = 0.0;  // z'mu / (1 + ||x||_inf)
  double max() const { return std::max({feasibility, gradient, complementarity}); }
};

namespace detail {

struct IpmState {
  Eigen::VectorXd x, lam, mu, z;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
  double feas = kInf;
};

inline IpmState run_ipm(const OpfProblem& prob, const SolverConfig& cfg, double gamma0) {
  const int nx = prob.nx, neq = prob.neq, niq = prob.niq;
  IpmState s;
  s.x = prob.initial_point();
  s.lam = Eigen::VectorXd::Zero(neq);

  Eigen::VectorXd g = prob.equalities(s.x);
  Eigen::VectorXd h = prob.inequalities(s.x);
  s.z.resize(niq);
  s.mu.resize(niq);
  for (int i = 0; i < niq; ++i) {
    s.z(i) = std::max(1.0, -h(i));
    s.mu(i) = gamma0 / s.z(i);
  }
  double gamma = gamma0;
  s.f = prob.cost(s.x);
  double f_prev = s.f;

  Eigen::MatrixXd Gx, Hx;
  for (int it = 0; it <= cfg.max_iter; ++it) {
    prob.jacobians(s.x, Gx, Hx);
    const Eigen::VectorXd df = prob.cost_gradient(s.x);
    Eigen::VectorXd Lx = df + Gx.transpose() * s.lam;
    if (niq > 0) Lx += Hx.transpose() * s.mu;

    const double feascond =
        std::max(neq > 0 ? g.cwiseAbs().maxCoeff() : 0.0,
                 niq > 0 ? std::max(h.maxCoeff(), 0.0) : 0.0);
    const double mult_norm = std::max(neq > 0 ? s.lam.cwiseAbs().maxCoeff() : 0.0,
                                      niq > 0 ? s.mu.cwiseAbs().maxCoeff() : 0.0);
    const double gradcond = Lx.cwiseAbs().maxCoeff() / (1.0 + mult_norm);
    const double compcond =
        niq > 0 ? s.z.dot(s.mu) / (1.0 + s.x.cwiseAbs().maxCoeff()) : 0.0;
    const double costcond = std::abs(s.f - f_prev) / (1.0 + std::abs(f_prev));

    s.feas = feascond;
    s.iterations = it;
    if (feascond <= cfg.tol && gradcond <= cfg.tol && compcond <= cfg.tol &&
        (it > 0 ? costcond <= cfg.tol : true)) {
      s.converged = true;
      return s;
    }
    if (it == cfg.max_iter) break;

    const Eigen::MatrixXd Lxx = prob.lagrangian_hessian(s.x, s.lam, s.mu);
    Eigen::MatrixXd Mmat = Lxx;
    Eigen::VectorXd Nvec = Lx;
    if (niq > 0) {
      const Eigen::VectorXd zinv_mu = s.mu.cwiseQuotient(s.z);
      Mmat += Hx.transpose() * zinv_mu.asDiagonal() * Hx;
      Nvec += Hx.transpose() *
              ((gamma + (s.mu.array() * h.array())).matrix().cwiseQuotient(s.z));
    }

    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nx + neq, nx + neq);
    K.topLeftCorner(nx, nx) = Mmat;
    K.topRightCorner(nx, neq) = Gx.transpose();
    K.bottomLeftCorner(neq, nx) = Gx;
    Eigen::VectorXd rhs(nx + neq);
    rhs.head(nx) = -Nvec;
    rhs.tail(neq) = -g;

    Eigen::VectorXd sol;
    {
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(K);
      sol = lu.solve(rhs);
      if (!sol.allFinite()) {
        Eigen::FullPivLU<Eigen::MatrixXd> flu(K);
        if (!flu.isInvertible()) break;  // numerical breakdown: report non-convergence
        sol = flu.solve(rhs);
        if (!sol.allFinite()) break;
      }
    }
    const Eigen::VectorXd dx = sol.head(nx);
    const Eigen::VectorXd dlam = sol.tail(neq);

    Eigen::VectorXd dz, dmu;
    double alpha_p = 1.0, alpha_d = 1.0;
    const double xi = 0.99995;
    if (niq > 0) {
      dz = -(h + s.z) - Hx * dx;
      dmu = (gamma - s.mu.array() * dz.array()).matrix().cwiseQuotient(s.z) - s.mu;
      for (int i = 0; i < niq; ++i) {
        if (dz(i) < 0.0) alpha_p = std::min(alpha_p, -xi * s.z(i) / dz(i));
        if (dmu(i) < 0.0) alpha_d = std::min(alpha_d, -xi * s.mu(i) / dmu(i));
      }
    }

    // shrink the step while it lands on non-finite algebra
    double scale = 1.0;
    Eigen::VectorXd x_new, g_new, h_new;
    double f_new = 0.0;
    for (int t = 0; t < 12; ++t) {
      x_new = s.x + scale * alpha_p * dx;
      f_new = prob.cost(x_new);
      g_new = prob.equalities(x_new);
      h_new = prob.inequalities(x_new);
      if (std::isfinite(f_new) && g_new.allFinite() && h_new.allFinite()) break;
      scale *= cfg.step_reduction;
    }

    f_prev = s.f;
    s.x = x_new;
    s.f = f_new;
    g = g_new;
    h = h_new;
    s.lam += scale * alpha_d * dlam;
    if (niq > 0) {
      s.z += scale * alpha_p * dz;
      s.mu += scale * alpha_d * dmu;
      gamma = 0.1 * s.z.dot(s.mu) / static_cast<double>(niq);
    }
  }
  return s;
}

}  // namespace detail

inline OpfSolution solve_opf(const Network& net, const Loads& loads,
                             const SolverConfig& cfg = {}) {
  if (!(cfg.tol > 0.0) || cfg.max_iter < 1 || !(cfg.step_reduction > 0.0) ||
      !(cfg.step_reduction < 1.0))
    throw ValidationError("invalid solver configuration");
  const auto t0 = std::chrono::steady_clock::now();
  detail::OpfProblem prob(net, loads);

  detail::IpmState s = detail::run_ipm(prob, cfg, cfg.initial_mu);
  if (!s.converged) {
    detail::IpmState retry = detail::run_ipm(prob, cfg, cfg.initial_mu * 0.1);
    if (retry.converged || retry.feas < s.feas) s = retry;
  }

  OpfSolution sol;
  sol.state = prob.state_of(s.x);
  sol.pg = s.x.segment(prob.pg_col(0), prob.ng);
  sol.qg = s.x.segment(prob.qg_col(0), prob.ng);
  sol.objective = prob.cost(s.x);
  sol.iterations = s.iterations;
  sol.lam_eq = s.lam;
  sol.mu_ineq = s.mu;
  sol.slack = s.z;
  sol.feasibility = s.feas;
  if (s.converged)
    sol.status = SolveStatus::converged;
  else
    sol.status = s.feas > 1e-3 ? SolveStatus::infeasible : SolveStatus::max_iter;
  sol.solve_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

/// Recomputes the scaled KKT residuals of a solution against a load profile,
/// using the multipliers stored in the solution.
inline KktResidual kkt_residual(const Network& net, const Loads& loads,
                                const OpfSolution& sol) {
  detail::OpfProblem prob(net, loads);
  Eigen::VectorXd x(prob.nx);
  for (int i = 0; i < prob.n; ++i) {
    const int c = prob.va_col[static_cast<std::size_t>(i)];
    if (c >= 0) x(c) = sol.state.va(i);
    x(prob.vm_col(i)) = sol.state.vm(i);
  }
  x.segment(prob.pg_col(0), prob.ng) = sol.pg;
  x.segment(prob.qg_col(0), prob.ng) = sol.qg;

  const Eigen::VectorXd g = prob.equalities(x);
  const Eigen::VectorXd h = prob.inequalities(x);
  Eigen::MatrixXd Gx, Hx;
  prob.jacobians(x, Gx, Hx);
  Eigen::VectorXd Lx = prob.cost_gradient(x) + Gx.transpose() * sol.lam_eq;
  if (prob.niq > 0) Lx += Hx.transpose() * sol.mu_ineq;

  KktResidual r;
  r.feasibility = std::max(prob.neq > 0 ? g.cwiseAbs().maxCoeff() : 0.0,
                           prob.niq > 0 ? std::max(h.maxCoeff(), 0.0) : 0.0);
  const double mult = std::max(prob.neq > 0 ? sol.lam_eq.cwiseAbs().maxCoeff() : 0.0,
                               prob.niq > 0 ? sol.mu_ineq.cwiseAbs().maxCoeff() : 0.0);
  r.gradient = Lx.cwiseAbs().maxCoeff() / (1.0 + mult);
  r.complementarity =
      prob.niq > 0 ? sol.slack.dot(sol.mu_ineq) / (1.0 + x.cwiseAbs().maxCoeff()) : 0.0;
  return r;
}

}  // namespace vopf
