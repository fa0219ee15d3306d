#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "vopf/acpf.hpp"
#include "vopf/common.hpp"
#include "vopf/netmodel.hpp"

namespace vopf {

// ---------------------------------------------------------------------------
// Reconstruction: the full operating point implied by a voltage state
// ---------------------------------------------------------------------------

struct ReconstructedPoint {
  VoltageState state;
  Eigen::VectorXd pg_bus, qg_bus;  // aggregated generation per bus, p.u.
  Eigen::VectorXd pd_hat, qd_hat;  // served load per bus, p.u.
  BranchFlow flows;
  double objective = 0.0;  // $/h
  Eigen::VectorXd zim_p, zim_q;  // residual injection at buses with no device
};

/// Splits aggregated per-bus generation across the generators at each bus,
/// proportionally to Pmax (evenly when all Pmax are zero). Reactive output
/// is split the same way against the Qmax-Qmin span.
inline void split_bus_generation(const Network& net, const Eigen::VectorXd& pg_bus,
                                 const Eigen::VectorXd& qg_bus, Eigen::VectorXd& pg,
                                 Eigen::VectorXd& qg) {
  const int ng = net.n_gen();
  pg = Eigen::VectorXd::Zero(ng);
  qg = Eigen::VectorXd::Zero(ng);
  std::vector<std::vector<int>> at_bus(static_cast<std::size_t>(net.n_bus()));
  for (int g = 0; g < ng; ++g)
    at_bus[static_cast<std::size_t>(net.pos(net.generators[static_cast<std::size_t>(g)].bus))].push_back(g);
  for (int i = 0; i < net.n_bus(); ++i) {
    const auto& gens = at_bus[static_cast<std::size_t>(i)];
    if (gens.empty()) continue;
    double pspan = 0.0, qspan = 0.0;
    for (int g : gens) {
      pspan += net.generators[static_cast<std::size_t>(g)].Pmax;
      qspan += net.generators[static_cast<std::size_t>(g)].Qmax -
               net.generators[static_cast<std::size_t>(g)].Qmin;
    }
    for (int g : gens) {
      const auto& gen = net.generators[static_cast<std::size_t>(g)];
      const double wp = pspan != 0.0 ? gen.Pmax / pspan : 1.0 / static_cast<double>(gens.size());
      const double wq = qspan != 0.0 ? (gen.Qmax - gen.Qmin) / qspan
                                     : 1.0 / static_cast<double>(gens.size());
      pg(g) = wp * pg_bus(i);
      qg(g) = wq * qg_bus(i);
    }
  }
}

/// Closed-form operating point for a voltage state: injections come from the
/// network equations, then each bus's injection is attributed to generation
/// and served load by what the bus hosts. Buses hosting neither keep their
/// residual as an explicit mismatch instead of inventing a device.
inline ReconstructedPoint reconstruct(const Network& net, const Loads& loads,
                                      const VoltageState& state) {
  detail::check_state_dims(net, state);
  if (loads.pd.size() != net.n_bus() || loads.qd.size() != net.n_bus())
    throw ValidationError("load profile dimension does not match bus count");
  const int n = net.n_bus();

  ReconstructedPoint pt;
  pt.state = state;
  pt.pg_bus = Eigen::VectorXd::Zero(n);
  pt.qg_bus = Eigen::VectorXd::Zero(n);
  pt.pd_hat = Eigen::VectorXd::Zero(n);
  pt.qd_hat = Eigen::VectorXd::Zero(n);
  pt.zim_p = Eigen::VectorXd::Zero(n);
  pt.zim_q = Eigen::VectorXd::Zero(n);

  const Injection inj = bus_injections(net, state);
  std::vector<char> has_gen(static_cast<std::size_t>(n), 0);
  for (const auto& g : net.generators) has_gen[static_cast<std::size_t>(net.pos(g.bus))] = 1;

  for (int i = 0; i < n; ++i) {
    const bool gen = has_gen[static_cast<std::size_t>(i)] != 0;
    const bool load = loads.pd(i) != 0.0 || loads.qd(i) != 0.0;
    if (gen && load) {
      pt.pd_hat(i) = loads.pd(i);
      pt.qd_hat(i) = loads.qd(i);
      pt.pg_bus(i) = inj.p(i) + loads.pd(i);
      pt.qg_bus(i) = inj.q(i) + loads.qd(i);
    } else if (gen) {
      pt.pg_bus(i) = inj.p(i);
      pt.qg_bus(i) = inj.q(i);
    } else if (load) {
      pt.pd_hat(i) = -inj.p(i);
      pt.qd_hat(i) = -inj.q(i);
    } else {
      pt.zim_p(i) = inj.p(i);
      pt.zim_q(i) = inj.q(i);
    }
  }

  pt.flows = branch_flows(net, state);
  Eigen::VectorXd pg, qg;
  split_bus_generation(net, pt.pg_bus, pt.qg_bus, pg, qg);
  pt.objective = objective_cost(net, pg);
  return pt;
}

// ---------------------------------------------------------------------------
// Inequality rows and violation vector
// ---------------------------------------------------------------------------

enum class ConstraintKind { pg, qg, vm, flow_from, flow_to, angle };

struct ConstraintRow {
  ConstraintKind kind;
  int index;  // bus position for pg/qg/vm, branch index for flows and angles
  double lower, upper;
};

/// The fixed inequality row order shared by violation vectors and the
/// correction Jacobian: per-gen-bus pg bounds, per-gen-bus qg bounds, vm
/// bounds per bus, apparent power at both ends of rated branches, and the
/// angle difference of every branch.
inline std::vector<ConstraintRow> constraint_rows(const Network& net) {
  std::vector<ConstraintRow> rows;
  std::vector<double> pmin(static_cast<std::size_t>(net.n_bus()), 0.0), pmax = pmin,
      qmin = pmin, qmax = pmin;
  for (const auto& g : net.generators) {
    const std::size_t i = static_cast<std::size_t>(net.pos(g.bus));
    pmin[i] += g.Pmin;
    pmax[i] += g.Pmax;
    qmin[i] += g.Qmin;
    qmax[i] += g.Qmax;
  }
  const std::vector<int> gbus = net.gen_bus_positions();
  for (int i : gbus)
    rows.push_back({ConstraintKind::pg, i, pmin[static_cast<std::size_t>(i)],
                    pmax[static_cast<std::size_t>(i)]});
  for (int i : gbus)
    rows.push_back({ConstraintKind::qg, i, qmin[static_cast<std::size_t>(i)],
                    qmax[static_cast<std::size_t>(i)]});
  for (int i = 0; i < net.n_bus(); ++i)
    rows.push_back({ConstraintKind::vm, i, net.buses[static_cast<std::size_t>(i)].Vmin,
                    net.buses[static_cast<std::size_t>(i)].Vmax});
  for (int k = 0; k < net.n_branch(); ++k) {
    const Branch& br = net.branches[static_cast<std::size_t>(k)];
    if (br.Smax <= 0.0) continue;
    rows.push_back({ConstraintKind::flow_from, k, 0.0, br.Smax});
    rows.push_back({ConstraintKind::flow_to, k, 0.0, br.Smax});
  }
  for (int k = 0; k < net.n_branch(); ++k) {
    const Branch& br = net.branches[static_cast<std::size_t>(k)];
    rows.push_back({ConstraintKind::angle, k, br.theta_min, br.theta_max});
  }
  return rows;
}

struct ViolationVector {
  Eigen::VectorXd delta;  // signed violation per row, zero when satisfied
  Eigen::VectorXd value;  // the constrained quantity f per row
  std::vector<ConstraintRow> rows;
};

inline ViolationVector violation_vector(const Network& net, const ReconstructedPoint& pt) {
  ViolationVector v;
  v.rows = constraint_rows(net);
  const int m = static_cast<int>(v.rows.size());
  v.delta.resize(m);
  v.value.resize(m);
  for (int r = 0; r < m; ++r) {
    const ConstraintRow& row = v.rows[static_cast<std::size_t>(r)];
    double f = 0.0;
    switch (row.kind) {
      case ConstraintKind::pg: f = pt.pg_bus(row.index); break;
      case ConstraintKind::qg: f = pt.qg_bus(row.index); break;
      case ConstraintKind::vm: f = pt.state.vm(row.index); break;
      case ConstraintKind::flow_from: f = pt.flows.s_from(row.index); break;
      case ConstraintKind::flow_to: f = pt.flows.s_to(row.index); break;
      case ConstraintKind::angle: {
        const Branch& br = net.branches[static_cast<std::size_t>(row.index)];
        f = pt.state.va(net.pos(br.from)) - pt.state.va(net.pos(br.to));
        break;
      }
    }
    v.value(r) = f;
    double d = 0.0;
    if (std::isfinite(row.upper)) d += std::max(f - row.upper, 0.0);
    if (std::isfinite(row.lower)) d += std::min(f - row.lower, 0.0);
    v.delta(r) = d;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Pseudo-inverse and the linearized correction
// ---------------------------------------------------------------------------

/// Moore-Penrose pseudo-inverse by SVD with relative singular-value cutoff.
inline Eigen::MatrixXd pinv(const Eigen::MatrixXd& A, double rtol = 1e-10) {
  if (A.rows() == 0 || A.cols() == 0) return Eigen::MatrixXd::Zero(A.cols(), A.rows());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double cutoff = sv.size() > 0 ? rtol * sv(0) : 0.0;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff && sv(i) > 0.0) inv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

struct CorrectionModel {
  Eigen::MatrixXd jacobian;  // rows = constraint_rows, cols = [va non-ref | vm]
  Eigen::MatrixXd pinverse;
  VoltageState anchor;
  std::vector<ConstraintRow> rows;
};

namespace detail {

inline Eigen::MatrixXd correction_jacobian(const Network& net, const VoltageState& at,
                                           const std::vector<ConstraintRow>& rows) {
  const int n = net.n_bus();
  const int ncols = 2 * n - 1;
  auto va_idx = [&](int bus) {
    if (bus == net.ref_pos) return -1;
    return bus < net.ref_pos ? bus : bus - 1;
  };
  auto vm_idx = [&](int bus) { return (n - 1) + bus; };

  const Eigen::MatrixXd J = injection_jacobian(net, at);
  const FlowJacobian FJ = flow_jacobian(net, at);

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), ncols);
  auto copy_state_row = [&](int r, const Eigen::MatrixXd& src, int src_row) {
    for (int j = 0; j < n; ++j) {
      const int c = va_idx(j);
      if (c >= 0) M(r, c) = src(src_row, j);
      M(r, vm_idx(j)) = src(src_row, n + j);
    }
  };
  for (int r = 0; r < static_cast<int>(rows.size()); ++r) {
    const ConstraintRow& row = rows[static_cast<std::size_t>(r)];
    switch (row.kind) {
      case ConstraintKind::pg:
        copy_state_row(r, J, row.index);
        break;
      case ConstraintKind::qg:
        copy_state_row(r, J, n + row.index);
        break;
      case ConstraintKind::vm:
        M(r, vm_idx(row.index)) = 1.0;
        break;
      case ConstraintKind::flow_from:
        copy_state_row(r, FJ.d_s_from, row.index);
        break;
      case ConstraintKind::flow_to:
        copy_state_row(r, FJ.d_s_to, row.index);
        break;
      case ConstraintKind::angle: {
        const Branch& br = net.branches[static_cast<std::size_t>(row.index)];
        const int fc = va_idx(net.pos(br.from)), tc = va_idx(net.pos(br.to));
        if (fc >= 0) M(r, fc) = 1.0;
        if (tc >= 0) M(r, tc) = -1.0;
        break;
      }
    }
  }
  return M;
}

}  // namespace detail

/// Linearization anchored at the mean of the given states (typically the
/// training-set targets), with its pseudo-inverse precomputed.
inline CorrectionModel build_correction_model(const Network& net,
                                              const std::vector<VoltageState>& anchor_states,
                                              double rtol = 1e-10) {
  if (anchor_states.empty())
    throw ValidationError("correction model needs at least one anchor state");
  const int n = net.n_bus();
  CorrectionModel m;
  m.anchor.vm = Eigen::VectorXd::Zero(n);
  m.anchor.va = Eigen::VectorXd::Zero(n);
  for (const auto& st : anchor_states) {
    detail::check_state_dims(net, st);
    m.anchor.vm += st.vm;
    m.anchor.va += st.va;
  }
  m.anchor.vm /= static_cast<double>(anchor_states.size());
  m.anchor.va /= static_cast<double>(anchor_states.size());
  m.rows = constraint_rows(net);
  m.jacobian = detail::correction_jacobian(net, m.anchor, m.rows);
  if (m.jacobian.isZero(0.0))
    throw ValidationError("correction Jacobian is identically zero");
  m.pinverse = pinv(m.jacobian, rtol);
  return m;
}

struct PostProcessConfig {
  double damping = 1.0;  // scale on the linearized step
  int max_rounds = 1;
  bool exact_jacobian = false;  // rebuild rows at the point instead of the anchor
  bool ascent_sign = false;     // apply +pinv*delta instead of the default -pinv*delta
  double pinv_rtol = 1e-10;
};

/// Pushes a reconstructed point back toward its inequality bounds with one
/// or more least-squares voltage adjustments, clamping magnitudes into their
/// box after every round, then re-reconstructing.
inline ReconstructedPoint post_process(const Network& net, const Loads& loads,
                                       const ReconstructedPoint& point,
                                       const CorrectionModel& model,
                                       const PostProcessConfig& cfg = {}) {
  const int n = net.n_bus();
  ReconstructedPoint pt = point;
  for (int round = 0; round < cfg.max_rounds; ++round) {
    const ViolationVector v = violation_vector(net, pt);
    if ((v.delta.array() == 0.0).all()) return pt;

    Eigen::VectorXd dx;
    if (cfg.exact_jacobian) {
      const Eigen::MatrixXd Jx = detail::correction_jacobian(net, pt.state, model.rows);
      dx = pinv(Jx, cfg.pinv_rtol) * v.delta;
    } else {
      dx = model.pinverse * v.delta;
    }
    if (!cfg.ascent_sign) dx = -dx;
    dx *= cfg.damping;

    VoltageState st = pt.state;
    int c = 0;
    for (int i = 0; i < n; ++i) {
      if (i == net.ref_pos) continue;
      st.va(i) += dx(c++);
    }
    for (int i = 0; i < n; ++i) {
      st.vm(i) += dx(n - 1 + i);
      st.vm(i) = std::clamp(st.vm(i), net.buses[static_cast<std::size_t>(i)].Vmin,
                            net.buses[static_cast<std::size_t>(i)].Vmax);
    }
    pt = reconstruct(net, loads, st);
  }
  return pt;
}

}  // namespace vopf
