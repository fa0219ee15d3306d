#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vopf/common.hpp"
#include "vopf/dataset.hpp"
#include "vopf/netmodel.hpp"
#include "vopf/nnet.hpp"
#include "vopf/recon.hpp"

namespace vopf {

// ---------------------------------------------------------------------------
// Metric primitives
// ---------------------------------------------------------------------------

/// Mean relative objective deviation in percent; negative values are real
/// (an infeasible reconstruction can undercut the optimum).
inline double optimality_loss(const std::vector<double>& pred_objectives,
                              const std::vector<double>& oracle_objectives) {
  if (pred_objectives.size() != oracle_objectives.size())
    throw ValidationError("objective lists differ in length");
  if (pred_objectives.empty()) throw ValidationError("no objectives to compare");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred_objectives.size(); ++i) {
    if (oracle_objectives[i] == 0.0) throw ValidationError("oracle objective is zero");
    acc += (pred_objectives[i] - oracle_objectives[i]) / oracle_objectives[i];
  }
  return 100.0 * acc / static_cast<double>(pred_objectives.size());
}

/// Mean over samples of t_oracle/t_pred (ratio first, then mean).
inline double speedup(const std::vector<double>& t_oracle, const std::vector<double>& t_pred) {
  if (t_oracle.size() != t_pred.size()) throw ValidationError("time lists differ in length");
  if (t_oracle.empty()) throw ValidationError("no times to compare");
  double acc = 0.0;
  for (std::size_t i = 0; i < t_oracle.size(); ++i) {
    if (t_pred[i] <= 0.0) throw ValidationError("non-positive inference time");
    acc += t_oracle[i] / t_pred[i];
  }
  return acc / static_cast<double>(t_oracle.size());
}

inline double speedup_ratio_of_means(const std::vector<double>& t_oracle,
                                     const std::vector<double>& t_pred) {
  if (t_oracle.size() != t_pred.size() || t_oracle.empty())
    throw ValidationError("time lists empty or differ in length");
  double so = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < t_oracle.size(); ++i) {
    so += t_oracle[i];
    sp += t_pred[i];
  }
  if (sp <= 0.0) throw ValidationError("non-positive total inference time");
  return so / sp;
}

struct ConstraintClassStat {
  double eta = 100.0;       // satisfaction ratio, percent
  double delta_mean = 0.0;  // mean exceedance over violated instances
  double delta_max = 0.0;
  long violated = 0;
  long total = 0;

  bool operator==(const ConstraintClassStat&) const = default;
};

struct ConstraintReport {
  ConstraintClassStat V, Pg, Qg, Sl, Th;

  bool operator==(const ConstraintReport&) const = default;
};

/// Counts every constraint evaluation across all points; a row is violated
/// when its exceedance passes tol. Angle rows with infinite bounds are not
/// evaluations at all and stay out of the totals.
inline ConstraintReport constraint_stats(const Network& net,
                                         const std::vector<ReconstructedPoint>& points,
                                         double tol = 1e-6) {
  ConstraintReport rep;
  const std::vector<ConstraintRow> rows = constraint_rows(net);
  auto stat_of = [&](ConstraintKind k) -> ConstraintClassStat& {
    switch (k) {
      case ConstraintKind::pg: return rep.Pg;
      case ConstraintKind::qg: return rep.Qg;
      case ConstraintKind::vm: return rep.V;
      case ConstraintKind::flow_from:
      case ConstraintKind::flow_to: return rep.Sl;
      case ConstraintKind::angle: return rep.Th;
    }
    return rep.V;
  };
  for (const ReconstructedPoint& pt : points) {
    const ViolationVector vv = violation_vector(net, pt);
    for (int r = 0; r < vv.delta.size(); ++r) {
      const ConstraintRow& row = rows[static_cast<std::size_t>(r)];
      if (row.kind == ConstraintKind::angle &&
          !(std::isfinite(row.lower) || std::isfinite(row.upper)))
        continue;
      ConstraintClassStat& st = stat_of(row.kind);
      st.total += 1;
      const double exceed = std::abs(vv.delta(r));
      if (exceed > tol) {
        st.violated += 1;
        st.delta_mean += exceed;
        st.delta_max = std::max(st.delta_max, exceed);
      }
    }
  }
  for (ConstraintClassStat* st : {&rep.V, &rep.Pg, &rep.Qg, &rep.Sl, &rep.Th}) {
    if (st->violated > 0) st->delta_mean /= static_cast<double>(st->violated);
    st->eta = st->total > 0
                  ? 100.0 * static_cast<double>(st->total - st->violated) /
                        static_cast<double>(st->total)
                  : 100.0;
  }
  return rep;
}

struct LoadSatisfaction {
  double eta_pd = 100.0, eta_qd = 100.0;
};

/// L1 mismatch ratio between served and demanded load, with residual
/// injections at device-free buses counted as unserved imbalance.
inline LoadSatisfaction load_satisfaction(const std::vector<ReconstructedPoint>& points,
                                          const std::vector<Loads>& given) {
  if (points.size() != given.size()) throw ValidationError("points and loads differ in length");
  double num_p = 0.0, num_q = 0.0, den_p = 0.0, den_q = 0.0;
  for (std::size_t s = 0; s < points.size(); ++s) {
    num_p += (points[s].pd_hat - given[s].pd).cwiseAbs().sum() + points[s].zim_p.cwiseAbs().sum();
    num_q += (points[s].qd_hat - given[s].qd).cwiseAbs().sum() + points[s].zim_q.cwiseAbs().sum();
    den_p += given[s].pd.cwiseAbs().sum();
    den_q += given[s].qd.cwiseAbs().sum();
  }
  LoadSatisfaction out;
  out.eta_pd = den_p > 0.0 ? 100.0 * (1.0 - num_p / den_p) : 100.0;
  out.eta_qd = den_q > 0.0 ? 100.0 * (1.0 - num_q / den_q) : 100.0;
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end evaluation
// ---------------------------------------------------------------------------

struct MetricsReport {
  long n_samples = 0;
  double eta_opt_before = 0.0, eta_opt_after = 0.0;
  ConstraintReport constraints_before, constraints_after;
  double eta_pd_before = 100.0, eta_qd_before = 100.0;
  double eta_pd_after = 100.0, eta_qd_after = 100.0;

  // timing-derived, excluded from determinism comparisons
  double oracle_mean_ms = 0.0;
  double infer_mean_ms = 0.0;
  double infer_pp_mean_ms = 0.0;
  double eta_sp_before = 0.0, eta_sp_after = 0.0;
  double eta_sp_mean_ratio_before = 0.0, eta_sp_mean_ratio_after = 0.0;

  bool operator==(const MetricsReport&) const = default;
};

struct EvaluateConfig {
  PostProcessConfig pp;
  double count_tol = 1e-6;
  bool pass_through = false;  // use dataset targets as the predictions
};

inline MetricsReport evaluate(const Network& net, const Dataset& ds,
                              const VoltagePredictor& pred, const CorrectionModel& correction,
                              const EvaluateConfig& cfg = {}) {
  if (ds.test_idx.empty()) throw ValidationError("dataset has no test split");
  if (pred.dataset_fingerprint != dataset_fingerprint(ds))
    throw ValidationError("predictor was trained on a different dataset (fingerprint mismatch)");
  if (pred.case_fingerprint != ds.case_fingerprint)
    throw ValidationError("predictor and dataset disagree on the case fingerprint");

  using clock = std::chrono::steady_clock;
  const std::size_t m = ds.test_idx.size();
  std::vector<ReconstructedPoint> before, after;
  std::vector<Loads> loads;
  std::vector<double> obj_before, obj_after, obj_oracle;
  std::vector<double> t_oracle, t_infer, t_infer_pp;
  before.reserve(m);
  after.reserve(m);

  for (int idx : ds.test_idx) {
    const Sample& smp = ds.samples[static_cast<std::size_t>(idx)];
    const auto t0 = clock::now();
    VoltageState st = cfg.pass_through ? smp.target_state : predict_voltages(pred, smp.loads);
    ReconstructedPoint pt = reconstruct(net, smp.loads, st);
    const auto t1 = clock::now();
    ReconstructedPoint ptp = post_process(net, smp.loads, pt, correction, cfg.pp);
    const auto t2 = clock::now();

    const double infer_s = std::chrono::duration<double>(t1 - t0).count();
    const double pp_s = std::chrono::duration<double>(t2 - t1).count();
    t_infer.push_back(std::max(infer_s, 1e-9));
    t_infer_pp.push_back(std::max(infer_s + pp_s, 1e-9));
    t_oracle.push_back(smp.oracle_time);
    obj_oracle.push_back(smp.objective);
    obj_before.push_back(pt.objective);
    obj_after.push_back(ptp.objective);
    loads.push_back(smp.loads);
    before.push_back(std::move(pt));
    after.push_back(std::move(ptp));
  }

  MetricsReport rep;
  rep.n_samples = static_cast<long>(m);
  rep.eta_opt_before = optimality_loss(obj_before, obj_oracle);
  rep.eta_opt_after = optimality_loss(obj_after, obj_oracle);
  rep.constraints_before = constraint_stats(net, before, cfg.count_tol);
  rep.constraints_after = constraint_stats(net, after, cfg.count_tol);
  const LoadSatisfaction lb = load_satisfaction(before, loads);
  const LoadSatisfaction la = load_satisfaction(after, loads);
  rep.eta_pd_before = lb.eta_pd;
  rep.eta_qd_before = lb.eta_qd;
  rep.eta_pd_after = la.eta_pd;
  rep.eta_qd_after = la.eta_qd;

  double so = 0.0, si = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    so += t_oracle[i];
    si += t_infer[i];
    sp += t_infer_pp[i];
  }
  rep.oracle_mean_ms = 1e3 * so / static_cast<double>(m);
  rep.infer_mean_ms = 1e3 * si / static_cast<double>(m);
  rep.infer_pp_mean_ms = 1e3 * sp / static_cast<double>(m);
  rep.eta_sp_before = speedup(t_oracle, t_infer);
  rep.eta_sp_after = speedup(t_oracle, t_infer_pp);
  rep.eta_sp_mean_ratio_before = speedup_ratio_of_means(t_oracle, t_infer);
  rep.eta_sp_mean_ratio_after = speedup_ratio_of_means(t_oracle, t_infer_pp);
  return rep;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json class_to_json(const ConstraintClassStat& c) {
  nlohmann::json j;
  j["eta"] = c.eta;
  j["delta_mean"] = c.delta_mean;
  j["delta_max"] = c.delta_max;
  j["violated"] = c.violated;
  j["total"] = c.total;
  return j;
}

inline ConstraintClassStat class_from_json(const nlohmann::json& j) {
  ConstraintClassStat c;
  c.eta = j.at("eta").get<double>();
  c.delta_mean = j.at("delta_mean").get<double>();
  c.delta_max = j.at("delta_max").get<double>();
  c.violated = j.at("violated").get<long>();
  c.total = j.at("total").get<long>();
  return c;
}

inline nlohmann::json constraints_to_json(const ConstraintReport& r) {
  nlohmann::json j;
  j["V"] = class_to_json(r.V);
  j["Pg"] = class_to_json(r.Pg);
  j["Qg"] = class_to_json(r.Qg);
  j["Sl"] = class_to_json(r.Sl);
  j["theta"] = class_to_json(r.Th);
  return j;
}

inline ConstraintReport constraints_from_json(const nlohmann::json& j) {
  ConstraintReport r;
  r.V = class_from_json(j.at("V"));
  r.Pg = class_from_json(j.at("Pg"));
  r.Qg = class_from_json(j.at("Qg"));
  r.Sl = class_from_json(j.at("Sl"));
  r.Th = class_from_json(j.at("theta"));
  return r;
}

}  // namespace detail

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  auto& m = j["metrics"];
  m["n_samples"] = r.n_samples;
  m["eta_opt_before"] = r.eta_opt_before;
  m["eta_opt_after"] = r.eta_opt_after;
  m["constraints_before"] = detail::constraints_to_json(r.constraints_before);
  m["constraints_after"] = detail::constraints_to_json(r.constraints_after);
  m["eta_pd_before"] = r.eta_pd_before;
  m["eta_qd_before"] = r.eta_qd_before;
  m["eta_pd_after"] = r.eta_pd_after;
  m["eta_qd_after"] = r.eta_qd_after;
  auto& t = j["timing"];
  t["oracle_mean_ms"] = r.oracle_mean_ms;
  t["infer_mean_ms"] = r.infer_mean_ms;
  t["infer_pp_mean_ms"] = r.infer_pp_mean_ms;
  t["eta_sp_before"] = r.eta_sp_before;
  t["eta_sp_after"] = r.eta_sp_after;
  t["eta_sp_mean_ratio_before"] = r.eta_sp_mean_ratio_before;
  t["eta_sp_mean_ratio_after"] = r.eta_sp_mean_ratio_after;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    const auto& m = j.at("metrics");
    r.n_samples = m.at("n_samples").get<long>();
    r.eta_opt_before = m.at("eta_opt_before").get<double>();
    r.eta_opt_after = m.at("eta_opt_after").get<double>();
    r.constraints_before = detail::constraints_from_json(m.at("constraints_before"));
    r.constraints_after = detail::constraints_from_json(m.at("constraints_after"));
    r.eta_pd_before = m.at("eta_pd_before").get<double>();
    r.eta_qd_before = m.at("eta_qd_before").get<double>();
    r.eta_pd_after = m.at("eta_pd_after").get<double>();
    r.eta_qd_after = m.at("eta_qd_after").get<double>();
    const auto& t = j.at("timing");
    r.oracle_mean_ms = t.at("oracle_mean_ms").get<double>();
    r.infer_mean_ms = t.at("infer_mean_ms").get<double>();
    r.infer_pp_mean_ms = t.at("infer_pp_mean_ms").get<double>();
    r.eta_sp_before = t.at("eta_sp_before").get<double>();
    r.eta_sp_after = t.at("eta_sp_after").get<double>();
    r.eta_sp_mean_ratio_before = t.at("eta_sp_mean_ratio_before").get<double>();
    r.eta_sp_mean_ratio_after = t.at("eta_sp_mean_ratio_after").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report missing field: ") + e.what());
  }
  return r;
}

inline std::string report_markdown(const MetricsReport& r) {
  std::ostringstream md;
  md << "| Metric | Before PP | After PP |\n";
  md << "|---|---|---|\n";
  char buf[256];
  auto row = [&](const char* name, double b, double a, const char* fmt) {
    std::snprintf(buf, sizeof(buf), fmt, b);
    std::string bs = buf;
    std::snprintf(buf, sizeof(buf), fmt, a);
    md << "| " << name << " | " << bs << " | " << buf << " |\n";
  };
  row("eta_opt (%)", r.eta_opt_before, r.eta_opt_after, "%.4f");
  row("eta_V (%)", r.constraints_before.V.eta, r.constraints_after.V.eta, "%.2f");
  row("Delta_V (p.u.)", r.constraints_before.V.delta_mean, r.constraints_after.V.delta_mean,
      "%.4f");
  row("eta_Pg (%)", r.constraints_before.Pg.eta, r.constraints_after.Pg.eta, "%.2f");
  row("Delta_Pg (p.u.)", r.constraints_before.Pg.delta_mean, r.constraints_after.Pg.delta_mean,
      "%.4f");
  row("eta_Qg (%)", r.constraints_before.Qg.eta, r.constraints_after.Qg.eta, "%.2f");
  row("Delta_Qg (p.u.)", r.constraints_before.Qg.delta_mean, r.constraints_after.Qg.delta_mean,
      "%.4f");
  row("eta_Sl (%)", r.constraints_before.Sl.eta, r.constraints_after.Sl.eta, "%.2f");
  row("Delta_Sl (p.u.)", r.constraints_before.Sl.delta_mean, r.constraints_after.Sl.delta_mean,
      "%.4f");
  row("eta_theta (%)", r.constraints_before.Th.eta, r.constraints_after.Th.eta, "%.2f");
  row("Delta_theta (rad)", r.constraints_before.Th.delta_mean, r.constraints_after.Th.delta_mean,
      "%.4f");
  row("eta_Pd (%)", r.eta_pd_before, r.eta_pd_after, "%.2f");
  row("eta_Qd (%)", r.eta_qd_before, r.eta_qd_after, "%.2f");
  row("t_dnn (ms)", r.infer_mean_ms, r.infer_pp_mean_ms, "%.4f");
  row("eta_sp", r.eta_sp_before, r.eta_sp_after, "%.1f");
  std::snprintf(buf, sizeof(buf), "%.4f", r.oracle_mean_ms);
  md << "| t_oracle (ms) | " << buf << " | " << buf << " |\n";
  return md.str();
}

inline std::string report_csv(const MetricsReport& r) {
  std::ostringstream csv;
  csv << "metric,before_pp,after_pp\n";
  auto row = [&](const char* name, double b, double a) {
    csv << name << ',' << format_g17(b) << ',' << format_g17(a) << '\n';
  };
  row("eta_opt", r.eta_opt_before, r.eta_opt_after);
  row("eta_V", r.constraints_before.V.eta, r.constraints_after.V.eta);
  row("delta_V_mean", r.constraints_before.V.delta_mean, r.constraints_after.V.delta_mean);
  row("delta_V_max", r.constraints_before.V.delta_max, r.constraints_after.V.delta_max);
  row("eta_Pg", r.constraints_before.Pg.eta, r.constraints_after.Pg.eta);
  row("delta_Pg_mean", r.constraints_before.Pg.delta_mean, r.constraints_after.Pg.delta_mean);
  row("delta_Pg_max", r.constraints_before.Pg.delta_max, r.constraints_after.Pg.delta_max);
  row("eta_Qg", r.constraints_before.Qg.eta, r.constraints_after.Qg.eta);
  row("delta_Qg_mean", r.constraints_before.Qg.delta_mean, r.constraints_after.Qg.delta_mean);
  row("delta_Qg_max", r.constraints_before.Qg.delta_max, r.constraints_after.Qg.delta_max);
  row("eta_Sl", r.constraints_before.Sl.eta, r.constraints_after.Sl.eta);
  row("delta_Sl_mean", r.constraints_before.Sl.delta_mean, r.constraints_after.Sl.delta_mean);
  row("delta_Sl_max", r.constraints_before.Sl.delta_max, r.constraints_after.Sl.delta_max);
  row("eta_theta", r.constraints_before.Th.eta, r.constraints_after.Th.eta);
  row("delta_theta_mean", r.constraints_before.Th.delta_mean, r.constraints_after.Th.delta_mean);
  row("delta_theta_max", r.constraints_before.Th.delta_max, r.constraints_after.Th.delta_max);
  row("eta_Pd", r.eta_pd_before, r.eta_pd_after);
  row("eta_Qd", r.eta_qd_before, r.eta_qd_after);
  row("t_dnn_ms", r.infer_mean_ms, r.infer_pp_mean_ms);
  row("t_oracle_ms", r.oracle_mean_ms, r.oracle_mean_ms);
  row("eta_sp", r.eta_sp_before, r.eta_sp_after);
  row("eta_sp_mean_ratio", r.eta_sp_mean_ratio_before, r.eta_sp_mean_ratio_after);
  return csv.str();
}

inline void write_reports(const MetricsReport& r, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(fs::path(dir) / "report.json", std::ios::binary);
    if (!f) throw ParseError("cannot write report.json in " + dir);
    f << report_to_json(r).dump(2) << '\n';
  }
  {
    std::ofstream f(fs::path(dir) / "report.md", std::ios::binary);
    if (!f) throw ParseError("cannot write report.md in " + dir);
    f << report_markdown(r);
  }
  {
    std::ofstream f(fs::path(dir) / "report.csv", std::ios::binary);
    if (!f) throw ParseError("cannot write report.csv in " + dir);
    f << report_csv(r);
  }
}

}  // namespace vopf
