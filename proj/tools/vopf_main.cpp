#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vopf/vopf.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw vopf::ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

vopf::Network load_network(const std::string& path) {
  return vopf::parse_case(slurp(path));
}

std::string join_csv(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

void cmd_case_info(const std::string& case_path, bool as_json) {
  const vopf::Network net = load_network(case_path);
  double pd = 0.0, qd = 0.0;
  for (const auto& b : net.buses) {
    pd += b.Pd;
    qd += b.Qd;
  }
  int rated = 0;
  for (const auto& br : net.branches)
    if (br.Smax > 0.0) ++rated;
  const int ref_id = net.buses[static_cast<std::size_t>(net.ref_pos)].index;
  if (as_json) {
    nlohmann::json j{{"case", case_path},
                     {"buses", net.n_bus()},
                     {"branches", net.n_branch()},
                     {"generators", net.n_gen()},
                     {"base_mva", net.base_mva},
                     {"reference_bus", ref_id},
                     {"total_pd_mw", pd * net.base_mva},
                     {"total_qd_mvar", qd * net.base_mva},
                     {"rated_branches", rated},
                     {"fingerprint", vopf::network_fingerprint(net)}};
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("case        %s\n", case_path.c_str());
    std::printf("buses       %d\n", net.n_bus());
    std::printf("branches    %d (%d with ratings)\n", net.n_branch(), rated);
    std::printf("generators  %d\n", net.n_gen());
    std::printf("base MVA    %g\n", net.base_mva);
    std::printf("reference   bus %d\n", ref_id);
    std::printf("total load  %.1f MW / %.1f MVAr\n", pd * net.base_mva, qd * net.base_mva);
    std::printf("fingerprint %s\n", vopf::network_fingerprint(net).c_str());
  }
}

struct GenDatasetArgs {
  std::string case_path, out_dir;
  int samples = 1000;
  double variation = 0.1;
  std::uint64_t seed_sample = 1, seed_split = 2;
  double train_fraction = 0.8;
  double tol = 1e-6;
  int max_iter = 150;
  int threads = 0;
};

void cmd_gen_dataset(const GenDatasetArgs& a) {
  const vopf::Network net = load_network(a.case_path);
  const auto loads = vopf::sample_loads(net, a.variation, a.samples, a.seed_sample);
  vopf::SolverConfig scfg;
  scfg.tol = a.tol;
  scfg.max_iter = a.max_iter;
  vopf::Dataset ds = vopf::generate_dataset(net, loads, scfg, a.threads);
  vopf::split_dataset(ds, a.train_fraction, a.seed_split);
  vopf::fit_scaler(ds);
  vopf::write_dataset(ds, a.out_dir);
  std::printf("dataset: %zu solved / %d sampled (%d dropped), train=%zu test=%zu -> %s\n",
              ds.samples.size(), a.samples, ds.dropped, ds.train_idx.size(),
              ds.test_idx.size(), a.out_dir.c_str());
}

struct TrainArgs {
  std::string case_path, dataset_dir, out_path, loss_log;
  std::vector<int> hidden;
  int epochs = 1000;
  double lr = 1e-3;
  int batch = 50;
  std::uint64_t seed_train = 7;
  int groups = 1;
  bool parallel_groups = false;
};

void cmd_train(const TrainArgs& a) {
  const vopf::Network net = load_network(a.case_path);
  const vopf::Dataset ds = vopf::read_dataset(a.dataset_dir, &net);
  vopf::TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.max_epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.seed = a.seed_train;
  tc.bus_groups = a.groups;
  tc.parallel_groups = a.parallel_groups;
  const std::vector<int> hidden =
      a.hidden.empty() ? vopf::default_hidden_dims(net.n_bus()) : a.hidden;
  const vopf::TrainOutput out = vopf::train(ds, net, hidden, tc);
  vopf::write_model(out.predictor, a.out_path);
  if (!a.loss_log.empty()) {
    std::ofstream f(a.loss_log);
    if (!f) throw vopf::ParseError("cannot write " + a.loss_log);
    f << "net,group,epoch,loss\n";
    for (const auto& c : out.curves)
      for (std::size_t e = 0; e < c.epoch_loss.size(); ++e)
        f << c.net << ',' << c.group << ',' << e << ',' << vopf::format_g17(c.epoch_loss[e])
          << '\n';
  }
  std::printf("trained hidden={%s} epochs=%d groups=%d -> %s\n", join_csv(hidden).c_str(),
              a.epochs, a.groups, a.out_path.c_str());
  for (const auto& c : out.curves)
    std::printf("  %s group %d final loss %.6e\n", c.net.c_str(), c.group,
                c.epoch_loss.empty() ? 0.0 : c.epoch_loss.back());
}

vopf::CorrectionModel correction_from_dataset(const vopf::Network& net,
                                              const vopf::Dataset& ds) {
  std::vector<vopf::VoltageState> anchors;
  anchors.reserve(ds.train_idx.size());
  for (int idx : ds.train_idx)
    anchors.push_back(ds.samples[static_cast<std::size_t>(idx)].target_state);
  return vopf::build_correction_model(net, anchors);
}

struct EvaluateArgs {
  std::string case_path, dataset_dir, model_path, out_dir;
  std::string pp_mode = "all";  // off | historical | exact | all
  int pp_rounds = 1;
  double pp_damping = 1.0;
  double count_tol = 1e-6;
  bool pass_through = false;
};

void cmd_evaluate(const EvaluateArgs& a) {
  const vopf::Network net = load_network(a.case_path);
  const vopf::Dataset ds = vopf::read_dataset(a.dataset_dir, &net);
  const vopf::VoltagePredictor pred = vopf::read_model(a.model_path);
  const vopf::CorrectionModel cm = correction_from_dataset(net, ds);

  std::vector<std::string> modes;
  if (a.pp_mode == "all")
    modes = {"off", "historical", "exact"};
  else
    modes = {a.pp_mode};

  std::filesystem::create_directories(a.out_dir);
  std::string combined;
  for (const std::string& mode : modes) {
    vopf::EvaluateConfig ec;
    ec.count_tol = a.count_tol;
    ec.pass_through = a.pass_through;
    ec.pp.damping = a.pp_damping;
    ec.pp.max_rounds = mode == "off" ? 0 : a.pp_rounds;
    ec.pp.exact_jacobian = mode == "exact";
    const vopf::MetricsReport rep = vopf::evaluate(net, ds, pred, cm, ec);
    const std::string sub = a.out_dir + "/" + mode;
    vopf::write_reports(rep, sub);
    combined += "## post-processing: " + mode + "\n\n" + vopf::report_markdown(rep) + "\n";
    std::printf("[pp=%s] eta_opt %.4f%% -> %.4f%%, eta_V %.2f -> %.2f, speedup x%.1f\n",
                mode.c_str(), rep.eta_opt_before, rep.eta_opt_after,
                rep.constraints_before.V.eta, rep.constraints_after.V.eta, rep.eta_sp_after);
  }
  std::ofstream f(a.out_dir + "/report.md");
  if (!f) throw vopf::ParseError("cannot write " + a.out_dir + "/report.md");
  f << combined;
  std::printf("reports -> %s\n", a.out_dir.c_str());
}

struct InferArgs {
  std::string case_path, model_path, scenarios_path, out_path, dataset_dir;
  bool post_process = false;
  std::string pp_mode = "historical";
  int pp_rounds = 1;
  double pp_damping = 1.0;
};

void cmd_infer(const InferArgs& a) {
  const vopf::Network net = load_network(a.case_path);
  const vopf::VoltagePredictor pred = vopf::read_model(a.model_path);
  if (pred.case_fingerprint != vopf::network_fingerprint(net))
    throw vopf::ValidationError("model was trained for a different case (fingerprint mismatch)");
  const auto scenarios = vopf::read_scenarios(a.scenarios_path, net);

  vopf::CorrectionModel cm;
  vopf::PostProcessConfig pc;
  if (a.post_process) {
    pc.max_rounds = a.pp_rounds;
    pc.damping = a.pp_damping;
    pc.exact_jacobian = a.pp_mode == "exact";
    if (a.dataset_dir.empty())
      throw vopf::ValidationError("--post-process needs --dataset for the historical anchor");
    const vopf::Dataset ds = vopf::read_dataset(a.dataset_dir, &net);
    if (pred.dataset_fingerprint != vopf::dataset_fingerprint(ds))
      throw vopf::ValidationError("model and dataset fingerprints disagree");
    cm = correction_from_dataset(net, ds);
  }

  std::ofstream f(a.out_path);
  if (!f) throw vopf::ParseError("cannot write " + a.out_path);
  f << "scenario";
  for (const auto& b : net.buses) f << ",vm_" << b.index;
  for (const auto& b : net.buses) f << ",va_" << b.index;
  const auto gen_pos = net.gen_bus_positions();
  for (int p : gen_pos) f << ",pg_" << net.buses[static_cast<std::size_t>(p)].index;
  f << ",objective\n";
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    const vopf::VoltageState st = vopf::predict_voltages(pred, scenarios[s]);
    vopf::ReconstructedPoint pt = vopf::reconstruct(net, scenarios[s], st);
    if (a.post_process) pt = vopf::post_process(net, scenarios[s], pt, cm, pc);
    f << s;
    for (int i = 0; i < net.n_bus(); ++i) f << ',' << vopf::format_g17(pt.state.vm(i));
    for (int i = 0; i < net.n_bus(); ++i) f << ',' << vopf::format_g17(pt.state.va(i));
    for (int p : gen_pos) f << ',' << vopf::format_g17(pt.pg_bus(p));
    f << ',' << vopf::format_g17(pt.objective) << '\n';
  }
  std::printf("%zu scenario(s) -> %s\n", scenarios.size(), a.out_path.c_str());
}

}  // namespace

int vopf_cli_main(int argc, const char* const* argv) {
  CLI::App app{"voltage-predictor toolkit for AC optimal power flow"};
  app.require_subcommand(1);
  app.set_config("--config", "", "config file with [subcommand] sections; flags take precedence");

  std::string preset;

  auto* info = app.add_subcommand("case-info", "parse a case file and print a summary");
  std::string info_case;
  bool info_json = false;
  info->add_option("--case", info_case, "case file (.m or .json)")
      ->required()
      ->check(CLI::ExistingFile);
  info->add_flag("--json", info_json, "machine-readable output");
  info->callback([&] { cmd_case_info(info_case, info_json); });

  auto* gen = app.add_subcommand("gen-dataset", "sample loads, solve them, write a dataset");
  GenDatasetArgs ga;
  gen->add_option("--case", ga.case_path, "case file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", ga.out_dir, "output dataset directory")->required();
  gen->add_option("--samples", ga.samples, "load scenarios to draw")->check(CLI::PositiveNumber);
  gen->add_option("--variation", ga.variation, "uniform load variation, e.g. 0.1 = +/-10%");
  gen->add_option("--seed-sample", ga.seed_sample, "load sampling seed");
  gen->add_option("--seed-split", ga.seed_split, "train/test split seed");
  gen->add_option("--train-fraction", ga.train_fraction, "train share of solved samples");
  gen->add_option("--tol", ga.tol, "solver KKT tolerance");
  gen->add_option("--max-iter", ga.max_iter, "solver iteration cap");
  gen->add_option("--threads", ga.threads, "solver worker threads, 0 = hardware");
  gen->add_option("--preset", preset, "option bundle: paper-protocol | desk")
      ->check(CLI::IsMember({"paper-protocol", "desk"}));
  gen->callback([&] {
    if (preset == "desk" && gen->count("--samples") == 0) ga.samples = 2000;
    cmd_gen_dataset(ga);
  });

  auto* tr = app.add_subcommand("train", "train voltage predictors on a dataset");
  TrainArgs ta;
  tr->add_option("--case", ta.case_path, "case file")->required()->check(CLI::ExistingFile);
  tr->add_option("--dataset", ta.dataset_dir, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  tr->add_option("--out", ta.out_path, "model output path (JSON)")->required();
  tr->add_option("--hidden", ta.hidden, "hidden layer sizes, default scales with the case")
      ->delimiter(',');
  tr->add_option("--epochs", ta.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_option("--batch", ta.batch, "mini-batch size")->check(CLI::PositiveNumber);
  tr->add_option("--seed-train", ta.seed_train, "seed for init and epoch shuffling streams");
  tr->add_option("--groups", ta.groups, "bus groups (one predictor pair each)")
      ->check(CLI::PositiveNumber);
  tr->add_flag("--parallel-groups", ta.parallel_groups, "train groups concurrently");
  tr->add_option("--loss-log", ta.loss_log, "per-epoch loss CSV path");
  tr->add_option("--preset", preset, "option bundle: paper-protocol | desk")
      ->check(CLI::IsMember({"paper-protocol", "desk"}));
  tr->callback([&] {
    if (preset == "desk" && tr->count("--epochs") == 0) ta.epochs = 300;
    cmd_train(ta);
  });

  auto* ev = app.add_subcommand("evaluate", "score a model on the dataset's test split");
  EvaluateArgs ea;
  ev->add_option("--case", ea.case_path, "case file")->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ea.dataset_dir, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  ev->add_option("--model", ea.model_path, "model file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out_dir, "report output directory")->required();
  ev->add_option("--pp-mode", ea.pp_mode, "off | historical | exact | all")
      ->check(CLI::IsMember({"off", "historical", "exact", "all"}));
  ev->add_option("--pp-rounds", ea.pp_rounds, "correction rounds")->check(CLI::NonNegativeNumber);
  ev->add_option("--pp-damping", ea.pp_damping, "correction step factor");
  ev->add_option("--count-tol", ea.count_tol, "violation counting tolerance");
  ev->add_flag("--pass-through", ea.pass_through, "score dataset targets instead of predictions");
  ev->callback([&] { cmd_evaluate(ea); });

  auto* inf = app.add_subcommand("infer", "predict operating points for load scenarios");
  InferArgs ia;
  inf->add_option("--case", ia.case_path, "case file")->required()->check(CLI::ExistingFile);
  inf->add_option("--model", ia.model_path, "model file")->required()->check(CLI::ExistingFile);
  inf->add_option("--scenarios", ia.scenarios_path, "scenario CSV (pd_<bus>,qd_<bus> columns)")
      ->required()
      ->check(CLI::ExistingFile);
  inf->add_option("--out", ia.out_path, "solution CSV path")->required();
  inf->add_flag("--post-process", ia.post_process, "apply the correction step");
  inf->add_option("--pp-mode", ia.pp_mode, "historical | exact")
      ->check(CLI::IsMember({"historical", "exact"}));
  inf->add_option("--pp-rounds", ia.pp_rounds, "correction rounds")
      ->check(CLI::NonNegativeNumber);
  inf->add_option("--pp-damping", ia.pp_damping, "correction step factor");
  inf->add_option("--dataset", ia.dataset_dir, "training dataset (historical anchor)")
      ->check(CLI::ExistingDirectory);
  inf->callback([&] { cmd_infer(ia); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const vopf::SolverError& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return 3;
  } catch (const vopf::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const vopf::ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

#ifndef VOPF_CLI_NO_MAIN
int main(int argc, char** argv) { return vopf_cli_main(argc, argv); }
#endif
