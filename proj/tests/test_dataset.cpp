#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "vopf/dataset.hpp"

#include "support.hpp"

using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using namespace vopf;

namespace {

Dataset labeled_two_bus(const Network& net, int count = 12) {
  auto loads = sample_loads(net, 0.1, count, 21);
  Dataset ds = generate_dataset(net, loads);
  ds.sample_seed = 21;
  ds.variation = 0.1;
  return ds;
}

void append_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::app);
  f << text;
}

}  // namespace

TEST_CASE("load sampling stays inside the variation band") {
  Network net = testsup::load_case("case14.m");
  const Loads nominal = nominal_loads(net);
  const auto scenarios = sample_loads(net, 0.1, 200, 7);
  REQUIRE(scenarios.size() == 200);
  for (const Loads& l : scenarios) {
    for (int i = 0; i < net.n_bus(); ++i) {
      if (nominal.pd(i) == 0.0) {
        CHECK(l.pd(i) == 0.0);
      } else {
        const double r = l.pd(i) / nominal.pd(i);
        CHECK(r >= 0.9);
        CHECK(r <= 1.1);
      }
      if (nominal.qd(i) == 0.0) {
        CHECK(l.qd(i) == 0.0);
      } else {
        const double r = l.qd(i) / nominal.qd(i);
        CHECK(r >= 0.9);
        CHECK(r <= 1.1);
      }
    }
  }

  const auto again = sample_loads(net, 0.1, 200, 7);
  bool identical = true;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    if ((scenarios[s].pd - again[s].pd).cwiseAbs().maxCoeff() != 0.0) identical = false;
    if ((scenarios[s].qd - again[s].qd).cwiseAbs().maxCoeff() != 0.0) identical = false;
  }
  CHECK(identical);

  const auto other = sample_loads(net, 0.1, 1, 8);
  CHECK((other[0].pd - scenarios[0].pd).cwiseAbs().maxCoeff() > 0.0);

  REQUIRE_THROWS_MATCHES(sample_loads(net, -0.1, 1, 0), ValidationError,
                         MessageMatches(ContainsSubstring("load variation")));
  REQUIRE_THROWS_MATCHES(sample_loads(net, 1.0, 1, 0), ValidationError,
                         MessageMatches(ContainsSubstring("load variation")));
  REQUIRE_THROWS_MATCHES(sample_loads(net, 0.1, -1, 0), ValidationError,
                         MessageMatches(ContainsSubstring("scenario count")));
}

TEST_CASE("labeled samples satisfy the balance equations they were solved for") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Dataset ds = labeled_two_bus(net);
  REQUIRE(static_cast<int>(ds.samples.size()) + ds.dropped == 12);
  REQUIRE(ds.dropped == 0);
  CHECK(ds.case_fingerprint == network_fingerprint(net));
  REQUIRE(ds.bus_ids == std::vector<int>{1, 2});

  for (const Sample& s : ds.samples) {
    CHECK(s.target_state.va(0) == 0.0);  // reference angle normalized away
    const Injection inj = bus_injections(net, s.target_state);
    CHECK(inj.p(1) == Approx(-s.loads.pd(1)).margin(1e-6));
    CHECK(inj.q(1) == Approx(-s.loads.qd(1)).margin(1e-6));
    // lossless link: generation equals demand, so the stored objective is
    // pinned by the load alone
    Eigen::VectorXd pg(1);
    pg << s.loads.pd(1);
    CHECK(s.objective == Approx(objective_cost(net, pg)).margin(0.05));
    CHECK(s.oracle_time >= 0.0);
  }
}

TEST_CASE("dataset generation rejects hopeless scenario sets") {
  Network net = testsup::two_bus_network();
  REQUIRE_THROWS_MATCHES(generate_dataset(net, {}), ValidationError,
                         MessageMatches(ContainsSubstring("no load scenarios")));

  std::vector<Loads> bad(4);
  for (Loads& l : bad) {
    l.pd = Eigen::Vector2d(0.0, 100.0);  // two orders past the generator limit
    l.qd = Eigen::Vector2d(0.0, 0.0);
  }
  REQUIRE_THROWS_MATCHES(generate_dataset(net, bad), SolverError,
                         MessageMatches(ContainsSubstring("scenarios produced converged labels")));
}

TEST_CASE("splits partition the samples deterministically") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Dataset ds = labeled_two_bus(net);
  split_dataset(ds, 0.8, 3);
  REQUIRE(ds.train_idx.size() == 10);
  REQUIRE(ds.test_idx.size() == 2);
  CHECK(ds.split_seed == 3);
  CHECK(ds.train_fraction == 0.8);
  CHECK(std::is_sorted(ds.train_idx.begin(), ds.train_idx.end()));
  CHECK(std::is_sorted(ds.test_idx.begin(), ds.test_idx.end()));

  std::set<int> seen(ds.train_idx.begin(), ds.train_idx.end());
  for (int i : ds.test_idx) CHECK(seen.insert(i).second);
  REQUIRE(seen.size() == 12);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 11);

  Dataset ds2 = labeled_two_bus(net);
  split_dataset(ds2, 0.8, 3);
  CHECK(ds2.train_idx == ds.train_idx);
  CHECK(ds2.test_idx == ds.test_idx);

  REQUIRE_THROWS_MATCHES(split_dataset(ds, 0.0, 1), ValidationError,
                         MessageMatches(ContainsSubstring("train fraction")));
  REQUIRE_THROWS_MATCHES(split_dataset(ds, 1.0, 1), ValidationError,
                         MessageMatches(ContainsSubstring("train fraction")));
}

TEST_CASE("input and target vectors mirror the sample") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Dataset ds = labeled_two_bus(net);
  const Sample& s = ds.samples[0];

  const Eigen::VectorXd x = input_vector(s);
  REQUIRE(x.size() == 4);
  CHECK(x(0) == s.loads.pd(0));
  CHECK(x(1) == s.loads.pd(1));
  CHECK(x(2) == s.loads.qd(0));
  CHECK(x(3) == s.loads.qd(1));

  const Eigen::VectorXd y = target_vector(s);
  REQUIRE(y.size() == 4);
  CHECK(y(0) == s.target_state.vm(0) - 1.0);
  CHECK(y(2) == s.target_state.va(0));

  const VoltageState back = state_from_target(y);
  CHECK((back.vm - s.target_state.vm).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((back.va - s.target_state.va).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("scaler normalizes training inputs to the unit box") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Dataset ds = labeled_two_bus(net);

  REQUIRE_THROWS_MATCHES(fit_scaler(ds), ValidationError,
                         MessageMatches(ContainsSubstring("cannot fit scaler")));
  REQUIRE_THROWS_MATCHES(apply_scaler(ds.scaler, input_vector(ds.samples[0])), ValidationError,
                         MessageMatches(ContainsSubstring("has not been fitted")));

  split_dataset(ds, 0.8, 3);
  fit_scaler(ds);
  REQUIRE(ds.scaler.fitted);

  double lo = 1e9, hi = -1e9;
  for (int idx : ds.train_idx) {
    const Eigen::VectorXd z =
        apply_scaler(ds.scaler, input_vector(ds.samples[static_cast<std::size_t>(idx)]));
    lo = std::min(lo, z.minCoeff());
    hi = std::max(hi, z.maxCoeff());
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);

  // bus 1 carries no load, so its columns are constant and map to mid-range
  const Eigen::VectorXd z0 = apply_scaler(ds.scaler, input_vector(ds.samples[0]));
  CHECK(z0(0) == 0.5);
  CHECK(z0(2) == 0.5);

  const Eigen::VectorXd x = input_vector(ds.samples[0]);
  const Eigen::VectorXd round = invert_scaler(ds.scaler, apply_scaler(ds.scaler, x));
  CHECK((round - x).cwiseAbs().maxCoeff() <= 1e-12);

  Eigen::VectorXd wrong(3);
  wrong.setZero();
  REQUIRE_THROWS_MATCHES(apply_scaler(ds.scaler, wrong), ValidationError,
                         MessageMatches(ContainsSubstring("dimension mismatch")));
}

TEST_CASE("dataset persistence round trips bit for bit") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Dataset ds = labeled_two_bus(net);
  split_dataset(ds, 0.8, 3);
  fit_scaler(ds);

  testsup::TempDir tmp("ds");
  const std::string d1 = tmp.sub("a");
  const std::string d2 = tmp.sub("b");
  const std::string d3 = tmp.sub("c");
  write_dataset(ds, d1);
  write_dataset(ds, d2);
  CHECK(testsup::slurp(d1 + "/samples.csv") == testsup::slurp(d2 + "/samples.csv"));
  CHECK(testsup::slurp(d1 + "/meta.json") == testsup::slurp(d2 + "/meta.json"));

  Dataset back = read_dataset(d1, &net);
  CHECK(dataset_fingerprint(back) == dataset_fingerprint(ds));
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.bus_ids == ds.bus_ids);
  CHECK(back.train_idx == ds.train_idx);
  CHECK(back.test_idx == ds.test_idx);
  CHECK(back.sample_seed == ds.sample_seed);
  CHECK(back.split_seed == ds.split_seed);
  CHECK(back.variation == ds.variation);
  CHECK(back.train_fraction == ds.train_fraction);
  CHECK(back.dropped == ds.dropped);
  REQUIRE(back.scaler.fitted);
  CHECK((back.scaler.in_min - ds.scaler.in_min).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.scaler.in_max - ds.scaler.in_max).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK((back.samples[i].loads.pd - ds.samples[i].loads.pd).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.samples[i].target_state.vm - ds.samples[i].target_state.vm)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK(back.samples[i].objective == ds.samples[i].objective);
  }

  write_dataset(back, d3);
  CHECK(testsup::slurp(d1 + "/samples.csv") == testsup::slurp(d3 + "/samples.csv"));
  CHECK(testsup::slurp(d1 + "/meta.json") == testsup::slurp(d3 + "/meta.json"));

  Dataset empty;
  const std::string d4 = tmp.sub("empty");
  write_dataset(empty, d4);
  const Dataset eback = read_dataset(d4);
  CHECK(eback.samples.empty());
  CHECK(eback.bus_ids.empty());
}

TEST_CASE("dataset persistence rejects corrupted artifacts") {
  Network net = testsup::two_bus_network(50.0, 10.0);
  Network other = testsup::load_case("case14.m");
  Dataset ds = labeled_two_bus(net);
  split_dataset(ds, 0.8, 3);

  testsup::TempDir tmp("dscorrupt");
  REQUIRE_THROWS_MATCHES(read_dataset(tmp.sub("missing")), ParseError,
                         MessageMatches(ContainsSubstring("cannot read")));

  const std::string dir = tmp.sub("d");
  write_dataset(ds, dir);
  REQUIRE_THROWS_MATCHES(read_dataset(dir, &other), ValidationError,
                         MessageMatches(ContainsSubstring("different case")));

  {
    std::ofstream mf(dir + "/meta.json", std::ios::binary);
    mf << "{}\n";
  }
  REQUIRE_THROWS_MATCHES(read_dataset(dir), ParseError,
                         MessageMatches(ContainsSubstring("metadata missing field")));
  {
    std::ofstream mf(dir + "/meta.json", std::ios::binary);
    mf << "not json\n";
  }
  REQUIRE_THROWS_MATCHES(read_dataset(dir), ParseError,
                         MessageMatches(ContainsSubstring("invalid dataset metadata")));

  const std::string dir2 = tmp.sub("e");
  write_dataset(ds, dir2);
  {
    std::string csv = testsup::slurp(dir2 + "/samples.csv");
    const auto at = csv.find("oracle_time_s");
    REQUIRE(at != std::string::npos);
    csv.replace(at, 13, "bogus_column0");
    std::ofstream cf(dir2 + "/samples.csv", std::ios::binary);
    cf << csv;
  }
  REQUIRE_THROWS_MATCHES(read_dataset(dir2), ParseError,
                         MessageMatches(ContainsSubstring("header must end with")));

  const std::string dir3 = tmp.sub("f");
  write_dataset(ds, dir3);
  append_file(dir3 + "/samples.csv", "1,2,3\n");
  REQUIRE_THROWS_MATCHES(read_dataset(dir3), ParseError,
                         MessageMatches(ContainsSubstring("has 3 fields")));

  const std::string dir4 = tmp.sub("g");
  write_dataset(ds, dir4);
  {
    std::string csv = testsup::slurp(dir4 + "/samples.csv");
    const auto nl = csv.find('\n');
    csv.replace(nl + 1, 1, "x");  // clobber the first digit of line 2
    std::ofstream cf(dir4 + "/samples.csv", std::ios::binary);
    cf << csv;
  }
  REQUIRE_THROWS_MATCHES(read_dataset(dir4), ParseError,
                         MessageMatches(ContainsSubstring("samples.csv line 2")));

  const std::string dir5 = tmp.sub("h");
  write_dataset(ds, dir5);
  {
    std::string meta = testsup::slurp(dir5 + "/meta.json");
    const auto at = meta.find("\"train_idx\"");
    REQUIRE(at != std::string::npos);
    const auto open = meta.find('[', at);
    meta.replace(open, 1, "[99, ");
    std::ofstream mf(dir5 + "/meta.json", std::ios::binary);
    mf << meta;
  }
  REQUIRE_THROWS_MATCHES(read_dataset(dir5), ParseError,
                         MessageMatches(ContainsSubstring("train index out of range")));
}

TEST_CASE("scenario files parse against the case layout") {
  Network net = testsup::two_bus_network();
  testsup::TempDir tmp("scen");
  const std::string good = tmp.sub("good.csv");
  {
    std::ofstream f(good, std::ios::binary);
    f << "pd_1,pd_2,qd_1,qd_2\n"
      << "0,0.5,0,0.1\n"
      << "0,0.25,0,0.05\n";
  }
  const auto loads = read_scenarios(good, net);
  REQUIRE(loads.size() == 2);
  CHECK(loads[0].pd(1) == 0.5);
  CHECK(loads[0].qd(1) == 0.1);
  CHECK(loads[1].pd(1) == 0.25);

  const std::string bad_header = tmp.sub("bad_header.csv");
  {
    std::ofstream f(bad_header, std::ios::binary);
    f << "pd_1,pd_3,qd_1,qd_2\n";
  }
  REQUIRE_THROWS_MATCHES(read_scenarios(bad_header, net), ParseError,
                         MessageMatches(ContainsSubstring("expected 'pd_2'")));

  const std::string short_header = tmp.sub("short.csv");
  {
    std::ofstream f(short_header, std::ios::binary);
    f << "pd_1,pd_2,qd_1\n";
  }
  REQUIRE_THROWS_MATCHES(read_scenarios(short_header, net), ParseError,
                         MessageMatches(ContainsSubstring("expected 4")));

  const std::string short_row = tmp.sub("short_row.csv");
  {
    std::ofstream f(short_row, std::ios::binary);
    f << "pd_1,pd_2,qd_1,qd_2\n0,0.5\n";
  }
  REQUIRE_THROWS_MATCHES(read_scenarios(short_row, net), ParseError,
                         MessageMatches(ContainsSubstring("scenario line 2")));

  REQUIRE_THROWS_MATCHES(read_scenarios(tmp.sub("nope.csv"), net), ParseError,
                         MessageMatches(ContainsSubstring("cannot read")));
}
