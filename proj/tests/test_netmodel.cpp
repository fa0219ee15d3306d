#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <complex>
#include <string>

#include "vopf/netmodel.hpp"

#include "support.hpp"

using namespace vopf;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

bool any_diag_contains(const std::vector<std::string>& diags, const std::string& needle) {
  return std::any_of(diags.begin(), diags.end(), [&](const std::string& d) {
    return d.find(needle) != std::string::npos;
  });
}

}  // namespace

TEST_CASE("two-bus case text maps to per-unit fields", "[netmodel]") {
  const Network net = testsup::two_bus_network(50.0, 10.0);

  REQUIRE(net.n_bus() == 2);
  REQUIRE(net.n_branch() == 1);
  REQUIRE(net.n_gen() == 1);
  CHECK(net.base_mva == 100.0);

  const int b2 = net.pos(2);
  CHECK(net.buses[b2].Pd == Approx(0.5).margin(1e-15));
  CHECK(net.buses[b2].Qd == Approx(0.1).margin(1e-15));
  CHECK(net.branches[0].r == 0.0);
  CHECK(net.branches[0].x == 0.1);
  CHECK(net.branches[0].tap == 1.0);
  CHECK(net.branches[0].Smax == 0.0);

  CHECK(net.generators[0].Pmax == Approx(1.5).margin(1e-15));
  CHECK(net.generators[0].Qmin == Approx(-0.8).margin(1e-15));
  CHECK(net.generators[0].cost[0] == 0.01);
  CHECK(net.generators[0].cost[1] == 40.0);

  CHECK(net.ref_pos == net.pos(1));
  CHECK(net.buses[net.pos(1)].is_reference);
}

TEST_CASE("gencost row shortfall is a parse error", "[netmodel]") {
  std::string text = testsup::two_bus_case();
  // add a second generator without a matching cost row
  const auto at = text.find("];\nmpc.branch");
  REQUIRE(at != std::string::npos);
  text.insert(at, "\t2\t0\t0\t40\t-40\t1\t100\t1\t60\t0;\n");
  REQUIRE_THROWS_MATCHES(parse_case(text), ParseError, MessageMatches(ContainsSubstring("gencost")));
}

TEST_CASE("IEEE 118-bus case parses with the published record counts", "[netmodel]") {
  const Network net = testsup::load_case("case118.m");
  CHECK(net.n_bus() == 118);
  CHECK(net.n_gen() == 54);
  CHECK(net.n_branch() == 186);
  CHECK(validate_network(net).empty());
}

TEST_CASE("ybus of a single lossless branch", "[netmodel]") {
  const Network net = testsup::two_bus_network();
  const std::complex<double> j10(0.0, 10.0);
  CHECK(std::abs(net.ybus(0, 0) + j10) < 1e-12);
  CHECK(std::abs(net.ybus(1, 1) + j10) < 1e-12);
  CHECK(std::abs(net.ybus(0, 1) - j10) < 1e-12);
  CHECK(std::abs(net.ybus(1, 0) - j10) < 1e-12);
}

TEST_CASE("ybus with an off-nominal tap", "[netmodel]") {
  Network net = testsup::two_bus_network();
  net.branches[0].tap = 2.0;
  const Eigen::MatrixXcd Y = build_ybus(net);
  CHECK(std::abs(Y(0, 0) - std::complex<double>(0.0, -2.5)) < 1e-12);
  CHECK(std::abs(Y(0, 1) - std::complex<double>(0.0, 5.0)) < 1e-12);
  CHECK(std::abs(Y(1, 0) - std::complex<double>(0.0, 5.0)) < 1e-12);
  CHECK(std::abs(Y(1, 1) - std::complex<double>(0.0, -10.0)) < 1e-12);
}

TEST_CASE("ybus of a single bus with no branches is zero", "[netmodel]") {
  Network net;
  net.base_mva = 100.0;
  Bus b;
  b.index = 1;
  b.is_reference = true;
  net.buses.push_back(b);
  net = finalize_network(std::move(net));
  REQUIRE(net.ybus.rows() == 1);
  CHECK(net.ybus(0, 0) == std::complex<double>(0.0, 0.0));
}

TEST_CASE("bus shunts land on the diagonal", "[netmodel]") {
  const Network net = testsup::load_case("case14.m");
  const int b9 = net.pos(9);
  // bus 9 carries Bs = 19 MVAr at nominal voltage
  Network bare = net;
  bare.buses[b9].Bs = 0.0;
  const Eigen::MatrixXcd Y0 = build_ybus(bare);
  CHECK(std::abs((net.ybus(b9, b9) - Y0(b9, b9)) - std::complex<double>(0.0, 0.19)) < 1e-12);
}

TEST_CASE("zero series impedance is rejected naming the branch", "[netmodel]") {
  std::string text = testsup::two_bus_case();
  const auto at = text.find("1\t2\t0\t0.1");
  REQUIRE(at != std::string::npos);
  text.replace(at, 9, "1\t2\t0\t0\t");
  REQUIRE_THROWS_MATCHES(parse_case(text), ValidationError, MessageMatches(ContainsSubstring("1-2")));
}

TEST_CASE("per-unit round trip recovers the case-file values", "[netmodel]") {
  const Network net = testsup::load_case("case14.m");
  const double base = net.base_mva;
  CHECK(net.buses[net.pos(3)].Pd * base == Approx(94.2).epsilon(1e-12));
  CHECK(net.buses[net.pos(2)].Qd * base == Approx(12.7).epsilon(1e-12));
  CHECK(net.buses[net.pos(9)].Bs * base == Approx(19.0).epsilon(1e-12));
  CHECK(net.generators[1].Qmax * base == Approx(50.0).epsilon(1e-12));
  CHECK(net.generators[0].Pmax * base == Approx(332.4).epsilon(1e-12));
  // impedances and taps are already per-unit in the file and must pass through
  CHECK(net.branches[0].r == 0.01938);
  CHECK(net.branches[7].tap == 0.978);
}

TEST_CASE("ybus is symmetric when taps and shifts are absent", "[netmodel]") {
  Network net = testsup::load_case("case14.m");
  for (auto& br : net.branches) {
    br.tap = 1.0;
    br.shift = 0.0;
  }
  const Eigen::MatrixXcd Y = build_ybus(net);
  const double asym = (Y - Y.transpose()).cwiseAbs().maxCoeff();
  CHECK(asym < 1e-14);

  // real taps keep the matrix symmetric; a phase shifter is what breaks it
  const Network stock = testsup::load_case("case14.m");
  CHECK((stock.ybus - stock.ybus.transpose()).cwiseAbs().maxCoeff() < 1e-14);

  Network shifted = testsup::load_case("case14.m");
  shifted.branches[7].shift = 0.2;
  const Eigen::MatrixXcd Ys = build_ybus(shifted);
  CHECK((Ys - Ys.transpose()).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("JSON round trip reproduces the model", "[netmodel]") {
  const Network net = testsup::load_case("case14.m");
  const std::string json = to_json_case(net).dump();
  const Network back = parse_case(json);

  CHECK(back == net);
  CHECK(network_fingerprint(back) == network_fingerprint(net));
  CHECK(to_json_case(back).dump() == json);

  const Network net118 = testsup::load_case("case118.m");
  const Network back118 = parse_case(to_json_case(net118).dump());
  CHECK(back118 == net118);
}

TEST_CASE("reference bus bookkeeping is enforced", "[netmodel]") {
  SECTION("no reference bus") {
    std::string text = testsup::two_bus_case();
    const auto at = text.find("1\t3\t0");
    REQUIRE(at != std::string::npos);
    text.replace(at, 5, "1\t2\t0");
    REQUIRE_THROWS_MATCHES(parse_case(text), ValidationError,
                           MessageMatches(ContainsSubstring("no reference bus")));
  }
  SECTION("duplicate reference bus") {
    std::string text = testsup::two_bus_case(50.0, 10.0);
    const auto at = text.find("2\t1\t5");
    REQUIRE(at != std::string::npos);
    text.replace(at, 5, "2\t3\t5");
    REQUIRE_THROWS_MATCHES(parse_case(text), ValidationError,
                           MessageMatches(ContainsSubstring("duplicate reference")));
  }
  SECTION("duplicate bus id") {
    std::string text = testsup::two_bus_case();
    const auto at = text.find("2\t1\t0");
    REQUIRE(at != std::string::npos);
    text.replace(at, 1, "1");
    REQUIRE_THROWS_MATCHES(parse_case(text), ValidationError,
                           MessageMatches(ContainsSubstring("duplicate bus id")));
  }
}

TEST_CASE("isolated bus in the case text is rejected", "[netmodel]") {
  std::string text = testsup::three_bus_case();
  const auto at = text.find("\t2\t3\t0.01");
  REQUIRE(at != std::string::npos);
  text.erase(at, text.find(";\n", at) + 2 - at);
  REQUIRE_THROWS_MATCHES(parse_case(text), ValidationError, MessageMatches(ContainsSubstring("isolated")));
}

TEST_CASE("validate_network reports soft data issues", "[netmodel]") {
  SECTION("well-formed case is clean") {
    CHECK(validate_network(testsup::load_case("case14.m")).empty());
    CHECK(validate_network(testsup::load_case("case30.m")).empty());
  }
  SECTION("inverted voltage band names the bus") {
    std::string text = testsup::two_bus_case();
    const auto at = text.rfind("1.1\t0.9");
    REQUIRE(at != std::string::npos);
    text.replace(at, 7, "0.9\t1.1");
    const Network net = parse_case(text);
    const auto diags = validate_network(net);
    REQUIRE_FALSE(diags.empty());
    CHECK(any_diag_contains(diags, "bus 2"));
    CHECK(any_diag_contains(diags, "Vmin > Vmax"));
  }
  SECTION("isolated bus surfaces as a diagnostic on a hand-built model") {
    Network net;
    net.base_mva = 100.0;
    for (int id = 1; id <= 3; ++id) {
      Bus b;
      b.index = id;
      b.is_reference = (id == 1);
      net.buses.push_back(b);
      net.pos_of_id[id] = id - 1;
    }
    Branch br;
    br.from = 1;
    br.to = 2;
    br.x = 0.1;
    net.branches.push_back(br);
    net.ref_pos = 0;
    net.ybus = Eigen::MatrixXcd::Zero(3, 3);
    const auto diags = validate_network(net);
    CHECK(any_diag_contains(diags, "bus 3: isolated"));
    CHECK(any_diag_contains(diags, "disconnected"));
  }
}

TEST_CASE("fingerprint tracks the network content", "[netmodel]") {
  const Network a = testsup::load_case("case14.m");
  const Network b = testsup::load_case("case14.m");
  const Network c = testsup::load_case("case30.m");
  CHECK(network_fingerprint(a) == network_fingerprint(b));
  CHECK(network_fingerprint(a) != network_fingerprint(c));

  Network tweaked = a;
  tweaked.buses[3].Pd += 1e-9;
  CHECK(network_fingerprint(tweaked) != network_fingerprint(a));
}

TEST_CASE("case source detection and structural errors", "[netmodel]") {
  CHECK_THROWS_AS(parse_case(""), ParseError);
  CHECK_THROWS_AS(parse_case("   \n\t "), ParseError);
  CHECK_THROWS_MATCHES(parse_case("function mpc = x\nmpc.baseMVA = 100;\n"), ParseError,
                       MessageMatches(ContainsSubstring("bus")));
  CHECK_THROWS_AS(parse_case("{\"base_mva\": 100}"), ParseError);

  // short bus row names the table and row
  std::string text = testsup::two_bus_case();
  const auto at = text.find("\t135\t1\t1.1\t0.9;\n\t2");
  REQUIRE(at != std::string::npos);
  text.replace(at, 16, ";\n");
  REQUIRE_THROWS_MATCHES(parse_case(text), ParseError,
                         MessageMatches(ContainsSubstring("table bus, row 1")));
}

TEST_CASE("non-positive tap is rejected at construction", "[netmodel]") {
  Network net = testsup::two_bus_network();
  net.branches[0].tap = -0.5;
  REQUIRE_THROWS_MATCHES(finalize_network(std::move(net)), ValidationError,
                         MessageMatches(ContainsSubstring("non-positive tap")));
}

TEST_CASE("out-of-service records are dropped", "[netmodel]") {
  std::string text = testsup::three_bus_case();
  // second branch out of service would isolate bus 3, so park a spare in service
  const auto at = text.find("\t2\t3\t0.01\t0.08\t0\t0\t0\t0\t0\t0\t1");
  REQUIRE(at != std::string::npos);
  std::string dup = text;
  dup.insert(at, "\t1\t3\t0.02\t0.2\t0\t0\t0\t0\t0\t0\t0\t-360\t360;\n");
  const Network net = parse_case(dup);
  CHECK(net.n_branch() == 2);  // the status-0 branch is gone
}
