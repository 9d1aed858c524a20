#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "smtjsc/stochlogic.hpp"

using namespace smtjsc;
using namespace smtjsc::logic;
using bitgen::GeneratorCode;
using oracle::random_netlist;
using oracle::scalar_eval;

namespace {

double pooled_mean(const std::vector<std::vector<std::uint32_t>>& counts, std::size_t out, std::size_t n) {
  double s = 0;
  for (auto c : counts[out]) s += c;
  return s / (static_cast<double>(n) * counts[out].size());
}

}  // namespace

TEST_CASE("transpose64 matches the naive transpose") {
  std::mt19937_64 g(5);
  std::uint64_t m[64], t[64];
  for (auto& w : m) w = g();
  std::copy(std::begin(m), std::end(m), t);
  transpose64(t);
  for (int i = 0; i < 64; ++i) {
    for (int j = 0; j < 64; ++j) CHECK_EQ((t[j] >> i) & 1u, (m[i] >> j) & 1u);
  }
}

TEST_CASE("2-input OR with inputs (1,0) gives 1") {
  StochasticNetlist net;
  const NodeId o = net.add_gate(NodeKind::or_gate, {net.add_constant(true), net.add_constant(false)});
  net.mark_output(o);
  net.finalize();
  Simulator sim(net, 1, {.lanes = 1});
  CHECK(sim.evaluate_cycle()[0] == 1u);
}

TEST_CASE("gate means match the closed forms") {
  StochasticNetlist net;
  const NodeId a = net.add_pbs(GeneratorCode(1, 1));
  const NodeId b = net.add_pbs(GeneratorCode(1, 1));
  const NodeId p = net.add_pbs(GeneratorCode(4, 3));
  const NodeId q = net.add_pbs(GeneratorCode(4, 11));
  net.mark_output(net.add_gate(NodeKind::or_gate, {a, b}));
  net.mark_output(net.add_gate(NodeKind::and_gate, {p, q}));
  net.mark_output(net.add_gate(NodeKind::nor_gate, {p, q}));
  net.mark_output(net.add_gate(NodeKind::not_gate, {p}));
  net.finalize();
  Simulator sim(net, 42);
  const std::size_t n = 1563;  // x 64 lanes ~ 1e5 samples
  const auto counts = sim.run({0, n});
  const double expect[] = {0.75, 3.0 / 16 * 11.0 / 16, (13.0 / 16) * (5.0 / 16), 13.0 / 16};
  for (std::size_t o = 0; o < 4; ++o) {
    CAPTURE(o);
    const double e = expect[o];
    CHECK(std::abs(pooled_mean(counts, o, n) - e) <= 3 * std::sqrt(e * (1 - e) / (64.0 * n)));
  }
}

TEST_CASE("20 independent Bernoulli(0.1) lines into one OR") {
  StochasticNetlist net;
  std::vector<NodeId> in;
  const auto code = GeneratorCode::nearest(10, 0.1);
  for (int i = 0; i < 20; ++i) in.push_back(net.add_pbs(code));
  net.mark_output(net.add_gate(NodeKind::or_gate, in));
  net.finalize();
  Simulator sim(net, 7);
  const std::size_t n = 1563;
  const double e = 1 - std::pow(1 - code.probability(), 20);
  CHECK(1 - std::pow(0.9, 20) == doctest::Approx(0.8784).epsilon(1e-4));
  CHECK(std::abs(pooled_mean(sim.run({0, n}), 0, n) - e) <= 3 * std::sqrt(e * (1 - e) / (64.0 * n)));
}

TEST_CASE("constant 1 over W = 10, N = 100 counts 100 on every lane") {
  StochasticNetlist net;
  net.mark_output(net.add_constant(true));
  net.finalize();
  Simulator sim(net, 1, {.lanes = 37});
  const auto c = sim.run({10, 100});
  REQUIRE(c[0].size() == 37);
  for (auto v : c[0]) CHECK(v == 100);
  CHECK_THROWS_AS(sim.run({0, 0}), std::invalid_argument);
}

TEST_CASE("isolator output is the input delayed by d, zero before") {
  for (std::uint32_t d = 0; d <= 64; ++d) {
    StochasticNetlist net;
    const NodeId src = net.add_pbs(GeneratorCode(1, 1));
    const NodeId iso = net.add_isolator(d, src);
    net.mark_output(iso);
    net.finalize();
    Simulator sim(net, d + 100);
    std::vector<std::uint64_t> in, out;
    for (int t = 0; t < 200; ++t) {
      sim.evaluate_cycle();
      in.push_back(sim.value(src));
      out.push_back(sim.value(iso));
    }
    CAPTURE(d);
    bool ok = true;
    for (std::size_t t = 0; t < out.size(); ++t) ok = ok && out[t] == (t >= d ? in[t - d] : 0);
    CHECK(ok);
  }
}

TEST_CASE("registered loop toggles") {
  StochasticNetlist net;
  const NodeId ff = net.add_isolator(1);
  const NodeId inv = net.add_gate(NodeKind::not_gate, {ff});
  net.connect_isolator(ff, inv);
  net.mark_output(ff);
  net.finalize();
  Simulator sim(net, 0, {.lanes = 1});
  for (int t = 0; t < 8; ++t) CHECK(sim.evaluate_cycle()[0] == std::uint64_t(t % 2));
}

TEST_CASE("structural errors are caught at build time") {
  StochasticNetlist net;
  const NodeId c = net.add_constant(true);
  CHECK_THROWS_AS(net.add_gate(NodeKind::or_gate, std::span<const NodeId>{}), BuildError);
  CHECK_THROWS_AS(net.add_gate(NodeKind::not_gate, {c, c}), BuildError);
  CHECK_THROWS_AS(net.add_gate(NodeKind::mux, {c, c}), BuildError);
  CHECK_THROWS_AS(net.add_gate(NodeKind::and_gate, {c, 99}), BuildError);
  CHECK_THROWS_AS(net.add_gate(NodeKind::isolator, {c}), BuildError);

  SUBCASE("unconnected isolator") {
    net.add_isolator(2);
    CHECK_THROWS_AS(net.finalize(), BuildError);
  }
  SUBCASE("loop through a zero-delay isolator") {
    const NodeId iso = net.add_isolator(0);
    net.connect_isolator(iso, net.add_gate(NodeKind::not_gate, {iso}));
    CHECK_THROWS_AS(net.finalize(), BuildError);
  }
  SUBCASE("frozen after finalize") {
    net.finalize();
    CHECK_THROWS_AS(net.add_constant(false), BuildError);
  }
}

TEST_CASE("same netlist and seed give identical counts") {
  std::mt19937_64 g(3);
  const auto net = random_netlist(g, 8, 30);
  Simulator a(net, 555), b(net, 555), c(net, 556);
  const auto ca = a.run({5, 500});
  CHECK(ca == b.run({5, 500}));
  CHECK(ca != c.run({5, 500}));
  a.reset(555);
  CHECK(ca == a.run({5, 500}));
}

TEST_CASE("packed lanes reproduce single-lane runs bit for bit") {
  for (auto model : {HalfSourceModel::ideal, HalfSourceModel::telegraph}) {
    StochasticNetlist net;
    std::mt19937_64 g(17);
    std::vector<NodeId> lines;
    for (int i = 0; i < 5; ++i) lines.push_back(net.add_pbs(GeneratorCode(4, 1 + g() % 15)));
    const NodeId x0 = net.add_input(4);
    const NodeId x1 = net.add_input(3);
    lines.push_back(x0);
    lines.push_back(x1);
    for (int k = 0; k < 25; ++k) {
      const NodeId a = lines[g() % lines.size()], b = lines[g() % lines.size()];
      lines.push_back(net.add_gate(k % 3 == 0 ? NodeKind::nor_gate : k % 3 == 1 ? NodeKind::or_gate : NodeKind::and_gate, {a, b}));
    }
    const auto iso = apply_isolator_mask(net, std::span<const NodeId>(lines).last(6), 5, 9);
    const NodeId o = net.add_gate(NodeKind::or_gate, iso);
    net.mark_output(o);
    net.mark_output(lines.back());
    net.finalize();

    std::vector<std::uint32_t> c0(64), c1(64);
    for (std::size_t l = 0; l < 64; ++l) {
      c0[l] = static_cast<std::uint32_t>(l % 17);
      c1[l] = static_cast<std::uint32_t>((l * 5) % 9);
    }
    SimulatorOptions opt;
    opt.half_sources = model;
    opt.clock_over_tau = 0.7;
    Simulator packed(net, 2024, opt);
    packed.set_input_codes(x0, c0);
    packed.set_input_codes(x1, c1);
    std::vector<std::vector<std::uint64_t>> trace;
    for (int t = 0; t < 150; ++t) {
      trace.emplace_back();
      for (NodeId id = 0; id < net.size(); ++id) {
        if (id == 0) packed.evaluate_cycle();
        trace.back().push_back(packed.value(id));
      }
    }
    bool all_equal = true;
    for (std::size_t l : {0u, 1u, 13u, 63u}) {
      SimulatorOptions one = opt;
      one.lanes = 1;
      one.lane_offset = l;
      Simulator single(net, 2024, one);
      single.set_input_code(x0, c0[l]);
      single.set_input_code(x1, c1[l]);
      for (int t = 0; t < 150; ++t) {
        single.evaluate_cycle();
        for (NodeId id = 0; id < net.size(); ++id) {
          all_equal = all_equal && ((single.value(id) & 1u) == ((trace[t][id] >> l) & 1u));
        }
      }
    }
    CHECK(all_equal);
  }
}

TEST_CASE("random netlists agree with exhaustive enumeration") {
  std::mt19937_64 g(99);
  for (int trial = 0; trial < 12; ++trial) {
    const int n_src = 2 + trial % 11;  // up to 12 sources
    const auto net = random_netlist(g, n_src, 10 + trial * 3);
    const NodeId out = net.outputs()[0];

    const double exact = oracle::exact_output_probability(net, n_src, out);

    // The packed engine agrees with the scalar reference cycle by cycle.
    Simulator sim(net, 1000 + trial);
    bool same = true;
    for (int t = 0; t < 50; ++t) {
      sim.evaluate_cycle();
      for (int l = 0; l < 64; ++l) {
        std::map<NodeId, bool> src, memo;
        for (int i = 0; i < n_src; ++i) src[static_cast<NodeId>(i)] = (sim.value(static_cast<NodeId>(i)) >> l) & 1u;
        same = same && scalar_eval(net, out, src, memo) == bool((sim.value(out) >> l) & 1u);
      }
    }
    CHECK(same);

    const std::size_t n = 1563;
    const double mean = pooled_mean(sim.run({0, n}), 0, n);
    CAPTURE(trial);
    CHECK(std::abs(mean - exact) <= 3 * std::sqrt(exact * (1 - exact) / (64.0 * n)) + 1e-12);
  }
}

TEST_CASE("OR activation bounds hold on the analytic form") {
  std::mt19937_64 g(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 10000; ++t) {
    const int m = 1 + static_cast<int>(g() % 40);
    const double scale = u(g);
    double sum = 0, prod = 1;
    for (int j = 0; j < m; ++j) {
      const double p = u(g) * scale;
      sum += p;
      prod *= 1 - p;
    }
    const double por = 1 - prod;
    CHECK(por >= 1 - std::exp(-sum) - 1e-12);
    CHECK(por <= std::min(sum, 1.0) + 1e-12);
  }
}

TEST_CASE("dual neuron Boolean behavior") {
  auto build = [](std::uint32_t we, std::uint32_t wi, std::uint32_t x, int m) {
    StochasticNetlist net;
    std::vector<NodeId> xs, e, i;
    for (int j = 0; j < m; ++j) {
      xs.push_back(net.add_pbs(GeneratorCode(4, x)));
      e.push_back(net.add_pbs(GeneratorCode(4, we)));
      i.push_back(net.add_pbs(GeneratorCode(4, wi)));
    }
    const auto dn = build_dual_neuron(net, {xs, e, i, std::nullopt, std::nullopt});
    net.mark_output(dn.output);
    net.mark_output(dn.excit_or);
    net.mark_output(dn.inhib_nor);
    net.finalize();
    return net;
  };
  SUBCASE("one excitatory synapse w=1, x=1, no inhibition: always 1") {
    const auto net = build(16, 0, 16, 1);
    Simulator sim(net, 1);
    const auto counts = sim.run({0, 100});
    for (auto c : counts[0]) CHECK(c == 100);
  }
  SUBCASE("full self-inhibition") {
    const auto net = build(16, 16, 16, 1);
    Simulator sim(net, 1);
    const auto c = sim.run({0, 100});
    for (std::size_t l = 0; l < 64; ++l) {
      CHECK(c[0][l] == 0);
      CHECK(c[1][l] == 100);
      CHECK(c[2][l] == 0);
    }
  }
  SUBCASE("zero inhibitory weights reduce to the OR of synapses") {
    const auto net = build(7, 0, 9, 4);
    Simulator sim(net, 3);
    for (int t = 0; t < 200; ++t) {
      const auto w = sim.evaluate_cycle();
      CHECK(w[0] == w[1]);
    }
  }
  SUBCASE("arity mismatch") {
    StochasticNetlist net;
    const NodeId a = net.add_pbs(GeneratorCode(4, 3));
    std::vector<NodeId> two = {a, a}, one = {a};
    CHECK_THROWS_AS(build_dual_neuron(net, {two, one, two, std::nullopt, std::nullopt}), BuildError);
  }
  SUBCASE("biases ride on the constant-1 line") {
    StochasticNetlist net;
    const NodeId be = net.add_pbs(GeneratorCode(4, 16));
    const auto dn = build_dual_neuron(net, {{}, {}, {}, be, std::nullopt});
    net.mark_output(dn.output);
    net.finalize();
    Simulator sim(net, 1);
    const auto counts = sim.run({0, 50});
    for (auto c : counts[0]) CHECK(c == 50);
  }
}

TEST_CASE("isolator masks") {
  StochasticNetlist net;
  const NodeId s = net.add_pbs(GeneratorCode(1, 1));
  std::vector<NodeId> lines(2000, s);
  SUBCASE("delta 0 is the identity") {
    for (NodeId iso : apply_isolator_mask(net, lines, 0, 1)) CHECK(net.node(iso).param == 0);
  }
  SUBCASE("delta 16 has mean delay near 8") {
    const auto iso = apply_isolator_mask(net, lines, 16, 2);
    double sum = 0;
    for (NodeId id : iso) {
      CHECK(net.node(id).param <= 16);
      sum += net.node(id).param;
    }
    // sd of the mean = sqrt(24/2000) ~ 0.11
    CHECK(sum / iso.size() == doctest::Approx(8.0).epsilon(0.05));
    StochasticNetlist other;
    const NodeId s2 = other.add_pbs(GeneratorCode(1, 1));
    std::vector<NodeId> lines2(2000, s2);
    const auto again = apply_isolator_mask(other, lines2, 16, 2);
    for (std::size_t k = 0; k < iso.size(); ++k) CHECK(net.node(iso[k]).param == other.node(again[k]).param);
  }
}

TEST_CASE("different delays decorrelate copies of one uncorrelated line") {
  StochasticNetlist net;
  const NodeId s = net.add_pbs(GeneratorCode(4, 8));
  const NodeId a = net.add_isolator(2, s);
  const NodeId b = net.add_isolator(7, s);
  const NodeId c = net.add_isolator(2, s);
  net.finalize();
  Simulator sim(net, 10, {.lanes = 1});
  std::vector<std::uint8_t> xa, xb, xc;
  for (int t = 0; t < 100000; ++t) {
    sim.evaluate_cycle();
    if (t < 7) continue;
    xa.push_back(sim.value(a) & 1u);
    xb.push_back(sim.value(b) & 1u);
    xc.push_back(sim.value(c) & 1u);
  }
  CHECK(bitgen::cross_correlation(xa, xc) == doctest::Approx(1.0));
  // Independent-pair baseline: |rho| ~ 1/sqrt(n).
  CHECK(std::abs(bitgen::cross_correlation(xa, xb)) < 3.0 / std::sqrt(double(xa.size())));
}

TEST_CASE("netlist MUX tree agrees with the generator tree") {
  for (std::uint32_t k = 1; k < 16; ++k) {
    const GeneratorCode code(4, k);
    const auto& s = code.settings();
    StochasticNetlist net;
    std::vector<NodeId> half;
    for (int j = 0; j < 4; ++j) half.push_back(net.add_pbs(GeneratorCode(1, 1)));
    NodeId cur = half[0];
    for (int r = 1; r < s.tap_row; ++r) {
      const NodeId nand = net.add_gate(NodeKind::not_gate, {net.add_gate(NodeKind::and_gate, {cur, half[r]})});
      const NodeId inv = net.add_gate(NodeKind::not_gate, {nand});
      cur = net.add_gate(NodeKind::mux, {net.constant(s.invert[r] != 0), nand, inv});
    }
    net.mark_output(cur);
    net.finalize();
    Simulator sim(net, k);
    bool ok = true;
    for (int t = 0; t < 100; ++t) {
      const auto w = sim.evaluate_cycle();
      std::uint64_t h[4];
      for (int j = 0; j < 4; ++j) h[j] = sim.value(half[j]);
      ok = ok && w[0] == bitgen::evaluate_tree<std::uint64_t>(s, std::span<const std::uint64_t>(h, 4));
    }
    CAPTURE(k);
    CHECK(ok);
  }
}

TEST_CASE("warm-up window from isolator depth") {
  StochasticNetlist net;
  NodeId cur = net.add_pbs(GeneratorCode(4, 5));
  const NodeId side = net.add_isolator(3, net.add_pbs(GeneratorCode(4, 9)));
  for (int l = 0; l < 6; ++l) {
    const NodeId g = l == 4 ? net.add_gate(NodeKind::or_gate, {cur, side}) : net.add_gate(NodeKind::not_gate, {cur});
    cur = net.add_isolator(4, g);
  }
  net.mark_output(cur);
  net.finalize();
  CHECK(net.isolator_depth() == 6);
  CHECK(net.max_delay() == 4);
  const auto w = RunWindow::for_layers(net.isolator_depth(), 16, 128);
  CHECK(w.warmup == 96);
  CHECK(w.total() == 224);
}

TEST_CASE("serialization round-trips") {
  std::mt19937_64 g(21);
  auto net = random_netlist(g, 6, 20);
  std::stringstream ss;
  net.write(ss);
  const std::string text = ss.str();
  CHECK(text.rfind("smtjsc-netlist 1\n", 0) == 0);
  std::stringstream in(text);
  const auto back = StochasticNetlist::read(in);
  std::stringstream ss2;
  back.write(ss2);
  CHECK(ss2.str() == text);
  Simulator a(net, 4), b(back, 4);
  CHECK(a.run({0, 300}) == b.run({0, 300}));

  SUBCASE("registered loop") {
    StochasticNetlist loop;
    const NodeId ff = loop.add_isolator(2);
    loop.connect_isolator(ff, loop.add_gate(NodeKind::not_gate, {ff}));
    loop.mark_output(ff);
    loop.finalize();
    std::stringstream s1;
    loop.write(s1);
    std::stringstream s2(s1.str());
    std::stringstream s3;
    StochasticNetlist::read(s2).write(s3);
    CHECK(s3.str() == s1.str());
  }
}

TEST_CASE("malformed netlist text names the line") {
  auto parse_error = [](const std::string& text) {
    std::stringstream in(text);
    try {
      StochasticNetlist::read(in);
    } catch (const BuildError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(parse_error("bogus 1\n").find("line 1") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 2\n").find("version") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 1\nnodes 2\n0 const 1\n1 zap 0\noutputs 0\n").find("line 4") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 1\nnodes 2\n0 const 1\n1 or 5\noutputs 0\n").find("line 4") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 1\nnodes 1\n0 pbs 4 17\noutputs 0\n").find("line 3") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 1\nnodes 1\n0 const 1\n").find("end of input") != std::string::npos);
  CHECK(parse_error("smtjsc-netlist 1\nnodes 2\n0 const 1\n1 isolator 0 1\noutputs 1 1\n").find("loop") != std::string::npos);
}
