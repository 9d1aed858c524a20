#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "smtjsc/network.hpp"

using namespace smtjsc;
using namespace smtjsc::net;

namespace {

std::vector<double> random_image(const Shape& s, std::mt19937_64& g) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(s.size());
  for (double& x : v) x = u(g);
  return v;
}

void randomize(DualNetwork& n, std::mt19937_64& g, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  n.for_each_parameter([&](double& p) { p = u(g); });
}

std::vector<double> params_of(const DualNetwork& n) {
  std::vector<double> v;
  n.for_each_parameter([&](double p) { v.push_back(p); });
  return v;
}

// 2-class 4x4 task: class 0 lights the left half, class 1 the right half.
LabeledImages halves_task(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> bright(0.6, 1.0), dim(0.0, 0.3);
  LabeledImages d;
  d.shape = {1, 4, 4};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) d.pixels.push_back((x >= 2) == (label == 1) ? bright(g) : dim(g));
    }
    d.labels.push_back(static_cast<std::uint8_t>(label));
  }
  return d;
}

}  // namespace

TEST_CASE("neuron_forward examples") {
  const std::vector<double> one = {1.0}, zero = {0.0};
  CHECK(neuron_forward(one, one, zero, 0, 0) == 1.0);
  const std::vector<double> x = {1, 1}, we = {0.5, 0.5}, wi = {0, 0};
  CHECK(neuron_forward(x, we, wi, 0, 0) == doctest::Approx(0.75));
  CHECK(neuron_forward(one, one, one, 0, 0) == 0.0);
  // Biases act as synapses on a constant-1 line.
  CHECK(neuron_forward(zero, zero, zero, 0.25, 0.5) == doctest::Approx(0.25 * 0.5));
  CHECK_THROWS_AS(neuron_forward(x, one, one, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(neuron_forward(one, std::vector<double>{1.5}, zero, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(neuron_forward(one, one, zero, -0.1, 0), std::invalid_argument);
}

TEST_CASE("LeNet5 topology") {
  const auto n = DualNetwork::lenet5();
  CHECK(n.parameter_count() == 123412);
  CHECK(n.isolator_layers() == 6);
  CHECK(n.layers().size() == 7);
  CHECK(n.output_shape() == Shape{10, 1, 1});
  CHECK(n.layers()[2].out == Shape{16, 10, 10});
  CHECK(n.layers()[3].out == Shape{16, 5, 5});
  CHECK(n.layers()[4].fan_in() == 400);
  CHECK(n.layers()[1].parameter_count() == 0);
  DualNetwork bad({1, 5, 5});
  CHECK_THROWS_AS(bad.add_convolution(2, 6, false), logic::BuildError);
  CHECK_THROWS_AS(bad.add_or_pool(2, false), logic::BuildError);
}

TEST_CASE("forward edge cases") {
  auto n = DualNetwork::lenet5();
  std::mt19937_64 g(1);
  randomize(n, g);
  for (auto& l : n.layers()) {
    std::fill(l.b_excit.begin(), l.b_excit.end(), 0.0);
    std::fill(l.b_inhib.begin(), l.b_inhib.end(), 0.0);
  }
  const std::vector<double> black(1024, 0.0), white(1024, 1.0);
  for (double y : forward(n, black)) CHECK(y == 0.0);

  auto full = n.filled(1.0);
  for (auto& l : full.layers()) std::fill(l.w_inhib.begin(), l.w_inhib.end(), 0.0);
  for (auto& l : full.layers()) std::fill(l.b_inhib.begin(), l.b_inhib.end(), 0.0);
  for (double y : forward(full, white)) CHECK(y == 1.0);

  CHECK_THROWS_AS(forward(n, std::vector<double>(784, 0.5)), logic::BuildError);
}

TEST_CASE("activations stay in [0,1]") {
  std::mt19937_64 g(2);
  auto n = DualNetwork::lenet5();
  for (int trial = 0; trial < 3; ++trial) {
    randomize(n, g);
    Workspace ws;
    forward(n, random_image(n.input_shape(), g), ws);
    for (const auto& a : ws.act) {
      for (double v : a) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }
  }
}

TEST_CASE("convolution and pooling match a direct evaluation") {
  std::mt19937_64 g(3);
  DualNetwork n({2, 6, 6});
  n.add_convolution(3, 3, false).add_or_pool(2, false);
  randomize(n, g);
  const auto img = random_image(n.input_shape(), g);
  Workspace ws;
  forward(n, img, ws);
  const auto& c = n.layers()[0];
  for (int oc = 0; oc < 3; ++oc) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        std::vector<double> field, we, wi;
        for (int ic = 0; ic < 2; ++ic) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              field.push_back(img[(ic * 6 + y + ky) * 6 + x + kx]);
              const std::size_t w = ((oc * 2 + ic) * 3 + ky) * 3 + kx;
              we.push_back(c.w_excit[w]);
              wi.push_back(c.w_inhib[w]);
            }
          }
        }
        CHECK(ws.act[1][(oc * 4 + y) * 4 + x] ==
              doctest::Approx(neuron_forward(field, we, wi, c.b_excit[oc], c.b_inhib[oc])).epsilon(1e-14));
      }
    }
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 2; ++x) {
        double p = 1;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) p *= 1 - ws.act[1][(oc * 4 + 2 * y + dy) * 4 + 2 * x + dx];
        }
        CHECK(ws.act[2][(oc * 2 + y) * 2 + x] == doctest::Approx(1 - p).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("analytic neuron equals exhaustive expectation over independent lines") {
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 6; ++trial) {
    const int m = 2 + trial % 4;  // up to 5 inputs, 22 Bernoulli variables
    DualNetwork n({1, 1, m});
    n.add_fully_connected(1, true).add_fully_connected(1, false);
    randomize(n, g);
    const auto img = random_image(n.input_shape(), g);
    const std::vector<double> x(img.begin(), img.end());
    const auto& l0 = n.layers()[0];
    const auto& l1 = n.layers()[1];
    const double h = oracle::dual_neuron_expectation(x, l0.w_excit, l0.w_inhib, l0.b_excit[0], l0.b_inhib[0], false);
    const double y = oracle::dual_neuron_expectation({h}, l1.w_excit, l1.w_inhib, l1.b_excit[0], l1.b_inhib[0], false);
    CAPTURE(trial);
    CHECK(forward(n, img)[0] == doctest::Approx(y).epsilon(1e-12));

    // Binary inputs carry no correlation between the two branches.
    std::vector<double> bits(x.size());
    for (std::size_t j = 0; j < bits.size(); ++j) bits[j] = static_cast<double>(g() % 2);
    const double shared = oracle::dual_neuron_expectation(bits, l0.w_excit, l0.w_inhib, l0.b_excit[0], l0.b_inhib[0], true);
    CHECK(neuron_forward(bits, l0.w_excit, l0.w_inhib, l0.b_excit[0], l0.b_inhib[0]) ==
          doctest::Approx(shared).epsilon(1e-12));
  }
}

TEST_CASE("an input shared by both branches breaks the product form") {
  // x feeds w_e and w_i together, so E[z] is not the product of branch means.
  const std::vector<double> x = {0.5}, we = {1.0}, wi = {1.0};
  CHECK(neuron_forward(x, we, wi, 0, 0) == doctest::Approx(0.25));
  CHECK(oracle::dual_neuron_expectation(x, we, wi, 0, 0, true) == 0.0);
  CHECK(oracle::dual_neuron_expectation(x, we, wi, 0, 0, false) == doctest::Approx(0.25));
}

TEST_CASE("backpropagation matches central finite differences") {
  CHECK(oracle::gradient_check_max_relative_error(20, 11) < 1e-5);
}

TEST_CASE("leave-one-out product survives a saturated factor") {
  // w x = 1 makes one factor exactly zero; the division shortcut would give 0/0.
  DualNetwork n({1, 1, 3});
  n.add_fully_connected(1, false);
  auto& l = n.layers()[0];
  l.w_excit = {1.0, 0.3, 0.6};
  l.w_inhib = {0.2, 1.0, 0.1};
  l.b_excit = {0.2};
  l.b_inhib = {0.1};
  const std::vector<double> x = {1.0, 1.0, 0.5};
  auto grad = n.filled(0.0);
  Workspace ws;
  loss_and_gradient(n, x, 0, ws, grad);
  const double y = ws.act.back()[0];
  const double gy = 2 * (y - 1);
  // A = 0 and B = 0 here; only the saturated inhibitory synapse carries gradient.
  const double b_loo1 = 0.9 * 0.8 * 0.95;  // inhib product without synapse 1
  const auto& gl = grad.layers()[0];
  for (double v : gl.w_excit) CHECK(v == 0.0);
  CHECK(gl.w_inhib[0] == 0.0);
  CHECK(gl.w_inhib[1] == doctest::Approx(-gy * 1.0 * b_loo1));
  CHECK(gl.w_inhib[2] == 0.0);
}

TEST_CASE("zero input gives zero first-layer weight gradients") {
  std::mt19937_64 g(5);
  auto n = oracle::toy_network();
  randomize(n, g, 0.05, 0.95);
  const std::vector<double> black(n.input_shape().size(), 0.0);
  auto grad = n.filled(0.0);
  Workspace ws;
  loss_and_gradient(n, black, 1, ws, grad);
  for (double v : grad.layers()[0].w_excit) CHECK(v == 0.0);
  for (double v : grad.layers()[0].w_inhib) CHECK(v == 0.0);
  CHECK(grad.layers()[0].b_excit[0] != 0.0);
}

TEST_CASE("identical hidden units receive identical gradients") {
  std::mt19937_64 g(6);
  DualNetwork n({1, 1, 5});
  n.add_fully_connected(3, false).add_fully_connected(2, false);
  randomize(n, g, 0.05, 0.95);
  auto& h = n.layers()[0];
  for (std::size_t o = 1; o < 3; ++o) {
    for (std::size_t k = 0; k < 5; ++k) {
      h.w_excit[o * 5 + k] = h.w_excit[k];
      h.w_inhib[o * 5 + k] = h.w_inhib[k];
    }
    h.b_excit[o] = h.b_excit[0];
    h.b_inhib[o] = h.b_inhib[0];
  }
  auto& out = n.layers()[1];
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t k = 1; k < 3; ++k) {
      out.w_excit[o * 3 + k] = out.w_excit[o * 3];
      out.w_inhib[o * 3 + k] = out.w_inhib[o * 3];
    }
  }
  auto grad = n.filled(0.0);
  Workspace ws;
  loss_and_gradient(n, random_image(n.input_shape(), g), 0, ws, grad);
  const auto& gh = grad.layers()[0];
  for (std::size_t o = 1; o < 3; ++o) {
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(gh.w_excit[o * 5 + k] == doctest::Approx(gh.w_excit[k]).epsilon(1e-14));
      CHECK(gh.w_inhib[o * 5 + k] == doctest::Approx(gh.w_inhib[k]).epsilon(1e-14));
    }
  }
}

TEST_CASE("RMSProp step projects onto [0,1]") {
  DualNetwork n({1, 1, 2});
  n.add_fully_connected(1, false);
  n.layers()[0].w_excit = {0.001, 0.999};
  auto grad = n.filled(0.0);
  grad.layers()[0].w_excit = {1.0, -1.0};
  grad.layers()[0].w_inhib = {0.5, 0.0};
  auto rms = n.filled(0.0);
  TrainConfig cfg;
  rmsprop_step(n, grad, rms, cfg);
  // |step| = lr / sqrt(0.05) ~ 0.022, so both weights hit the bounds.
  CHECK(n.layers()[0].w_excit[0] == 0.0);
  CHECK(n.layers()[0].w_excit[1] == 1.0);
  CHECK(rms.layers()[0].w_excit[0] == doctest::Approx(0.05));
  CHECK(rms.layers()[0].w_inhib[0] == doctest::Approx(0.05 * 0.25));
  CHECK(rms.layers()[0].w_inhib[1] == 0.0);
  CHECK(n.layers()[0].w_inhib[1] == 0.0);
}

TEST_CASE("training separates a toy task and stays in range") {
  DualNetwork topo({1, 4, 4});
  topo.add_fully_connected(2, false);
  const auto data = halves_task(64, 1);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.inits = 2;
  cfg.validation_fraction = 0.0;
  cfg.threads = 1;
  std::size_t epochs_seen = 0;
  const auto r = train(topo, data, cfg, [&](const EpochRecord&) { ++epochs_seen; });
  CHECK(epochs_seen == 100);
  CHECK(analytic_accuracy(r.best, data) == 1.0);
  r.best.for_each_parameter([](double p) {
    REQUIRE(p >= 0.0);
    REQUIRE(p <= 1.0);
  });
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
}

TEST_CASE("training does not depend on the thread count") {
  auto topo = oracle::toy_network();
  std::mt19937_64 g(7);
  LabeledImages data;
  data.shape = topo.input_shape();
  for (int i = 0; i < 40; ++i) {
    const auto img = random_image(data.shape, g);
    data.pixels.insert(data.pixels.end(), img.begin(), img.end());
    data.labels.push_back(static_cast<std::uint8_t>(i % 3));
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.inits = 2;
  cfg.batch_size = 10;
  cfg.threads = 1;
  const auto a = train(topo, data, cfg);
  cfg.threads = 3;
  const auto b = train(topo, data, cfg);
  CHECK(params_of(a.best) == params_of(b.best));
  CHECK(a.best_init == b.best_init);
}

TEST_CASE("non-finite loss aborts initializations") {
  DualNetwork topo({1, 1, 2});
  topo.add_fully_connected(2, false);
  LabeledImages data;
  data.shape = topo.input_shape();
  data.pixels = {std::numeric_limits<double>::quiet_NaN(), 0.5, 0.5, 0.5};
  data.labels = {0, 1};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.inits = 2;
  cfg.validation_fraction = 0.0;
  CHECK_THROWS_AS(train(topo, data, cfg), std::runtime_error);
  CHECK_THROWS_AS(train(topo, LabeledImages{topo.input_shape(), {}, {}}, cfg), std::invalid_argument);
}

TEST_CASE("quantization") {
  DualNetwork n({1, 1, 4});
  n.add_fully_connected(1, false);
  n.layers()[0].w_excit = {0.531, 0.0, 1.0, 0.53125};
  n.layers()[0].w_inhib = {0.59375, 0.04, 0.96, 0.5};
  const auto q = quantize(n);
  CHECK(q.layers()[0].w_excit == std::vector<double>{0.5, 0.0, 1.0, 0.5});
  CHECK(q.layers()[0].w_inhib == std::vector<double>{0.625, 0.0625, 0.9375, 0.5});
  CHECK(is_quantized(q));
  CHECK_FALSE(is_quantized(n));
  CHECK(params_of(quantize(q)) == params_of(q));
}

TEST_CASE("model files round-trip") {
  std::mt19937_64 g(8);
  auto n = DualNetwork::lenet5();
  randomize(n, g);
  SUBCASE("real values, lossless") {
    std::stringstream ss;
    write_model(ss, n, ModelEncoding::real, {4, 77});
    ModelHeader h;
    const auto back = read_model(ss, &h);
    CHECK(h.seed == 77);
    CHECK(back.same_topology(n));
    CHECK(params_of(back) == params_of(n));
  }
  SUBCASE("integer codes") {
    const auto q = quantize(n);
    std::stringstream ss;
    write_model(ss, q, ModelEncoding::codes, {4, 5});
    CHECK(ss.str().find("encoding codes") != std::string::npos);
    const auto back = read_model(ss);
    CHECK(params_of(back) == params_of(q));
    std::stringstream bad;
    CHECK_THROWS_AS(write_model(bad, n, ModelEncoding::codes, {4, 5}), std::invalid_argument);
  }
}

TEST_CASE("malformed model text names the line") {
  auto expect = [](const std::string& text, const std::string& fragment) {
    std::istringstream is(text);
    try {
      read_model(is);
      FAIL("accepted: " << text);
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  const std::string head = "smtjsc-model 1\ninput 1 1 2\nprecision 4\nseed 1\nencoding codes\nlayers 1\n";
  expect("nonsense\n", "line 1");
  expect("smtjsc-model 2\n", "version");
  expect(head + "dense 1 direct\nparam 0 w_excit 2 3 17\nend\n", "line 8: bad weight code");
  expect(head + "dense 1 direct\nparam 0 w_excit 3 1 2 3\nend\n", "topology needs 2");
  expect(head + "conv 1 5 direct\nend\n", "line 7");
  expect(head + "dense 1 direct\nparam 0 w_excit 2 1\nend\n", "ends early");
}

TEST_CASE("compile a single neuron") {
  DualNetwork n({1, 1, 4});
  n.add_fully_connected(1, false);
  auto& l = n.layers()[0];
  l.w_excit = {0.25, 0.5, 0.75, 1.0};
  l.w_inhib = {0.0625, 0.125, 0.1875, 0.25};
  l.b_excit = {0.125};
  l.b_inhib = {0.0625};
  const auto c = compile(n, {});
  CHECK(c.census.synapses == 2 * (4 + 1));
  CHECK(c.census.neurons == 1);
  CHECK(c.census.weight_generators == 10);
  CHECK(c.census.input_generators == 4);
  CHECK(c.census.isolators == 0);
  CHECK(c.netlist.count(logic::NodeKind::and_gate) == 2 * (4 + 1) + 1);
  CHECK(c.netlist.count(logic::NodeKind::or_gate) == 1);
  CHECK(c.netlist.count(logic::NodeKind::nor_gate) == 1);
  CHECK(c.window(16, 128).total() == 128);

  l.w_excit[0] = 0.3;
  CHECK_THROWS_AS(compile(n, {}), logic::BuildError);
}

TEST_CASE("zero weights are pruned") {
  DualNetwork n({1, 1, 3});
  n.add_fully_connected(1, false);
  n.layers()[0].w_excit = {0.0, 0.5, 0.0};
  n.layers()[0].w_inhib = {0.0, 0.0, 0.0};
  n.layers()[0].b_excit = {0.25};
  n.layers()[0].b_inhib = {0.5};
  const auto c = compile(n, {});
  CHECK(c.census.weight_generators == 8);
  // One excitatory weight plus the two bias lines.
  CHECK(c.census.synapses == 3);
}

TEST_CASE("compiled single neuron matches its expectation") {
  std::mt19937_64 g(9);
  DualNetwork n({1, 1, 4});
  n.add_fully_connected(1, false);
  randomize(n, g);
  n = quantize(n);
  const auto c = compile(n, {});
  const auto& l = n.layers()[0];

  // Binary pixels: the analytic form is exact. Fractional pixels (on the 1/16
  // grid) are shared by both branches, so the reference is the enumerated
  // shared-input expectation.
  const std::vector<double> binary = {1.0, 0.0, 1.0, 1.0};
  const std::vector<double> fractional = {0.1875, 0.5, 0.8125, 1.0};
  const double p_binary = forward(n, binary)[0];
  CHECK(p_binary == doctest::Approx(oracle::dual_neuron_expectation(binary, l.w_excit, l.w_inhib, l.b_excit[0],
                                                                    l.b_inhib[0], true)));
  const double p_frac =
      oracle::dual_neuron_expectation(fractional, l.w_excit, l.w_inhib, l.b_excit[0], l.b_inhib[0], true);

  for (auto [img, p] : {std::pair{binary, p_binary}, std::pair{fractional, p_frac}}) {
    CAPTURE(p);
    LabeledImages data;
    data.shape = n.input_shape();
    for (int i = 0; i < 640; ++i) {
      data.pixels.insert(data.pixels.end(), img.begin(), img.end());
      data.labels.push_back(0);
    }
    {  // 3 sigma at N = 128
      const auto r = stochastic_inference(c, data.head(64), c.window(16, 128), 3, 1);
      double ones = 0;
      for (const auto& cnt : r.counts) ones += cnt[0];
      const double n_samples = 64.0 * 128;
      CHECK(std::abs(ones / n_samples - p) <= 3 * std::sqrt(p * (1 - p) / n_samples));
    }
    {  // error shrinks as N^-1/2
      const std::size_t cps[] = {128, 512, 2048};
      const auto rs = stochastic_inference_checkpoints(c, data, 0, cps, 4, 1);
      for (std::size_t k = 0; k < 3; ++k) {
        double mse = 0;
        for (const auto& cnt : rs[k].counts) {
          const double e = cnt[0] / static_cast<double>(cps[k]) - p;
          mse += e * e;
        }
        mse /= static_cast<double>(data.size());
        CAPTURE(cps[k]);
        // N * MSE estimates p(1-p); 640 estimates give it to ~6 %.
        CHECK(cps[k] * mse == doctest::Approx(p * (1 - p)).epsilon(0.2));
      }
    }
  }
}

TEST_CASE("stochastic inference is reproducible and thread independent") {
  std::mt19937_64 g(10);
  auto n = oracle::toy_network();
  randomize(n, g);
  n = quantize(n);
  const auto c = compile(n, {.delta_max = 4, .seed = 2});
  LabeledImages data;
  data.shape = n.input_shape();
  for (int i = 0; i < 150; ++i) {
    const auto img = random_image(data.shape, g);
    data.pixels.insert(data.pixels.end(), img.begin(), img.end());
    data.labels.push_back(0);
  }
  const auto w = c.window(4, 32);
  CHECK(w.warmup == 3 * 4);
  const auto a = stochastic_inference(c, data, w, 5, 1);
  const auto b = stochastic_inference(c, data, w, 5, 3);
  CHECK(a.counts == b.counts);
  CHECK(a.predictions == b.predictions);
  const auto d = stochastic_inference(c, data, w, 6, 1);
  CHECK(a.counts != d.counts);
}

TEST_CASE("compiled LeNet5 census and window") {
  std::mt19937_64 g(12);
  auto n = DualNetwork::lenet5();
  randomize(n, g, 0.01, 1.0);
  n = quantize(n);
  std::size_t nonzero = 0;
  n.for_each_parameter([&](double p) { nonzero += p != 0; });
  const auto c = compile(n, {});
  CHECK(c.census.weight_generators == 123412);
  CHECK(c.census.input_generators == 1024);
  CHECK(c.census.neurons == 6 * 28 * 28 + 16 * 10 * 10 + 120 + 84 + 10);
  CHECK(c.census.pool_gates == 6 * 14 * 14 + 16 * 5 * 5);
  CHECK(c.census.isolators == 6 * 28 * 28 + 6 * 14 * 14 + 16 * 10 * 10 + 16 * 5 * 5 + 120 + 84);
  CHECK(c.census.isolator_layers == 6);
  CHECK(c.window(16, 128).total() == 6 * 16 + 128);
  CHECK(c.netlist.outputs().size() == 10);
}
