#include "smtjsc/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <istream>
#include <mutex>
#include <numeric>
#include <optional>
#include <cstdio>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "smtjsc/rng.hpp"

namespace smtjsc::net {

namespace {

using logic::BuildError;

// Below this, (1 - w x) is too small to divide by; the leave-one-out product
// is recomputed directly instead.
constexpr double kLooFloor = 1e-4;

// Products prod(1 - w_j x_j) of both branches for one neuron.
inline void neuron_products(const double* x, const double* we, const double* wi, std::size_t m,
                            double& pe, double& pi) {
  double a = 1.0, b = 1.0;
  for (std::size_t j = 0; j < m; ++j) {
    a *= 1.0 - we[j] * x[j];
    b *= 1.0 - wi[j] * x[j];
  }
  pe = a;
  pi = b;
}

inline double leave_one_out(const double* x, const double* w, std::size_t m, std::size_t k) {
  double p = 1.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (j != k) p *= 1.0 - w[j] * x[j];
  }
  return p;
}

// Adds the gradients of one neuron. gA, gB are dL/dA and dL/dB; pe, pi the
// cached products without bias.
inline void neuron_backward(const double* x, const double* we, const double* wi, std::size_t m,
                            double be, double bi, double pe, double pi, double gA, double gB,
                            double* g_we, double* g_wi, double& g_be, double& g_bi, double* g_x) {
  g_be -= gA * pe;
  g_bi -= gB * pi;
  const double se = 1.0 - be, si = 1.0 - bi;
  for (std::size_t k = 0; k < m; ++k) {
    const double fe = 1.0 - we[k] * x[k];
    const double fi = 1.0 - wi[k] * x[k];
    const double loo_e = se * (fe > kLooFloor ? pe / fe : leave_one_out(x, we, m, k));
    const double loo_i = si * (fi > kLooFloor ? pi / fi : leave_one_out(x, wi, m, k));
    // dA/dw = -x A_{-k}, dA/dx = -w A_{-k}; likewise for B.
    g_we[k] -= gA * x[k] * loo_e;
    g_wi[k] -= gB * x[k] * loo_i;
    if (g_x) g_x[k] -= gA * we[k] * loo_e + gB * wi[k] * loo_i;
  }
}

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + " outside [0,1]");
}

}  // namespace

const char* to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::convolution: return "conv";
    case LayerKind::or_pool: return "pool";
    case LayerKind::fully_connected: return "dense";
  }
  return "?";
}

std::size_t DualLayer::fan_in() const noexcept {
  switch (kind) {
    case LayerKind::convolution:
      return static_cast<std::size_t>(in.channels) * static_cast<std::size_t>(kernel * kernel);
    case LayerKind::or_pool: return static_cast<std::size_t>(kernel * kernel);
    case LayerKind::fully_connected: return in.size();
  }
  return 0;
}

DualNetwork::DualNetwork(Shape input) : input_(input) {
  if (input.channels < 1 || input.height < 1 || input.width < 1) {
    throw BuildError("DualNetwork: input shape must be positive");
  }
}

const Shape& DualNetwork::output_shape() const noexcept {
  return layers_.empty() ? input_ : layers_.back().out;
}

DualNetwork& DualNetwork::add_convolution(int out_channels, int kernel, bool isolator) {
  const Shape in = output_shape();
  if (out_channels < 1 || kernel < 1 || kernel > in.height || kernel > in.width) {
    throw BuildError("add_convolution: kernel " + std::to_string(kernel) + " does not fit a " +
                     std::to_string(in.height) + "x" + std::to_string(in.width) + " input");
  }
  DualLayer l;
  l.kind = LayerKind::convolution;
  l.in = in;
  l.out = {out_channels, in.height - kernel + 1, in.width - kernel + 1};
  l.kernel = kernel;
  const std::size_t nw = static_cast<std::size_t>(out_channels) * l.fan_in();
  l.w_excit.assign(nw, 0.0);
  l.w_inhib.assign(nw, 0.0);
  l.b_excit.assign(static_cast<std::size_t>(out_channels), 0.0);
  l.b_inhib.assign(static_cast<std::size_t>(out_channels), 0.0);
  l.has_isolator = isolator;
  layers_.push_back(std::move(l));
  return *this;
}

DualNetwork& DualNetwork::add_or_pool(int window, bool isolator) {
  const Shape in = output_shape();
  if (window < 1 || in.height % window != 0 || in.width % window != 0) {
    throw BuildError("add_or_pool: window " + std::to_string(window) + " does not divide a " +
                     std::to_string(in.height) + "x" + std::to_string(in.width) + " input");
  }
  DualLayer l;
  l.kind = LayerKind::or_pool;
  l.in = in;
  l.out = {in.channels, in.height / window, in.width / window};
  l.kernel = window;
  l.has_isolator = isolator;
  layers_.push_back(std::move(l));
  return *this;
}

DualNetwork& DualNetwork::add_fully_connected(int outputs, bool isolator) {
  if (outputs < 1) throw BuildError("add_fully_connected: need at least one output");
  DualLayer l;
  l.kind = LayerKind::fully_connected;
  l.in = output_shape();
  l.out = {outputs, 1, 1};
  const std::size_t nw = static_cast<std::size_t>(outputs) * l.in.size();
  l.w_excit.assign(nw, 0.0);
  l.w_inhib.assign(nw, 0.0);
  l.b_excit.assign(static_cast<std::size_t>(outputs), 0.0);
  l.b_inhib.assign(static_cast<std::size_t>(outputs), 0.0);
  l.has_isolator = isolator;
  layers_.push_back(std::move(l));
  return *this;
}

DualNetwork DualNetwork::lenet5() {
  DualNetwork n({1, 32, 32});
  n.add_convolution(6, 5, true)
      .add_or_pool(2, true)
      .add_convolution(16, 5, true)
      .add_or_pool(2, true)
      .add_fully_connected(120, true)
      .add_fully_connected(84, true)
      .add_fully_connected(10, false);
  return n;
}

std::size_t DualNetwork::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.parameter_count();
  return n;
}

std::size_t DualNetwork::isolator_layers() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(layers_.begin(), layers_.end(), [](const DualLayer& l) { return l.has_isolator; }));
}

DualNetwork DualNetwork::filled(double value) const {
  DualNetwork out = *this;
  out.for_each_parameter([value](double& p) { p = value; });
  return out;
}

void DualNetwork::initialize_uniform(double lo, double hi, std::uint64_t seed) {
  if (!(lo >= 0.0 && hi <= 1.0 && lo <= hi)) {
    throw std::invalid_argument("initialize_uniform: need 0 <= lo <= hi <= 1");
  }
  Xoshiro256 rng(seed);
  for_each_parameter([&](double& p) { p = lo + (hi - lo) * rng.uniform(); });
}

void DualNetwork::zip(DualNetwork& other, const std::function<void(double&, double&)>& f) {
  if (!same_topology(other)) throw std::invalid_argument("DualNetwork::zip: topology mismatch");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    DualLayer& a = layers_[i];
    DualLayer& b = other.layers_[i];
    for (auto [va, vb] : {std::pair{&a.w_excit, &b.w_excit}, std::pair{&a.w_inhib, &b.w_inhib},
                          std::pair{&a.b_excit, &b.b_excit}, std::pair{&a.b_inhib, &b.b_inhib}}) {
      for (std::size_t k = 0; k < va->size(); ++k) f((*va)[k], (*vb)[k]);
    }
  }
}

void DualNetwork::for_each_parameter(const std::function<void(double&)>& f) {
  for (auto& l : layers_) {
    for (auto* v : {&l.w_excit, &l.w_inhib, &l.b_excit, &l.b_inhib}) {
      for (double& p : *v) f(p);
    }
  }
}

void DualNetwork::for_each_parameter(const std::function<void(double)>& f) const {
  for (const auto& l : layers_) {
    for (const auto* v : {&l.w_excit, &l.w_inhib, &l.b_excit, &l.b_inhib}) {
      for (double p : *v) f(p);
    }
  }
}

bool DualNetwork::same_topology(const DualNetwork& other) const noexcept {
  if (!(input_ == other.input_) || layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.kind != b.kind || !(a.out == b.out) || a.kernel != b.kernel || a.has_isolator != b.has_isolator) {
      return false;
    }
  }
  return true;
}

double neuron_forward(std::span<const double> x, std::span<const double> w_excit,
                      std::span<const double> w_inhib, double b_excit, double b_inhib) {
  if (w_excit.size() != x.size() || w_inhib.size() != x.size()) {
    throw std::invalid_argument("neuron_forward: weight and input lengths differ");
  }
  for (double v : x) check_unit(v, "neuron_forward: input");
  for (double v : w_excit) check_unit(v, "neuron_forward: excitatory weight");
  for (double v : w_inhib) check_unit(v, "neuron_forward: inhibitory weight");
  check_unit(b_excit, "neuron_forward: excitatory bias");
  check_unit(b_inhib, "neuron_forward: inhibitory bias");
  double pe, pi;
  neuron_products(x.data(), w_excit.data(), w_inhib.data(), x.size(), pe, pi);
  const double a = (1.0 - b_excit) * pe;
  const double b = (1.0 - b_inhib) * pi;
  return (1.0 - a) * b;
}

std::span<const double> forward(const DualNetwork& net, std::span<const double> image, Workspace& ws) {
  if (image.size() != net.input_shape().size()) {
    throw BuildError("forward: image has " + std::to_string(image.size()) + " values, network expects " +
                     std::to_string(net.input_shape().size()));
  }
  const auto& layers = net.layers();
  ws.act.resize(layers.size() + 1);
  ws.prod_e.resize(layers.size());
  ws.prod_i.resize(layers.size());
  ws.act[0].assign(image.begin(), image.end());
  std::vector<double> gather;

  for (std::size_t li = 0; li < layers.size(); ++li) {
    const DualLayer& l = layers[li];
    const std::vector<double>& in = ws.act[li];
    std::vector<double>& out = ws.act[li + 1];
    out.assign(l.out.size(), 0.0);
    const std::size_t m = l.fan_in();

    if (l.kind == LayerKind::or_pool) {
      const int k = l.kernel;
      for (int c = 0; c < l.out.channels; ++c) {
        for (int y = 0; y < l.out.height; ++y) {
          for (int x = 0; x < l.out.width; ++x) {
            double p = 1.0;
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) {
                p *= 1.0 - in[(static_cast<std::size_t>(c) * l.in.height + y * k + dy) * l.in.width + x * k + dx];
              }
            }
            out[(static_cast<std::size_t>(c) * l.out.height + y) * l.out.width + x] = 1.0 - p;
          }
        }
      }
      continue;
    }

    ws.prod_e[li].assign(l.out.size(), 0.0);
    ws.prod_i[li].assign(l.out.size(), 0.0);
    if (l.kind == LayerKind::fully_connected) {
      for (std::size_t o = 0; o < l.out.size(); ++o) {
        double pe, pi;
        neuron_products(in.data(), &l.w_excit[o * m], &l.w_inhib[o * m], m, pe, pi);
        ws.prod_e[li][o] = pe;
        ws.prod_i[li][o] = pi;
        out[o] = (1.0 - (1.0 - l.b_excit[o]) * pe) * (1.0 - l.b_inhib[o]) * pi;
      }
      continue;
    }

    // Convolution: gather each receptive field into [ic][ky][kx] order.
    const int k = l.kernel;
    gather.resize(m);
    for (int oc = 0; oc < l.out.channels; ++oc) {
      const double* we = &l.w_excit[static_cast<std::size_t>(oc) * m];
      const double* wi = &l.w_inhib[static_cast<std::size_t>(oc) * m];
      for (int y = 0; y < l.out.height; ++y) {
        for (int x = 0; x < l.out.width; ++x) {
          std::size_t g = 0;
          for (int ic = 0; ic < l.in.channels; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
              const double* row = &in[(static_cast<std::size_t>(ic) * l.in.height + y + ky) * l.in.width + x];
              for (int kx = 0; kx < k; ++kx) gather[g++] = row[kx];
            }
          }
          double pe, pi;
          neuron_products(gather.data(), we, wi, m, pe, pi);
          const std::size_t o = (static_cast<std::size_t>(oc) * l.out.height + y) * l.out.width + x;
          ws.prod_e[li][o] = pe;
          ws.prod_i[li][o] = pi;
          out[o] = (1.0 - (1.0 - l.b_excit[oc]) * pe) * (1.0 - l.b_inhib[oc]) * pi;
        }
      }
    }
  }
  return ws.act.back();
}

std::vector<double> forward(const DualNetwork& net, std::span<const double> image) {
  Workspace ws;
  const auto out = forward(net, image, ws);
  return {out.begin(), out.end()};
}

void backward(const DualNetwork& net, Workspace& ws, std::span<const double> d_output, DualNetwork& grad) {
  const auto& layers = net.layers();
  if (ws.act.size() != layers.size() + 1) throw std::logic_error("backward: no cached forward pass");
  if (d_output.size() != net.output_shape().size()) throw std::invalid_argument("backward: output size");
  auto& glayers = grad.layers();
  if (glayers.size() != layers.size()) throw std::invalid_argument("backward: gradient topology mismatch");
  ws.grad.resize(layers.size() + 1);
  ws.grad.back().assign(d_output.begin(), d_output.end());
  std::vector<double> gather, gather_g;

  for (std::size_t li = layers.size(); li-- > 0;) {
    const DualLayer& l = layers[li];
    DualLayer& gl = glayers[li];
    const std::vector<double>& in = ws.act[li];
    const std::vector<double>& gout = ws.grad[li + 1];
    std::vector<double>& gin = ws.grad[li];
    gin.assign(l.in.size(), 0.0);
    // The input gradient of the first layer is never needed.
    const bool need_gin = li > 0;
    const std::size_t m = l.fan_in();

    if (l.kind == LayerKind::or_pool) {
      if (!need_gin) continue;
      const int k = l.kernel;
      for (int c = 0; c < l.out.channels; ++c) {
        for (int y = 0; y < l.out.height; ++y) {
          for (int x = 0; x < l.out.width; ++x) {
            const double g = gout[(static_cast<std::size_t>(c) * l.out.height + y) * l.out.width + x];
            if (g == 0.0) continue;
            for (int a = 0; a < k * k; ++a) {
              double loo = 1.0;
              for (int b = 0; b < k * k; ++b) {
                if (b == a) continue;
                loo *= 1.0 - in[(static_cast<std::size_t>(c) * l.in.height + y * k + b / k) * l.in.width + x * k + b % k];
              }
              gin[(static_cast<std::size_t>(c) * l.in.height + y * k + a / k) * l.in.width + x * k + a % k] += g * loo;
            }
          }
        }
      }
      continue;
    }

    if (l.kind == LayerKind::fully_connected) {
      for (std::size_t o = 0; o < l.out.size(); ++o) {
        const double g = gout[o];
        if (g == 0.0) continue;
        const double pe = ws.prod_e[li][o], pi = ws.prod_i[li][o];
        const double A = (1.0 - l.b_excit[o]) * pe, B = (1.0 - l.b_inhib[o]) * pi;
        neuron_backward(in.data(), &l.w_excit[o * m], &l.w_inhib[o * m], m, l.b_excit[o], l.b_inhib[o],
                        pe, pi, -g * B, g * (1.0 - A), &gl.w_excit[o * m], &gl.w_inhib[o * m],
                        gl.b_excit[o], gl.b_inhib[o], need_gin ? gin.data() : nullptr);
      }
      continue;
    }

    const int k = l.kernel;
    gather.resize(m);
    gather_g.resize(m);
    for (int oc = 0; oc < l.out.channels; ++oc) {
      const std::size_t wo = static_cast<std::size_t>(oc) * m;
      for (int y = 0; y < l.out.height; ++y) {
        for (int x = 0; x < l.out.width; ++x) {
          const std::size_t o = (static_cast<std::size_t>(oc) * l.out.height + y) * l.out.width + x;
          const double g = gout[o];
          if (g == 0.0) continue;
          std::size_t gi = 0;
          for (int ic = 0; ic < l.in.channels; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
              const double* row = &in[(static_cast<std::size_t>(ic) * l.in.height + y + ky) * l.in.width + x];
              for (int kx = 0; kx < k; ++kx) gather[gi++] = row[kx];
            }
          }
          std::fill(gather_g.begin(), gather_g.end(), 0.0);
          const double pe = ws.prod_e[li][o], pi = ws.prod_i[li][o];
          const double A = (1.0 - l.b_excit[oc]) * pe, B = (1.0 - l.b_inhib[oc]) * pi;
          neuron_backward(gather.data(), &l.w_excit[wo], &l.w_inhib[wo], m, l.b_excit[oc], l.b_inhib[oc], pe,
                          pi, -g * B, g * (1.0 - A), &gl.w_excit[wo], &gl.w_inhib[wo], gl.b_excit[oc],
                          gl.b_inhib[oc], need_gin ? gather_g.data() : nullptr);
          if (!need_gin) continue;
          gi = 0;
          for (int ic = 0; ic < l.in.channels; ++ic) {
            for (int ky = 0; ky < k; ++ky) {
              double* row = &gin[(static_cast<std::size_t>(ic) * l.in.height + y + ky) * l.in.width + x];
              for (int kx = 0; kx < k; ++kx) row[kx] += gather_g[gi++];
            }
          }
        }
      }
    }
  }
}

double mse_loss(std::span<const double> y, int label) {
  double s = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c) {
    const double t = static_cast<int>(c) == label ? 1.0 : 0.0;
    s += (y[c] - t) * (y[c] - t);
  }
  return s / static_cast<double>(y.size());
}

double loss_and_gradient(const DualNetwork& net, std::span<const double> image, int label, Workspace& ws,
                         DualNetwork& grad) {
  const auto y = forward(net, image, ws);
  std::vector<double> dy(y.size());
  for (std::size_t c = 0; c < y.size(); ++c) {
    const double t = static_cast<int>(c) == label ? 1.0 : 0.0;
    dy[c] = 2.0 * (y[c] - t) / static_cast<double>(y.size());
  }
  const double loss = mse_loss(y, label);
  backward(net, ws, dy, grad);
  return loss;
}

LabeledImages LabeledImages::select(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.shape = shape;
  out.pixels.reserve(indices.size() * shape.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels.at(i));
  }
  return out;
}

LabeledImages LabeledImages::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), 0);
  return select(idx);
}

std::size_t default_threads() {
  if (const char* env = std::getenv("SMTJSC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
  if (threads == 0) threads = default_threads();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double analytic_accuracy(const DualNetwork& net, const LabeledImages& data) {
  if (data.size() == 0) return 0.0;
  constexpr std::size_t kBlock = 64;
  const std::size_t blocks = (data.size() + kBlock - 1) / kBlock;
  std::vector<std::size_t> correct(blocks, 0);
  parallel_for(blocks, 0, [&](std::size_t b) {
    Workspace ws;
    for (std::size_t i = b * kBlock; i < std::min(data.size(), (b + 1) * kBlock); ++i) {
      correct[b] += argmax(forward(net, data.image(i), ws)) == data.labels[i];
    }
  });
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) /
         static_cast<double>(data.size());
}

void rmsprop_step(DualNetwork& params, DualNetwork& grad, DualNetwork& rms, const TrainConfig& config) {
  const double rho = config.forgetting, lr = config.learning_rate, eps = config.epsilon;
  auto& pl = params.layers();
  auto& gl = grad.layers();
  auto& rl = rms.layers();
  for (std::size_t i = 0; i < pl.size(); ++i) {
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& v) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = rho * v[k] + (1.0 - rho) * g[k] * g[k];
        p[k] = std::clamp(p[k] - lr * g[k] / std::sqrt(v[k] + eps), 0.0, 1.0);
      }
    };
    update(pl[i].w_excit, gl[i].w_excit, rl[i].w_excit);
    update(pl[i].w_inhib, gl[i].w_inhib, rl[i].w_inhib);
    update(pl[i].b_excit, gl[i].b_excit, rl[i].b_excit);
    update(pl[i].b_inhib, gl[i].b_inhib, rl[i].b_inhib);
  }
}

TrainResult train(const DualNetwork& topology, const LabeledImages& data, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (!(data.shape == topology.input_shape())) throw BuildError("train: image shape does not match the network");
  if (config.batch_size < 1 || config.inits < 1) throw std::invalid_argument("train: batch size and inits must be >= 1");
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
    throw std::invalid_argument("train: validation fraction must be in [0,1)");
  }

  // Fixed validation split.
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  {
    Xoshiro256 rng(derive_seed(config.seed, 0xA11));
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(data.size())));
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  const std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train_idx.empty()) throw std::invalid_argument("train: no training images left after the validation split");
  const LabeledImages validation = data.select(val_idx);
  const LabeledImages& selection = n_val > 0 ? validation : data;

  constexpr std::size_t kBlock = 4;  // samples per gradient block
  const std::size_t threads = config.threads ? config.threads : default_threads();

  TrainResult result{topology, 0, -1.0, {}, {}};
  bool any = false;
  for (std::size_t init = 0; init < config.inits; ++init) {
    DualNetwork params = topology;
    params.initialize_uniform(config.init_low, config.init_high, derive_seed(config.seed, init + 1));
    DualNetwork rms = topology.filled(0.0);
    DualNetwork grad = topology.filled(0.0);
    std::vector<std::size_t> idx = train_idx;
    bool aborted = false;

    for (std::size_t epoch = 0; epoch < config.epochs && !aborted; ++epoch) {
      Xoshiro256 rng(derive_seed(derive_seed(config.seed, init + 1), epoch + 1));
      std::shuffle(idx.begin(), idx.end(), rng);
      double loss_sum = 0.0;
      std::size_t correct = 0;
      for (std::size_t start = 0; start < idx.size(); start += config.batch_size) {
        const std::size_t end = std::min(idx.size(), start + config.batch_size);
        const std::size_t blocks = (end - start + kBlock - 1) / kBlock;
        std::vector<DualNetwork> block_grad(blocks, grad.filled(0.0));
        std::vector<double> block_loss(blocks, 0.0);
        std::vector<std::size_t> block_correct(blocks, 0);
        parallel_for(blocks, threads, [&](std::size_t b) {
          Workspace ws;
          for (std::size_t s = start + b * kBlock; s < std::min(end, start + (b + 1) * kBlock); ++s) {
            const std::size_t i = idx[s];
            block_loss[b] += loss_and_gradient(params, data.image(i), data.labels[i], ws, block_grad[b]);
            block_correct[b] += argmax(std::span<const double>(ws.act.back())) == data.labels[i];
          }
        });
        const double scale = 1.0 / static_cast<double>(end - start);
        grad = block_grad[0];
        for (std::size_t b = 1; b < blocks; ++b) grad.zip(block_grad[b], [](double& g, double& h) { g += h; });
        grad.for_each_parameter([scale](double& g) { g *= scale; });
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < blocks; ++b) {
          batch_loss += block_loss[b];
          correct += block_correct[b];
        }
        if (!std::isfinite(batch_loss)) {
          aborted = true;
          break;
        }
        loss_sum += batch_loss;
        rmsprop_step(params, grad, rms, config);
      }
      if (aborted) break;
      EpochRecord rec;
      rec.init = init;
      rec.epoch = epoch;
      rec.train_loss = loss_sum / static_cast<double>(idx.size());
      rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
      rec.validation_accuracy = analytic_accuracy(params, selection);
      result.log.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
    if (aborted) {
      result.aborted_inits.push_back(init);
      continue;
    }
    const double val = config.epochs > 0 ? result.log.back().validation_accuracy : analytic_accuracy(params, selection);
    if (!any || val > result.best_validation_accuracy) {
      result.best = params;
      result.best_init = init;
      result.best_validation_accuracy = val;
      any = true;
    }
  }
  if (!any) throw std::runtime_error("train: every initialization diverged (non-finite loss)");
  return result;
}

DualNetwork quantize(const DualNetwork& net, int n_bits) {
  if (n_bits < 1 || n_bits > 30) throw std::invalid_argument("quantize: n_bits must be in 1..30");
  const double scale = static_cast<double>(1u << n_bits);
  DualNetwork out = net;
  out.for_each_parameter([scale](double& p) { p = std::nearbyint(p * scale) / scale; });
  return out;
}

bool is_quantized(const DualNetwork& net, int n_bits) {
  const double scale = static_cast<double>(1u << n_bits);
  bool ok = true;
  net.for_each_parameter([&](double p) {
    const double s = p * scale;
    ok = ok && p >= 0.0 && p <= 1.0 && s == std::nearbyint(s);
  });
  return ok;
}

void write_model(std::ostream& os, const DualNetwork& net, ModelEncoding encoding, const ModelHeader& header) {
  if (encoding == ModelEncoding::codes && !is_quantized(net, header.n_bits)) {
    throw std::invalid_argument("write_model: code encoding needs a quantized network");
  }
  const Shape& in = net.input_shape();
  os << "smtjsc-model 1\n";
  os << "input " << in.channels << ' ' << in.height << ' ' << in.width << '\n';
  os << "precision " << header.n_bits << '\n';
  os << "seed " << header.seed << '\n';
  os << "encoding " << (encoding == ModelEncoding::codes ? "codes" : "real") << '\n';
  os << "layers " << net.layers().size() << '\n';
  for (const auto& l : net.layers()) {
    const int size = l.kind == LayerKind::fully_connected ? l.out.channels
                     : l.kind == LayerKind::convolution   ? l.out.channels
                                                          : l.kernel;
    os << to_string(l.kind) << ' ' << size;
    if (l.kind == LayerKind::convolution) os << ' ' << l.kernel;
    os << ' ' << (l.has_isolator ? "isolator" : "direct") << '\n';
  }
  const double scale = static_cast<double>(1u << header.n_bits);
  char buf[40];
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    const std::pair<const char*, const std::vector<double>*> tensors[] = {
        {"w_excit", &l.w_excit}, {"w_inhib", &l.w_inhib}, {"b_excit", &l.b_excit}, {"b_inhib", &l.b_inhib}};
    for (const auto& [name, v] : tensors) {
      if (v->empty()) continue;
      os << "param " << i << ' ' << name << ' ' << v->size();
      for (double p : *v) {
        if (encoding == ModelEncoding::codes) {
          os << ' ' << static_cast<long>(p * scale);
        } else {
          std::snprintf(buf, sizeof buf, "%a", p);
          os << ' ' << buf;
        }
      }
      os << '\n';
    }
  }
  os << "end\n";
}

DualNetwork read_model(std::istream& is, ModelHeader* header_out) {
  std::size_t line_no = 0;
  std::string line;
  auto fail = [&](const std::string& what) {
    return std::runtime_error("model line " + std::to_string(line_no) + ": " + what);
  };
  auto next = [&]() {
    for (;;) {
      ++line_no;
      if (!std::getline(is, line)) throw fail("unexpected end of input");
      if (!line.empty() && line[0] != '#') return std::istringstream(line);
    }
  };
  auto keyed = [&](const char* key) {
    auto ls = next();
    std::string k;
    if (!(ls >> k) || k != key) throw fail(std::string("expected '") + key + "'");
    return ls;
  };

  {
    auto ls = next();
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != "smtjsc-model") throw fail("missing 'smtjsc-model' header");
    if (version != 1) throw fail("unsupported model version " + std::to_string(version));
  }
  Shape in;
  if (!(keyed("input") >> in.channels >> in.height >> in.width)) throw fail("bad input shape");
  ModelHeader header;
  if (!(keyed("precision") >> header.n_bits) || header.n_bits < 1 || header.n_bits > 30) throw fail("bad precision");
  if (!(keyed("seed") >> header.seed)) throw fail("bad seed");
  std::string enc;
  if (!(keyed("encoding") >> enc) || (enc != "codes" && enc != "real")) throw fail("encoding must be 'codes' or 'real'");
  std::size_t n_layers = 0;
  if (!(keyed("layers") >> n_layers)) throw fail("bad layer count");

  std::optional<DualNetwork> net;
  try {
    net.emplace(in);
    for (std::size_t i = 0; i < n_layers; ++i) {
      auto ls = next();
      std::string kind, iso;
      int size = 0, kernel = 0;
      if (!(ls >> kind >> size)) throw fail("bad layer line");
      if (kind == "conv" && !(ls >> kernel)) throw fail("conv layer needs a kernel size");
      if (!(ls >> iso) || (iso != "isolator" && iso != "direct")) throw fail("layer must end in 'isolator' or 'direct'");
      const bool has_iso = iso == "isolator";
      if (kind == "conv") {
        net->add_convolution(size, kernel, has_iso);
      } else if (kind == "pool") {
        net->add_or_pool(size, has_iso);
      } else if (kind == "dense") {
        net->add_fully_connected(size, has_iso);
      } else {
        throw fail("unknown layer kind '" + kind + "'");
      }
    }
  } catch (const BuildError& e) {
    throw fail(e.what());
  }

  const double scale = static_cast<double>(1u << header.n_bits);
  for (;;) {
    auto ls = next();
    std::string key;
    ls >> key;
    if (key == "end") break;
    if (key != "param") throw fail("expected 'param' or 'end'");
    std::size_t li = 0, count = 0;
    std::string name;
    if (!(ls >> li >> name >> count) || li >= n_layers) throw fail("bad param header");
    DualLayer& l = net->layers()[li];
    std::vector<double>* v = name == "w_excit"   ? &l.w_excit
                             : name == "w_inhib" ? &l.w_inhib
                             : name == "b_excit" ? &l.b_excit
                             : name == "b_inhib" ? &l.b_inhib
                                                 : nullptr;
    if (!v) throw fail("unknown parameter tensor '" + name + "'");
    if (count != v->size()) {
      throw fail(name + " of layer " + std::to_string(li) + " has " + std::to_string(count) +
                 " values, topology needs " + std::to_string(v->size()));
    }
    std::string tok;
    for (std::size_t k = 0; k < count; ++k) {
      if (!(ls >> tok)) throw fail("parameter list ends early");
      char* end = nullptr;
      double p;
      if (enc == "codes") {
        const long c = std::strtol(tok.c_str(), &end, 10);
        if (*end != '\0' || c < 0 || static_cast<double>(c) > scale) throw fail("bad weight code '" + tok + "'");
        p = static_cast<double>(c) / scale;
      } else {
        p = std::strtod(tok.c_str(), &end);
        if (*end != '\0' || !(p >= 0.0 && p <= 1.0)) throw fail("bad parameter value '" + tok + "'");
      }
      (*v)[k] = p;
    }
    if (ls >> tok) throw fail("too many parameter values");
  }
  if (header_out) *header_out = header;
  return std::move(*net);
}

std::uint32_t CompiledNetwork::input_code(double pixel) const {
  return bitgen::GeneratorCode::nearest(input_bits, std::clamp(pixel, 0.0, 1.0)).code();
}

CompiledNetwork compile(const DualNetwork& net, const CompileOptions& options) {
  if (!is_quantized(net, options.n_bits)) {
    throw BuildError("compile: parameters must be multiples of 1/" + std::to_string(1u << options.n_bits) +
                     " (quantize first)");
  }
  using logic::NodeId;
  using logic::NodeKind;
  CompiledNetwork c;
  c.input_bits = options.input_bits;
  auto& nl = c.netlist;
  ElementCensus& census = c.census;
  const double scale = static_cast<double>(1u << options.n_bits);
  auto pbs = [&](double p) {
    ++census.weight_generators;
    return nl.add_pbs(bitgen::GeneratorCode(options.n_bits, static_cast<std::uint32_t>(p * scale)));
  };
  auto pbs_all = [&](const std::vector<double>& v) {
    std::vector<NodeId> ids(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) ids[k] = pbs(v[k]);
    return ids;
  };

  std::vector<NodeId> cur(net.input_shape().size());
  for (auto& id : cur) id = nl.add_input(options.input_bits);
  c.inputs = cur;
  census.input_generators = cur.size();

  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const DualLayer& l = net.layers()[li];
    std::vector<NodeId> next(l.out.size());
    const std::size_t m = l.fan_in();
    if (l.kind == LayerKind::or_pool) {
      const int k = l.kernel;
      std::vector<NodeId> window(static_cast<std::size_t>(k * k));
      for (int ch = 0; ch < l.out.channels; ++ch) {
        for (int y = 0; y < l.out.height; ++y) {
          for (int x = 0; x < l.out.width; ++x) {
            for (int a = 0; a < k * k; ++a) {
              window[static_cast<std::size_t>(a)] =
                  cur[(static_cast<std::size_t>(ch) * l.in.height + y * k + a / k) * l.in.width + x * k + a % k];
            }
            next[(static_cast<std::size_t>(ch) * l.out.height + y) * l.out.width + x] =
                nl.add_gate(NodeKind::or_gate, window);
            ++census.pool_gates;
          }
        }
      }
    } else {
      const auto we = pbs_all(l.w_excit), wi = pbs_all(l.w_inhib);
      const auto be = pbs_all(l.b_excit), bi = pbs_all(l.b_inhib);
      std::vector<NodeId> field(m);
      auto neuron = [&](std::size_t o, std::size_t wo, std::size_t bo) {
        logic::DualNeuronPorts ports;
        ports.inputs = field;
        ports.excit_weights = std::span<const NodeId>(we).subspan(wo, m);
        ports.inhib_weights = std::span<const NodeId>(wi).subspan(wo, m);
        ports.excit_bias = be[bo];
        ports.inhib_bias = bi[bo];
        ports.prune_zero_weights = true;
        const auto dn = logic::build_dual_neuron(nl, ports);
        census.synapses += dn.excit_synapses.size() + dn.inhib_synapses.size();
        ++census.neurons;
        next[o] = dn.output;
      };
      if (l.kind == LayerKind::fully_connected) {
        field = cur;
        for (std::size_t o = 0; o < l.out.size(); ++o) neuron(o, o * m, o);
      } else {
        const int k = l.kernel;
        for (int oc = 0; oc < l.out.channels; ++oc) {
          for (int y = 0; y < l.out.height; ++y) {
            for (int x = 0; x < l.out.width; ++x) {
              std::size_t g = 0;
              for (int ic = 0; ic < l.in.channels; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                  for (int kx = 0; kx < k; ++kx) {
                    field[g++] = cur[(static_cast<std::size_t>(ic) * l.in.height + y + ky) * l.in.width + x + kx];
                  }
                }
              }
              neuron((static_cast<std::size_t>(oc) * l.out.height + y) * l.out.width + x,
                     static_cast<std::size_t>(oc) * m, static_cast<std::size_t>(oc));
            }
          }
        }
      }
    }
    if (l.has_isolator) {
      next = logic::apply_isolator_mask(nl, next, options.delta_max, derive_seed(options.seed, li));
      census.isolators += next.size();
    }
    cur = std::move(next);
  }
  for (NodeId o : cur) nl.mark_output(o);
  nl.finalize();
  census.isolator_layers = nl.isolator_depth();
  return c;
}

std::vector<StochasticResult> stochastic_inference_checkpoints(const CompiledNetwork& compiled,
                                                               const LabeledImages& data, std::size_t warmup,
                                                               std::span<const std::size_t> checkpoints,
                                                               std::uint64_t seed, std::size_t threads,
                                                               logic::SimulatorOptions sim_options) {
  if (checkpoints.empty() || checkpoints.front() < 1) {
    throw std::invalid_argument("stochastic_inference: need collection lengths >= 1");
  }
  for (std::size_t k = 1; k < checkpoints.size(); ++k) {
    if (checkpoints[k] <= checkpoints[k - 1]) throw std::invalid_argument("stochastic_inference: checkpoints must increase");
  }
  if (data.shape.size() != compiled.inputs.size()) throw BuildError("stochastic_inference: image size mismatch");
  const std::size_t n_out = compiled.netlist.outputs().size();
  std::vector<StochasticResult> results(checkpoints.size());
  for (auto& r : results) {
    r.counts.assign(data.size(), std::vector<std::uint32_t>(n_out, 0));
    r.predictions.assign(data.size(), 0);
  }
  sim_options.lanes = 64;
  sim_options.lane_offset = 0;
  const std::size_t batches = (data.size() + 63) / 64;
  parallel_for(batches, threads, [&](std::size_t b) {
    logic::Simulator sim(compiled.netlist, derive_seed(seed, b), sim_options);
    const std::size_t first = b * 64;
    const std::size_t lanes = std::min<std::size_t>(64, data.size() - first);
    std::vector<std::uint32_t> codes(64, 0);
    for (std::size_t p = 0; p < compiled.inputs.size(); ++p) {
      for (std::size_t l = 0; l < lanes; ++l) codes[l] = compiled.input_code(data.image(first + l)[p]);
      sim.set_input_codes(compiled.inputs[p], codes);
    }
    for (std::size_t t = 0; t < warmup; ++t) sim.evaluate_cycle();
    std::vector<std::vector<std::uint32_t>> counts(lanes, std::vector<std::uint32_t>(n_out, 0));
    std::size_t collected = 0;
    for (std::size_t k = 0; k < checkpoints.size(); ++k) {
      for (; collected < checkpoints[k]; ++collected) {
        const auto words = sim.evaluate_cycle();
        for (std::size_t o = 0; o < n_out; ++o) {
          for (std::size_t l = 0; l < lanes; ++l) counts[l][o] += (words[o] >> l) & 1u;
        }
      }
      for (std::size_t l = 0; l < lanes; ++l) {
        results[k].counts[first + l] = counts[l];
        results[k].predictions[first + l] = argmax(std::span<const std::uint32_t>(counts[l]));
      }
    }
  });
  return results;
}

StochasticResult stochastic_inference(const CompiledNetwork& compiled, const LabeledImages& data,
                                      const logic::RunWindow& window, std::uint64_t seed, std::size_t threads,
                                      logic::SimulatorOptions sim_options) {
  const std::size_t cp[] = {window.collect};
  return std::move(stochastic_inference_checkpoints(compiled, data, window.warmup, cp, seed, threads, sim_options)[0]);
}

}  // namespace smtjsc::net
