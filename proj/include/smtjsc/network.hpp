#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "smtjsc/stochlogic.hpp"

// Probability-domain OR-gate networks with paired excitatory/inhibitory
// subnetworks, their training, and compilation to stochastic netlists.
namespace smtjsc::net {

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class LayerKind { convolution, or_pool, fully_connected };
const char* to_string(LayerKind kind) noexcept;

/// One layer. Convolution weights are laid out [out][in][ky][kx], dense
/// weights [out][in]; biases are per output channel (convolution) or per
/// neuron (dense). OR-pool layers carry no parameters.
struct DualLayer {
  LayerKind kind = LayerKind::fully_connected;
  Shape in;
  Shape out;
  int kernel = 0;  // convolution kernel side, or pooling window side
  std::vector<double> w_excit, w_inhib;
  std::vector<double> b_excit, b_inhib;
  bool has_isolator = false;

  /// Synapses per neuron, not counting the bias.
  std::size_t fan_in() const noexcept;
  std::size_t parameter_count() const noexcept {
    return w_excit.size() + w_inhib.size() + b_excit.size() + b_inhib.size();
  }
};

class DualNetwork {
 public:
  explicit DualNetwork(Shape input);

  /// Valid (unpadded) convolution with stride 1. Throws logic::BuildError
  /// when the kernel does not fit.
  DualNetwork& add_convolution(int out_channels, int kernel, bool isolator);
  /// Non-overlapping window x window OR pooling; the input sides must divide.
  DualNetwork& add_or_pool(int window, bool isolator);
  DualNetwork& add_fully_connected(int outputs, bool isolator);

  /// C1(6@5x5) S2 C3(16@5x5, full connections) S4 C5(120) F6(84) OUT(10) on a
  /// 32x32 input, isolators after every layer but the last.
  static DualNetwork lenet5();

  const Shape& input_shape() const noexcept { return input_; }
  const Shape& output_shape() const noexcept;
  std::vector<DualLayer>& layers() noexcept { return layers_; }
  const std::vector<DualLayer>& layers() const noexcept { return layers_; }
  std::size_t parameter_count() const noexcept;
  std::size_t isolator_layers() const noexcept;

  /// Same topology with every parameter set to `value`.
  DualNetwork filled(double value) const;
  /// Every weight and bias drawn from Uniform(lo, hi).
  void initialize_uniform(double lo, double hi, std::uint64_t seed);
  /// Calls f(param, other_param) for matching parameters of two networks with
  /// the same topology.
  void zip(DualNetwork& other, const std::function<void(double&, double&)>& f);
  void for_each_parameter(const std::function<void(double&)>& f);
  void for_each_parameter(const std::function<void(double)>& f) const;
  bool same_topology(const DualNetwork& other) const noexcept;

 private:
  Shape input_;
  std::vector<DualLayer> layers_;
};

/// z = [1 - (1-b_e) prod(1 - w_e x)] * [(1-b_i) prod(1 - w_i x)].
/// Throws std::invalid_argument for mismatched lengths or values outside [0,1].
double neuron_forward(std::span<const double> x, std::span<const double> w_excit,
                      std::span<const double> w_inhib, double b_excit, double b_inhib);

/// Cached per-layer state for one image.
struct Workspace {
  std::vector<std::vector<double>> act;     // act[0] = input, act[l+1] = layer l output
  std::vector<std::vector<double>> prod_e;  // per neuron: prod(1 - w_e x), bias excluded
  std::vector<std::vector<double>> prod_i;
  std::vector<std::vector<double>> grad;    // dL/d act, same layout as act
};

/// Forward pass; returns the output activations (a view into ws).
std::span<const double> forward(const DualNetwork& net, std::span<const double> image, Workspace& ws);
std::vector<double> forward(const DualNetwork& net, std::span<const double> image);

/// Backpropagates dL/d(output) through the cached pass in `ws` and adds the
/// parameter gradients to `grad` (same topology as `net`).
void backward(const DualNetwork& net, Workspace& ws, std::span<const double> d_output,
              DualNetwork& grad);

/// Mean over outputs of (y - onehot(label))^2.
double mse_loss(std::span<const double> y, int label);
/// Forward, loss, backward in one call; returns the loss.
double loss_and_gradient(const DualNetwork& net, std::span<const double> image, int label,
                         Workspace& ws, DualNetwork& grad);

/// Index of the largest value; ties go to the lowest index.
template <class T>
int argmax(std::span<const T> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

/// Images stored row-major at the network input shape, with labels.
struct LabeledImages {
  Shape shape;
  std::vector<double> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * shape.size(), shape.size());
  }
  /// Subset in the given index order.
  LabeledImages select(std::span<const std::size_t> indices) const;
  /// First `n` images (all if n >= size()).
  LabeledImages head(std::size_t n) const;
};

/// Fraction of images whose analytic argmax equals the label.
double analytic_accuracy(const DualNetwork& net, const LabeledImages& data);

struct TrainConfig {
  double learning_rate = 0.005;
  double forgetting = 0.95;
  double epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 16;
  std::size_t inits = 5;
  double init_low = 0.0;
  double init_high = 0.1;
  /// Held out from the training data for best-of-inits selection.
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
  /// 0 = SMTJSC_THREADS or hardware concurrency.
  std::size_t threads = 0;
};

struct EpochRecord {
  std::size_t init = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainResult {
  DualNetwork best;
  std::size_t best_init = 0;
  double best_validation_accuracy = 0.0;
  std::vector<EpochRecord> log;
  std::vector<std::size_t> aborted_inits;  // NaN loss encountered
};

/// Mini-batch RMSProp with every parameter projected onto [0,1] after each
/// step; best initialization chosen by validation accuracy (ties: lowest
/// index). Gradient sums are reduced in fixed sample-block order, so results
/// do not depend on the thread count. Throws std::invalid_argument for an
/// empty dataset and std::runtime_error if every initialization diverges.
TrainResult train(const DualNetwork& topology, const LabeledImages& data, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// One RMSProp step with projection; `rms` holds the running mean squares.
void rmsprop_step(DualNetwork& params, DualNetwork& grad, DualNetwork& rms, const TrainConfig& config);

/// Rounds every parameter to the nearest multiple of 2^-n_bits (ties to even).
DualNetwork quantize(const DualNetwork& net, int n_bits = 4);
bool is_quantized(const DualNetwork& net, int n_bits = 4);

/// Model file: versioned text with the layer list and the parameters either
/// as integer codes (quantized models) or as hex floats (lossless).
enum class ModelEncoding { real, codes };
struct ModelHeader {
  int n_bits = 4;
  std::uint64_t seed = 0;
};
void write_model(std::ostream& os, const DualNetwork& net, ModelEncoding encoding, const ModelHeader& header);
/// Throws std::runtime_error naming the offending line.
DualNetwork read_model(std::istream& is, ModelHeader* header = nullptr);

/// Element counts of a compiled network.
struct ElementCensus {
  std::size_t weight_generators = 0;  // one PBS per weight and bias
  std::size_t input_generators = 0;
  std::size_t neurons = 0;            // dual neurons (OR + NOR + AND clusters)
  std::size_t pool_gates = 0;
  std::size_t synapses = 0;           // AND gates actually instantiated
  std::size_t isolators = 0;
  std::size_t isolator_layers = 0;
};

struct CompileOptions {
  std::uint32_t delta_max = 16;
  std::uint64_t seed = 1;
  int n_bits = 4;
  int input_bits = 4;
};

struct CompiledNetwork {
  logic::StochasticNetlist netlist;
  std::vector<logic::NodeId> inputs;  // one input node per input pixel
  ElementCensus census;
  int input_bits = 4;

  /// W = L * delta_max warm-up cycles, then N collected.
  logic::RunWindow window(std::uint32_t delta_max, std::size_t n) const {
    return logic::RunWindow::for_layers(census.isolator_layers, delta_max, n);
  }
  /// Input code for a pixel probability (nearest, ties to even).
  std::uint32_t input_code(double pixel) const;
};

/// Builds the netlist: a PBS for every weight and bias (shared across
/// convolution positions), an input generator per pixel, a dual neuron per
/// unit, a 4-input OR per pooling window, and an isolator mask after each
/// layer flagged for one (delays seeded per layer from options.seed).
/// Synapses whose weight code is 0 are omitted since they are constant 0.
/// Throws logic::BuildError if a parameter is not on the 2^-n_bits grid.
CompiledNetwork compile(const DualNetwork& net, const CompileOptions& options);

/// Stochastic classification of images on a compiled network. Image i runs
/// in lane i % 64 of batch i / 64 with the simulator reseeded per batch from
/// `seed`. Returns the ones-counts per image and output.
struct StochasticResult {
  std::vector<std::vector<std::uint32_t>> counts;  // [image][output]
  std::vector<int> predictions;                    // argmax, ties to lowest
};
StochasticResult stochastic_inference(const CompiledNetwork& compiled, const LabeledImages& data,
                                      const logic::RunWindow& window, std::uint64_t seed,
                                      std::size_t threads = 0,
                                      logic::SimulatorOptions sim_options = {});

/// Counts after several collection lengths from one run: counts[k] uses the
/// first checkpoints[k] collected cycles. Checkpoints must be increasing.
std::vector<StochasticResult> stochastic_inference_checkpoints(
    const CompiledNetwork& compiled, const LabeledImages& data, std::size_t warmup,
    std::span<const std::size_t> checkpoints, std::uint64_t seed, std::size_t threads = 0,
    logic::SimulatorOptions sim_options = {});

/// SMTJSC_THREADS if set to a positive integer, else hardware concurrency (>= 1).
std::size_t default_threads();

/// Runs f(task) for task in [0, n) on up to `threads` threads.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f);

}  // namespace smtjsc::net
