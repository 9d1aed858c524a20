#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smtjsc/bitgen.hpp"
#include "smtjsc/rng.hpp"

// Clocked stochastic-logic netlists and a bit-packed cycle simulator.
namespace smtjsc::logic {

using NodeId = std::uint32_t;

enum class NodeKind : std::uint8_t {
  constant,   // fixed 0 or 1
  pbs,        // programmable generator with a fixed code
  input,      // programmable generator whose code is set per lane at run time
  and_gate,
  or_gate,
  nor_gate,
  not_gate,
  mux,        // fan-in (select, a, b): select ? b : a
  isolator,   // delay line: out[t] = in[t - delay], 0 before the line fills
};

const char* to_string(NodeKind kind) noexcept;
bool is_source(NodeKind kind) noexcept;

/// Structural error detected while building or loading a netlist.
class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  NodeKind kind = NodeKind::constant;
  /// constant: value; pbs/input: n_bits; isolator: delay.
  std::uint32_t param = 0;
  /// pbs: index into the code table.
  std::uint32_t code_index = 0;
  std::uint32_t fanin_begin = 0;
  std::uint32_t fanin_count = 0;
};

class StochasticNetlist {
 public:
  NodeId add_constant(bool value);
  /// Shared constant node, created on first use.
  NodeId constant(bool value);
  NodeId add_pbs(const bitgen::GeneratorCode& code);
  NodeId add_input(int n_bits);
  /// AND/OR/NOR need fan-in >= 1, NOT exactly 1, MUX exactly 3.
  NodeId add_gate(NodeKind kind, std::span<const NodeId> fanin);
  NodeId add_gate(NodeKind kind, std::initializer_list<NodeId> fanin) {
    return add_gate(kind, std::span<const NodeId>(fanin.begin(), fanin.size()));
  }
  /// Isolator fed by `input`. A delay >= 1 isolator is a register, so its
  /// input may be connected later (see connect_isolator) and may close a loop.
  NodeId add_isolator(std::uint32_t delay, std::optional<NodeId> input = std::nullopt);
  void connect_isolator(NodeId isolator, NodeId input);
  void mark_output(NodeId node);

  /// Validates fan-in references and computes the evaluation schedule.
  /// Throws BuildError for dangling references, bad arities, unconnected
  /// isolators, or a loop not broken by a delay >= 1 isolator.
  void finalize();
  bool finalized() const noexcept { return finalized_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::span<const NodeId> fanin(NodeId id) const;
  const bitgen::GeneratorCode& pbs_code(NodeId id) const;
  std::span<const NodeId> outputs() const noexcept { return outputs_; }
  /// Combinational evaluation order (requires finalize()).
  std::span<const NodeId> schedule() const;
  /// Source nodes in id order; the per-cycle random draw order.
  std::span<const NodeId> sources() const;
  std::span<const NodeId> isolators() const;
  /// Most isolators on any feed-forward path (requires finalize()).
  std::size_t isolator_depth() const;
  /// Largest isolator delay in the netlist.
  std::uint32_t max_delay() const;
  std::size_t count(NodeKind kind) const;

  void write(std::ostream& os) const;
  /// Throws BuildError naming the offending line.
  static StochasticNetlist read(std::istream& is);

 private:
  NodeId push(Node n, std::span<const NodeId> fanin);
  void require_open() const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> fanin_;
  std::vector<NodeId> outputs_;
  std::vector<bitgen::GeneratorCode> codes_;
  std::optional<NodeId> const_nodes_[2];
  std::vector<NodeId> schedule_;
  std::vector<NodeId> sources_;
  std::vector<NodeId> isolators_;
  std::size_t isolator_depth_ = 0;
  bool finalized_ = false;
};

/// Warm-up cycles discarded before N collected cycles.
struct RunWindow {
  std::size_t warmup = 0;
  std::size_t collect = 1;

  /// W = L * delta_max with L the isolator layers on the deepest path.
  static RunWindow for_layers(std::size_t isolator_layers, std::size_t delta_max,
                              std::size_t collect) {
    return {isolator_layers * delta_max, collect};
  }
  std::size_t total() const noexcept { return warmup + collect; }
};

/// How the half-probability sources inside generators behave over time.
enum class HalfSourceModel {
  /// Fresh Bernoulli(1/2) bit each cycle.
  ideal,
  /// Symmetric SMTJ read every clock: the state flips with probability
  /// (1 - exp(-2 t_clock/tau))/2, resolved to 16 bits.
  telegraph,
};

struct SimulatorOptions {
  std::size_t lanes = 64;
  /// Lane l draws from stream (seed, lane_offset + l).
  std::size_t lane_offset = 0;
  HalfSourceModel half_sources = HalfSourceModel::ideal;
  double clock_over_tau = 150e-9 / 54.598150033144236e-9;
};

/// Transposes a 64x64 bit matrix in place: bit j of word i <-> bit i of word j.
void transpose64(std::uint64_t* m) noexcept;

/// Evaluates a finalized netlist on up to 64 independent lanes per word.
///
/// Every lane is an independent replica with its own random stream. Each
/// cycle, source nodes draw in id order: one word per half-source that can
/// reach the output (tap_row rows of a fixed PBS, all n_bits rows of an input
/// generator, nothing for constants), or 16 words per half-source in
/// telegraph mode. Each lane consumes its stream's bits LSB first. A one-lane simulator with lane_offset = l
/// therefore reproduces lane l of a packed run bit for bit.
class Simulator {
 public:
  Simulator(const StochasticNetlist& netlist, std::uint64_t seed, SimulatorOptions options = {});

  /// Reseeds the lane streams, clears isolator contents and the cycle counter.
  /// Input codes are kept.
  void reset(std::uint64_t seed);

  /// Sets the per-lane code of an input node. `lane_codes.size()` must equal
  /// the lane count; each code must be <= 2^n_bits.
  void set_input_codes(NodeId input, std::span<const std::uint32_t> lane_codes);
  /// Same code on every lane.
  void set_input_code(NodeId input, std::uint32_t code);

  /// One clock: sources draw, gates settle, isolators shift.
  /// Returns the output words (bit l = lane l) in output order.
  std::span<const std::uint64_t> evaluate_cycle();

  /// Runs W + N cycles and returns ones-counts over the last N, indexed
  /// [output][lane].
  std::vector<std::vector<std::uint32_t>> run(const RunWindow& window);

  /// Current word of any node (valid after a cycle).
  std::uint64_t value(NodeId id) const { return values_.at(id); }
  std::size_t lanes() const noexcept { return options_.lanes; }
  std::uint64_t lane_mask() const noexcept { return lane_mask_; }
  std::uint64_t cycle() const noexcept { return cycle_; }
  const StochasticNetlist& netlist() const noexcept { return *net_; }

 private:
  struct InputProgram {
    std::vector<std::uint64_t> tap;     // per row: lanes whose output taps this row
    std::vector<std::uint64_t> invert;  // per row: lanes whose MUX bit is set
    std::uint64_t one = 0;              // lanes programmed to constant 1
  };

  std::uint64_t draw();
  std::uint64_t half_word(std::size_t slot);
  void refill();

  const StochasticNetlist* net_;
  SimulatorOptions options_;
  std::uint64_t lane_mask_;
  std::uint32_t flip_threshold_ = 0;  // telegraph flip probability * 2^16

  std::vector<Xoshiro256> lane_rngs_;
  std::uint64_t block_[64];
  std::size_t block_pos_ = 64;

  std::vector<std::uint64_t> values_;
  std::vector<std::uint64_t> output_words_;
  std::vector<std::uint32_t> input_slot_;  // node id -> InputProgram index
  std::vector<InputProgram> inputs_;
  std::vector<std::uint32_t> half_slot_;   // node id -> first telegraph state slot
  std::vector<std::uint64_t> half_state_;
  std::vector<std::uint64_t> half_scratch_;
  std::vector<std::uint32_t> iso_slot_;    // node id -> first ring-buffer word
  std::vector<std::uint32_t> iso_head_;
  std::vector<std::uint64_t> iso_ring_;
  std::uint64_t cycle_ = 0;
};

/// Node ids created for one excitatory/inhibitory neuron.
struct DualNeuron {
  std::vector<NodeId> excit_synapses;
  std::vector<NodeId> inhib_synapses;
  NodeId excit_or = 0;
  NodeId inhib_nor = 0;
  NodeId output = 0;
};

struct DualNeuronPorts {
  std::span<const NodeId> inputs;
  std::span<const NodeId> excit_weights;
  std::span<const NodeId> inhib_weights;
  /// Biases are synapses on the constant-1 line.
  std::optional<NodeId> excit_bias;
  std::optional<NodeId> inhib_bias;
  /// Leave out synapses whose weight is a constant-0 line (a code-0 PBS or a
  /// constant 0); they contribute nothing to either branch.
  bool prune_zero_weights = false;
};

/// AND synapses into one OR (excitatory) and one NOR (inhibitory), merged by
/// an AND. Both branches read the same input lines. A branch left without
/// synapses by pruning becomes a constant line (OR of nothing = 0, NOR = 1).
/// Throws BuildError when the weight arities differ from the input arity or
/// the excitatory branch has no synapses to begin with.
DualNeuron build_dual_neuron(StochasticNetlist& netlist, const DualNeuronPorts& ports);

/// One isolator per line with a delay drawn uniformly from {0..delta_max}
/// by a stream seeded with `seed`, in line order.
std::vector<NodeId> apply_isolator_mask(StochasticNetlist& netlist, std::span<const NodeId> lines,
                                        std::uint32_t delta_max, std::uint64_t seed);

}  // namespace smtjsc::logic
