#include "smtjsc/stochlogic.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

namespace smtjsc::logic {

namespace {

constexpr std::uint32_t kNone = 0xFFFFFFFFu;
constexpr int kFlipBits = 16;

struct KindName {
  NodeKind kind;
  const char* name;
};
constexpr KindName kKindNames[] = {
    {NodeKind::constant, "const"}, {NodeKind::pbs, "pbs"},     {NodeKind::input, "input"},
    {NodeKind::and_gate, "and"},   {NodeKind::or_gate, "or"},  {NodeKind::nor_gate, "nor"},
    {NodeKind::not_gate, "not"},   {NodeKind::mux, "mux"},     {NodeKind::isolator, "isolator"},
};

bool registered(const Node& n) { return n.kind == NodeKind::isolator && n.param > 0; }

}  // namespace

const char* to_string(NodeKind kind) noexcept {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "?";
}

bool is_source(NodeKind kind) noexcept {
  return kind == NodeKind::constant || kind == NodeKind::pbs || kind == NodeKind::input;
}

NodeId StochasticNetlist::push(Node n, std::span<const NodeId> fanin) {
  require_open();
  if (nodes_.size() >= kNone) throw BuildError("netlist: too many nodes");
  n.fanin_begin = static_cast<std::uint32_t>(fanin_.size());
  n.fanin_count = static_cast<std::uint32_t>(fanin.size());
  fanin_.insert(fanin_.end(), fanin.begin(), fanin.end());
  nodes_.push_back(n);
  return static_cast<NodeId>(nodes_.size() - 1);
}

void StochasticNetlist::require_open() const {
  if (finalized_) throw BuildError("netlist: already finalized");
}

void StochasticNetlist::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw BuildError("netlist: fan-in refers to missing node " + std::to_string(id));
  }
}

NodeId StochasticNetlist::add_constant(bool value) {
  Node n;
  n.kind = NodeKind::constant;
  n.param = value ? 1 : 0;
  return push(n, {});
}

NodeId StochasticNetlist::constant(bool value) {
  auto& slot = const_nodes_[value ? 1 : 0];
  if (!slot) slot = add_constant(value);
  return *slot;
}

NodeId StochasticNetlist::add_pbs(const bitgen::GeneratorCode& code) {
  Node n;
  n.kind = NodeKind::pbs;
  n.param = static_cast<std::uint32_t>(code.n_bits());
  auto it = std::find(codes_.begin(), codes_.end(), code);
  if (it == codes_.end()) it = codes_.insert(codes_.end(), code);
  n.code_index = static_cast<std::uint32_t>(it - codes_.begin());
  return push(n, {});
}

NodeId StochasticNetlist::add_input(int n_bits) {
  if (n_bits < 1 || n_bits > 30) throw BuildError("netlist: input n_bits must be in 1..30");
  Node n;
  n.kind = NodeKind::input;
  n.param = static_cast<std::uint32_t>(n_bits);
  return push(n, {});
}

NodeId StochasticNetlist::add_gate(NodeKind kind, std::span<const NodeId> fanin) {
  switch (kind) {
    case NodeKind::and_gate:
    case NodeKind::or_gate:
    case NodeKind::nor_gate:
      if (fanin.empty()) throw BuildError(std::string("netlist: ") + to_string(kind) + " needs fan-in >= 1");
      break;
    case NodeKind::not_gate:
      if (fanin.size() != 1) throw BuildError("netlist: not needs exactly one input");
      break;
    case NodeKind::mux:
      if (fanin.size() != 3) throw BuildError("netlist: mux needs (select, a, b)");
      break;
    default:
      throw BuildError(std::string("netlist: ") + to_string(kind) + " is not a gate");
  }
  for (NodeId f : fanin) check_id(f);
  Node n;
  n.kind = kind;
  return push(n, fanin);
}

NodeId StochasticNetlist::add_isolator(std::uint32_t delay, std::optional<NodeId> input) {
  if (input) check_id(*input);
  Node n;
  n.kind = NodeKind::isolator;
  n.param = delay;
  const NodeId in = input.value_or(kNone);
  return push(n, std::span<const NodeId>(&in, 1));
}

void StochasticNetlist::connect_isolator(NodeId isolator, NodeId input) {
  require_open();
  check_id(isolator);
  check_id(input);
  Node& n = nodes_[isolator];
  if (n.kind != NodeKind::isolator) throw BuildError("netlist: connect_isolator on a non-isolator");
  fanin_[n.fanin_begin] = input;
}

void StochasticNetlist::mark_output(NodeId node) {
  require_open();
  check_id(node);
  outputs_.push_back(node);
}

void StochasticNetlist::finalize() {
  if (finalized_) return;
  const std::size_t n = nodes_.size();
  for (std::size_t id = 0; id < n; ++id) {
    const Node& node = nodes_[id];
    for (std::uint32_t k = 0; k < node.fanin_count; ++k) {
      const NodeId f = fanin_[node.fanin_begin + k];
      if (f == kNone) throw BuildError("netlist: isolator " + std::to_string(id) + " has no input");
      if (f >= n) {
        throw BuildError("netlist: node " + std::to_string(id) + " refers to missing node " +
                         std::to_string(f));
      }
    }
  }

  // Kahn's algorithm; `combinational_only` drops the register edges.
  auto order = [&](bool combinational_only) {
    std::vector<std::uint32_t> indeg(n, 0);
    std::vector<std::uint32_t> fanout_begin(n + 1, 0);
    for (std::size_t id = 0; id < n; ++id) {
      const Node& node = nodes_[id];
      if (combinational_only && registered(node)) continue;
      indeg[id] = node.fanin_count;
      for (std::uint32_t k = 0; k < node.fanin_count; ++k) ++fanout_begin[fanin_[node.fanin_begin + k] + 1];
    }
    for (std::size_t i = 0; i < n; ++i) fanout_begin[i + 1] += fanout_begin[i];
    std::vector<NodeId> fanout(fanout_begin[n]);
    std::vector<std::uint32_t> fill(fanout_begin.begin(), fanout_begin.end() - 1);
    for (std::size_t id = 0; id < n; ++id) {
      const Node& node = nodes_[id];
      if (combinational_only && registered(node)) continue;
      for (std::uint32_t k = 0; k < node.fanin_count; ++k) {
        fanout[fill[fanin_[node.fanin_begin + k]]++] = static_cast<NodeId>(id);
      }
    }
    std::vector<NodeId> out;
    out.reserve(n);
    for (std::size_t id = 0; id < n; ++id) {
      if (indeg[id] == 0) out.push_back(static_cast<NodeId>(id));
    }
    for (std::size_t head = 0; head < out.size(); ++head) {
      const NodeId u = out[head];
      for (std::uint32_t k = fanout_begin[u]; k < fanout_begin[u + 1]; ++k) {
        if (--indeg[fanout[k]] == 0) out.push_back(fanout[k]);
      }
    }
    return out;
  };

  const std::vector<NodeId> comb = order(true);
  if (comb.size() != n) {
    throw BuildError("netlist: combinational loop (cycles must pass through an isolator with delay >= 1)");
  }
  schedule_.clear();
  sources_.clear();
  isolators_.clear();
  for (NodeId id : comb) {
    const Node& node = nodes_[id];
    if (!is_source(node.kind) && !registered(node)) schedule_.push_back(id);
  }
  for (std::size_t id = 0; id < n; ++id) {
    if (is_source(nodes_[id].kind)) sources_.push_back(static_cast<NodeId>(id));
    if (nodes_[id].kind == NodeKind::isolator) isolators_.push_back(static_cast<NodeId>(id));
  }

  // Isolator layers along feed-forward paths; nodes on feedback loops are skipped.
  std::vector<std::uint32_t> depth(n, 0);
  std::uint32_t deepest = 0;
  for (NodeId id : order(false)) {
    const Node& node = nodes_[id];
    std::uint32_t d = 0;
    for (std::uint32_t k = 0; k < node.fanin_count; ++k) d = std::max(d, depth[fanin_[node.fanin_begin + k]]);
    if (node.kind == NodeKind::isolator) ++d;
    depth[id] = d;
    deepest = std::max(deepest, d);
  }
  isolator_depth_ = deepest;
  finalized_ = true;
}

std::span<const NodeId> StochasticNetlist::fanin(NodeId id) const {
  const Node& n = nodes_.at(id);
  return std::span<const NodeId>(fanin_).subspan(n.fanin_begin, n.fanin_count);
}

const bitgen::GeneratorCode& StochasticNetlist::pbs_code(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (n.kind != NodeKind::pbs) throw std::invalid_argument("pbs_code: node is not a pbs");
  return codes_[n.code_index];
}

std::span<const NodeId> StochasticNetlist::schedule() const {
  if (!finalized_) throw std::logic_error("netlist: schedule() before finalize()");
  return schedule_;
}

std::span<const NodeId> StochasticNetlist::sources() const {
  if (!finalized_) throw std::logic_error("netlist: sources() before finalize()");
  return sources_;
}

std::span<const NodeId> StochasticNetlist::isolators() const {
  if (!finalized_) throw std::logic_error("netlist: isolators() before finalize()");
  return isolators_;
}

std::size_t StochasticNetlist::isolator_depth() const {
  if (!finalized_) throw std::logic_error("netlist: isolator_depth() before finalize()");
  return isolator_depth_;
}

std::uint32_t StochasticNetlist::max_delay() const {
  std::uint32_t d = 0;
  for (const Node& n : nodes_) {
    if (n.kind == NodeKind::isolator) d = std::max(d, n.param);
  }
  return d;
}

std::size_t StochasticNetlist::count(NodeKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [kind](const Node& n) { return n.kind == kind; }));
}

void StochasticNetlist::write(std::ostream& os) const {
  os << "smtjsc-netlist 1\n";
  os << "nodes " << nodes_.size() << '\n';
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    os << id << ' ' << to_string(n.kind);
    switch (n.kind) {
      case NodeKind::constant:
        os << ' ' << n.param;
        break;
      case NodeKind::pbs:
        os << ' ' << n.param << ' ' << codes_[n.code_index].code();
        break;
      case NodeKind::input:
      case NodeKind::isolator:
        os << ' ' << n.param;
        break;
      default:
        break;
    }
    for (std::uint32_t k = 0; k < n.fanin_count; ++k) {
      const NodeId f = fanin_[n.fanin_begin + k];
      if (f == kNone) {
        os << " -";
      } else {
        os << ' ' << f;
      }
    }
    os << '\n';
  }
  os << "outputs " << outputs_.size();
  for (NodeId o : outputs_) os << ' ' << o;
  os << '\n';
}

StochasticNetlist StochasticNetlist::read(std::istream& is) {
  std::size_t line_no = 0;
  std::string line;
  auto fail = [&](const std::string& what) -> BuildError {
    return BuildError("netlist line " + std::to_string(line_no) + ": " + what);
  };
  auto next_line = [&]() -> std::istringstream {
    for (;;) {
      if (!std::getline(is, line)) {
        ++line_no;
        throw fail("unexpected end of input");
      }
      ++line_no;
      if (!line.empty() && line[0] != '#') return std::istringstream(line);
    }
  };

  {
    auto ls = next_line();
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != "smtjsc-netlist") throw fail("missing 'smtjsc-netlist' header");
    if (version != 1) throw fail("unsupported netlist version " + std::to_string(version));
  }
  std::size_t count = 0;
  {
    auto ls = next_line();
    std::string key;
    if (!(ls >> key >> count) || key != "nodes") throw fail("expected 'nodes <count>'");
  }

  StochasticNetlist net;
  std::vector<std::pair<NodeId, NodeId>> pending;  // isolator -> input
  std::vector<NodeId> fanin;
  for (std::size_t i = 0; i < count; ++i) {
    auto ls = next_line();
    std::size_t id = 0;
    std::string kind_name;
    if (!(ls >> id >> kind_name)) throw fail("expected '<id> <kind> ...'");
    if (id != i) throw fail("node ids must be consecutive from 0");
    auto it = std::find_if(std::begin(kKindNames), std::end(kKindNames),
                           [&](const KindName& kn) { return kind_name == kn.name; });
    if (it == std::end(kKindNames)) throw fail("unknown node kind '" + kind_name + "'");
    auto read_u = [&](const char* what) {
      long long v = -1;
      if (!(ls >> v) || v < 0 || v > 0xFFFFFFFFLL) throw fail(std::string("bad ") + what);
      return static_cast<std::uint32_t>(v);
    };
    try {
      switch (it->kind) {
        case NodeKind::constant: {
          const std::uint32_t v = read_u("constant value");
          if (v > 1) throw fail("constant must be 0 or 1");
          net.add_constant(v == 1);
          break;
        }
        case NodeKind::pbs: {
          const std::uint32_t bits = read_u("pbs n_bits");
          const std::uint32_t code = read_u("pbs code");
          if (bits < 1 || bits > 30) throw fail("pbs n_bits must be in 1..30");
          net.add_pbs(bitgen::GeneratorCode(static_cast<int>(bits), code));
          break;
        }
        case NodeKind::input:
          net.add_input(static_cast<int>(read_u("input n_bits")));
          break;
        case NodeKind::isolator: {
          const std::uint32_t delay = read_u("isolator delay");
          const std::uint32_t in = read_u("isolator input");
          pending.emplace_back(net.add_isolator(delay), in);
          break;
        }
        default: {
          fanin.clear();
          long long v;
          while (ls >> v) {
            if (v < 0 || static_cast<std::size_t>(v) >= i) throw fail("gate fan-in must refer to an earlier node");
            fanin.push_back(static_cast<NodeId>(v));
          }
          if (!ls.eof()) throw fail("bad fan-in list");
          net.add_gate(it->kind, fanin);
          break;
        }
      }
    } catch (const std::invalid_argument& e) {
      throw fail(e.what());
    } catch (const BuildError& e) {
      if (std::string(e.what()).rfind("netlist line", 0) == 0) throw;
      throw fail(e.what());
    }
    std::string extra;
    if (it->kind != NodeKind::and_gate && it->kind != NodeKind::or_gate &&
        it->kind != NodeKind::nor_gate && it->kind != NodeKind::not_gate &&
        it->kind != NodeKind::mux && (ls >> extra)) {
      throw fail("trailing tokens");
    }
  }
  for (auto [iso, in] : pending) {
    if (in >= count) throw fail("isolator " + std::to_string(iso) + " input out of range");
    net.connect_isolator(iso, in);
  }
  {
    auto ls = next_line();
    std::string key;
    std::size_t n_out = 0;
    if (!(ls >> key >> n_out) || key != "outputs") throw fail("expected 'outputs <count> ...'");
    for (std::size_t k = 0; k < n_out; ++k) {
      long long v = -1;
      if (!(ls >> v) || v < 0 || static_cast<std::size_t>(v) >= count) throw fail("bad output id");
      net.mark_output(static_cast<NodeId>(v));
    }
  }
  try {
    net.finalize();
  } catch (const BuildError& e) {
    throw fail(e.what());
  }
  return net;
}

void transpose64(std::uint64_t* m) noexcept {
  std::uint64_t mask = 0x00000000FFFFFFFFULL;
  for (unsigned j = 32; j != 0; j >>= 1, mask ^= mask << j) {
    for (unsigned k = 0; k < 64; k = ((k | j) + 1) & ~j) {
      const std::uint64_t t = ((m[k] >> j) ^ m[k | j]) & mask;
      m[k | j] ^= t;
      m[k] ^= t << j;
    }
  }
}

Simulator::Simulator(const StochasticNetlist& netlist, std::uint64_t seed, SimulatorOptions options)
    : net_(&netlist), options_(options) {
  if (!netlist.finalized()) throw std::invalid_argument("Simulator: netlist must be finalized");
  if (options_.lanes < 1 || options_.lanes > 64) {
    throw std::invalid_argument("Simulator: lanes must be in 1..64");
  }
  lane_mask_ = options_.lanes == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << options_.lanes) - 1;
  if (options_.half_sources == HalfSourceModel::telegraph) {
    if (!(options_.clock_over_tau > 0.0)) throw std::invalid_argument("Simulator: clock_over_tau must be positive");
    const double q = 0.5 * (1.0 - std::exp(-2.0 * options_.clock_over_tau));
    flip_threshold_ = static_cast<std::uint32_t>(std::nearbyint(q * (1u << kFlipBits)));
  }

  const std::size_t n = netlist.size();
  values_.assign(n, 0);
  output_words_.assign(netlist.outputs().size(), 0);
  input_slot_.assign(n, kNone);
  half_slot_.assign(n, kNone);
  iso_slot_.assign(n, kNone);

  std::uint32_t half_count = 0;
  for (NodeId id : netlist.sources()) {
    const Node& node = netlist.node(id);
    if (node.kind == NodeKind::input) {
      input_slot_[id] = static_cast<std::uint32_t>(inputs_.size());
      InputProgram prog;
      prog.tap.assign(node.param, 0);
      prog.invert.assign(node.param, 0);
      inputs_.push_back(std::move(prog));
    }
    if (node.kind != NodeKind::constant) {
      half_slot_[id] = half_count;
      half_count += node.param;
    }
  }
  half_scratch_.assign(30, 0);
  if (options_.half_sources == HalfSourceModel::telegraph) half_state_.assign(half_count, 0);

  std::uint32_t ring = 0;
  for (NodeId id : netlist.isolators()) {
    const Node& node = netlist.node(id);
    if (node.param == 0) continue;
    iso_slot_[id] = ring;
    ring += node.param;
    iso_head_.push_back(0);
  }
  iso_ring_.assign(ring, 0);
  reset(seed);
}

void Simulator::reset(std::uint64_t seed) {
  lane_rngs_.clear();
  Xoshiro256 g = Xoshiro256::stream(seed, options_.lane_offset);
  for (std::size_t l = 0; l < options_.lanes; ++l) {
    lane_rngs_.push_back(g);
    g.jump();
  }
  block_pos_ = 64;
  std::fill(values_.begin(), values_.end(), 0);
  std::fill(iso_ring_.begin(), iso_ring_.end(), 0);
  std::fill(iso_head_.begin(), iso_head_.end(), 0);
  cycle_ = 0;
  // Telegraph devices start from their stationary (1/2, 1/2) state.
  for (auto& s : half_state_) s = draw();
}

void Simulator::refill() {
  for (std::size_t l = 0; l < 64; ++l) block_[l] = l < options_.lanes ? lane_rngs_[l]() : 0;
  transpose64(block_);
  block_pos_ = 0;
}

std::uint64_t Simulator::draw() {
  if (block_pos_ == 64) refill();
  return block_[block_pos_++];
}

std::uint64_t Simulator::half_word(std::size_t slot) {
  if (options_.half_sources == HalfSourceModel::ideal) return draw();
  // flip = (u < q) per lane, comparing 16-bit uniforms LSB first.
  std::uint64_t lt = 0;
  for (int b = 0; b < kFlipBits; ++b) {
    const std::uint64_t u = draw();
    lt = ((flip_threshold_ >> b) & 1u) ? (~u | lt) : (~u & lt);
  }
  half_state_[slot] ^= lt;
  return half_state_[slot];
}

void Simulator::set_input_codes(NodeId input, std::span<const std::uint32_t> lane_codes) {
  const Node& node = net_->node(input);
  if (node.kind != NodeKind::input) throw std::invalid_argument("set_input_codes: node is not an input");
  if (lane_codes.size() != options_.lanes) {
    throw std::invalid_argument("set_input_codes: need one code per lane");
  }
  InputProgram& prog = inputs_[input_slot_[input]];
  const int n_bits = static_cast<int>(node.param);
  std::fill(prog.tap.begin(), prog.tap.end(), 0);
  std::fill(prog.invert.begin(), prog.invert.end(), 0);
  prog.one = 0;
  for (std::size_t l = 0; l < lane_codes.size(); ++l) {
    const bitgen::GeneratorCode code(n_bits, lane_codes[l]);
    const auto& s = code.settings();
    const std::uint64_t bit = std::uint64_t{1} << l;
    if (s.tap_row == 0) {
      if (s.constant_value) prog.one |= bit;
      continue;
    }
    prog.tap[static_cast<std::size_t>(s.tap_row - 1)] |= bit;
    for (int r = 0; r < n_bits; ++r) {
      if (s.invert[static_cast<std::size_t>(r)]) prog.invert[static_cast<std::size_t>(r)] |= bit;
    }
  }
}

void Simulator::set_input_code(NodeId input, std::uint32_t code) {
  std::vector<std::uint32_t> codes(options_.lanes, code);
  set_input_codes(input, codes);
}

std::span<const std::uint64_t> Simulator::evaluate_cycle() {
  const StochasticNetlist& net = *net_;

  for (NodeId id : net.sources()) {
    const Node& node = net.node(id);
    if (node.kind == NodeKind::constant) {
      values_[id] = node.param ? ~std::uint64_t{0} : 0;
      continue;
    }
    const std::uint32_t slot = half_slot_[id];
    if (node.kind == NodeKind::pbs) {
      // Rows past the tap cannot reach the output, so they are not drawn.
      const auto& s = net.pbs_code(id).settings();
      const auto rows = static_cast<std::size_t>(s.tap_row);
      for (std::size_t j = 0; j < rows; ++j) half_scratch_[j] = half_word(slot + j);
      values_[id] = bitgen::evaluate_tree<std::uint64_t>(
          s, std::span<const std::uint64_t>(half_scratch_.data(), rows));
    } else {
      const std::size_t n = node.param;
      for (std::size_t j = 0; j < n; ++j) half_scratch_[j] = half_word(slot + j);
      const InputProgram& prog = inputs_[input_slot_[id]];
      std::uint64_t w = half_scratch_[0];
      std::uint64_t out = w & prog.tap[0];
      for (std::size_t r = 1; r < n; ++r) {
        w = ~(w & half_scratch_[r]) ^ prog.invert[r];
        out |= w & prog.tap[r];
      }
      values_[id] = out | prog.one;
    }
  }

  {
    std::size_t k = 0;
    for (NodeId id : net.isolators()) {
      const Node& node = net.node(id);
      if (node.param == 0) continue;
      values_[id] = iso_ring_[iso_slot_[id] + iso_head_[k++]];
    }
  }

  for (NodeId id : net.schedule()) {
    const Node& node = net.node(id);
    const auto fin = net.fanin(id);
    std::uint64_t w = 0;
    switch (node.kind) {
      case NodeKind::and_gate:
        w = ~std::uint64_t{0};
        for (NodeId f : fin) w &= values_[f];
        break;
      case NodeKind::or_gate:
        for (NodeId f : fin) w |= values_[f];
        break;
      case NodeKind::nor_gate:
        for (NodeId f : fin) w |= values_[f];
        w = ~w;
        break;
      case NodeKind::not_gate:
        w = ~values_[fin[0]];
        break;
      case NodeKind::mux: {
        const std::uint64_t sel = values_[fin[0]];
        w = (~sel & values_[fin[1]]) | (sel & values_[fin[2]]);
        break;
      }
      case NodeKind::isolator:
        w = values_[fin[0]];
        break;
      default:
        break;
    }
    values_[id] = w;
  }

  {
    std::size_t k = 0;
    for (NodeId id : net.isolators()) {
      const Node& node = net.node(id);
      if (node.param == 0) continue;
      std::uint32_t& head = iso_head_[k++];
      iso_ring_[iso_slot_[id] + head] = values_[net.fanin(id)[0]];
      if (++head == node.param) head = 0;
    }
  }

  const auto outs = net.outputs();
  for (std::size_t o = 0; o < outs.size(); ++o) output_words_[o] = values_[outs[o]] & lane_mask_;
  ++cycle_;
  return output_words_;
}

std::vector<std::vector<std::uint32_t>> Simulator::run(const RunWindow& window) {
  if (window.collect < 1) throw std::invalid_argument("run: collect window must be >= 1");
  const std::size_t n_out = net_->outputs().size();
  std::vector<std::vector<std::uint32_t>> counts(n_out, std::vector<std::uint32_t>(options_.lanes, 0));
  for (std::size_t t = 0; t < window.warmup; ++t) evaluate_cycle();
  for (std::size_t t = 0; t < window.collect; ++t) {
    const auto words = evaluate_cycle();
    for (std::size_t o = 0; o < n_out; ++o) {
      std::uint64_t w = words[o];
      while (w) {
        ++counts[o][static_cast<std::size_t>(__builtin_ctzll(w))];
        w &= w - 1;
      }
    }
  }
  return counts;
}

DualNeuron build_dual_neuron(StochasticNetlist& netlist, const DualNeuronPorts& ports) {
  const std::size_t m = ports.inputs.size();
  if (ports.excit_weights.size() != m || ports.inhib_weights.size() != m) {
    throw BuildError("build_dual_neuron: " + std::to_string(m) + " inputs but " +
                     std::to_string(ports.excit_weights.size()) + " excitatory and " +
                     std::to_string(ports.inhib_weights.size()) + " inhibitory weights");
  }
  if (m == 0 && !ports.excit_bias) throw BuildError("build_dual_neuron: neuron has no excitatory synapses");
  auto zero_line = [&](NodeId w) {
    if (!ports.prune_zero_weights) return false;
    const Node& n = netlist.node(w);
    if (n.kind == NodeKind::constant) return n.param == 0;
    return n.kind == NodeKind::pbs && netlist.pbs_code(w).code() == 0;
  };
  DualNeuron dn;
  auto branch = [&](std::span<const NodeId> weights, std::optional<NodeId> bias,
                    std::vector<NodeId>& synapses) {
    for (std::size_t j = 0; j < m; ++j) {
      if (zero_line(weights[j])) continue;
      synapses.push_back(netlist.add_gate(NodeKind::and_gate, {weights[j], ports.inputs[j]}));
    }
    if (bias && !zero_line(*bias)) {
      synapses.push_back(netlist.add_gate(NodeKind::and_gate, {*bias, netlist.constant(true)}));
    }
  };
  branch(ports.excit_weights, ports.excit_bias, dn.excit_synapses);
  branch(ports.inhib_weights, ports.inhib_bias, dn.inhib_synapses);
  dn.excit_or = dn.excit_synapses.empty() ? netlist.constant(false)
                                          : netlist.add_gate(NodeKind::or_gate, dn.excit_synapses);
  // NOR over no synapses is the constant 1.
  dn.inhib_nor = dn.inhib_synapses.empty() ? netlist.constant(true)
                                           : netlist.add_gate(NodeKind::nor_gate, dn.inhib_synapses);
  dn.output = netlist.add_gate(NodeKind::and_gate, {dn.excit_or, dn.inhib_nor});
  return dn;
}

std::vector<NodeId> apply_isolator_mask(StochasticNetlist& netlist, std::span<const NodeId> lines,
                                        std::uint32_t delta_max, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick(0, delta_max);
  std::vector<NodeId> out;
  out.reserve(lines.size());
  for (NodeId line : lines) out.push_back(netlist.add_isolator(pick(rng), line));
  return out;
}

}  // namespace smtjsc::logic
