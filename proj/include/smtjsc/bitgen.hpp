#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "smtjsc/rng.hpp"
#include "smtjsc/smtj.hpp"

// Programmable probability sources and bitstream statistics.
namespace smtjsc::bitgen {

/// Multiplexer programming of the recursive-subdivision tree.
///
/// Row 1 taps half-source 0 directly (probability 1/2). Row r >= 2 feeds the
/// previous row's output and half-source r-1 into a NAND, producing 1 - q/2,
/// and its MUX bit optionally inverts the result. The output is taken from row
/// `tap_row`; tap_row == 0 selects a constant line instead.
struct MuxSettings {
  int tap_row = 0;
  bool constant_value = false;
  /// invert[r-1] is the MUX bit of row r; invert[0] is always false.
  std::vector<std::uint8_t> invert;

  friend bool operator==(const MuxSettings&, const MuxSettings&) = default;
};

/// Target probability code/2^n together with its MUX programming.
///
/// The programming is canonical: a code k = a * 2^(n-m) with a odd uses m rows,
/// and each row's MUX bit is set exactly when the row must produce a value
/// below 1/2. from_settings() inverts the mapping.
class GeneratorCode {
 public:
  /// Throws std::invalid_argument unless 1 <= n_bits <= 30 and code <= 2^n_bits.
  GeneratorCode(int n_bits, std::uint32_t code);
  static GeneratorCode from_settings(int n_bits, const MuxSettings& settings);
  /// Nearest code to `probability` (ties to even).
  static GeneratorCode nearest(int n_bits, double probability);

  int n_bits() const noexcept { return n_bits_; }
  std::uint32_t code() const noexcept { return code_; }
  std::uint32_t full_scale() const noexcept { return std::uint32_t{1} << n_bits_; }
  double probability() const noexcept { return static_cast<double>(code_) / full_scale(); }
  bool is_constant() const noexcept { return code_ == 0 || code_ == full_scale(); }
  const MuxSettings& settings() const noexcept { return settings_; }

  friend bool operator==(const GeneratorCode& a, const GeneratorCode& b) noexcept {
    return a.n_bits_ == b.n_bits_ && a.code_ == b.code_;
  }

 private:
  int n_bits_;
  std::uint32_t code_;
  MuxSettings settings_;
};

/// Evaluates the generator tree on one cycle's half-source values. Works on
/// `bool` and on bit-packed words (each bit an independent lane).
template <class Bits>
Bits evaluate_tree(const MuxSettings& s, std::span<const Bits> half) {
  if (s.tap_row == 0) return s.constant_value ? static_cast<Bits>(~Bits{}) : Bits{};
  Bits out = half[0];
  for (int r = 1; r < s.tap_row; ++r) {
    out = static_cast<Bits>(~(out & half[r]));
    if (s.invert[r]) out = static_cast<Bits>(~out);
  }
  return out;
}

template <>
inline bool evaluate_tree<bool>(const MuxSettings& s, std::span<const bool> half) {
  if (s.tap_row == 0) return s.constant_value;
  bool out = half[0];
  for (int r = 1; r < s.tap_row; ++r) {
    out = !(out && half[r]);
    if (s.invert[r]) out = !out;
  }
  return out;
}

/// Output probability of the tree when half-source j is on with probability
/// source_probs[j]. Exact: every row consumes a distinct source.
/// Throws std::invalid_argument if source_probs.size() != n_bits.
double analytic_output_probability(const GeneratorCode& code, std::span<const double> source_probs);

/// One bit per clock from some physical or ideal process.
class BitSource {
 public:
  virtual ~BitSource() = default;
  virtual bool next_bit() = 0;
};

/// Ideal Bernoulli(1/2) bits from a seeded stream.
class IdealHalfSource final : public BitSource {
 public:
  explicit IdealHalfSource(std::uint64_t seed) : rng_(seed) {}
  bool next_bit() override;

 private:
  Xoshiro256 rng_;
  std::uint64_t buffer_ = 0;
  int left_ = 0;
};

/// SMTJ read once per clock period.
class SmtjHalfSource final : public BitSource {
 public:
  SmtjHalfSource(smtj::SmtjDevice device, double t_clock)
      : device_(std::move(device)), t_clock_(t_clock) {}
  bool next_bit() override { return device_.step(t_clock_); }
  const smtj::SmtjDevice& device() const noexcept { return device_; }

 private:
  smtj::SmtjDevice device_;
  double t_clock_;
};

class ProgrammableBitstreamGenerator {
 public:
  /// Throws std::invalid_argument unless sources.size() == code.n_bits().
  ProgrammableBitstreamGenerator(GeneratorCode code,
                                 std::vector<std::unique_ptr<BitSource>> sources);

  /// n ideal half-sources; source j uses stream derive_seed(seed, j).
  static ProgrammableBitstreamGenerator ideal(GeneratorCode code, std::uint64_t seed);
  /// n SMTJ half-sources sampled every t_clock; device j is stream j of `seed`.
  static ProgrammableBitstreamGenerator with_smtj(GeneratorCode code, const smtj::SmtjParams& params,
                                                  double t_clock, std::uint64_t seed);

  /// Clocks every source once (all n, even rows past the tap) and returns the
  /// tree output.
  bool next_bit();

  const GeneratorCode& code() const noexcept { return code_; }
  std::size_t sources_per_cycle() const noexcept { return sources_.size(); }

 private:
  GeneratorCode code_;
  std::vector<std::unique_ptr<BitSource>> sources_;
  std::array<bool, 30> scratch_{};
};

/// LFSR energy per bit relative to the PBS, taken from circuit simulation
/// results; recorded, not simulated.
inline constexpr double kLfsrOverPbsEnergyPerBit = 2.0;

/// Maximal-length Galois feedback mask for widths 2..24.
std::uint32_t maximal_taps(int width);

/// Galois LFSR followed by a binary comparator: emits state < threshold.
class LfsrGenerator {
 public:
  /// Throws std::invalid_argument for width outside 2..24, a zero or
  /// out-of-range seed state, or threshold >= 2^width.
  LfsrGenerator(int width, std::uint32_t seed_state, std::uint32_t threshold);
  LfsrGenerator(int width, std::uint32_t seed_state, std::uint32_t threshold, std::uint32_t taps);

  /// Advances the register one step, then compares.
  bool next_bit() noexcept;
  std::uint32_t state() const noexcept { return state_; }
  int width() const noexcept { return width_; }
  std::uint32_t threshold() const noexcept { return threshold_; }
  void set_threshold(std::uint32_t threshold);

 private:
  int width_;
  std::uint32_t taps_;
  std::uint32_t state_;
  std::uint32_t threshold_;
};

/// Pearson correlation of two equal-length bitstreams; 0 when either has zero
/// variance. Throws std::invalid_argument on a length mismatch or length < 2.
double cross_correlation(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Output probabilities of `n_draws` generators whose half-sources have
/// beta-distributed stationary probabilities. Source j of every draw comes
/// from stream derive_seed(seed, j), so a generator with fewer bits sees the
/// same devices on its leading rows.
std::vector<double> variability_distribution(const GeneratorCode& code,
                                             const smtj::DeviceVariabilityModel& model,
                                             std::size_t n_draws, std::uint64_t seed);

}  // namespace smtjsc::bitgen
