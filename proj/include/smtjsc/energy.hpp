#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smtjsc/network.hpp"

// Energy accounting for a compiled network and closed-form comparisons with
// other bitstream sources.
namespace smtjsc::energy {

/// Worst-case energy per element per clock cycle at one supply voltage.
struct EnergyConstants {
  double voltage = 1.0;
  double weight_fJ = 5.80;
  double neuron_fJ = 3.11;
  double isolator_fJ = 19.75;

  /// Characterized values for 1.0 V and 0.8 V; throws std::invalid_argument otherwise.
  static EnergyConstants for_voltage(double voltage);
};

/// Energy per network clock cycle, per category, in nJ.
struct PerCycle {
  double weights_nJ = 0;
  double neurons_nJ = 0;
  double isolators_nJ = 0;
};

/// Cycles of the reference operating point (6 isolator layers x 16 + 128).
inline constexpr std::size_t kReferenceCycles = 224;

/// Reference per-inference totals for LeNet5 at (delta, N) = (16, 128).
PerCycle reference_per_inference(double voltage);
/// The same totals divided by kReferenceCycles at full precision; the
/// rounded per-cycle column has only 2 decimals.
PerCycle reference_per_cycle(double voltage);

/// Counts entering the census estimate.
struct ElementCounts {
  std::size_t weights = 0;    // weight and input generators
  std::size_t neurons = 0;    // dual-neuron clusters and pooling gates
  std::size_t isolators = 0;

  static ElementCounts from_census(const net::ElementCensus& census);
};

struct EnergyCategory {
  std::string name;
  double per_cycle_nJ = 0;
  std::size_t cycles = 0;
  double total_nJ = 0;
};

struct EnergyBreakdown {
  std::vector<EnergyCategory> categories;  // weights, neurons, isolators
  double voltage = 1.0;
  /// True when per-cycle values come from counts x constants rather than the
  /// reference per-cycle values.
  bool census_estimate = false;

  double total_nJ() const noexcept;
};

/// Per-category energy = per-cycle energy x cycles. With `overrides` the
/// per-cycle values are taken as given; otherwise they are
/// count x constant at activity 1.
EnergyBreakdown inference_energy(const ElementCounts& counts, std::size_t cycles, const EnergyConstants& constants,
                                 const std::optional<PerCycle>& overrides = std::nullopt);

/// Ohmic loss V^2 t / R of one write pulse through a stable MTJ, in joules.
/// Throws std::invalid_argument unless R > 0 and t >= 0.
double switched_mtj_energy(double resistance_ohm, double voltage, double pulse_s);

/// How the p-bit bias current is evaluated. `literal` uses
/// I = 2 Vdd / ((R_P + R_AP) + 2 sqrt(R_P R_AP)); `reported` drops the leading
/// factor 2, giving the reference 3.4 uA for 50 k / 100 k.
enum class PbitMode { literal, reported };

struct PbitEnergy {
  double current_A = 0;
  double energy_J = 0;  // I Vdd t_clock per emitted bit
};

/// Throws std::invalid_argument unless both resistances are positive.
PbitEnergy pbit_energy(double r_p_ohm, double r_ap_ohm, double vdd, double t_clock_s, PbitMode mode);

/// Energy per bit of the sense-amplifier generator, independent of the clock.
inline constexpr double kScPcsaEnergyPerBit_J = 10e-15;

/// CSV body `category,per_cycle_nJ,cycles,total_nJ,voltage` with a final total row.
void write_energy_csv(std::ostream& os, const EnergyBreakdown& breakdown);

}  // namespace smtjsc::energy
