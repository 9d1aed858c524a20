#include "smtjsc/energy.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace smtjsc::energy {

namespace {

bool is_voltage(double v, double target) { return std::abs(v - target) < 1e-9; }

}  // namespace

EnergyConstants EnergyConstants::for_voltage(double voltage) {
  if (is_voltage(voltage, 1.0)) return {1.0, 5.80, 3.11, 19.75};
  if (is_voltage(voltage, 0.8)) return {0.8, 5.62, 2.47, 15.02};
  throw std::invalid_argument("no energy constants for " + std::to_string(voltage) + " V (use 1.0 or 0.8)");
}

PerCycle reference_per_inference(double voltage) {
  if (is_voltage(voltage, 1.0)) return {112.80, 8.09, 25.72};
  if (is_voltage(voltage, 0.8)) return {109.39, 6.44, 19.56};
  throw std::invalid_argument("no reference energies for " + std::to_string(voltage) + " V (use 1.0 or 0.8)");
}

PerCycle reference_per_cycle(double voltage) {
  const PerCycle total = reference_per_inference(voltage);
  const double n = static_cast<double>(kReferenceCycles);
  return {total.weights_nJ / n, total.neurons_nJ / n, total.isolators_nJ / n};
}

ElementCounts ElementCounts::from_census(const net::ElementCensus& census) {
  return {census.weight_generators + census.input_generators, census.neurons + census.pool_gates, census.isolators};
}

double EnergyBreakdown::total_nJ() const noexcept {
  double s = 0;
  for (const auto& c : categories) s += c.total_nJ;
  return s;
}

EnergyBreakdown inference_energy(const ElementCounts& counts, std::size_t cycles, const EnergyConstants& constants,
                                 const std::optional<PerCycle>& overrides) {
  PerCycle pc;
  if (overrides) {
    pc = *overrides;
  } else {
    constexpr double fJ_to_nJ = 1e-6;
    pc.weights_nJ = static_cast<double>(counts.weights) * constants.weight_fJ * fJ_to_nJ;
    pc.neurons_nJ = static_cast<double>(counts.neurons) * constants.neuron_fJ * fJ_to_nJ;
    pc.isolators_nJ = static_cast<double>(counts.isolators) * constants.isolator_fJ * fJ_to_nJ;
  }
  EnergyBreakdown b;
  b.voltage = constants.voltage;
  b.census_estimate = !overrides.has_value();
  const double n = static_cast<double>(cycles);
  b.categories = {{"weights", pc.weights_nJ, cycles, pc.weights_nJ * n},
                  {"neurons", pc.neurons_nJ, cycles, pc.neurons_nJ * n},
                  {"isolators", pc.isolators_nJ, cycles, pc.isolators_nJ * n}};
  return b;
}

double switched_mtj_energy(double resistance_ohm, double voltage, double pulse_s) {
  if (!(resistance_ohm > 0)) throw std::invalid_argument("switched_mtj_energy: resistance must be positive");
  if (!(pulse_s >= 0)) throw std::invalid_argument("switched_mtj_energy: pulse length must be nonnegative");
  return voltage * voltage * pulse_s / resistance_ohm;
}

PbitEnergy pbit_energy(double r_p_ohm, double r_ap_ohm, double vdd, double t_clock_s, PbitMode mode) {
  if (!(r_p_ohm > 0 && r_ap_ohm > 0)) throw std::invalid_argument("pbit_energy: resistances must be positive");
  const double series = (r_p_ohm + r_ap_ohm) + 2 * std::sqrt(r_p_ohm * r_ap_ohm);
  const double numerator = mode == PbitMode::literal ? 2 * vdd : vdd;
  PbitEnergy e;
  e.current_A = numerator / series;
  e.energy_J = e.current_A * vdd * t_clock_s;
  return e;
}

void write_energy_csv(std::ostream& os, const EnergyBreakdown& b) {
  os << "category,per_cycle_nJ,cycles,total_nJ,voltage\n";
  char line[160];
  std::size_t cycles = 0;
  double per_cycle = 0;
  for (const auto& c : b.categories) {
    std::snprintf(line, sizeof line, "%s,%.6f,%zu,%.4f,%.2f\n", c.name.c_str(), c.per_cycle_nJ, c.cycles, c.total_nJ,
                  b.voltage);
    os << line;
    cycles = c.cycles;
    per_cycle += c.per_cycle_nJ;
  }
  std::snprintf(line, sizeof line, "total,%.6f,%zu,%.4f,%.2f\n", per_cycle, cycles, b.total_nJ(), b.voltage);
  os << line;
}

}  // namespace smtjsc::energy
