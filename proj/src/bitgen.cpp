#include "smtjsc/bitgen.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <stdexcept>
#include <string>

namespace smtjsc::bitgen {

namespace {

MuxSettings settings_for(int n_bits, std::uint32_t code) {
  MuxSettings s;
  s.invert.assign(static_cast<std::size_t>(n_bits), 0);
  const std::uint32_t full = std::uint32_t{1} << n_bits;
  if (code == 0 || code == full) {
    s.tap_row = 0;
    s.constant_value = code == full;
    return s;
  }
  // code = a * 2^(n-m) with a odd; the tree needs m rows.
  const int m = n_bits - std::countr_zero(code);
  std::uint32_t a = code >> (n_bits - m);
  s.tap_row = m;
  // Walk rows downward: row r must emit a/2^r. Below 1/2 it comes from an
  // inverted NAND (q/2 with q = a/2^(r-1)); above 1/2 from a plain NAND
  // (1 - q/2 with q = (2^r - a)/2^(r-1)).
  for (int r = m; r >= 2; --r) {
    const std::uint32_t half = std::uint32_t{1} << (r - 1);
    if (a < half) {
      s.invert[static_cast<std::size_t>(r - 1)] = 1;
    } else {
      a = (std::uint32_t{1} << r) - a;
    }
  }
  return s;
}

void check_bits(int n_bits) {
  if (n_bits < 1 || n_bits > 30) {
    throw std::invalid_argument("GeneratorCode: n_bits must be in 1..30, got " +
                                std::to_string(n_bits));
  }
}

}  // namespace

GeneratorCode::GeneratorCode(int n_bits, std::uint32_t code) : n_bits_(n_bits), code_(code) {
  check_bits(n_bits);
  if (code > full_scale()) {
    throw std::invalid_argument("GeneratorCode: code " + std::to_string(code) + " exceeds 2^" +
                                std::to_string(n_bits));
  }
  settings_ = settings_for(n_bits, code);
}

GeneratorCode GeneratorCode::from_settings(int n_bits, const MuxSettings& settings) {
  check_bits(n_bits);
  if (settings.tap_row < 0 || settings.tap_row > n_bits ||
      settings.invert.size() != static_cast<std::size_t>(n_bits)) {
    throw std::invalid_argument("GeneratorCode::from_settings: malformed settings");
  }
  if (settings.tap_row == 0) {
    return GeneratorCode(n_bits, settings.constant_value ? std::uint32_t{1} << n_bits : 0);
  }
  std::uint32_t a = 1;  // row 1 emits 1/2
  for (int r = 2; r <= settings.tap_row; ++r) {
    const std::uint32_t full = std::uint32_t{1} << r;
    a = full - a;  // NAND: 1 - (a/2^(r-1))/2
    if (settings.invert[static_cast<std::size_t>(r - 1)]) a = full - a;
  }
  return GeneratorCode(n_bits, a << (n_bits - settings.tap_row));
}

GeneratorCode GeneratorCode::nearest(int n_bits, double probability) {
  check_bits(n_bits);
  if (!(probability >= 0.0 && probability <= 1.0)) {
    throw std::invalid_argument("GeneratorCode::nearest: probability outside [0,1]");
  }
  const double scaled = std::nearbyint(probability * static_cast<double>(1u << n_bits));
  return GeneratorCode(n_bits, static_cast<std::uint32_t>(scaled));
}

double analytic_output_probability(const GeneratorCode& code, std::span<const double> source_probs) {
  if (source_probs.size() != static_cast<std::size_t>(code.n_bits())) {
    throw std::invalid_argument("analytic_output_probability: need one probability per source");
  }
  const MuxSettings& s = code.settings();
  if (s.tap_row == 0) return s.constant_value ? 1.0 : 0.0;
  double p = source_probs[0];
  for (int r = 1; r < s.tap_row; ++r) {
    p = 1.0 - p * source_probs[static_cast<std::size_t>(r)];
    if (s.invert[static_cast<std::size_t>(r)]) p = 1.0 - p;
  }
  return p;
}

bool IdealHalfSource::next_bit() {
  if (left_ == 0) {
    buffer_ = rng_();
    left_ = 64;
  }
  const bool bit = buffer_ & 1u;
  buffer_ >>= 1;
  --left_;
  return bit;
}

ProgrammableBitstreamGenerator::ProgrammableBitstreamGenerator(
    GeneratorCode code, std::vector<std::unique_ptr<BitSource>> sources)
    : code_(std::move(code)), sources_(std::move(sources)) {
  if (sources_.size() != static_cast<std::size_t>(code_.n_bits())) {
    throw std::invalid_argument("ProgrammableBitstreamGenerator: need exactly n_bits sources");
  }
  for (const auto& src : sources_) {
    if (!src) throw std::invalid_argument("ProgrammableBitstreamGenerator: null source");
  }
}

ProgrammableBitstreamGenerator ProgrammableBitstreamGenerator::ideal(GeneratorCode code,
                                                                     std::uint64_t seed) {
  std::vector<std::unique_ptr<BitSource>> sources;
  for (int j = 0; j < code.n_bits(); ++j) {
    sources.push_back(std::make_unique<IdealHalfSource>(derive_seed(seed, j)));
  }
  return ProgrammableBitstreamGenerator(std::move(code), std::move(sources));
}

ProgrammableBitstreamGenerator ProgrammableBitstreamGenerator::with_smtj(
    GeneratorCode code, const smtj::SmtjParams& params, double t_clock, std::uint64_t seed) {
  std::vector<std::unique_ptr<BitSource>> sources;
  for (int j = 0; j < code.n_bits(); ++j) {
    sources.push_back(std::make_unique<SmtjHalfSource>(
        smtj::SmtjDevice::from_params(params, seed, static_cast<std::uint64_t>(j)), t_clock));
  }
  return ProgrammableBitstreamGenerator(std::move(code), std::move(sources));
}

bool ProgrammableBitstreamGenerator::next_bit() {
  const std::size_t n = sources_.size();
  for (std::size_t j = 0; j < n; ++j) scratch_[j] = sources_[j]->next_bit();
  return evaluate_tree<bool>(code_.settings(), std::span<const bool>(scratch_.data(), n));
}

std::uint32_t maximal_taps(int width) {
  // Primitive polynomials (exponents listed in comments), as Galois masks.
  static constexpr std::array<std::uint32_t, 25> kTaps = {
      0,        0,
      0x3,       // 2,1
      0x6,       // 3,2
      0xC,       // 4,3
      0x14,      // 5,3
      0x30,      // 6,5
      0x60,      // 7,6
      0xB8,      // 8,6,5,4
      0x110,     // 9,5
      0x240,     // 10,7
      0x500,     // 11,9
      0x829,     // 12,6,4,1
      0x100D,    // 13,4,3,1
      0x2015,    // 14,5,3,1
      0x6000,    // 15,14
      0xD008,    // 16,15,13,4
      0x12000,   // 17,14
      0x20400,   // 18,11
      0x40023,   // 19,6,2,1
      0x90000,   // 20,17
      0x140000,  // 21,19
      0x300000,  // 22,21
      0x420000,  // 23,18
      0xE10000,  // 24,23,22,17
  };
  if (width < 2 || width > 24) {
    throw std::invalid_argument("maximal_taps: width must be in 2..24");
  }
  return kTaps[static_cast<std::size_t>(width)];
}

LfsrGenerator::LfsrGenerator(int width, std::uint32_t seed_state, std::uint32_t threshold)
    : LfsrGenerator(width, seed_state, threshold, maximal_taps(width)) {}

LfsrGenerator::LfsrGenerator(int width, std::uint32_t seed_state, std::uint32_t threshold,
                             std::uint32_t taps)
    : width_(width), taps_(taps), state_(seed_state), threshold_(0) {
  if (width < 2 || width > 24) throw std::invalid_argument("LfsrGenerator: width must be in 2..24");
  const std::uint32_t limit = std::uint32_t{1} << width;
  if (seed_state == 0) throw std::invalid_argument("LfsrGenerator: all-zero state never advances");
  if (seed_state >= limit) throw std::invalid_argument("LfsrGenerator: seed wider than register");
  if (taps == 0 || taps >= limit) throw std::invalid_argument("LfsrGenerator: bad tap mask");
  set_threshold(threshold);
}

void LfsrGenerator::set_threshold(std::uint32_t threshold) {
  if (threshold >= (std::uint32_t{1} << width_)) {
    throw std::invalid_argument("LfsrGenerator: threshold must be below 2^width");
  }
  threshold_ = threshold;
}

bool LfsrGenerator::next_bit() noexcept {
  const std::uint32_t lsb = state_ & 1u;
  state_ >>= 1;
  if (lsb) state_ ^= taps_;
  return state_ < threshold_;
}

double cross_correlation(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cross_correlation: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("cross_correlation: need at least 2 samples");
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] != 0, y = b[i] != 0;
    sa += x;
    sb += y;
    sab += x * y;
  }
  // For 0/1 data sum(x^2) == sum(x).
  const double var_a = sa / n - (sa / n) * (sa / n);
  const double var_b = sb / n - (sb / n) * (sb / n);
  if (var_a <= 0.0 || var_b <= 0.0) return 0.0;
  const double cov = sab / n - (sa / n) * (sb / n);
  return cov / std::sqrt(var_a * var_b);
}

std::vector<double> variability_distribution(const GeneratorCode& code,
                                             const smtj::DeviceVariabilityModel& model,
                                             std::size_t n_draws, std::uint64_t seed) {
  if (n_draws < 1) throw std::invalid_argument("variability_distribution: n_draws < 1");
  const auto n = static_cast<std::size_t>(code.n_bits());
  std::vector<Xoshiro256> streams;
  streams.reserve(n);
  for (std::size_t j = 0; j < n; ++j) streams.emplace_back(derive_seed(seed, j));
  std::vector<double> probs(n);
  std::vector<double> out(n_draws);
  for (std::size_t i = 0; i < n_draws; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      probs[j] = smtj::sample_stationary_probability(model, streams[j]);
    }
    out[i] = analytic_output_probability(code, probs);
  }
  return out;
}

}  // namespace smtjsc::bitgen
