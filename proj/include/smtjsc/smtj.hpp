#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smtjsc/rng.hpp"

// Behavioral superparamagnetic tunnel junction: a two-state random telegraph
// process read once per clock by an ideal sense amplifier.
namespace smtjsc::smtj {

/// Attempt time and barrier heights; dwell times follow tau = tau0 * exp(barrier/kT).
struct SmtjParams {
  double tau0 = 1e-9;
  double barrier_over_kT_p = 4.0;
  double barrier_over_kT_ap = 4.0;

  double dwell_p() const;
  double dwell_ap() const;

  /// The two-state picture breaks down near the ~1 ns magnetization reversal
  /// time. Dwell times under 2 ns are accepted but flagged here.
  std::optional<std::string> validity_warning() const;
};

/// Default read clock, about 2.75 dwell times for the default device.
inline constexpr double kDefaultClock = 150e-9;

enum class StepMethod {
  /// Exponential dwell times drawn per visit; exact for every dt.
  exact_events,
  /// Bernoulli flips with P_switch = 1 - exp(-h/tau) on substeps h <= tau/10.
  substep,
};

class SmtjDevice {
 public:
  /// `antiparallel` is the initial state. Throws std::invalid_argument
  /// unless both dwell times are positive.
  SmtjDevice(double tau_p, double tau_ap, std::uint64_t seed, bool antiparallel = false,
             StepMethod method = StepMethod::exact_events);

  /// Device `index` of a population driven by `master_seed`; its stream is
  /// the master stream jumped `index` times.
  static SmtjDevice from_params(const SmtjParams& params, std::uint64_t master_seed,
                                std::uint64_t index = 0,
                                StepMethod method = StepMethod::exact_events);

  /// Asymmetric device whose stationary AP probability is `p_ap` and whose
  /// two dwell times average to `mean_dwell`: tau_ap = 2*mean*p, tau_p = 2*mean*(1-p).
  static SmtjDevice with_stationary_probability(double p_ap, double mean_dwell,
                                                std::uint64_t seed);

  /// Advances the device by dt seconds and returns the post-step state
  /// (true = antiparallel). Throws std::invalid_argument for dt <= 0.
  bool step(double dt);

  /// Redraws the state from the stationary distribution (and the residual dwell).
  void randomize_state();

  bool antiparallel() const noexcept { return ap_; }
  double tau_p() const noexcept { return tau_p_; }
  double tau_ap() const noexcept { return tau_ap_; }
  double stationary_ap_probability() const noexcept { return tau_ap_ / (tau_p_ + tau_ap_); }
  /// Number of state changes during the most recent step().
  int flips_in_last_step() const noexcept { return last_flips_; }
  StepMethod method() const noexcept { return method_; }

 private:
  double current_tau() const noexcept { return ap_ ? tau_ap_ : tau_p_; }
  void draw_residual();

  double tau_p_;
  double tau_ap_;
  bool ap_;
  StepMethod method_;
  double residual_ = 0.0;  // time left in the current dwell (exact_events)
  int last_flips_ = 0;
  Xoshiro256 rng_;
};

/// Lag-1 autocorrelation of `n_samples` reads spaced `t_clock` apart, over
/// `n_trials` independent trials, each starting from the stationary state.
struct AutocorrelationEstimate {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width of the 95 % confidence interval on the mean
};

/// Per-trial Pearson correlation of (x[t], x[t+1]), normalized by the mean and
/// variance of all samples across trials. A trial whose reads are all equal
/// contributes 0. Requires n_samples >= 100 and n_trials >= 1.
AutocorrelationEstimate lag1_autocorrelation(SmtjDevice& device, double t_clock,
                                             std::size_t n_samples, std::size_t n_trials);

/// Telegraph-process value exp(-(1/tau_p + 1/tau_ap) * t); exp(-2t/tau) when symmetric.
double analytic_lag1_autocorrelation(double tau_p, double tau_ap, double t_clock);

struct AutocorrelationPoint {
  double t_clock_over_tau = 0.0;
  AutocorrelationEstimate estimate;
};

/// Characterization sweep over clock/dwell ratios for a symmetric device.
std::vector<AutocorrelationPoint> autocorrelation_sweep(const SmtjParams& params,
                                                        const std::vector<double>& ratios,
                                                        std::size_t n_samples,
                                                        std::size_t n_trials, std::uint64_t seed);

/// Beta-distributed spread of the stationary on-state probability across devices,
/// parametrized by mean mu and shape phi with sigma^2 = mu(1-mu)/(1+phi).
class DeviceVariabilityModel {
 public:
  /// Throws std::invalid_argument unless 0 < mu < 1 and 0 <= sigma^2 < mu(1-mu).
  DeviceVariabilityModel(double mu, double sigma);
  static DeviceVariabilityModel from_shape(double mu, double phi);

  double mu() const noexcept { return mu_; }
  double sigma() const noexcept { return sigma_; }
  /// Infinite when sigma == 0 (delta distribution).
  double phi() const noexcept { return phi_; }
  double alpha() const noexcept { return mu_ * phi_; }
  double beta() const noexcept { return phi_ - mu_ * phi_; }

 private:
  DeviceVariabilityModel(double mu, double sigma, double phi) : mu_(mu), sigma_(sigma), phi_(phi) {}
  double mu_;
  double sigma_;
  double phi_;
};

/// n independent Beta(mu*phi, phi - mu*phi) draws, each strictly inside (0,1);
/// all equal to mu when sigma == 0.
std::vector<double> sample_device_population(const DeviceVariabilityModel& model, std::size_t n,
                                             std::uint64_t seed);

/// Single draw from an existing stream.
double sample_stationary_probability(const DeviceVariabilityModel& model, Xoshiro256& rng);

}  // namespace smtjsc::smtj
