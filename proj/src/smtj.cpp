#include "smtjsc/smtj.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace smtjsc::smtj {

double SmtjParams::dwell_p() const { return tau0 * std::exp(barrier_over_kT_p); }
double SmtjParams::dwell_ap() const { return tau0 * std::exp(barrier_over_kT_ap); }

std::optional<std::string> SmtjParams::validity_warning() const {
  const double shortest = std::min(dwell_p(), dwell_ap());
  if (shortest < 2e-9) {
    std::ostringstream os;
    os << "dwell time " << shortest * 1e9
       << " ns is near the magnetization reversal time scale; the two-state model is "
          "not reliable below 2 ns";
    return os.str();
  }
  return std::nullopt;
}

SmtjDevice::SmtjDevice(double tau_p, double tau_ap, std::uint64_t seed, bool antiparallel,
                       StepMethod method)
    : tau_p_(tau_p), tau_ap_(tau_ap), ap_(antiparallel), method_(method), rng_(seed) {
  if (!(tau_p > 0.0) || !(tau_ap > 0.0)) {
    throw std::invalid_argument("SmtjDevice: dwell times must be positive");
  }
  draw_residual();
}

SmtjDevice SmtjDevice::from_params(const SmtjParams& params, std::uint64_t master_seed,
                                   std::uint64_t index, StepMethod method) {
  SmtjDevice d(params.dwell_p(), params.dwell_ap(), 0, false, method);
  d.rng_ = Xoshiro256::stream(master_seed, index);
  d.randomize_state();
  return d;
}

SmtjDevice SmtjDevice::with_stationary_probability(double p_ap, double mean_dwell,
                                                   std::uint64_t seed) {
  if (!(p_ap > 0.0 && p_ap < 1.0)) {
    throw std::invalid_argument("SmtjDevice: stationary probability must lie in (0,1)");
  }
  SmtjDevice d(2.0 * mean_dwell * (1.0 - p_ap), 2.0 * mean_dwell * p_ap, seed);
  d.randomize_state();
  return d;
}

void SmtjDevice::draw_residual() {
  // Exponential dwell; memorylessness makes a fresh draw valid at any time.
  residual_ = -current_tau() * std::log(rng_.uniform_open0());
}

void SmtjDevice::randomize_state() {
  ap_ = rng_.uniform() < stationary_ap_probability();
  draw_residual();
}

bool SmtjDevice::step(double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("SmtjDevice::step: dt must be positive");
  last_flips_ = 0;
  if (method_ == StepMethod::exact_events) {
    double remaining = dt;
    while (residual_ <= remaining) {
      remaining -= residual_;
      ap_ = !ap_;
      ++last_flips_;
      draw_residual();
    }
    residual_ -= remaining;
    return ap_;
  }
  const double h_max = std::min(tau_p_, tau_ap_) / 10.0;
  const auto n_sub = static_cast<std::size_t>(std::max(1.0, std::ceil(dt / h_max)));
  const double h = dt / static_cast<double>(n_sub);
  const double p_switch_p = 1.0 - std::exp(-h / tau_p_);
  const double p_switch_ap = 1.0 - std::exp(-h / tau_ap_);
  for (std::size_t i = 0; i < n_sub; ++i) {
    if (rng_.uniform() < (ap_ ? p_switch_ap : p_switch_p)) {
      ap_ = !ap_;
      ++last_flips_;
    }
  }
  return ap_;
}

AutocorrelationEstimate lag1_autocorrelation(SmtjDevice& device, double t_clock,
                                             std::size_t n_samples, std::size_t n_trials) {
  if (n_samples < 100) throw std::invalid_argument("lag1_autocorrelation: n_samples < 100");
  if (n_trials < 1) throw std::invalid_argument("lag1_autocorrelation: n_trials < 1");
  if (!(t_clock > 0.0)) throw std::invalid_argument("lag1_autocorrelation: t_clock <= 0");

  std::vector<std::uint8_t> reads(n_samples * n_trials);
  std::size_t ones = 0;
  for (std::size_t trial = 0; trial < n_trials; ++trial) {
    device.randomize_state();
    for (std::size_t i = 0; i < n_samples; ++i) {
      const bool bit = device.step(t_clock);
      reads[trial * n_samples + i] = bit;
      ones += bit;
    }
  }
  const double mean = static_cast<double>(ones) / static_cast<double>(reads.size());
  const double var = mean * (1.0 - mean);

  std::vector<double> per_trial(n_trials, 0.0);
  if (var > 0.0) {
    for (std::size_t trial = 0; trial < n_trials; ++trial) {
      const std::uint8_t* x = reads.data() + trial * n_samples;
      bool constant = true;
      double acc = 0.0;
      for (std::size_t i = 0; i + 1 < n_samples; ++i) {
        constant = constant && x[i] == x[i + 1];
        acc += (x[i] - mean) * (x[i + 1] - mean);
      }
      per_trial[trial] = constant ? 0.0 : acc / static_cast<double>(n_samples - 1) / var;
    }
  }

  AutocorrelationEstimate est;
  est.mean = std::accumulate(per_trial.begin(), per_trial.end(), 0.0) /
             static_cast<double>(n_trials);
  if (n_trials > 1) {
    double ss = 0.0;
    for (double r : per_trial) ss += (r - est.mean) * (r - est.mean);
    const double sd = std::sqrt(ss / static_cast<double>(n_trials - 1));
    est.ci95 = 1.959963984540054 * sd / std::sqrt(static_cast<double>(n_trials));
  } else {
    est.ci95 = std::numeric_limits<double>::infinity();
  }
  return est;
}

double analytic_lag1_autocorrelation(double tau_p, double tau_ap, double t_clock) {
  return std::exp(-(1.0 / tau_p + 1.0 / tau_ap) * t_clock);
}

std::vector<AutocorrelationPoint> autocorrelation_sweep(const SmtjParams& params,
                                                        const std::vector<double>& ratios,
                                                        std::size_t n_samples,
                                                        std::size_t n_trials, std::uint64_t seed) {
  std::vector<AutocorrelationPoint> out;
  out.reserve(ratios.size());
  const double tau = 0.5 * (params.dwell_p() + params.dwell_ap());
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    SmtjDevice device = SmtjDevice::from_params(params, derive_seed(seed, i));
    out.push_back({ratios[i], lag1_autocorrelation(device, ratios[i] * tau, n_samples, n_trials)});
  }
  return out;
}

DeviceVariabilityModel::DeviceVariabilityModel(double mu, double sigma)
    : mu_(mu), sigma_(sigma), phi_(std::numeric_limits<double>::infinity()) {
  if (!(mu > 0.0 && mu < 1.0)) {
    throw std::invalid_argument("DeviceVariabilityModel: mu must lie in (0,1)");
  }
  if (!(sigma >= 0.0)) throw std::invalid_argument("DeviceVariabilityModel: sigma < 0");
  if (sigma > 0.0) {
    phi_ = mu * (1.0 - mu) / (sigma * sigma) - 1.0;
    if (!(phi_ > 0.0)) {
      throw std::invalid_argument(
          "DeviceVariabilityModel: sigma^2 >= mu(1-mu) gives nonpositive beta shape");
    }
  }
}

DeviceVariabilityModel DeviceVariabilityModel::from_shape(double mu, double phi) {
  if (!(mu > 0.0 && mu < 1.0)) {
    throw std::invalid_argument("DeviceVariabilityModel: mu must lie in (0,1)");
  }
  if (!(phi > 0.0)) throw std::invalid_argument("DeviceVariabilityModel: phi must be positive");
  return DeviceVariabilityModel(mu, std::sqrt(mu * (1.0 - mu) / (1.0 + phi)), phi);
}

double sample_stationary_probability(const DeviceVariabilityModel& model, Xoshiro256& rng) {
  if (model.sigma() == 0.0) return model.mu();
  std::gamma_distribution<double> ga(model.alpha(), 1.0);
  std::gamma_distribution<double> gb(model.beta(), 1.0);
  for (;;) {
    const double a = ga(rng);
    const double b = gb(rng);
    const double p = a / (a + b);
    if (p > 0.0 && p < 1.0) return p;
  }
}

std::vector<double> sample_device_population(const DeviceVariabilityModel& model, std::size_t n,
                                             std::uint64_t seed) {
  Xoshiro256 rng(seed);
  std::vector<double> out(n);
  for (auto& p : out) p = sample_stationary_probability(model, rng);
  return out;
}

}  // namespace smtjsc::smtj
