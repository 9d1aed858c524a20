// smtjsc: train, quantize, run and characterize SMTJ stochastic-computing networks.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smtjsc/bitgen.hpp"
#include "smtjsc/energy.hpp"
#include "smtjsc/mnist.hpp"
#include "smtjsc/network.hpp"
#include "smtjsc/smtj.hpp"

using namespace smtjsc;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a over the canonical option string.
std::string config_hash(const std::string& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

// Output file or stdout; every CSV starts with the provenance comment.
class CsvOut {
 public:
  CsvOut(const std::string& path, const std::string& canonical, std::uint64_t seed) {
    if (!path.empty() && path != "-") {
      file_.open(path);
      if (!file_) throw UsageError("cannot write " + path);
    }
    out() << "# config_hash=" << config_hash(canonical) << " seed=" << seed << '\n';
  }
  std::ostream& out() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

std::string fmt(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

net::DualNetwork load_model(const std::string& path, net::ModelHeader* header = nullptr) {
  if (!std::filesystem::exists(path)) throw UsageError("model file not found: " + path);
  std::ifstream is(path);
  try {
    return net::read_model(is, header);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void save_model(const std::string& path, const net::DualNetwork& model, net::ModelEncoding enc,
                const net::ModelHeader& header) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path);
  net::write_model(os, model, enc, header);
}

struct DataOptions {
  std::string dir = "data/mnist-5k";
  std::string split = "t10k";
  std::size_t subset = 0;  // 0 = all

  void add(CLI::App* app, const std::string& default_split) {
    split = default_split;
    app->add_option("--data", dir, "Directory with IDX files (plain or .gz)")->capture_default_str();
    app->add_option("--split", split, "train or t10k")->check(CLI::IsMember({"train", "t10k"}))->capture_default_str();
    app->add_option("--subset", subset, "Use the first M images (0 = all)")->capture_default_str();
  }
  net::LabeledImages load() const {
    auto d = mnist::load(mnist::images_file(dir, split), mnist::labels_file(dir, split));
    return subset ? d.head(subset) : d;
  }
  std::string canonical() const { return dir + "|" + split + "|" + std::to_string(subset); }
};

net::CompiledNetwork compile_model(const net::DualNetwork& model, int bits, std::uint32_t delta, std::uint64_t seed,
                                   int input_bits) {
  if (!net::is_quantized(model, bits)) {
    throw UsageError("model is not on the 1/" + std::to_string(1u << bits) + " grid; run `smtjsc quantize` first");
  }
  return net::compile(model, {.delta_max = delta, .seed = seed, .n_bits = bits, .input_bits = input_bits});
}

double accuracy(const std::vector<int>& predictions, const net::LabeledImages& data) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += predictions[i] == data.labels[i];
  return data.size() ? static_cast<double>(ok) / static_cast<double>(data.size()) : 0.0;
}

std::vector<int> analytic_predictions(const net::DualNetwork& model, const net::LabeledImages& data) {
  std::vector<int> p(data.size());
  net::parallel_for(data.size(), 0, [&](std::size_t i) {
    p[i] = net::argmax(std::span<const double>(net::forward(model, data.image(i))));
  });
  return p;
}

void write_confusion(CsvOut& csv, const std::vector<int>& predictions, const net::LabeledImages& data) {
  std::vector<std::array<std::size_t, 10>> m(10);
  for (std::size_t i = 0; i < data.size(); ++i) ++m[data.labels[i]][static_cast<std::size_t>(predictions[i])];
  auto& os = csv.out();
  os << "true_class,pred_0,pred_1,pred_2,pred_3,pred_4,pred_5,pred_6,pred_7,pred_8,pred_9,class_accuracy\n";
  for (std::size_t c = 0; c < 10; ++c) {
    std::size_t total = 0;
    os << c;
    for (std::size_t k = 0; k < 10; ++k) {
      os << ',' << m[c][k];
      total += m[c][k];
    }
    os << ',' << (total ? fmt(static_cast<double>(m[c][c]) / static_cast<double>(total), 4) : "nan") << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic-computing networks driven by superparamagnetic tunnel junctions"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "Master seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a dual LeNet5 with the analytic model");
  DataOptions train_data;
  train_data.add(train, "train");
  net::TrainConfig tc;
  std::string train_out = "model.txt", train_log;
  train->add_option("--inits", tc.inits, "Random initializations")->capture_default_str();
  train->add_option("--epochs", tc.epochs, "Epochs per initialization")->capture_default_str();
  train->add_option("--batch", tc.batch_size, "Mini-batch size")->capture_default_str();
  train->add_option("--lr", tc.learning_rate, "RMSProp learning rate")->capture_default_str();
  train->add_option("--validation", tc.validation_fraction, "Held-out fraction for model selection")
      ->capture_default_str();
  train->add_option("--out", train_out, "Model file (lossless real values)")->capture_default_str();
  train->add_option("--log", train_log, "Training log CSV (default: <out>.log.csv)");

  // quantize
  auto* quant = app.add_subcommand("quantize", "Round parameters to multiples of 2^-bits");
  std::string q_in, q_out;
  int q_bits = 4;
  quant->add_option("--in", q_in, "Input model")->required();
  quant->add_option("--out", q_out, "Output model (integer codes)")->required();
  quant->add_option("--bits", q_bits, "Precision")->check(CLI::Range(1, 16))->capture_default_str();

  // infer
  auto* infer = app.add_subcommand("infer", "Classify images");
  infer->require_subcommand(1);
  auto* ia = infer->add_subcommand("analytic", "Probability-domain forward pass");
  auto* is = infer->add_subcommand("stochastic", "Cycle-level bitstream simulation");
  DataOptions ia_data, is_data;
  ia_data.add(ia, "t10k");
  is_data.add(is, "t10k");
  std::string ia_model, is_model, ia_out, is_out;
  ia->add_option("--model", ia_model, "Model file")->required();
  ia->add_option("--confusion", ia_out, "Confusion CSV");
  std::uint32_t is_delta = 16;
  std::size_t is_samples = 128;
  int is_bits = 4, is_input_bits = 4;
  bool is_telegraph = false;
  is->add_option("--model", is_model, "Quantized model file")->required();
  is->add_option("--delta", is_delta, "Maximum isolator delay")->capture_default_str();
  is->add_option("--samples", is_samples, "Collected cycles N")->check(CLI::PositiveNumber)->capture_default_str();
  is->add_option("--bits", is_bits, "Weight precision")->capture_default_str();
  is->add_option("--input-bits", is_input_bits, "Input generator precision")->capture_default_str();
  is->add_flag("--telegraph", is_telegraph, "Correlated SMTJ half-sources at 150 ns / 54.6 ns");
  is->add_option("--confusion", is_out, "Confusion CSV");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Accuracy over isolator delay and sample count");
  DataOptions sw_data;
  sw_data.add(sweep, "t10k");
  std::string sw_model, sw_out;
  std::vector<std::uint32_t> sw_deltas = {0, 2, 4, 8, 16, 24};
  std::vector<std::size_t> sw_ns = {32, 64, 128, 256};
  std::size_t sw_repeats = 1;
  sweep->add_option("--model", sw_model, "Quantized model file")->required();
  sweep->add_option("--delta-list", sw_deltas, "Isolator delays")->delimiter(',')->capture_default_str();
  sweep->add_option("--n-list", sw_ns, "Collected cycle counts")->delimiter(',')->capture_default_str();
  sweep->add_option("--repeats", sw_repeats, "Independent runs per delay")->check(CLI::PositiveNumber)
      ->capture_default_str();
  sweep->add_option("--out", sw_out, "CSV path (default stdout)");

  // char
  auto* ch = app.add_subcommand("char", "Device and generator characterization");
  ch->require_subcommand(1);
  auto* cs = ch->add_subcommand("smtj", "Lag-1 autocorrelation against t_clock/tau");
  std::vector<double> cs_ratios = {0.25, 0.5, 1, 2, 3, 4, 5};
  std::size_t cs_samples = 1000, cs_trials = 1000;
  double cs_barrier = 4.0;
  std::string cs_out;
  cs->add_option("--tclock-over-tau", cs_ratios, "Clock/dwell ratios")->delimiter(',')->capture_default_str();
  cs->add_option("--samples", cs_samples, "Reads per trial")->capture_default_str();
  cs->add_option("--trials", cs_trials, "Independent trials")->capture_default_str();
  cs->add_option("--barrier", cs_barrier, "Barrier height in kT")->capture_default_str();
  cs->add_option("--out", cs_out, "CSV path (default stdout)");
  auto* cp = ch->add_subcommand("pbs", "Generator output spread under device variability");
  std::vector<double> cp_sigmas = {0.05, 0.1, 0.15};
  std::size_t cp_draws = 5000;
  int cp_bits = 4;
  bool cp_raw = false;
  std::string cp_out;
  cp->add_option("--sigma", cp_sigmas, "Device standard deviations")->delimiter(',')->capture_default_str();
  cp->add_option("--draws", cp_draws, "Generators sampled per code")->capture_default_str();
  cp->add_option("--bits", cp_bits, "Generator precision")->check(CLI::Range(1, 12))->capture_default_str();
  cp->add_flag("--raw", cp_raw, "Emit every draw instead of summaries");
  cp->add_option("--out", cp_out, "CSV path (default stdout)");

  // energy
  auto* en = app.add_subcommand("energy", "Energy per inference");
  std::string en_model, en_out;
  std::uint32_t en_delta = 16;
  std::size_t en_samples = 128;
  double en_voltage = 1.0;
  en->add_option("--model", en_model, "Quantized model file (adds a census estimate)");
  en->add_option("--delta", en_delta, "Maximum isolator delay")->capture_default_str();
  en->add_option("--samples", en_samples, "Collected cycles N")->capture_default_str();
  en->add_option("--voltage", en_voltage, "Supply voltage")->check(CLI::IsMember({1.0, 0.8}))->capture_default_str();
  en->add_option("--out", en_out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) {
      const auto data = train_data.load();
      tc.seed = seed;
      const std::string log_path = train_log.empty() ? train_out + ".log.csv" : train_log;
      const std::string canonical = "train|" + train_data.canonical() + "|" + std::to_string(tc.inits) + "|" +
                                    std::to_string(tc.epochs) + "|" + std::to_string(tc.batch_size) + "|" +
                                    fmt(tc.learning_rate, 8) + "|" + fmt(tc.validation_fraction, 6);
      CsvOut log(log_path, canonical, seed);
      log.out() << "init,epoch,train_loss,train_accuracy,validation_accuracy\n";
      std::cerr << "training on " << data.size() << " images, " << tc.inits << " inits x " << tc.epochs
                << " epochs\n";
      std::optional<net::TrainResult> trained;
      try {
        trained = net::train(net::DualNetwork::lenet5(), data, tc, [&](const net::EpochRecord& e) {
          log.out() << e.init << ',' << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.train_accuracy, 4) << ','
                    << fmt(e.validation_accuracy, 4) << '\n';
          log.out().flush();
          std::cerr << "init " << e.init << " epoch " << e.epoch << " loss " << fmt(e.train_loss) << " val "
                    << fmt(e.validation_accuracy, 4) << '\n';
        });
      } catch (const std::runtime_error& e) {
        throw NumericalError(e.what());
      }
      const auto& r = *trained;
      for (auto i : r.aborted_inits) std::cerr << "init " << i << " aborted: non-finite loss\n";
      save_model(train_out, r.best, net::ModelEncoding::real, {4, seed});
      std::cout << "best init " << r.best_init << " validation accuracy " << fmt(r.best_validation_accuracy, 4)
                << "\nwrote " << train_out << " and " << log_path << '\n';
    } else if (*quant) {
      net::ModelHeader h;
      const auto m = load_model(q_in, &h);
      h.n_bits = q_bits;
      save_model(q_out, net::quantize(m, q_bits), net::ModelEncoding::codes, h);
      std::cout << "wrote " << q_out << '\n';
    } else if (*ia) {
      const auto model = load_model(ia_model);
      const auto data = ia_data.load();
      const auto pred = analytic_predictions(model, data);
      std::cout << "analytic accuracy " << fmt(accuracy(pred, data), 4) << " on " << data.size() << " images\n";
      if (!ia_out.empty()) {
        CsvOut csv(ia_out, "infer-analytic|" + ia_model + "|" + ia_data.canonical(), seed);
        write_confusion(csv, pred, data);
      }
    } else if (*is) {
      const auto model = load_model(is_model);
      const auto data = is_data.load();
      const auto compiled = compile_model(model, is_bits, is_delta, seed, is_input_bits);
      logic::SimulatorOptions so;
      if (is_telegraph) so.half_sources = logic::HalfSourceModel::telegraph;
      const auto window = compiled.window(is_delta, is_samples);
      const auto r = net::stochastic_inference(compiled, data, window, seed, 0, so);
      std::cout << "stochastic accuracy " << fmt(accuracy(r.predictions, data), 4) << " on " << data.size()
                << " images (delta " << is_delta << ", N " << is_samples << ", " << window.total()
                << " cycles)\n";
      if (!is_out.empty()) {
        const std::string canonical = "infer-stochastic|" + is_model + "|" + is_data.canonical() + "|" +
                                      std::to_string(is_delta) + "|" + std::to_string(is_samples) + "|" +
                                      std::to_string(is_bits) + "|" + std::to_string(is_input_bits) + "|" +
                                      (is_telegraph ? "telegraph" : "ideal");
        CsvOut csv(is_out, canonical, seed);
        write_confusion(csv, r.predictions, data);
      }
    } else if (*sweep) {
      const auto model = load_model(sw_model);
      const auto data = sw_data.load();
      std::vector<std::size_t> ns = sw_ns;
      std::sort(ns.begin(), ns.end());
      ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
      if (ns.empty() || ns.front() == 0) throw UsageError("--n-list needs positive counts");
      const double analytic = accuracy(analytic_predictions(model, data), data);
      CsvOut csv(sw_out,
                 "sweep|" + sw_model + "|" + sw_data.canonical() + "|" + join(sw_deltas) + "|" + join(ns) + "|" +
                     std::to_string(sw_repeats),
                 seed);
      csv.out() << "delta,N,repeat,cycles,accuracy,analytic_accuracy\n";
      for (std::size_t di = 0; di < sw_deltas.size(); ++di) {
        const auto delta = sw_deltas[di];
        for (std::size_t rep = 0; rep < sw_repeats; ++rep) {
          const std::uint64_t run_seed = derive_seed(derive_seed(seed, delta), rep);
          const auto compiled = compile_model(model, 4, delta, run_seed, 4);
          const std::size_t warmup = compiled.window(delta, 1).warmup;
          const auto rs = net::stochastic_inference_checkpoints(compiled, data, warmup, ns, run_seed);
          for (std::size_t k = 0; k < ns.size(); ++k) {
            csv.out() << delta << ',' << ns[k] << ',' << rep << ',' << warmup + ns[k] << ','
                      << fmt(accuracy(rs[k].predictions, data), 4) << ',' << fmt(analytic, 4) << '\n';
          }
          csv.out().flush();
          std::cerr << "delta " << delta << " repeat " << rep << " done\n";
        }
      }
    } else if (*cs) {
      smtj::SmtjParams p;
      p.barrier_over_kT_p = p.barrier_over_kT_ap = cs_barrier;
      if (auto w = p.validity_warning()) std::cerr << "warning: " << *w << '\n';
      const auto pts = smtj::autocorrelation_sweep(p, cs_ratios, cs_samples, cs_trials, seed);
      CsvOut csv(cs_out,
                 "char-smtj|" + join(cs_ratios) + "|" + std::to_string(cs_samples) + "|" + std::to_string(cs_trials) +
                     "|" + fmt(cs_barrier, 6),
                 seed);
      csv.out() << "t_clock_over_tau,rho_mean,rho_ci95,rho_analytic\n";
      for (const auto& pt : pts) {
        csv.out() << fmt(pt.t_clock_over_tau, 4) << ',' << fmt(pt.estimate.mean) << ',' << fmt(pt.estimate.ci95)
                  << ',' << fmt(std::exp(-2 * pt.t_clock_over_tau)) << '\n';
      }
    } else if (*cp) {
      CsvOut csv(cp_out,
                 "char-pbs|" + join(cp_sigmas) + "|" + std::to_string(cp_draws) + "|" + std::to_string(cp_bits) +
                     (cp_raw ? "|raw" : ""),
                 seed);
      if (cp_raw) {
        csv.out() << "sigma,code,target,draw,probability\n";
      } else {
        csv.out() << "sigma,code,target,mean,sd,min,q05,median,q95,max\n";
      }
      const std::uint32_t full = 1u << cp_bits;
      for (std::size_t si = 0; si < cp_sigmas.size(); ++si) {
        const double sigma = cp_sigmas[si];
        const smtj::DeviceVariabilityModel dev(0.5, sigma);
        for (std::uint32_t k = 0; k <= full; ++k) {
          const bitgen::GeneratorCode code(cp_bits, k);
          auto v = bitgen::variability_distribution(code, dev, cp_draws, derive_seed(seed, si));
          if (cp_raw) {
            for (std::size_t d = 0; d < v.size(); ++d) {
              csv.out() << fmt(sigma, 4) << ',' << k << ',' << fmt(code.probability(), 6) << ',' << d << ','
                        << fmt(v[d]) << '\n';
            }
            continue;
          }
          double mean = 0, ss = 0;
          for (double x : v) mean += x;
          mean /= static_cast<double>(v.size());
          for (double x : v) ss += (x - mean) * (x - mean);
          std::sort(v.begin(), v.end());
          auto q = [&](double f) { return v[static_cast<std::size_t>(f * static_cast<double>(v.size() - 1))]; };
          csv.out() << fmt(sigma, 4) << ',' << k << ',' << fmt(code.probability()) << ',' << fmt(mean) << ','
                    << fmt(std::sqrt(ss / static_cast<double>(v.size() - 1))) << ',' << fmt(v.front()) << ','
                    << fmt(q(0.05)) << ',' << fmt(q(0.5)) << ',' << fmt(q(0.95)) << ',' << fmt(v.back()) << '\n';
        }
      }
    } else if (*en) {
      const auto constants = energy::EnergyConstants::for_voltage(en_voltage);
      std::size_t layers = net::DualNetwork::lenet5().isolator_layers();
      std::optional<energy::ElementCounts> counts;
      if (!en_model.empty()) {
        const auto compiled = compile_model(load_model(en_model), 4, en_delta, seed, 4);
        layers = compiled.census.isolator_layers;
        counts = energy::ElementCounts::from_census(compiled.census);
      }
      const std::size_t cycles = layers * en_delta + en_samples;
      CsvOut csv(en_out,
                 "energy|" + en_model + "|" + std::to_string(en_delta) + "|" + std::to_string(en_samples) + "|" +
                     fmt(en_voltage, 2),
                 seed);
      auto& os = csv.out();
      os << "# reference per-cycle values (back-derived from 224-cycle totals)\n";
      energy::write_energy_csv(
          os, energy::inference_energy({}, cycles, constants, energy::reference_per_cycle(en_voltage)));
      if (counts) {
        os << "# census estimate: element count x worst-case constant, activity 1\n";
        energy::write_energy_csv(os, energy::inference_energy(*counts, cycles, constants));
      }
      // Per-bit generator comparison.
      const auto lit = energy::pbit_energy(50e3, 100e3, 1.0, 150e-9, energy::PbitMode::literal);
      const auto rep = energy::pbit_energy(50e3, 100e3, 1.0, 150e-9, energy::PbitMode::reported);
      os << "# per bit: sc-pcsa " << fmt(energy::kScPcsaEnergyPerBit_J * 1e15, 1) << " fJ, switched MTJ "
         << fmt(energy::switched_mtj_energy(1000, 0.2175, 8.75e-9) * 1e15, 1) << " fJ, p-bit "
         << fmt(rep.energy_J * 1e15, 1) << " fJ at " << fmt(rep.current_A * 1e6, 2) << " uA (literal divider "
         << fmt(lit.energy_J * 1e15, 1) << " fJ at " << fmt(lit.current_A * 1e6, 2) << " uA)\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
