// zps: command-line driver for noise synthesis, incoherent rates, pump
// protocol simulation, Raman scans, population fits and the comb oracle.
//
// Exit codes: 0 success, 1 numerical failure, 2 configuration or I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "zps/io.hpp"

namespace fs = std::filesystem;
using namespace zps;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumerical = 1;
constexpr int kExitConfig = 2;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> target_m;
  std::string out_dir;
  std::string spectrum_path;
};

struct Context {
  RunConfig config;
  json raw;
  fs::path out;
};

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("ZPS_SEED");
  if (!v || !*v) return std::nullopt;
  std::size_t used = 0;
  unsigned long long s = 0;
  try {
    s = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("ZPS_SEED is not a non-negative integer");
  }
  if (used != std::string(v).size()) throw ConfigError("ZPS_SEED is not a non-negative integer");
  return s;
}

Context load(const CommonOptions& opt) {
  Context ctx;
  ctx.raw = read_json_file(opt.config_path);
  ctx.config = run_config_from_json(ctx.raw);
  auto& c = ctx.config;
  if (opt.seed) c.seed = opt.seed;
  if (!c.seed) c.seed = env_seed();
  if (opt.target_m) {
    try {
      check_transition_m(*opt.target_m);
    } catch (const std::domain_error& e) {
      throw ConfigError(std::string("--target-m: ") + e.what());
    }
    c.protocol.protocol.target_m = *opt.target_m;
    c.noise_chain.notch_center_hz = transition_offset_hz(*opt.target_m, c.atom);
    try {
      c.noise_chain.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  ctx.out = opt.out_dir.empty() ? fs::path(c.output_dir) : fs::path(opt.out_dir);
  return ctx;
}

std::uint64_t require_seed(const RunConfig& c) {
  if (!c.seed) throw ConfigError("a seed is required (config 'seed', --seed, or ZPS_SEED)");
  return *c.seed;
}

/// Spectrum driving the incoherent transitions: --spectrum file, config
/// "spectrum" section (file or flat level), or the synthesized noise chain.
PowerSpectrum resolve_spectrum(const Context& ctx, const std::string& override_path) {
  const double bw = ctx.config.calibration.ref_bandwidth_hz;
  auto from_file = [&](const std::string& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open spectrum file " + p);
    return read_spectrum_csv(in, bw);
  };
  if (!override_path.empty()) return from_file(override_path);
  if (ctx.raw.contains("spectrum")) {
    const auto& s = ctx.raw.at("spectrum");
    if (!s.is_object()) throw ConfigError("spectrum must be a JSON object");
    if (s.contains("file")) return from_file(s.at("file").get<std::string>());
    if (s.contains("flat_level_dbm")) {
      const double level = detail::get_extended(s, "flat_level_dbm", 0.0);
      const double half = detail::get_or(s, "half_span_hz", 10.0e6);
      const double step = detail::get_or(s, "step_hz", 5.0e3);
      if (!(half > 0.0 && step > 0.0)) throw ConfigError("spectrum: half_span_hz and step_hz must be > 0");
      return PowerSpectrum::flat(level, -half, half, step, bw);
    }
    throw ConfigError("spectrum section needs 'file' or 'flat_level_dbm'");
  }
  return synthesize_noise_spectrum(ctx.config.noise_chain, bw);
}

PopulationState resolve_state(const std::string& spec) {
  if (spec.empty() || spec == "uniform_f3") return PopulationState::uniform_f3();
  const auto j = read_json_file(spec);
  return state_from_json(j.contains("state") ? j.at("state") : j);
}

template <typename F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_synth(const CommonOptions& opt) {
  const auto ctx = load(opt);
  const auto spectrum = resolve_spectrum(ctx, opt.spectrum_path);
  write_file_atomic(ctx.out / "spectrum.csv", render([&](std::ostream& os) { write_spectrum_csv(os, spectrum); }));
  std::cout << "wrote " << (ctx.out / "spectrum.csv").string() << " (" << spectrum.size() << " points)\n";
  return kExitOk;
}

int cmd_rates(const CommonOptions& opt) {
  const auto ctx = load(opt);
  const auto spectrum = resolve_spectrum(ctx, opt.spectrum_path);
  const auto& c = ctx.config;
  std::ostringstream os;
  os << "m,gamma_per_us\n";
  bool gap = false;
  for (int m = -3; m <= 3; ++m) {
    os << m << ',';
    try {
      os << csv_number(incoherent_rate(spectrum, c.calibration, m, c.atom) * 1e-6);
    } catch (const std::out_of_range& e) {
      os << "nan";
      std::cerr << "warning: " << e.what() << '\n';
      gap = true;
    }
    os << '\n';
  }
  write_file_atomic(ctx.out / "rates.csv", os.str());
  std::cout << os.str();
  return gap ? kExitNumerical : kExitOk;
}

int cmd_pump(const CommonOptions& opt) {
  const auto ctx = load(opt);
  const auto& c = ctx.config;
  const auto spectrum = resolve_spectrum(ctx, opt.spectrum_path);
  const auto initial = resolve_state(c.protocol.initial_state);
  const auto result = run_pump_protocol(initial, c.protocol.protocol, spectrum, c.calibration, c.atom);
  json doc{{"state", state_to_json(result.final_state)},
           {"target_m", c.protocol.protocol.target_m},
           {"iterations", c.protocol.protocol.iterations},
           {"p3_target", result.final_state.p3(c.protocol.protocol.target_m)}};
  const auto trace = render([&](std::ostream& os) { write_trace_csv(os, result.trace); });
  write_file_atomic(ctx.out / "pump_state.json", dump_json(doc));
  write_file_atomic(ctx.out / "pump_trace.csv", trace);
  std::cout << "p3(" << c.protocol.protocol.target_m << ") = " << format_number(doc["p3_target"].get<double>(), 6)
            << " after " << c.protocol.protocol.iterations << " iterations\n";
  return kExitOk;
}

int cmd_scan(const CommonOptions& opt, const std::string& state_path) {
  auto ctx = load(opt);
  auto& c = ctx.config;
  if (c.scan.shots_per_point) c.scan.rng_seed = require_seed(c);
  const auto state = resolve_state(state_path);
  const auto scan = acquire_scan(state, c.scan, c.atom, c.readout);
  auto md = scan_metadata_to_json(scan.metadata, c.readout);
  md["shots_per_point"] = c.scan.shots_per_point ? json(*c.scan.shots_per_point) : json("analytic");
  md["decohered"] = c.scan.decohered;
  md["state"] = state_to_json(state);
  const auto csv = render([&](std::ostream& os) { write_scan_csv(os, scan); });
  write_file_atomic(ctx.out / "scan.csv", csv);
  write_file_atomic(ctx.out / "scan.json", dump_json(md));
  std::cout << "wrote " << scan.points.size() << " scan points to " << (ctx.out / "scan.csv").string() << '\n';
  return kExitOk;
}

int cmd_fit(const CommonOptions& opt, const std::string& scan_path) {
  const auto ctx = load(opt);
  const auto& c = ctx.config;
  std::ifstream in(scan_path);
  if (!in) throw ConfigError("cannot open scan file " + scan_path);
  const auto scan = read_scan_csv(in);
  if (scan.points.size() < 10) throw ConfigError("scan needs at least 10 points to fit");

  FitModel fallback;
  fallback.Omega_0 = c.atom.Omega_0;
  fallback.omega_B = c.atom.omega_B;
  const double p_b = c.readout.background_p4;
  const auto guess = default_initial_guess(scan, fallback, p_b);
  if (!guess.warning.empty()) std::cerr << "warning: " << guess.warning << '\n';
  const auto result = fit_scan(scan, guess.model, p_b);

  std::vector<double> grid;
  const double lo = scan.points.front().delta_r_hz, hi = scan.points.back().delta_r_hz;
  constexpr int kCurvePoints = 1001;
  for (int i = 0; i < kCurvePoints; ++i) grid.push_back(lo + (hi - lo) * i / (kCurvePoints - 1));

  auto doc = fit_result_to_json(result);
  doc["initial_guess_warning"] = guess.warning;
  write_file_atomic(ctx.out / "fit.json", dump_json(doc));
  write_file_atomic(ctx.out / "fit_model.csv",
                    render([&](std::ostream& os) { write_model_csv(os, result.parameters, grid); }));
  std::cout << dump_json(doc);
  if (!result.converged || result.ill_posed) {
    std::cerr << "fit failed: " << result.message << '\n';
    return kExitNumerical;
  }
  return kExitOk;
}

PowerSpectrum flat_oracle_spectrum(const OracleConfig& o, const RunConfig& c, double t) {
  const double center = transition_offset_hz(o.m, c.atom);
  const double step = o.flat_step_hz;
  double half = o.flat_half_span_hz;
  if (t > 0.0) half = std::max(half, 5.0 / t);
  half = std::ceil(half / step) * step;
  const double lo = std::round(center / step) * step - half;
  return PowerSpectrum::flat(*o.flat_level_dbm, lo, lo + 2.0 * half, step, c.calibration.ref_bandwidth_hz);
}

int cmd_oracle(const CommonOptions& opt) {
  const auto ctx = load(opt);
  const auto& c = ctx.config;
  const auto& o = c.oracle;
  const auto seed = require_seed(c);
  const auto base = o.flat_level_dbm ? flat_oracle_spectrum(o, c, 0.0) : resolve_spectrum(ctx, opt.spectrum_path);
  const double closed = incoherent_rate(base, c.calibration, o.m, c.atom);
  json runs = json::array();
  bool warn = false;
  for (double t : o.durations_s) {
    // A flat band must cover several kernel widths 1/t around the line.
    const auto spectrum = o.flat_level_dbm ? flat_oracle_spectrum(o, c, t) : base;
    const auto res = comb_oracle_rate(spectrum, c.calibration, o.m, c.atom, t, seed_range(seed, o.seeds), o.hold_ground);
    json run{{"duration_s", t},
             {"oracle_rate_per_s", res.rate},
             {"oracle_standard_error_per_s", res.standard_error},
             {"mean_excited_population", res.mean_excited_population},
             {"comb_lines", res.lines},
             {"flat_span_hz", spectrum.offsets_hz().back() - spectrum.offsets_hz().front()},
             {"non_perturbative", res.non_perturbative}};
    try {
      run["sinc_integral_rate_per_s"] = rate_via_sinc_integral(spectrum, c.calibration, o.m, c.atom, t);
    } catch (const std::invalid_argument& e) {
      run["sinc_integral_rate_per_s"] = nullptr;
      run["sinc_integral_error"] = e.what();
    }
    run["ratio"] = closed > 0.0 ? json(res.rate / closed) : json(nullptr);
    warn = warn || res.non_perturbative;
    runs.push_back(run);
  }
  json doc{{"m", o.m},
           {"seeds", o.seeds},
           {"first_seed", seed},
           {"closed_form_rate_per_s", closed},
           {"hold_ground", o.hold_ground},
           {"warning", warn ? json("non-perturbative regime: mean |c_e|^2 > 0.1") : json(nullptr)},
           {"runs", runs}};
  write_file_atomic(ctx.out / "oracle.json", dump_json(doc));
  std::cout << dump_json(doc);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zeeman-state optical pumping via incoherent Raman transitions"};
  app.require_subcommand(1);
  CommonOptions opt;
  std::string state_path, scan_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", opt.seed, "random seed (falls back to config, then ZPS_SEED)");
    sub->add_option("--target-m", opt.target_m, "dark transition m; moves the notch to it");
    sub->add_option("--out", opt.out_dir, "output directory (overrides config output_dir)");
  };
  auto add_spectrum = [&](CLI::App* sub) {
    sub->add_option("--spectrum", opt.spectrum_path, "spectrum CSV (offset_hz,power_dbm) instead of synthesis");
  };

  auto* synth = app.add_subcommand("synth", "synthesize the filtered noise spectrum");
  add_common(synth);
  auto* rates = app.add_subcommand("rates", "incoherent transition rates for m = -3..3");
  add_common(rates);
  add_spectrum(rates);
  auto* pump = app.add_subcommand("pump", "run the pump/repump protocol");
  add_common(pump);
  add_spectrum(pump);
  auto* scan = app.add_subcommand("scan", "simulate a Raman spectroscopy scan");
  add_common(scan);
  scan->add_option("--state", state_path, "population state JSON (default: uniform over F=3)");
  auto* fit = app.add_subcommand("fit", "fit populations to a scan");
  add_common(fit);
  fit->add_option("--scan", scan_path, "scan CSV (delta_r_hz,p4,shots,successes)")->required();
  auto* oracle = app.add_subcommand("oracle", "compare the comb oracle with the closed-form rate");
  add_common(oracle);
  add_spectrum(oracle);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(opt);
    if (*rates) return cmd_rates(opt);
    if (*pump) return cmd_pump(opt);
    if (*scan) return cmd_scan(opt, state_path);
    if (*fit) return cmd_fit(opt, scan_path);
    if (*oracle) return cmd_oracle(opt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitConfig;
}
