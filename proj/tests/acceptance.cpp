// Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.
//
// Usage: acceptance [--known-fail N]...
// A criterion listed with --known-fail still prints FAIL when it fails, but
// does not change the exit status.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "zps/io.hpp"

namespace fs = std::filesystem;
using namespace zps;

namespace {

const fs::path kConfigs = ZPS_CONFIG_DIR;
fs::path g_work;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ZPS_CLI_PATH) + " " + args + " >/dev/null 2>>" + (g_work / "cli.err").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// 1 -------------------------------------------------------------------------
Outcome gamma_calibration() {
  const auto out = g_work / "c1";
  if (run_cli("rates --config " + (kConfigs / "flat_oracle.json").string() + " --out " + out.string()) != 0)
    return {false, "rates subcommand failed"};
  std::istringstream in(slurp(out / "rates.csv"));
  const auto rows = detail::read_csv(in, {"m", "gamma_per_us"});
  double g0 = 0.0;
  for (const auto& r : rows)
    if (r[0] == "0") g0 = parse_number(r[1]);
  const double rel = std::abs(g0 / 0.084 - 1.0);
  return {rel <= 0.15, fmt("Gamma = %.4f /us", g0) + fmt(" vs 0.084 (rel. diff %.3f, tol 0.15)", rel)};
}

// 2 -------------------------------------------------------------------------
Outcome oracle_equivalence() {
  const auto out = g_work / "c2";
  if (run_cli("oracle --config " + (kConfigs / "flat_oracle.json").string() + " --out " + out.string()) != 0)
    return {false, "oracle subcommand failed"};
  const auto doc = read_json(out / "oracle.json");
  bool ok = doc["seeds"].get<int>() >= 32 && doc["runs"].size() >= 3;
  double tmin = 1e9, tmax = 0.0;
  std::string d = "seeds=" + std::to_string(doc["seeds"].get<int>());
  for (const auto& r : doc["runs"]) {
    const double t = r["duration_s"].get<double>(), ratio = r["ratio"].get<double>();
    tmin = std::min(tmin, t);
    tmax = std::max(tmax, t);
    ok = ok && std::abs(ratio - 1.0) < 0.10 && r["flat_span_hz"].get<double>() * t >= 10.0;
    d += fmt("; t=%.1e s", t) + fmt(" ratio %.3f", ratio);
  }
  ok = ok && tmax / tmin >= 10.0 * (1 - 1e-9);
  return {ok, d + " (tol 0.10)"};
}

// 3 -------------------------------------------------------------------------
Outcome sinc_limit() {
  const double half = 10e6;
  const auto s = PowerSpectrum::flat(-63.0, -half, half, 5e3);
  const RateCalibration cal;
  const AtomParams atom;
  const double closed = incoherent_rate(s, cal, 0, atom);
  bool ok = true;
  std::string d;
  for (double t : {2e-6, 10e-6, 25e-6}) {
    const double width = kTwoPi * 2.0 * half;
    const double rel = std::abs(rate_via_sinc_integral(s, cal, 0, atom, t) / closed - 1.0);
    ok = ok && width * t > 100.0 && rel < 0.01;
    d += fmt("t*width=%.0f", width * t) + fmt(" err %.2e; ", rel);
  }
  const double norm = sinc_kernel_integral(2000.0, 2000000);
  ok = ok && std::abs(norm - 1.0) < 1e-3;
  return {ok, d + fmt("Int D = %.6f", norm)};
}

// 4 -------------------------------------------------------------------------
Outcome protocol_convergence() {
  const auto out = g_work / "c4";
  if (run_cli("pump --config " + (kConfigs / "ideal.json").string() + " --out " + out.string()) != 0)
    return {false, "pump subcommand failed"};
  std::istringstream in(slurp(out / "pump_trace.csv"));
  const auto rows = detail::read_csv(in, {"iteration", "p3_target", "total"});
  bool monotone = true;
  for (std::size_t i = 1; i < rows.size(); ++i)
    monotone = monotone && parse_number(rows[i][1]) >= parse_number(rows[i - 1][1]);
  const double final = parse_number(rows.back()[1]);
  // Uniform repump caps the gain per iteration at (1 - x)/14 whatever the rates.
  const double ceiling = 1.0 - 6.0 / 7.0 * std::pow(13.0 / 14.0, 40);
  const double needed = std::ceil(std::log(0.01 * 7.0 / 6.0) / std::log(13.0 / 14.0));
  return {final >= 0.99 && monotone && rows.size() == 41,
          fmt("p3(0) = %.5f after 40 iterations", final) + (monotone ? ", trace non-decreasing" : ", trace DECREASES") +
              fmt("; saturated-rate ceiling %.4f", ceiling) + fmt(", >= %.0f iterations needed for 0.99 even at saturated rates", needed)};
}

// 5 -------------------------------------------------------------------------
Outcome headline_reproduction() {
  constexpr int kSeeds = 20;
  bool ok = true;
  std::string d;
  for (const char* name : {"paper_m0.json", "paper_m1.json"}) {
    const auto cfg = (kConfigs / name).string();
    const auto out = g_work / (std::string("c5_") + name);
    if (run_cli("pump --config " + cfg + " --out " + out.string()) != 0) return {false, "pump failed for " + std::string(name)};
    const int m = read_json(out / "pump_state.json")["target_m"].get<int>();
    double target = 0.0, sum = 0.0;
    int single = 0;
    for (int k = 1; k <= kSeeds; ++k) {
      const auto seed = std::to_string(k);
      if (run_cli("scan --config " + cfg + " --seed " + seed + " --state " + (out / "pump_state.json").string() +
                  " --out " + out.string()) != 0 ||
          run_cli("fit --config " + cfg + " --scan " + (out / "scan.csv").string() + " --out " + out.string()) != 0)
        return {false, "scan/fit failed for " + std::string(name) + " seed " + seed};
      const auto fit = read_json(out / "fit.json");
      const double t = fit["parameters"]["populations"][std::to_string(m)].get<double>();
      const double s = fit["population_sum"].get<double>();
      target += t / kSeeds;
      sum += s / kSeeds;
      single += std::abs(t - 0.57) <= 0.05 && s >= 0.95 && s <= 1.10;
    }
    ok = ok && std::abs(target - 0.57) <= 0.05 && sum >= 0.95 && sum <= 1.10;
    d += "m=" + std::to_string(m) + fmt(": target %.3f", target) + fmt(" sum %.3f", sum) +
         " (mean of " + std::to_string(kSeeds) + " scans; " + std::to_string(single) + "/" + std::to_string(kSeeds) +
         " single runs in tolerance); ";
  }
  return {ok, d + "tol 0.57+-0.05, sum in [0.95, 1.10]"};
}

// 6 -------------------------------------------------------------------------
Outcome fit_recovery() {
  const AtomParams atom = AtomParams::from_axial_field(1.3);
  const auto truth = PopulationState::uniform_f3();
  constexpr int kRuns = 50;
  int pops_ok = 0, wb_ok = 0, o0_ok = 0;
  std::array<int, 7> per_line{};
  double sum = 0.0;
  for (int k = 0; k < kRuns; ++k) {
    ScanConfig sc;
    sc.detunings_hz = ScanConfig::symmetric_grid(3.3e6, 161);
    sc.shots_per_point = 100;
    sc.rng_seed = 1000 + static_cast<std::uint64_t>(k);
    const auto scan = acquire_scan(truth, sc, atom, ReadoutModel::ideal(0.006));
    FitModel fallback;
    fallback.Omega_0 = atom.Omega_0;
    fallback.omega_B = atom.omega_B;
    const auto r = fit_scan(scan, default_initial_guess(scan, fallback, 0.006).model, 0.006);
    bool all = r.converged && !r.ill_posed;
    for (int m = -3; m <= 3; ++m) {
      const bool in = std::abs(r.parameters.population(m) - 1.0 / 7) <= 0.03;
      per_line[transition_index(m)] += in;
      all = all && in;
    }
    pops_ok += all;
    wb_ok += std::abs(r.parameters.omega_B / atom.omega_B - 1.0) <= 0.05;
    o0_ok += std::abs(r.parameters.Omega_0 / atom.Omega_0 - 1.0) <= 0.14;
    sum += r.population_sum / kRuns;
  }
  const bool ok = pops_ok >= 45 && wb_ok >= 48 && o0_ok >= 48 && std::abs(sum - 1.0) <= 0.05;
  std::string d = "all 7 populations within 0.03: " + std::to_string(pops_ok) + "/50 (need 45); per line:";
  for (int v : per_line) d += " " + std::to_string(v);
  d += "; omega_B within 5%: " + std::to_string(wb_ok) + "/50; Omega_0 within 14%: " + std::to_string(o0_ok) +
       "/50 (need 48)" + fmt("; mean sum %.3f", sum);
  // Information bound for the same design: no unbiased estimator can beat it.
  FitModel m = FitModel::from_state(truth, atom, 0.006);
  Eigen::Matrix<double, 9, 9> F = Eigen::Matrix<double, 9, 9>::Zero();
  for (double dd : ScanConfig::symmetric_grid(3.3e6, 161)) {
    const double p = model_p4(kTwoPi * dd, m);
    const auto g = model_p4_gradient(kTwoPi * dd, m);
    Eigen::Matrix<double, 9, 1> v;
    for (int j = 0; j < 9; ++j) v(j) = g[static_cast<std::size_t>(j)];
    F += 100.0 / (p * (1 - p)) * v * v.transpose();
  }
  const Eigen::Matrix<double, 9, 9> C = F.inverse();
  d += fmt("; Cramer-Rao sd: p(0) %.4f", std::sqrt(C(3, 3))) + fmt(", p(+-3) %.4f", std::sqrt(C(0, 0))) +
       fmt(", Omega_0 %.3f rel", std::sqrt(C(7, 7)) / atom.Omega_0);
  return {ok, d};
}

// 7 -------------------------------------------------------------------------
Outcome invariants() {
  std::string d;
  bool ok = true;

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PopulationState s = PopulationState::uniform_f3();
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    RateTable r{};
    for (auto& v : r) v = 2e5 * u(rng);
    s = incoherent_step(s, r, 20e-6 * u(rng));
    if (i % 3 == 0) s = apply_repump(s, RepumpModel::partial(u(rng), {0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1}));
    if (i % 5 == 0) s = apply_dark_leak(s, static_cast<int>(u(rng) * 7) - 3, 5e3 * u(rng), 1e-5);
    worst = std::max(worst, std::abs(s.total() - 1.0));
  }
  ok = ok && worst <= 1e-9;
  d += fmt("trace drift %.1e", worst);

  double jac = 0.0;
  for (int t = 0; t < 100; ++t) {
    FitModel m;
    for (auto& p : m.populations) p = 0.3 * u(rng);
    m.Omega_0 = kTwoPi * (60e3 + 140e3 * u(rng));
    m.omega_B = kTwoPi * (700e3 + 400e3 * u(rng));
    const double delta = kTwoPi * (-3.5e6 + 7e6 * u(rng));
    const auto g = model_p4_gradient(delta, m);
    const auto x = m.parameters();
    for (std::size_t j = 0; j < kNumFitParams; ++j) {
      const double h = j < kNumTransitions ? 1e-4 : 1e-5 * x[j];
      auto xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      FitModel mp = m, mm = m;
      mp.set_parameters(xp);
      mm.set_parameters(xm);
      const double unit = j < kNumTransitions ? 1.0 : x[j];
      const double fd = (model_p4(delta, mp) - model_p4(delta, mm)) / (2 * h) * unit;
      jac = std::max(jac, std::abs(g[j] * unit - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  ok = ok && jac <= 1e-6;
  d += fmt("; Jacobian vs FD %.1e", jac);

  NoiseChainConfig c;
  c.band_center_hz = 0.0;
  c.notch_center_hz = 2.5e6;
  const auto spec = synthesize_noise_spectrum(c);
  const double hp = power_at(spec, 250e3) - power_at(spec, 600e3);
  const double lp = power_at(spec, 10e6) - power_at(spec, 4e6);
  ok = ok && std::abs(hp + 60.0) < 1e-9 && std::abs(lp + 60.0) < 1e-9;
  d += fmt("; slopes %.2f dB", hp) + fmt(" / %.2f dB per octave", lp);

  bool same = true;
  const auto cfg = (kConfigs / "paper_m1.json").string();
  const auto small_oracle = g_work / "oracle_small.json";
  std::ofstream(small_oracle) << R"({"seed": 5, "oracle": {"flat_level_dbm": -63, "durations_s": [1e-6], "seeds": 8}})";
  for (int rep = 0; rep < 2; ++rep) {
    const auto out = g_work / ("c7_" + std::to_string(rep));
    same = same && run_cli("synth --config " + cfg + " --out " + out.string()) == 0;
    same = same && run_cli("rates --config " + cfg + " --out " + out.string()) == 0;
    same = same && run_cli("pump --config " + cfg + " --out " + out.string()) == 0;
    same = same && run_cli("scan --config " + cfg + " --state " + (out / "pump_state.json").string() + " --out " +
                           out.string()) == 0;
    same = same && run_cli("fit --config " + cfg + " --scan " + (out / "scan.csv").string() + " --out " +
                           out.string()) == 0;
    same = same && run_cli("oracle --config " + small_oracle.string() + " --out " + out.string()) == 0;
  }
  for (const char* f : {"spectrum.csv", "rates.csv", "pump_state.json", "pump_trace.csv", "scan.csv", "scan.json",
                        "fit.json", "fit_model.csv", "oracle.json"})
    same = same && slurp(g_work / "c7_0" / f) == slurp(g_work / "c7_1" / f) && !slurp(g_work / "c7_0" / f).empty();
  ok = ok && same;
  d += same ? "; reruns byte-identical" : "; reruns DIFFER";
  return {ok, d};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> known;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--known-fail" && i + 1 < argc) known.insert(std::atoi(argv[++i]));
  }
  g_work = fs::temp_directory_path() / ("zps_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria{
      {1, "gamma calibration", 1.0, gamma_calibration},
      {2, "oracle equivalence", 30.0, oracle_equivalence},
      {3, "sinc-kernel limit", 5.0, sinc_limit},
      {4, "protocol convergence", 1.0, protocol_convergence},
      {5, "headline reproduction", 120.0, headline_reproduction},
      {6, "fit recovery suite", 120.0, fit_recovery},
      {7, "invariant suite", 60.0, invariants},
  };

  int hard_failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    std::printf("criterion %d %-22s %s  [%.2f s / %.0f s]  %s\n", c.id, c.name, pass ? "PASS" : "FAIL", secs,
                c.limit_s, o.detail.c_str());
    if (!pass && known.count(c.id)) std::printf("  criterion %d: documented known failure\n", c.id);
    if (!pass && !known.count(c.id)) ++hard_failures;
    std::fflush(stdout);
  }
  fs::remove_all(g_work);
  return hard_failures == 0 ? 0 : 1;
}
