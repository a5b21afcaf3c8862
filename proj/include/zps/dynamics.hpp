#ifndef ZPS_DYNAMICS_HPP
#define ZPS_DYNAMICS_HPP

// Population dynamics over the 16 ground Zeeman states: incoherent pair
// relaxation, the repump map, the iterated pump/repump protocol, coherent
// transfer probabilities, and a time-domain comb oracle for the rate.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "zps/atom.hpp"
#include "zps/spectrum.hpp"

namespace zps {

class PopulationState {
 public:
  PopulationState() = default;
  explicit PopulationState(const std::array<double, kNumStates>& p) : p_(p) {}

  static PopulationState uniform_f3() {
    PopulationState s;
    for (int m = -3; m <= 3; ++m) s[{3, m}] = 1.0 / 7.0;
    return s;
  }

  static PopulationState pure(ZeemanState z) {
    PopulationState s;
    s[z] = 1.0;
    return s;
  }

  double& operator[](ZeemanState z) { return p_[state_index(z)]; }
  double operator[](ZeemanState z) const { return p_[state_index(z)]; }
  double p3(int m) const { return (*this)[{3, m}]; }
  double p4(int m) const { return (*this)[{4, m}]; }

  const std::array<double, kNumStates>& values() const { return p_; }

  double total() const { return std::accumulate(p_.begin(), p_.end(), 0.0); }
  double total_f3() const { return std::accumulate(p_.begin(), p_.begin() + 7, 0.0); }

  void validate(double tol = 1e-9) const {
    for (double v : p_)
      if (!(v >= -tol && v <= 1.0 + tol)) throw std::invalid_argument("PopulationState: population outside [0, 1]");
    if (std::abs(total() - 1.0) > tol) throw std::invalid_argument("PopulationState: populations do not sum to 1");
  }

  friend bool operator==(const PopulationState&, const PopulationState&) = default;

 private:
  std::array<double, kNumStates> p_{};
};

// ---------------------------------------------------------------------------
// Coherent drive

/// Probability of |3,m> -> |4,m> after a Raman pulse. The decohered form is
/// the Lorentzian envelope of the Rabi oscillation, peaking at 1/2.
inline double coherent_transfer_probability(int m, double delta_R, double duration, const AtomParams& params,
                                            bool decohered) {
  if (!(duration > 0.0)) throw std::invalid_argument("coherent_transfer_probability: duration must be > 0");
  const double rabi = effective_rabi(m, params);
  const double det = effective_detuning(delta_R, m, params);
  const double r2 = rabi * rabi;
  const double g2 = r2 + det * det;
  if (g2 == 0.0) return 0.0;
  if (decohered) return 0.5 * r2 / g2;
  const double s = std::sin(std::sqrt(g2) * duration / 2.0);
  return r2 / g2 * s * s;
}

// ---------------------------------------------------------------------------
// Incoherent drive

struct PairPopulations {
  double ground = 0.0;
  double excited = 0.0;
};

/// Exact solution of dp_g/dt = -gamma (p_g - p_e) with equal rates both ways.
inline PairPopulations incoherent_pair_evolve(double p_g, double p_e, double gamma, double t) {
  if (!(gamma >= 0.0) || !(t >= 0.0)) throw std::invalid_argument("incoherent_pair_evolve: gamma, t must be >= 0");
  if (gamma * t == 0.0) return {p_g, p_e};
  const double mean = 0.5 * (p_g + p_e);
  const double half_diff = 0.5 * (p_g - p_e) * std::exp(-2.0 * gamma * t);
  return {mean + half_diff, mean - half_diff};
}

using RateTable = std::array<double, kNumTransitions>;

inline PopulationState incoherent_step(const PopulationState& state, const RateTable& rates, double t) {
  PopulationState out = state;
  for (int m = -3; m <= 3; ++m) {
    const auto pair = incoherent_pair_evolve(state.p3(m), state.p4(m), rates[transition_index(m)], t);
    out[{3, m}] = pair.ground;
    out[{4, m}] = pair.excited;
  }
  return out;
}

inline PopulationState incoherent_step(const PopulationState& state, const PowerSpectrum& spectrum,
                                       const RateCalibration& cal, const AtomParams& params, double t) {
  return incoherent_step(state, rate_table(spectrum, cal, params), t);
}

// ---------------------------------------------------------------------------
// Repump

struct RepumpModel {
  enum class Mode { ideal_uniform, partial };

  Mode mode = Mode::ideal_uniform;
  double completeness = 1.0;
  std::array<double, 7> distribution{1.0 / 7, 1.0 / 7, 1.0 / 7, 1.0 / 7, 1.0 / 7, 1.0 / 7, 1.0 / 7};

  static RepumpModel ideal_uniform() { return {}; }

  static RepumpModel partial(double completeness, std::array<double, 7> distribution) {
    RepumpModel r{Mode::partial, completeness, distribution};
    r.validate();
    return r;
  }

  void validate() const {
    if (!(completeness >= 0.0 && completeness <= 1.0))
      throw std::invalid_argument("repump: completeness must be in [0, 1]");
    double sum = 0.0;
    for (double d : distribution) {
      if (!(d >= 0.0)) throw std::invalid_argument("repump: distribution entries must be >= 0");
      sum += d;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("repump: distribution must sum to 1");
    if (mode == Mode::ideal_uniform && completeness != 1.0)
      throw std::invalid_argument("repump: ideal_uniform requires completeness 1");
  }
};

/// Moves `completeness` of all F=4 population into F=3 according to the distribution.
inline PopulationState apply_repump(const PopulationState& state, const RepumpModel& model) {
  model.validate();
  PopulationState out = state;
  double moved = 0.0;
  for (int m = -4; m <= 4; ++m) {
    const double take = model.completeness * state.p4(m);
    out[{4, m}] -= take;
    moved += take;
  }
  for (int m = -3; m <= 3; ++m) out[{3, m}] += moved * model.distribution[transition_index(m)];
  return out;
}

// ---------------------------------------------------------------------------
// Pump protocol

struct PumpProtocol {
  int target_m = 0;
  double raman_duration = 10.0e-6;
  int iterations = 40;
  RepumpModel repump{};
  /// Dark-state depolarization rate (1/s) toward uniform F=3.
  double leak_rate = 0.0;
  /// Seven lattice and seven side pulses of 300 ns.
  double repump_duration = 14 * 300.0e-9;

  double iteration_wall_time() const { return raman_duration + repump_duration; }

  void validate() const {
    check_transition_m(target_m);
    if (!(raman_duration > 0.0)) throw std::invalid_argument("protocol: raman_duration must be > 0");
    if (iterations < 0) throw std::invalid_argument("protocol: iterations must be >= 0");
    if (!(leak_rate >= 0.0)) throw std::invalid_argument("protocol: leak_rate must be >= 0");
    if (!(repump_duration >= 0.0)) throw std::invalid_argument("protocol: repump_duration must be >= 0");
    repump.validate();
  }
};

struct TraceRow {
  int iteration = 0;
  double p3_target = 0.0;
  double total = 0.0;
};

struct PumpResult {
  PopulationState final_state;
  /// Row 0 is the initial state, row k the state after iteration k.
  std::vector<TraceRow> trace;
};

/// Leak of the target population toward uniform F=3 over `duration`.
inline PopulationState apply_dark_leak(const PopulationState& state, int target_m, double leak_rate,
                                       double duration) {
  if (leak_rate == 0.0) return state;
  PopulationState out = state;
  const double moved = state.p3(target_m) * -std::expm1(-leak_rate * duration);
  out[{3, target_m}] -= moved;
  for (int m = -3; m <= 3; ++m) out[{3, m}] += moved / 7.0;
  return out;
}

inline PumpResult run_pump_protocol(const PopulationState& initial, const PumpProtocol& protocol,
                                    const RateTable& rates) {
  protocol.validate();
  initial.validate();
  PumpResult result{initial, {}};
  result.trace.reserve(static_cast<std::size_t>(protocol.iterations) + 1);
  result.trace.push_back({0, initial.p3(protocol.target_m), initial.total()});
  PopulationState s = initial;
  for (int k = 1; k <= protocol.iterations; ++k) {
    s = incoherent_step(s, rates, protocol.raman_duration);
    s = apply_repump(s, protocol.repump);
    s = apply_dark_leak(s, protocol.target_m, protocol.leak_rate, protocol.iteration_wall_time());
    result.trace.push_back({k, s.p3(protocol.target_m), s.total()});
  }
  result.final_state = s;
  return result;
}

inline PumpResult run_pump_protocol(const PopulationState& initial, const PumpProtocol& protocol,
                                    const PowerSpectrum& spectrum, const RateCalibration& cal,
                                    const AtomParams& params) {
  return run_pump_protocol(initial, protocol, rate_table(spectrum, cal, params));
}

// ---------------------------------------------------------------------------
// Comb oracle

/// One monochromatic component of the noise comb, seen from the two-level atom.
struct CombLine {
  double detuning = 0.0;  // delta_k = omega_k - omega_A, rad/s
  double rabi = 0.0;      // Omega_k, rad/s
  double phase = 0.0;
};

/// Excited amplitude after time t starting from the ground state, integrating
///   i dc_e/dt = f(t) c_g,  i dc_g/dt = f*(t) c_e,  f(t) = sum_k (Omega_k/2) e^{-i(delta_k t - phi_k)}
/// with classical RK4. With hold_ground the ground amplitude is pinned to 1
/// (first-order perturbation theory).
inline std::complex<double> comb_excited_amplitude(const std::vector<CombLine>& lines, double t, bool hold_ground,
                                                   std::size_t min_steps = 64) {
  using cd = std::complex<double>;
  if (!(t > 0.0)) throw std::invalid_argument("comb_excited_amplitude: t must be > 0");
  if (lines.empty()) return {0.0, 0.0};
  double max_det = 0.0;
  for (const auto& l : lines) max_det = std::max(max_det, std::abs(l.detuning));
  const auto steps = std::max(min_steps, static_cast<std::size_t>(std::ceil(max_det * t / 0.2)));
  const double dt = t / static_cast<double>(steps);

  // Phasors advanced by half steps: e^{-i(delta_k tau - phi_k)}.
  std::vector<cd> phasor(lines.size()), half_step(lines.size());
  for (std::size_t k = 0; k < lines.size(); ++k) {
    phasor[k] = std::polar(0.5 * lines[k].rabi, lines[k].phase);
    half_step[k] = std::polar(1.0, -lines[k].detuning * dt / 2.0);
  }
  auto drive_and_advance = [&] {
    cd sum{0.0, 0.0};
    for (std::size_t k = 0; k < phasor.size(); ++k) {
      sum += phasor[k];
      phasor[k] *= half_step[k];
    }
    return sum;
  };

  const cd minus_i{0.0, -1.0};
  cd cg{1.0, 0.0}, ce{0.0, 0.0};
  cd f0 = drive_and_advance();
  for (std::size_t n = 0; n < steps; ++n) {
    const cd fh = drive_and_advance();
    const cd f1 = drive_and_advance();
    // Phasors now sit at t_{n+1} + dt/2; rebase them periodically so that
    // rounding from repeated multiplication does not accumulate.
    if ((n + 1) % 256 == 0) {
      const double tau = dt * static_cast<double>(n + 1) + dt / 2.0;
      for (std::size_t k = 0; k < lines.size(); ++k)
        phasor[k] = std::polar(0.5 * lines[k].rabi, lines[k].phase - lines[k].detuning * tau);
    }
    auto deriv = [&](const cd& f, const cd& g, const cd& e, cd& dg, cd& de) {
      de = minus_i * f * g;
      dg = hold_ground ? cd{0.0, 0.0} : minus_i * std::conj(f) * e;
    };
    cd k1g, k1e, k2g, k2e, k3g, k3e, k4g, k4e;
    deriv(f0, cg, ce, k1g, k1e);
    deriv(fh, cg + 0.5 * dt * k1g, ce + 0.5 * dt * k1e, k2g, k2e);
    deriv(fh, cg + 0.5 * dt * k2g, ce + 0.5 * dt * k2e, k3g, k3e);
    deriv(f1, cg + dt * k3g, ce + dt * k3e, k4g, k4e);
    cg += dt / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g);
    ce += dt / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
    f0 = f1;
  }
  return ce;
}

/// Comb lines for transition m: one per finite grid point, Omega_k^2 = alpha S_i(omega_k) delta_omega,
/// with delta_omega from the trapezoid cell around each point. Phases are left at zero.
inline std::vector<CombLine> comb_lines(const PowerSpectrum& s, const RateCalibration& cal, int m,
                                        const AtomParams& params) {
  const double nu_a = transition_offset_hz(m, params);
  // Omega_k^2 = 4 * prefactor * P_k * dnu_k, prefactor = (1/4)(1-m^2/16)Omega_0^2/(B P_c).
  const double scale = 4.0 * rate_prefactor(s, cal, m);
  const auto& f = s.offsets_hz();
  const auto& p = s.power_dbm();
  std::vector<CombLine> lines;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (p[i] == kNegInf) continue;
    const double left = i > 0 ? f[i] - f[i - 1] : 0.0;
    const double right = i + 1 < f.size() ? f[i + 1] - f[i] : 0.0;
    const double cell = 0.5 * (left + right);
    const double rabi2 = scale * dbm_to_mw(p[i]) * cell;
    if (rabi2 <= 0.0) continue;
    lines.push_back({kTwoPi * (f[i] - nu_a), std::sqrt(rabi2), 0.0});
  }
  return lines;
}

struct OracleResult {
  double rate = 0.0;                   // seed-averaged |c_e(t)|^2 / t, 1/s
  double mean_excited_population = 0.0;
  double standard_error = 0.0;         // of the rate, across seeds
  bool non_perturbative = false;       // mean |c_e|^2 > 0.1
  std::size_t lines = 0;
};

inline constexpr double kPerturbativeLimit = 0.1;

/// Brute-force rate: random-phase comb, time-domain integration, seed average.
inline OracleResult comb_oracle_rate(const PowerSpectrum& s, const RateCalibration& cal, int m,
                                     const AtomParams& params, double t, const std::vector<std::uint64_t>& seeds,
                                     bool hold_ground = true) {
  check_transition_m(m);
  if (!(t > 0.0)) throw std::invalid_argument("comb_oracle_rate: t must be > 0");
  if (seeds.empty()) throw std::invalid_argument("comb_oracle_rate: need at least one seed");
  if (s.size() > 1 && s.max_step_hz() * t > 0.5)
    throw std::invalid_argument("comb_oracle_rate: comb spacing does not resolve 1/t");

  auto lines = comb_lines(s, cal, m, params);
  OracleResult out;
  out.lines = lines.size();
  if (lines.empty()) return out;

  double sum = 0.0, sum_sq = 0.0;
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  for (auto seed : seeds) {
    std::mt19937_64 rng(seed);
    for (auto& l : lines) l.phase = phase(rng);
    const double pe = std::norm(comb_excited_amplitude(lines, t, hold_ground));
    sum += pe;
    sum_sq += pe * pe;
  }
  const double n = static_cast<double>(seeds.size());
  const double mean = sum / n;
  const double var = n > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1)) : 0.0;
  out.mean_excited_population = mean;
  out.rate = mean / t;
  out.standard_error = std::sqrt(var / n) / t;
  out.non_perturbative = mean > kPerturbativeLimit;
  return out;
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t first, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  std::iota(s.begin(), s.end(), first);
  return s;
}

}  // namespace zps

#endif  // ZPS_DYNAMICS_HPP
