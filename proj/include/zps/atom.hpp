#ifndef ZPS_ATOM_HPP
#define ZPS_ATOM_HPP

// Cesium 6S_1/2 ground manifold: Zeeman level bookkeeping and the coupling
// laws for the |3,m> <-> |4,m> Raman transitions.
//
// All frequencies are angular (rad/s) unless a name ends in _hz.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace zps {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Differential Zeeman shift of the |3,m> <-> |4,m> lines per Gauss, (g4 - g3) mu_B / h.
inline constexpr double kZeemanHzPerGauss = 700.0e3;

/// Documentation-only values for the apparatus; no formula here uses them.
namespace apparatus {
inline constexpr double kFortDepthHz = 45.0e6;
inline constexpr double kCavityCouplingHz = 34.0e6;
inline constexpr double kCavityDecayHz = 3.8e6;
inline constexpr double kAtomicDecayHz = 2.6e6;
}  // namespace apparatus

inline constexpr int kMaxTransitionM = 3;
inline constexpr std::size_t kNumTransitions = 7;
inline constexpr std::size_t kNumStates = 16;

struct ZeemanState {
  int F = 3;
  int m = 0;

  friend constexpr bool operator==(const ZeemanState&, const ZeemanState&) = default;
};

constexpr bool is_valid(const ZeemanState& s) {
  return (s.F == 3 || s.F == 4) && s.m >= -s.F && s.m <= s.F;
}

/// Canonical ordering: |3,-3>..|3,3> occupy 0..6, |4,-4>..|4,4> occupy 7..15.
constexpr std::size_t state_index(const ZeemanState& s) {
  if (!is_valid(s)) throw std::domain_error("invalid Zeeman state");
  return s.F == 3 ? static_cast<std::size_t>(s.m + 3) : static_cast<std::size_t>(7 + s.m + 4);
}

constexpr ZeemanState state_at(std::size_t index) {
  if (index >= kNumStates) throw std::out_of_range("Zeeman state index out of range");
  if (index < 7) return {3, static_cast<int>(index) - 3};
  return {4, static_cast<int>(index) - 11};
}

constexpr std::array<ZeemanState, kNumStates> all_states() {
  std::array<ZeemanState, kNumStates> out{};
  for (std::size_t i = 0; i < kNumStates; ++i) out[i] = state_at(i);
  return out;
}

/// Index 0..6 of transition m in per-transition tables.
constexpr std::size_t transition_index(int m) { return static_cast<std::size_t>(m + kMaxTransitionM); }
constexpr int transition_m(std::size_t index) { return static_cast<int>(index) - kMaxTransitionM; }

inline void check_transition_m(int m) {
  if (m < -kMaxTransitionM || m > kMaxTransitionM)
    throw std::domain_error("transition index m=" + std::to_string(m) + " outside [-3, 3]");
}

struct AtomParams {
  double hyperfine_splitting = kTwoPi * 9.2e9;
  double omega_B = kTwoPi * 910.0e3;
  double Omega_0 = kTwoPi * 120.0e3;
  std::optional<double> axial_field_gauss;

  /// omega_B derived from the axial bias field.
  static AtomParams from_axial_field(double gauss, double Omega_0 = kTwoPi * 120.0e3) {
    AtomParams p;
    p.axial_field_gauss = gauss;
    p.omega_B = kTwoPi * (kZeemanHzPerGauss * gauss);
    p.Omega_0 = Omega_0;
    p.validate();
    return p;
  }

  void validate() const {
    if (!(hyperfine_splitting >= 0.0) || !(omega_B >= 0.0) || !(Omega_0 >= 0.0))
      throw std::invalid_argument("AtomParams: frequencies must be finite and non-negative");
    if (!std::isfinite(hyperfine_splitting) || !std::isfinite(omega_B) || !std::isfinite(Omega_0))
      throw std::invalid_argument("AtomParams: frequencies must be finite");
    if (axial_field_gauss) {
      if (!(*axial_field_gauss >= 0.0)) throw std::invalid_argument("AtomParams: axial field must be >= 0");
      if (omega_B != kTwoPi * (kZeemanHzPerGauss * *axial_field_gauss))
        throw std::invalid_argument("AtomParams: omega_B inconsistent with axial field");
    }
  }
};

/// Line shift of |3,m> <-> |4,m> relative to the hyperfine splitting.
inline double zeeman_shift(int m, const AtomParams& params) {
  check_transition_m(m);
  return params.omega_B * m;
}

/// Relative coupling strength (1 - m^2/16) of transition m; squares of Rabi frequencies scale with it.
inline double coupling_factor(int m) {
  check_transition_m(m);
  return 1.0 - static_cast<double>(m * m) / 16.0;
}

inline double effective_rabi(int m, const AtomParams& params) {
  return params.Omega_0 * std::sqrt(coupling_factor(m));
}

/// delta_R is the two-photon detuning from the hyperfine splitting.
inline double effective_detuning(double delta_R, int m, const AtomParams& params) {
  return delta_R - zeeman_shift(m, params);
}

}  // namespace zps

#endif  // ZPS_ATOM_HPP
