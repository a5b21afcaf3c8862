#ifndef ZPS_MEASUREMENT_HPP
#define ZPS_MEASUREMENT_HPP

// Raman spectroscopy: coherent pulse at detuning delta_R, binary hyperfine
// readout, repeated shots per detuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "zps/atom.hpp"
#include "zps/dynamics.hpp"

namespace zps {

struct ReadoutModel {
  double accuracy = 0.98;
  double background_p4 = 0.006;

  static ReadoutModel ideal(double background_p4 = 0.006) { return {1.0, background_p4}; }

  void validate() const {
    if (!(accuracy > 0.5 && accuracy <= 1.0)) throw std::invalid_argument("readout: accuracy must be in (0.5, 1]");
    if (!(background_p4 >= 0.0 && background_p4 < 1.0))
      throw std::invalid_argument("readout: background_p4 must be in [0, 1)");
  }
};

/// Probability that the readout reports F=4 after one Raman pulse.
///
/// The pulse transfers |3,m> -> |4,m> with the single-line probability T_m and
/// |4,m> -> |3,m> with the same probability; |4,+-4> have no partner. The
/// background is added before the symmetric misclassification fold.
inline double true_transfer_probability(const PopulationState& state, double delta_R, const AtomParams& params,
                                        const ReadoutModel& readout, bool decohered = true,
                                        double pulse_duration = 25.0e-6) {
  readout.validate();
  double p = readout.background_p4 + state.p4(-4) + state.p4(4);
  for (int m = -3; m <= 3; ++m) {
    const double tm = coherent_transfer_probability(m, delta_R, pulse_duration, params, decohered);
    p += tm * state.p3(m) + (1.0 - tm) * state.p4(m);
  }
  p = std::clamp(p, 0.0, 1.0);
  return readout.accuracy * p + (1.0 - readout.accuracy) * (1.0 - p);
}

struct ScanConfig {
  std::vector<double> detunings_hz;
  double pulse_duration = 25.0e-6;
  /// Shots per detuning; nullopt selects the infinite-statistics (analytic) mode.
  std::optional<int> shots_per_point = 100;
  std::uint64_t rng_seed = 1;
  bool decohered = true;

  /// `points` evenly spaced detunings over [-half_span_hz, half_span_hz].
  static std::vector<double> symmetric_grid(double half_span_hz = 3.3e6, int points = 161) {
    if (points < 2) throw std::invalid_argument("scan grid needs at least two points");
    std::vector<double> d(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i)
      d[static_cast<std::size_t>(i)] = -half_span_hz + 2.0 * half_span_hz * i / (points - 1);
    return d;
  }

  void validate() const {
    if (detunings_hz.empty()) throw std::invalid_argument("scan: detunings must be nonempty");
    for (double d : detunings_hz)
      if (!std::isfinite(d)) throw std::invalid_argument("scan: detunings must be finite");
    if (!(pulse_duration > 0.0)) throw std::invalid_argument("scan: pulse duration must be > 0");
    if (shots_per_point && *shots_per_point < 1) throw std::invalid_argument("scan: shots_per_point must be >= 1");
  }
};

struct ScanPoint {
  double delta_r_hz = 0.0;
  double p4 = 0.0;
  int shots = 0;  // 0 marks an analytic point
  int successes = 0;
};

struct ScanMetadata {
  AtomParams params;
  std::uint64_t seed = 0;
  double pulse_duration = 25.0e-6;
  bool analytic = false;
};

struct RamanScan {
  std::vector<ScanPoint> points;
  ScanMetadata metadata;
};

/// Random stream for one scan point, independent of evaluation order.
inline std::mt19937_64 point_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index & 0xffffffffu), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline RamanScan acquire_scan(const PopulationState& state, const ScanConfig& config, const AtomParams& params,
                              const ReadoutModel& readout) {
  config.validate();
  params.validate();
  readout.validate();
  RamanScan scan;
  scan.metadata = {params, config.rng_seed, config.pulse_duration, !config.shots_per_point.has_value()};
  scan.points.reserve(config.detunings_hz.size());
  for (std::size_t i = 0; i < config.detunings_hz.size(); ++i) {
    const double d_hz = config.detunings_hz[i];
    const double p = true_transfer_probability(state, kTwoPi * d_hz, params, readout, config.decohered,
                                               config.pulse_duration);
    if (!config.shots_per_point) {
      scan.points.push_back({d_hz, p, 0, 0});
      continue;
    }
    const int shots = *config.shots_per_point;
    auto rng = point_rng(config.rng_seed, i);
    std::binomial_distribution<int> draw(shots, p);
    const int k = draw(rng);
    scan.points.push_back({d_hz, static_cast<double>(k) / shots, shots, k});
  }
  return scan;
}

}  // namespace zps

#endif  // ZPS_MEASUREMENT_HPP
