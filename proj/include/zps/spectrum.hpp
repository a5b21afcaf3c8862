#ifndef ZPS_SPECTRUM_HPP
#define ZPS_SPECTRUM_HPP

// Beat-note power spectra between the two Raman legs and their conversion
// into incoherent |3,m> <-> |4,m> transfer rates.
//
// Spectra live in the offset-from-hyperfine-splitting coordinate, in Hz, with
// power quoted in dBm per reference bandwidth (spectrum-analyzer style).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "zps/atom.hpp"

namespace zps {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double dbm_to_mw(double dbm) { return dbm == kNegInf ? 0.0 : std::pow(10.0, dbm / 10.0); }
inline double mw_to_dbm(double mw) { return mw <= 0.0 ? kNegInf : 10.0 * std::log10(mw); }

class PowerSpectrum {
 public:
  PowerSpectrum(std::vector<double> offsets_hz, std::vector<double> power_dbm, double ref_bandwidth_hz = 3000.0)
      : offsets_(std::move(offsets_hz)), power_(std::move(power_dbm)), bandwidth_(ref_bandwidth_hz) {
    if (offsets_.empty()) throw std::invalid_argument("PowerSpectrum: empty grid");
    if (offsets_.size() != power_.size())
      throw std::invalid_argument("PowerSpectrum: offsets and powers differ in length");
    if (!(bandwidth_ > 0.0) || !std::isfinite(bandwidth_))
      throw std::invalid_argument("PowerSpectrum: reference bandwidth must be > 0");
    for (std::size_t i = 0; i < offsets_.size(); ++i) {
      if (!std::isfinite(offsets_[i])) throw std::invalid_argument("PowerSpectrum: non-finite offset");
      if (i > 0 && !(offsets_[i] > offsets_[i - 1]))
        throw std::invalid_argument("PowerSpectrum: offsets must be strictly increasing");
      if (std::isnan(power_[i]) || power_[i] == std::numeric_limits<double>::infinity())
        throw std::invalid_argument("PowerSpectrum: power must be finite or -inf");
    }
  }

  /// Flat spectrum over [lo, hi] sampled every step_hz.
  static PowerSpectrum flat(double level_dbm, double lo_hz, double hi_hz, double step_hz,
                            double ref_bandwidth_hz = 3000.0) {
    if (!(step_hz > 0.0) || !(hi_hz > lo_hz)) throw std::invalid_argument("flat spectrum: bad grid");
    const auto n = static_cast<std::size_t>(std::llround((hi_hz - lo_hz) / step_hz)) + 1;
    std::vector<double> f(n), p(n, level_dbm);
    for (std::size_t i = 0; i < n; ++i) f[i] = lo_hz + step_hz * static_cast<double>(i);
    return {std::move(f), std::move(p), ref_bandwidth_hz};
  }

  const std::vector<double>& offsets_hz() const { return offsets_; }
  const std::vector<double>& power_dbm() const { return power_; }
  double ref_bandwidth_hz() const { return bandwidth_; }
  std::size_t size() const { return offsets_.size(); }
  double min_offset_hz() const { return offsets_.front(); }
  double max_offset_hz() const { return offsets_.back(); }

  double max_step_hz() const {
    double s = 0.0;
    for (std::size_t i = 1; i < offsets_.size(); ++i) s = std::max(s, offsets_[i] - offsets_[i - 1]);
    return s;
  }

  /// Same spectrum with every bin shifted by delta_db.
  PowerSpectrum scaled(double delta_db) const {
    auto p = power_;
    for (auto& v : p) v += delta_db;
    return {offsets_, std::move(p), bandwidth_};
  }

  friend bool operator==(const PowerSpectrum&, const PowerSpectrum&) = default;

 private:
  std::vector<double> offsets_;
  std::vector<double> power_;
  double bandwidth_;
};

/// Power at an arbitrary offset, linear in dB between grid points.
/// A -inf neighbour makes the open interval -inf. Throws std::out_of_range outside the grid.
inline double power_at(const PowerSpectrum& s, double offset_hz) {
  const auto& f = s.offsets_hz();
  const auto& p = s.power_dbm();
  if (!(offset_hz >= f.front() && offset_hz <= f.back()))
    throw std::out_of_range("power_at: offset " + std::to_string(offset_hz) + " Hz outside spectrum grid");
  auto it = std::lower_bound(f.begin(), f.end(), offset_hz);
  const auto hi = static_cast<std::size_t>(it - f.begin());
  if (f[hi] == offset_hz) return p[hi];
  const std::size_t lo = hi - 1;
  if (p[lo] == kNegInf || p[hi] == kNegInf) return kNegInf;
  const double t = (offset_hz - f[lo]) / (f[hi] - f[lo]);
  return p[lo] + t * (p[hi] - p[lo]);
}

// ---------------------------------------------------------------------------
// Noise synthesis

/// Filtered RF noise chain driving the Raman AOM.
///
/// The source is flat out to source_band_hz, band-limited by high-pass and
/// low-pass filters with ideal asymptotic slopes, then a rectangular notch of
/// notch_depth_db is cut around notch_center_hz. The filter chain is
/// symmetric about band_center_hz, which is where the mixing stage places the
/// noise band; when unset it follows the notch, so retuning the notch to
/// another transition moves the whole band with it.
struct NoiseChainConfig {
  double source_level_dbm = -63.0;
  double source_band_hz = 10.0e6;
  double highpass_cutoff_hz = 500.0e3;
  double lowpass_cutoff_hz = 5.0e6;
  double rolloff_db_per_octave = 60.0;
  double notch_center_hz = 0.0;
  double notch_width_hz = 400.0e3;
  double notch_depth_db = 40.0;
  double grid_step_hz = 5.0e3;
  std::optional<double> band_center_hz;

  double band_center() const { return band_center_hz.value_or(notch_center_hz); }

  void validate() const {
    if (!std::isfinite(source_level_dbm)) throw std::invalid_argument("noise_chain: source level must be finite");
    if (!(highpass_cutoff_hz > 0.0 && highpass_cutoff_hz < lowpass_cutoff_hz && lowpass_cutoff_hz <= source_band_hz))
      throw std::invalid_argument("noise_chain: need 0 < highpass < lowpass <= source band");
    if (!std::isfinite(source_band_hz)) throw std::invalid_argument("noise_chain: source band must be finite");
    if (!(rolloff_db_per_octave > 0.0)) throw std::invalid_argument("noise_chain: rolloff must be > 0");
    if (!(notch_width_hz > 0.0)) throw std::invalid_argument("noise_chain: notch width must be > 0");
    if (!(notch_depth_db >= 0.0)) throw std::invalid_argument("noise_chain: notch depth must be >= 0");
    if (!std::isfinite(notch_center_hz) || !std::isfinite(band_center()))
      throw std::invalid_argument("noise_chain: notch/band centre must be finite");
    if (!(grid_step_hz > 0.0)) throw std::invalid_argument("noise_chain: grid step must be > 0");
    if (grid_step_hz > notch_width_hz)
      throw std::invalid_argument("noise_chain: grid step larger than notch width cannot resolve the notch");
  }
};

/// Filter-chain attenuation in dB at distance d_hz >= 0 from the band centre.
inline double chain_attenuation_db(const NoiseChainConfig& c, double d_hz) {
  if (d_hz > c.source_band_hz) return std::numeric_limits<double>::infinity();
  double att = 0.0;
  if (d_hz < c.highpass_cutoff_hz)
    att += d_hz == 0.0 ? std::numeric_limits<double>::infinity()
                       : c.rolloff_db_per_octave * std::log2(c.highpass_cutoff_hz / d_hz);
  if (d_hz > c.lowpass_cutoff_hz) att += c.rolloff_db_per_octave * std::log2(d_hz / c.lowpass_cutoff_hz);
  return att;
}

inline PowerSpectrum synthesize_noise_spectrum(const NoiseChainConfig& c, double ref_bandwidth_hz = 3000.0) {
  c.validate();
  const double center = c.band_center();
  const double reach = c.source_band_hz + std::max(std::abs(center), std::abs(c.notch_center_hz));
  const auto n = static_cast<long long>(std::ceil(reach / c.grid_step_hz - 1e-9));
  std::vector<double> f, p;
  f.reserve(static_cast<std::size_t>(2 * n + 1));
  p.reserve(f.capacity());
  const double half_notch = 0.5 * c.notch_width_hz * (1.0 + 1e-12);
  for (long long k = -n; k <= n; ++k) {
    const double offset = static_cast<double>(k) * c.grid_step_hz;
    double att = chain_attenuation_db(c, std::abs(offset - center));
    if (std::abs(offset - c.notch_center_hz) <= half_notch) att += c.notch_depth_db;
    f.push_back(offset);
    p.push_back(std::isinf(att) ? kNegInf : c.source_level_dbm - att);
  }
  return {std::move(f), std::move(p), ref_bandwidth_hz};
}

// ---------------------------------------------------------------------------
// Rates

/// Coherent calibration point: a monochromatic beat spike of integrated power
/// coherent_power_dbm drives the bare Rabi frequency coherent_rabi (rad/s).
struct RateCalibration {
  double coherent_power_dbm = -36.0;
  double coherent_rabi = kTwoPi * 120.0e3;
  double ref_bandwidth_hz = 3000.0;

  void validate() const {
    if (!std::isfinite(coherent_power_dbm)) throw std::invalid_argument("calibration: P_c must be finite");
    if (!(coherent_rabi > 0.0) || !std::isfinite(coherent_rabi))
      throw std::invalid_argument("calibration: coherent Rabi frequency must be > 0");
    if (!(ref_bandwidth_hz > 0.0)) throw std::invalid_argument("calibration: reference bandwidth must be > 0");
  }
};

/// Offset (Hz) of transition m from the hyperfine splitting.
inline double transition_offset_hz(int m, const AtomParams& params) { return zeeman_shift(m, params) / kTwoPi; }

/// Prefactor (1/4)(1 - m^2/16) Omega_0^2 / (B P_c) shared by every rate route; multiply by linear P_i in mW.
inline double rate_prefactor(const PowerSpectrum& s, const RateCalibration& cal, int m) {
  cal.validate();
  return 0.25 * coupling_factor(m) * cal.coherent_rabi * cal.coherent_rabi /
         (s.ref_bandwidth_hz() * dbm_to_mw(cal.coherent_power_dbm));
}

/// Incoherent transfer rate (1/s) on |3,m> <-> |4,m>, equal in both directions,
/// with the sinc kernel collapsed to a delta function.
inline double incoherent_rate(const PowerSpectrum& s, const RateCalibration& cal, int m, const AtomParams& params) {
  check_transition_m(m);
  const double offset = transition_offset_hz(m, params);
  double p_dbm;
  try {
    p_dbm = power_at(s, offset);
  } catch (const std::out_of_range&) {
    throw std::out_of_range("incoherent_rate: spectrum does not cover m=" + std::to_string(m) + " at " +
                            std::to_string(offset) + " Hz");
  }
  return rate_prefactor(s, cal, m) * dbm_to_mw(p_dbm);
}

/// Rates for m = -3..3 in transition_index order.
inline std::array<double, kNumTransitions> rate_table(const PowerSpectrum& s, const RateCalibration& cal,
                                                      const AtomParams& params) {
  std::array<double, kNumTransitions> out{};
  for (std::size_t i = 0; i < kNumTransitions; ++i) out[i] = incoherent_rate(s, cal, transition_m(i), params);
  return out;
}

/// D(x) = sin^2 x / (pi x^2); unit area.
inline double sinc_kernel(double x) {
  if (std::abs(x) < 1e-4) {
    const double x2 = x * x;
    return (1.0 - x2 / 3.0) / std::numbers::pi;
  }
  const double s = std::sin(x);
  return s * s / (std::numbers::pi * x * x);
}

/// Simpson integral of D over [-half_width, half_width].
inline double sinc_kernel_integral(double half_width, std::size_t intervals = 200000) {
  if (intervals % 2) ++intervals;
  const double h = 2.0 * half_width / static_cast<double>(intervals);
  double sum = sinc_kernel(-half_width) + sinc_kernel(half_width);
  for (std::size_t i = 1; i < intervals; ++i)
    sum += (i % 2 ? 4.0 : 2.0) * sinc_kernel(-half_width + h * static_cast<double>(i));
  return sum * h / 3.0;
}

/// Rate from the finite-time comb integral
///   gamma = (pi/4) alpha t Int S_i(w) D((w - w_A) t / 2) dw
/// with alpha eliminated through the coherent calibration. Integrates over the
/// whole spectrum grid; the integrand is interpolated exactly as power_at does.
inline double rate_via_sinc_integral(const PowerSpectrum& s, const RateCalibration& cal, int m,
                                     const AtomParams& params, double t) {
  check_transition_m(m);
  if (!(t > 0.0)) throw std::invalid_argument("rate_via_sinc_integral: t must be > 0");
  if (s.size() < 2) throw std::invalid_argument("rate_via_sinc_integral: spectrum needs at least two points");
  if (s.max_step_hz() * t > 0.5)
    throw std::invalid_argument("rate_via_sinc_integral: spectrum grid does not resolve 1/t");

  const double nu_a = transition_offset_hz(m, params);
  const double h_target = 1.0 / (32.0 * t);
  const auto& f = s.offsets_hz();
  const auto& p = s.power_dbm();

  // Int P(nu) D(pi (nu - nu_a) t) dnu, piecewise Simpson on each grid interval.
  double integral = 0.0;
  for (std::size_t i = 0; i + 1 < f.size(); ++i) {
    if (p[i] == kNegInf || p[i + 1] == kNegInf) continue;
    const double width = f[i + 1] - f[i];
    auto n = static_cast<std::size_t>(std::ceil(width / h_target));
    n = std::max<std::size_t>(2, n + (n % 2));
    const double h = width / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t j = 0; j <= n; ++j) {
      const double frac = static_cast<double>(j) / static_cast<double>(n);
      const double nu = f[i] + h * static_cast<double>(j);
      const double val = dbm_to_mw(p[i] + frac * (p[i + 1] - p[i])) * sinc_kernel(std::numbers::pi * (nu - nu_a) * t);
      acc += (j == 0 || j == n) ? val : (j % 2 ? 4.0 * val : 2.0 * val);
    }
    integral += acc * h / 3.0;
  }
  // (pi/4) (Omega_c^2 / P_c) t Int S_i dw with S_i = P/(2 pi B), dw = 2 pi dnu, D argument pi dnu t.
  return rate_prefactor(s, cal, m) * std::numbers::pi * t * integral;
}

}  // namespace zps

#endif  // ZPS_SPECTRUM_HPP
