#ifndef ZPS_FIT_HPP
#define ZPS_FIT_HPP

// Recovery of Zeeman populations from a Raman scan by weighted nonlinear
// least squares on the sum-of-Lorentzians transfer model
//
//   p4(delta_R) = p_b + 1/2 sum_m p_m / (1 + (delta_R - omega_B m)^2 / ((1 - m^2/16) Omega_0^2))
//
// Free parameters: the seven F=3 populations, Omega_0 and omega_B. The
// background p_b is held fixed.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "zps/atom.hpp"
#include "zps/measurement.hpp"

namespace zps {

inline constexpr std::size_t kNumFitParams = 9;
inline constexpr std::size_t kOmega0Index = 7;
inline constexpr std::size_t kOmegaBIndex = 8;

struct FitModel {
  std::array<double, kNumTransitions> populations{};
  double Omega_0 = kTwoPi * 120.0e3;  // rad/s
  double omega_B = kTwoPi * 910.0e3;  // rad/s
  double p_b = 0.006;
  /// Fixed origin of the detuning axis (rad/s); line m sits at center_offset + omega_B m.
  double center_offset = 0.0;

  double population(int m) const { return populations[transition_index(m)]; }

  std::array<double, kNumFitParams> parameters() const {
    std::array<double, kNumFitParams> x{};
    std::copy(populations.begin(), populations.end(), x.begin());
    x[kOmega0Index] = Omega_0;
    x[kOmegaBIndex] = omega_B;
    return x;
  }

  void set_parameters(const std::array<double, kNumFitParams>& x) {
    std::copy(x.begin(), x.begin() + kNumTransitions, populations.begin());
    Omega_0 = x[kOmega0Index];
    omega_B = x[kOmegaBIndex];
  }

  bool finite() const {
    for (double v : parameters())
      if (!std::isfinite(v)) return false;
    return std::isfinite(p_b) && std::isfinite(center_offset);
  }

  static FitModel from_state(const PopulationState& s, const AtomParams& params, double p_b) {
    FitModel f;
    for (int m = -3; m <= 3; ++m) f.populations[transition_index(m)] = s.p3(m);
    f.Omega_0 = params.Omega_0;
    f.omega_B = params.omega_B;
    f.p_b = p_b;
    return f;
  }
};

inline double model_p4(double delta_R, const FitModel& model) {
  double sum = 0.0;
  for (int m = -3; m <= 3; ++m) {
    const double u = delta_R - model.center_offset - model.omega_B * m;
    const double s = coupling_factor(m) * model.Omega_0 * model.Omega_0;
    sum += model.population(m) / (1.0 + u * u / s);
  }
  return model.p_b + 0.5 * sum;
}

/// d model_p4 / d(parameters) in FitModel::parameters() order.
inline std::array<double, kNumFitParams> model_p4_gradient(double delta_R, const FitModel& model) {
  std::array<double, kNumFitParams> g{};
  for (int m = -3; m <= 3; ++m) {
    const double u = delta_R - model.center_offset - model.omega_B * m;
    const double s = coupling_factor(m) * model.Omega_0 * model.Omega_0;
    const double L = 1.0 / (1.0 + u * u / s);
    const double p = model.population(m);
    g[transition_index(m)] = 0.5 * L;
    g[kOmega0Index] += p * L * L * u * u / (s * model.Omega_0);
    g[kOmegaBIndex] += p * L * L * u * m / s;
  }
  return g;
}

/// Source of p in the binomial variance p(1-p)/shots behind each weight.
enum class Weighting { observed, model };

struct FitOptions {
  Weighting weighting = Weighting::model;
  int max_reweights = 20;
  int max_iterations = 500;
  double relative_cost_tolerance = 1e-10;
  double relative_step_tolerance = 1e-8;
  double initial_damping = 1e-3;
};

struct FitResult {
  FitModel parameters;
  std::array<double, kNumFitParams> std_errors{};
  double population_sum = 0.0;
  double population_sum_error = 0.0;
  double residual_norm = 0.0;  // weighted sum of squared residuals
  bool converged = false;
  bool ill_posed = false;
  int iterations = 0;
  std::string message;
};

/// Binomial weight shots / max(p(1-p), 0.5/shots); analytic points get unit weight.
inline double binomial_weight(const ScanPoint& pt) {
  if (pt.shots <= 0) return 1.0;
  const double n = pt.shots;
  return n / std::max(pt.p4 * (1.0 - pt.p4), 0.5 / n);
}

namespace detail {

// Frequencies are carried in units of 2 pi x 100 kHz inside the solver.
inline constexpr double kFreqScale = kTwoPi * 1.0e5;

inline std::array<double, kNumFitParams> to_scaled(const std::array<double, kNumFitParams>& x) {
  auto y = x;
  y[kOmega0Index] /= kFreqScale;
  y[kOmegaBIndex] /= kFreqScale;
  return y;
}

inline std::array<double, kNumFitParams> from_scaled(const std::array<double, kNumFitParams>& y) {
  auto x = y;
  x[kOmega0Index] *= kFreqScale;
  x[kOmegaBIndex] *= kFreqScale;
  return x;
}

struct Problem {
  std::vector<double> delta;  // rad/s
  std::vector<double> y;
  std::vector<double> sqrt_w;
  FitModel base;
  double omega0_floor = 1e-6;  // scaled units

  FitModel model_at(const Eigen::Matrix<double, kNumFitParams, 1>& scaled) const {
    std::array<double, kNumFitParams> a{};
    for (std::size_t i = 0; i < kNumFitParams; ++i) a[i] = scaled(static_cast<Eigen::Index>(i));
    FitModel m = base;
    m.set_parameters(from_scaled(a));
    return m;
  }

  double cost(const FitModel& m, Eigen::VectorXd* r = nullptr, Eigen::MatrixXd* J = nullptr) const {
    const auto n = static_cast<Eigen::Index>(delta.size());
    if (r) r->resize(n);
    if (J) J->resize(n, static_cast<Eigen::Index>(kNumFitParams));
    double c = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double ri = sqrt_w[k] * (y[k] - model_p4(delta[k], m));
      c += ri * ri;
      if (r) (*r)(i) = ri;
      if (J) {
        const auto g = model_p4_gradient(delta[k], m);
        for (std::size_t j = 0; j < kNumFitParams; ++j) {
          const double unit = (j == kOmega0Index || j == kOmegaBIndex) ? kFreqScale : 1.0;
          (*J)(i, static_cast<Eigen::Index>(j)) = sqrt_w[k] * g[j] * unit;
        }
      }
    }
    return c;
  }
};

inline void project(Eigen::Matrix<double, kNumFitParams, 1>& x, double omega0_floor = 1e-6) {
  for (std::size_t i = 0; i < kNumTransitions; ++i) x(static_cast<Eigen::Index>(i)) = std::max(0.0, x(static_cast<Eigen::Index>(i)));
  // Frequencies stay strictly positive. A line narrower than the scan spacing
  // is unresolvable and lets populations trade against Omega_0 without bound.
  x(kOmega0Index) = std::max(x(kOmega0Index), omega0_floor);
  x(kOmegaBIndex) = std::max(x(kOmegaBIndex), 1e-6);
}

struct LmOutcome {
  bool converged = false;
  int iterations = 0;
  double cost = 0.0;
};

/// Damped Gauss-Newton on prob with its current weights, starting from x.
/// On return r and J hold the residuals and Jacobian at x.
inline LmOutcome levenberg_marquardt(const Problem& prob, Eigen::Matrix<double, kNumFitParams, 1>& x,
                                     const FitOptions& options, int budget, Eigen::VectorXd& r,
                                     Eigen::MatrixXd& J) {
  using Vec = Eigen::Matrix<double, kNumFitParams, 1>;
  using Mat = Eigen::Matrix<double, kNumFitParams, kNumFitParams>;
  LmOutcome out;
  double cost = prob.cost(prob.model_at(x), &r, &J);
  double lambda = options.initial_damping;
  bool converged = cost == 0.0;
  int it = 0;
  while (!converged && it < budget) {
    ++it;
    const Mat A = J.transpose() * J;
    const Vec g = J.transpose() * r;
    Vec diag = A.diagonal();
    const double floor = std::max(diag.maxCoeff() * 1e-12, std::numeric_limits<double>::min());
    for (Eigen::Index i = 0; i < diag.size(); ++i) diag(i) = std::max(diag(i), floor);

    bool accepted = false;
    while (lambda < 1e20) {
      Mat damped = A;
      damped.diagonal() += lambda * diag;
      Vec trial = x + damped.ldlt().solve(g);
      project(trial, prob.omega0_floor);
      if (!trial.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      const FitModel m_new = prob.model_at(trial);
      const double c_new = prob.cost(m_new);
      if (c_new < cost) {
        const double rel_drop = (cost - c_new) / cost;
        const double step = (trial - x).norm();
        x = trial;
        cost = prob.cost(m_new, &r, &J);
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (cost == 0.0 || rel_drop < options.relative_cost_tolerance ||
            step < options.relative_step_tolerance * (x.norm() + options.relative_step_tolerance))
          converged = true;
        break;
      }
      lambda *= 10.0;
    }
    // No descent direction left at any damping: x is stationary.
    if (!accepted) converged = true;
  }
  out.converged = converged;
  out.iterations = it;
  out.cost = cost;
  return out;
}

}  // namespace detail

/// Weighted damped Gauss-Newton with Levenberg-style damping adaptation.
///
/// Populations are kept non-negative by projection after each step. Standard
/// errors come from the inverse normal matrix at the optimum. `ill_posed` is
/// set when the Jacobian is numerically rank deficient or some line has no
/// scan point within two half-widths of its centre.
inline FitResult fit_scan(const RamanScan& scan, const FitModel& initial_guess, double fixed_p_b,
                          const FitOptions& options = {}) {
  using Vec = Eigen::Matrix<double, kNumFitParams, 1>;
  using Mat = Eigen::Matrix<double, kNumFitParams, kNumFitParams>;

  if (scan.points.size() < 10) throw std::invalid_argument("fit_scan: need at least 10 scan points");
  if (!initial_guess.finite()) throw std::invalid_argument("fit_scan: initial guess must be finite");
  if (!(fixed_p_b >= 0.0 && fixed_p_b < 1.0)) throw std::invalid_argument("fit_scan: p_b must be in [0, 1)");

  detail::Problem prob;
  prob.base = initial_guess;
  prob.base.p_b = fixed_p_b;
  for (const auto& pt : scan.points) {
    prob.delta.push_back(kTwoPi * pt.delta_r_hz);
    prob.y.push_back(pt.p4);
    prob.sqrt_w.push_back(std::sqrt(binomial_weight(pt)));
  }
  {
    std::vector<double> sorted = prob.delta;
    std::sort(sorted.begin(), sorted.end());
    double spacing = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < sorted.size(); ++i)
      if (sorted[i] > sorted[i - 1]) spacing = std::min(spacing, sorted[i] - sorted[i - 1]);
    if (std::isfinite(spacing)) prob.omega0_floor = std::max(1e-6, spacing / detail::kFreqScale);
  }

  Vec x;
  {
    const auto s = detail::to_scaled(prob.base.parameters());
    for (std::size_t i = 0; i < kNumFitParams; ++i) x(static_cast<Eigen::Index>(i)) = s[i];
  }
  detail::project(x, prob.omega0_floor);

  FitResult result;
  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  auto lm = detail::levenberg_marquardt(prob, x, options, options.max_iterations, r, J);
  int it = lm.iterations;
  bool converged = lm.converged;
  double cost = lm.cost;

  if (options.weighting == Weighting::model) {
    // Iteratively reweighted: binomial variance from the current model prediction.
    for (int pass = 0; pass < options.max_reweights && it < options.max_iterations; ++pass) {
      const FitModel current = prob.model_at(x);
      for (std::size_t i = 0; i < scan.points.size(); ++i) {
        ScanPoint pt = scan.points[i];
        pt.p4 = std::clamp(model_p4(prob.delta[i], current), 0.0, 1.0);
        prob.sqrt_w[i] = std::sqrt(binomial_weight(pt));
      }
      const Vec before = x;
      lm = detail::levenberg_marquardt(prob, x, options, options.max_iterations - it, r, J);
      it += lm.iterations;
      converged = lm.converged;
      cost = lm.cost;
      if ((x - before).norm() < options.relative_step_tolerance * (x.norm() + options.relative_step_tolerance)) break;
    }
  }

  result.parameters = prob.model_at(x);
  result.converged = converged;
  result.iterations = it;
  result.residual_norm = cost;
  if (!converged) result.message = "iteration limit reached";

  // Identifiability.
  Eigen::MatrixXd Jn = J;
  const double max_col = Jn.colwise().norm().maxCoeff();
  if (max_col > 0.0) Jn /= max_col;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Jn);
  qr.setThreshold(1e-10);
  if (max_col == 0.0 || qr.rank() < static_cast<Eigen::Index>(kNumFitParams)) {
    result.ill_posed = true;
    result.message = "Jacobian is rank deficient";
  }
  const auto& fm = result.parameters;
  for (int m = -3; m <= 3; ++m) {
    const double centre = fm.center_offset + fm.omega_B * m;
    const double hw = fm.Omega_0 * std::sqrt(coupling_factor(m));
    double nearest = std::numeric_limits<double>::infinity();
    for (double d : prob.delta) nearest = std::min(nearest, std::abs(d - centre));
    if (nearest > 2.0 * hw) {
      result.ill_posed = true;
      result.message = "scan has no points near the m=" + std::to_string(m) + " line";
    }
  }

  // Covariance in scaled units, then unscaled.
  const Mat A = J.transpose() * J;
  Mat cov;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(A);
  cod.setThreshold(1e-14);
  cov = cod.pseudoInverse();
  for (std::size_t j = 0; j < kNumFitParams; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    const double unit = (j == kOmega0Index || j == kOmegaBIndex) ? detail::kFreqScale : 1.0;
    result.std_errors[j] =
        A(jj, jj) > 0.0 ? std::sqrt(std::max(0.0, cov(jj, jj))) * unit : std::numeric_limits<double>::infinity();
  }
  double sum = 0.0, var = 0.0;
  for (std::size_t i = 0; i < kNumTransitions; ++i) {
    sum += fm.populations[i];
    for (std::size_t j = 0; j < kNumTransitions; ++j)
      var += cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  result.population_sum = sum;
  result.population_sum_error = std::sqrt(std::max(0.0, var));
  return result;
}

// ---------------------------------------------------------------------------
// Initial guess

struct InitialGuess {
  FitModel model;
  bool used_fallback = false;
  std::string warning;
  std::vector<double> peak_positions_hz;
};

namespace detail {

inline double interpolate_scan(const RamanScan& scan, double d_hz) {
  const auto& pts = scan.points;
  if (d_hz < pts.front().delta_r_hz || d_hz > pts.back().delta_r_hz) return std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].delta_r_hz >= d_hz) {
      const double w = pts[i].delta_r_hz - pts[i - 1].delta_r_hz;
      if (w <= 0.0) return pts[i].p4;
      const double t = (d_hz - pts[i - 1].delta_r_hz) / w;
      return pts[i - 1].p4 + t * (pts[i].p4 - pts[i - 1].p4);
    }
  }
  return pts.back().p4;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Largest relative departure of the peak-spacing estimate from the fallback omega_B that is trusted.
inline constexpr double kMaxSpacingDeviation = 0.25;

/// Starting point for fit_scan from peak positions and heights.
///
/// omega_B comes from the median spacing of detected maxima, refined by a
/// least-squares line through the assigned line indices; Omega_0 is taken
/// from the fallback. Populations are 2 (p4 - p_b) at the predicted centres.
inline InitialGuess default_initial_guess(const RamanScan& scan, const FitModel& fallback, double p_b) {
  if (scan.points.empty()) throw std::invalid_argument("default_initial_guess: empty scan");
  InitialGuess out;
  out.model = fallback;
  out.model.p_b = p_b;

  const auto& pts = scan.points;
  const std::size_t n = pts.size();
  std::vector<double> smooth(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i == 0 ? 0 : i - 1, hi = std::min(n - 1, i + 1);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += pts[j].p4;
    smooth[i] = s / static_cast<double>(hi - lo + 1);
  }

  std::vector<double> sorted = smooth;
  std::sort(sorted.begin(), sorted.end());
  const double floor = sorted[n / 10];
  const double top = sorted.back();
  int shots = 0;
  for (const auto& p : pts) shots = std::max(shots, p.shots);
  const double noise = shots > 0 ? std::sqrt(std::max(floor * (1.0 - floor), 0.5 / shots) / shots) : 0.0;
  const double threshold = floor + std::max({0.15 * (top - floor), 3.0 * noise, 0.005});

  // Local maxima above threshold, strongest first, suppressed within one
  // linewidth of a stronger maximum.
  std::vector<std::size_t> cand;
  if (top - floor > 0.01) {
    for (std::size_t i = 1; i + 1 < n; ++i)
      if (smooth[i] >= threshold && smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1]) cand.push_back(i);
  }
  std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return smooth[a] > smooth[b]; });
  const double min_sep_hz = 3.0 * fallback.Omega_0 / kTwoPi;
  std::vector<double> peaks;
  for (std::size_t i : cand) {
    double pos = pts[i].delta_r_hz;
    const double ym = smooth[i - 1], y0 = smooth[i], yp = smooth[i + 1];
    const double denom = ym - 2.0 * y0 + yp;
    const double h = 0.5 * (pts[i + 1].delta_r_hz - pts[i - 1].delta_r_hz);
    if (denom < 0.0) pos += h * 0.5 * (ym - yp) / denom;
    bool keep = true;
    for (double q : peaks)
      if (std::abs(q - pos) < min_sep_hz) keep = false;
    if (keep) peaks.push_back(pos);
  }
  std::sort(peaks.begin(), peaks.end());
  out.peak_positions_hz = peaks;

  if (peaks.empty()) {
    out.used_fallback = true;
    out.warning = "no peaks detected; using fallback initial guess";
    return out;
  }

  const double origin_hz = fallback.center_offset / kTwoPi;
  const double fallback_hz = fallback.omega_B / kTwoPi;
  if (peaks.size() >= 2) {
    std::vector<double> gaps;
    for (std::size_t i = 1; i < peaks.size(); ++i) gaps.push_back(peaks[i] - peaks[i - 1]);
    double est_hz = detail::median(gaps);
    // Refine: slope through the origin against the nearest line indices.
    for (int pass = 0; pass < 3; ++pass) {
      double num = 0.0, den = 0.0;
      for (double q : peaks) {
        const double idx = std::round((q - origin_hz) / est_hz);
        if (idx == 0.0 || std::abs(idx) > kMaxTransitionM) continue;
        num += idx * (q - origin_hz);
        den += idx * idx;
      }
      if (den > 0.0) est_hz = num / den;
    }
    if (std::abs(est_hz / fallback_hz - 1.0) <= kMaxSpacingDeviation) {
      out.model.omega_B = kTwoPi * est_hz;
    } else {
      out.warning = "peak spacing inconsistent with fallback omega_B; keeping fallback";
    }
  }

  for (int m = -3; m <= 3; ++m) {
    const double centre_hz = origin_hz + out.model.omega_B * m / kTwoPi;
    const double v = detail::interpolate_scan(scan, centre_hz);
    out.model.populations[transition_index(m)] = std::isnan(v) ? 0.0 : std::clamp(2.0 * (v - p_b), 0.0, 1.0);
  }
  return out;
}

}  // namespace zps

#endif  // ZPS_FIT_HPP
