#include <gtest/gtest.h>

#include <random>

#include "zps/fit.hpp"

using namespace zps;

namespace {

AtomParams paper_atom() { return AtomParams::from_axial_field(1.3); }

FitModel truth_uniform() {
  return FitModel::from_state(PopulationState::uniform_f3(), paper_atom(), 0.006);
}

RamanScan scan_of(const PopulationState& s, std::optional<int> shots, std::uint64_t seed,
                  ReadoutModel readout = ReadoutModel::ideal()) {
  ScanConfig c;
  c.detunings_hz = ScanConfig::symmetric_grid();
  c.shots_per_point = shots;
  c.rng_seed = seed;
  return acquire_scan(s, c, paper_atom(), readout);
}

FitResult fit_default(const RamanScan& scan) {
  FitModel fallback;
  const auto g = default_initial_guess(scan, fallback, 0.006);
  return fit_scan(scan, g.model, 0.006);
}

// Fisher information of the binomial likelihood at the true model, assembled
// from the model and its gradient.
Eigen::Matrix<double, 9, 9> fisher(const FitModel& m, const std::vector<double>& grid_hz, int shots) {
  Eigen::Matrix<double, 9, 9> F = Eigen::Matrix<double, 9, 9>::Zero();
  for (double d : grid_hz) {
    const double p = model_p4(kTwoPi * d, m);
    const auto g = model_p4_gradient(kTwoPi * d, m);
    Eigen::Matrix<double, 9, 1> v;
    for (int j = 0; j < 9; ++j) v(j) = g[static_cast<std::size_t>(j)];
    F += shots / (p * (1 - p)) * v * v.transpose();
  }
  return F;
}

}  // namespace

TEST(ModelP4, Examples) {
  FitModel m;
  m.p_b = 0.0;
  m.populations[transition_index(2)] = 1.0;
  EXPECT_DOUBLE_EQ(model_p4(m.omega_B * 2, m), 0.5);
  const double rabi = m.Omega_0 * std::sqrt(coupling_factor(2));
  EXPECT_NEAR(model_p4(m.omega_B * 2 + rabi, m), 0.25, 1e-15);
  FitModel empty;
  for (double d : {-1e7, 0.0, 3e6}) EXPECT_EQ(model_p4(d, empty), empty.p_b);
}

TEST(ModelP4, MatchesMeasurementModelForF3States) {
  const auto atom = paper_atom();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PopulationState s;
  double sum = 0.0;
  for (int m = -3; m <= 3; ++m) sum += s[{3, m}] = u(rng);
  for (int m = -3; m <= 3; ++m) s[{3, m}] /= sum;
  const auto model = FitModel::from_state(s, atom, 0.006);
  for (double d = -3.5e6; d < 3.5e6; d += 12345.0)
    EXPECT_NEAR(model_p4(kTwoPi * d, model), true_transfer_probability(s, kTwoPi * d, atom, ReadoutModel::ideal()),
                1e-14);
}

TEST(ModelP4, JacobianMatchesCentralDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> pop(0.0, 0.4), rabi(60e3, 200e3), split(700e3, 1100e3), det(-3.5e6, 3.5e6);
  for (int trial = 0; trial < 100; ++trial) {
    FitModel m;
    for (auto& p : m.populations) p = pop(rng);
    m.Omega_0 = kTwoPi * rabi(rng);
    m.omega_B = kTwoPi * split(rng);
    const double d = kTwoPi * det(rng);
    const auto g = model_p4_gradient(d, m);
    const auto x = m.parameters();
    for (std::size_t j = 0; j < kNumFitParams; ++j) {
      const double h = (j < kNumTransitions ? 1e-4 : x[j] * 1e-5);
      auto xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      FitModel mp = m, mm = m;
      mp.set_parameters(xp);
      mm.set_parameters(xm);
      const double fd = (model_p4(d, mp) - model_p4(d, mm)) / (2 * h);
      // Scale by the parameter's natural size so that zero derivatives compare sanely.
      const double unit = j < kNumTransitions ? 1.0 : x[j];
      EXPECT_NEAR(g[j] * unit, fd * unit, 1e-6 * std::max(1.0, std::abs(fd * unit))) << trial << ' ' << j;
    }
  }
}

TEST(FitScan, FixedPointOnExactData) {
  const auto scan = scan_of(PopulationState::uniform_f3(), std::nullopt, 0);
  const auto r = fit_scan(scan, truth_uniform(), 0.006);
  EXPECT_TRUE(r.converged);
  EXPECT_FALSE(r.ill_posed);
  EXPECT_LE(r.iterations, 2);
  EXPECT_LT(r.residual_norm, 1e-25);
  for (int m = -3; m <= 3; ++m) EXPECT_NEAR(r.parameters.population(m), 1.0 / 7, 1e-12);
}

TEST(FitScan, RecoversFromPerturbedGuessOnExactData) {
  PopulationState s;
  const double p[7] = {0.05, 0.1, 0.2, 0.3, 0.15, 0.12, 0.08};
  for (int m = -3; m <= 3; ++m) s[{3, m}] = p[m + 3];
  const auto scan = scan_of(s, std::nullopt, 0);
  FitModel guess;
  guess.Omega_0 = kTwoPi * 100e3;
  guess.omega_B = kTwoPi * 880e3;
  for (auto& v : guess.populations) v = 0.1;
  const auto r = fit_scan(scan, guess, 0.006);
  EXPECT_TRUE(r.converged);
  for (int m = -3; m <= 3; ++m) EXPECT_NEAR(r.parameters.population(m), p[m + 3], 1e-7);
  EXPECT_NEAR(r.parameters.Omega_0 / kTwoPi, 120e3, 1e-3);
  EXPECT_NEAR(r.parameters.omega_B / kTwoPi, 910e3, 1e-3);
  EXPECT_NEAR(r.population_sum, 1.0, 1e-7);
}

TEST(FitScan, EmptyPopulationsFitToZero) {
  PopulationState s = PopulationState::pure({4, 4});
  s[{4, 4}] = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto scan = scan_of(s, 100, seed);
    const auto r = fit_scan(scan, truth_uniform(), 0.006);
    // One point three counts above background already supports ~0.03 on a narrow line.
    for (int m = -3; m <= 3; ++m) EXPECT_LT(r.parameters.population(m), 0.08) << seed;
    EXPECT_TRUE(std::isfinite(r.parameters.Omega_0));
    for (int m = -3; m <= 3; ++m) EXPECT_GE(r.parameters.population(m), 0.0);
  }
}

// The sampled-scan recovery tolerances are checked against the information
// bound: an efficient estimator can do no better than the Cramer-Rao spread.
TEST(FitScan, SampledUniformScansAreEfficientAndUnbiased) {
  const auto truth = truth_uniform();
  const auto grid = ScanConfig::symmetric_grid();
  const Eigen::Matrix<double, 9, 9> crlb = fisher(truth, grid, 100).inverse();
  const int runs = 50;
  std::array<double, 9> mean{}, sq{};
  double sum_mean = 0.0;
  for (int s = 0; s < runs; ++s) {
    const auto r = fit_default(scan_of(PopulationState::uniform_f3(), 100, 3000 + s));
    ASSERT_TRUE(r.converged);
    ASSERT_FALSE(r.ill_posed);
    const auto x = r.parameters.parameters(), t = truth.parameters();
    for (std::size_t j = 0; j < 9; ++j) {
      mean[j] += (x[j] - t[j]) / runs;
      sq[j] += (x[j] - t[j]) * (x[j] - t[j]) / runs;
    }
    sum_mean += r.population_sum / runs;
    EXPECT_LT(std::abs(r.parameters.omega_B / truth.omega_B - 1.0), 0.05);
  }
  for (std::size_t j = 0; j < 9; ++j) {
    const double bound = std::sqrt(crlb(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)));
    const double rms = std::sqrt(sq[j]);
    EXPECT_GT(rms / bound, 0.7) << j;
    EXPECT_LT(rms / bound, 1.35) << j;
    EXPECT_LT(std::abs(mean[j]), 3.0 * bound / std::sqrt(runs) + 0.01 * (j < 7 ? 1.0 : truth.parameters()[j])) << j;
  }
  EXPECT_NEAR(sum_mean, 1.0, 0.05);
}

TEST(FitScan, ConsistentAtHighShotCounts) {
  const auto truth = truth_uniform();
  std::array<double, 7> bias{};
  for (int s = 0; s < 50; ++s) {
    const auto r = fit_default(scan_of(PopulationState::uniform_f3(), 10000, 100 + s));
    for (int m = -3; m <= 3; ++m) bias[transition_index(m)] += (r.parameters.population(m) - 1.0 / 7) / 50;
    EXPECT_LT(std::abs(r.parameters.omega_B / truth.omega_B - 1.0), 0.005);
    EXPECT_LT(std::abs(r.parameters.Omega_0 / truth.Omega_0 - 1.0), 0.03);
  }
  for (double b : bias) EXPECT_LT(std::abs(b), 0.005);
}

TEST(FitScan, ResidualsAreWhiteOnWellSpecifiedData) {
  for (int s = 0; s < 20; ++s) {
    const auto scan = scan_of(PopulationState::uniform_f3(), 400, 500 + s);
    const auto r = fit_default(scan);
    double zsum = 0.0, zsq = 0.0;
    for (const auto& pt : scan.points) {
      const double p = model_p4(kTwoPi * pt.delta_r_hz, r.parameters);
      const double z = (pt.p4 - p) / std::sqrt(p * (1 - p) / pt.shots);
      zsum += z;
      zsq += z * z;
    }
    const double n = static_cast<double>(scan.points.size());
    const double zbar = zsum / n;
    EXPECT_LT(std::abs(zbar), 3.0 / std::sqrt(n)) << s;
    EXPECT_GT(zsq / n - zbar * zbar, 0.7) << s;
    EXPECT_LT(zsq / n - zbar * zbar, 1.3) << s;
  }
}

TEST(FitScan, InvariantUnderCommonShift) {
  const auto scan = scan_of(PopulationState::uniform_f3(), 100, 99);
  const auto base = fit_scan(scan, truth_uniform(), 0.006);
  RamanScan shifted = scan;
  const double shift_hz = 137e3;
  for (auto& pt : shifted.points) pt.delta_r_hz += shift_hz;
  FitModel guess = truth_uniform();
  guess.center_offset = kTwoPi * shift_hz;
  const auto moved = fit_scan(shifted, guess, 0.006);
  for (int m = -3; m <= 3; ++m) EXPECT_NEAR(moved.parameters.population(m), base.parameters.population(m), 1e-6);
  EXPECT_NEAR(moved.parameters.omega_B / base.parameters.omega_B, 1.0, 1e-6);
}

TEST(FitScan, ObservedWeightingStillAvailable) {
  const auto scan = scan_of(PopulationState::uniform_f3(), 400, 5);
  FitOptions opt;
  opt.weighting = Weighting::observed;
  const auto r = fit_scan(scan, truth_uniform(), 0.006, opt);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.population_sum, 1.0, 0.15);
}

TEST(FitScan, IllPosedWhenGridMissesLines) {
  ScanConfig c;
  c.detunings_hz = ScanConfig::symmetric_grid(1.2e6, 41);
  c.shots_per_point = std::nullopt;
  const auto scan = acquire_scan(PopulationState::uniform_f3(), c, paper_atom(), ReadoutModel::ideal());
  const auto r = fit_scan(scan, truth_uniform(), 0.006);
  EXPECT_TRUE(r.ill_posed);
  EXPECT_FALSE(r.message.empty());
}

TEST(FitScan, ReportsNonConvergence) {
  const auto scan = scan_of(PopulationState::uniform_f3(), 100, 4);
  FitModel guess = truth_uniform();
  guess.omega_B *= 0.97;
  FitOptions opt;
  opt.max_iterations = 1;
  const auto r = fit_scan(scan, guess, 0.006, opt);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_TRUE(r.parameters.finite());
}

TEST(FitScan, StdErrorsMatchSpreadAndSumError) {
  const auto r = fit_default(scan_of(PopulationState::uniform_f3(), 100, 8));
  for (double e : r.std_errors) EXPECT_GE(e, 0.0);
  const auto F = fisher(truth_uniform(), ScanConfig::symmetric_grid(), 100);
  const Eigen::Matrix<double, 9, 9> C = F.inverse();
  EXPECT_NEAR(r.std_errors[3] / std::sqrt(C(3, 3)), 1.0, 0.25);
  double s = 0.0;
  for (int i = 0; i < 7; ++i) s += r.parameters.populations[static_cast<std::size_t>(i)];
  EXPECT_DOUBLE_EQ(r.population_sum, s);
  EXPECT_GT(r.population_sum_error, 0.0);
}

TEST(FitScan, RejectsBadInput) {
  RamanScan tiny;
  tiny.points.resize(5);
  EXPECT_THROW(fit_scan(tiny, truth_uniform(), 0.006), std::invalid_argument);
  auto scan = scan_of(PopulationState::uniform_f3(), std::nullopt, 0);
  FitModel bad = truth_uniform();
  bad.Omega_0 = std::nan("");
  EXPECT_THROW(fit_scan(scan, bad, 0.006), std::invalid_argument);
}

TEST(InitialGuess, SevenPeaks) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    FitModel fallback;
    fallback.omega_B = kTwoPi * 1000e3;
    const auto g = default_initial_guess(scan_of(PopulationState::uniform_f3(), 100, seed), fallback, 0.006);
    EXPECT_FALSE(g.used_fallback);
    EXPECT_NEAR(g.model.omega_B / (kTwoPi * 910e3), 1.0, 0.05) << seed;
    EXPECT_GE(g.peak_positions_hz.size(), 7u);
  }
}

TEST(InitialGuess, FlatScanFallsBack) {
  PopulationState s = PopulationState::pure({4, 4});
  s[{4, 4}] = 0.0;
  FitModel fallback;
  fallback.omega_B = kTwoPi * 900e3;
  const auto g = default_initial_guess(scan_of(s, std::nullopt, 0), fallback, 0.006);
  EXPECT_TRUE(g.used_fallback);
  EXPECT_FALSE(g.warning.empty());
  EXPECT_EQ(g.model.omega_B, fallback.omega_B);
}

TEST(InitialGuess, SinglePeakHeight) {
  const auto scan = scan_of(PopulationState::pure({3, 0}), std::nullopt, 0);
  const auto g = default_initial_guess(scan, FitModel{}, 0.006);
  double top = 0.0;
  for (const auto& pt : scan.points) top = std::max(top, pt.p4);
  EXPECT_NEAR(g.model.population(0), 2.0 * (top - 0.006), 1e-9);
  EXPECT_NEAR(g.model.population(0), 1.0, 1e-9);
}
