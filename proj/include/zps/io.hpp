#ifndef ZPS_IO_HPP
#define ZPS_IO_HPP

// Run configuration (JSON) and the CSV/JSON file formats exchanged by the
// command-line tool. External files use ordinary frequency in Hz; everything
// is converted to rad/s on the way in.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "zps/atom.hpp"
#include "zps/dynamics.hpp"
#include "zps/fit.hpp"
#include "zps/measurement.hpp"
#include "zps/spectrum.hpp"

namespace zps {

using json = nlohmann::json;

/// Configuration or input-file problem; maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Number formatting

inline std::string format_number(double v, int digits) {
  if (v == kNegInf) return "-inf";
  if (v == -kNegInf) return "inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string csv_number(double v) { return format_number(v, 10); }

inline double parse_number(const std::string& s) {
  if (s == "-inf") return kNegInf;
  if (s == "inf") return -kNegInf;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("trailing characters in number: '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("key '") + key + "': " + e.what());
  }
}

/// A number, or one of the strings "inf" / "-inf".
inline double get_extended(const json& j, const char* key, double fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  const auto& v = j.at(key);
  if (v.is_string()) return parse_number(v.get<std::string>());
  if (!v.is_number()) throw ConfigError(std::string("key '") + key + "' must be a number");
  return v.get<double>();
}

inline json extended(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline void require_object(const json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sub-configs

inline AtomParams atom_from_json(const json& j) {
  detail::require_object(j, "atom");
  AtomParams p;
  p.hyperfine_splitting = kTwoPi * detail::get_or(j, "hyperfine_splitting_hz", 9.2e9);
  p.Omega_0 = kTwoPi * detail::get_or(j, "omega_0_hz", 120.0e3);
  const bool has_b = j.contains("omega_b_hz"), has_field = j.contains("axial_field_gauss");
  if (has_b == has_field) throw ConfigError("atom: exactly one of omega_b_hz / axial_field_gauss is required");
  if (has_field) {
    p.axial_field_gauss = detail::get_or(j, "axial_field_gauss", 0.0);
    p.omega_B = kTwoPi * (kZeemanHzPerGauss * *p.axial_field_gauss);
  } else {
    p.omega_B = kTwoPi * detail::get_or(j, "omega_b_hz", 0.0);
  }
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

inline json atom_to_json(const AtomParams& p) {
  json j{{"hyperfine_splitting_hz", p.hyperfine_splitting / kTwoPi}, {"omega_0_hz", p.Omega_0 / kTwoPi}};
  if (p.axial_field_gauss)
    j["axial_field_gauss"] = *p.axial_field_gauss;
  else
    j["omega_b_hz"] = p.omega_B / kTwoPi;
  return j;
}

inline NoiseChainConfig noise_chain_from_json(const json& j) {
  detail::require_object(j, "noise_chain");
  NoiseChainConfig c;
  c.source_level_dbm = detail::get_or(j, "source_level_dbm", c.source_level_dbm);
  c.source_band_hz = detail::get_or(j, "source_band_hz", c.source_band_hz);
  c.highpass_cutoff_hz = detail::get_or(j, "highpass_cutoff_hz", c.highpass_cutoff_hz);
  c.lowpass_cutoff_hz = detail::get_or(j, "lowpass_cutoff_hz", c.lowpass_cutoff_hz);
  c.rolloff_db_per_octave = detail::get_or(j, "rolloff_db_per_octave", c.rolloff_db_per_octave);
  c.notch_center_hz = detail::get_or(j, "notch_center_hz", c.notch_center_hz);
  c.notch_width_hz = detail::get_or(j, "notch_width_hz", c.notch_width_hz);
  c.notch_depth_db = detail::get_extended(j, "notch_depth_db", c.notch_depth_db);
  c.grid_step_hz = detail::get_or(j, "grid_step_hz", c.grid_step_hz);
  if (j.contains("band_center_hz") && !j.at("band_center_hz").is_null())
    c.band_center_hz = detail::get_or(j, "band_center_hz", 0.0);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RateCalibration calibration_from_json(const json& j) {
  detail::require_object(j, "calibration");
  RateCalibration c;
  c.coherent_power_dbm = detail::get_or(j, "coherent_power_dbm", c.coherent_power_dbm);
  c.coherent_rabi = kTwoPi * detail::get_or(j, "coherent_rabi_hz", c.coherent_rabi / kTwoPi);
  c.ref_bandwidth_hz = detail::get_or(j, "ref_bandwidth_hz", c.ref_bandwidth_hz);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RepumpModel repump_from_json(const json& j) {
  detail::require_object(j, "protocol.repump");
  RepumpModel r;
  const auto mode = detail::get_or<std::string>(j, "mode", "ideal_uniform");
  if (mode == "ideal_uniform") {
    r.mode = RepumpModel::Mode::ideal_uniform;
  } else if (mode == "partial") {
    r.mode = RepumpModel::Mode::partial;
    r.completeness = detail::get_or(j, "completeness", 1.0);
  } else {
    throw ConfigError("protocol.repump.mode must be ideal_uniform or partial");
  }
  if (j.contains("distribution")) {
    const auto d = detail::get_or<std::vector<double>>(j, "distribution", {});
    if (d.size() != 7) throw ConfigError("protocol.repump.distribution needs 7 entries (m = -3..3)");
    std::copy(d.begin(), d.end(), r.distribution.begin());
  }
  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return r;
}

struct ProtocolConfig {
  PumpProtocol protocol;
  /// "uniform_f3" or a path to a state JSON file.
  std::string initial_state = "uniform_f3";
};

inline ProtocolConfig protocol_from_json(const json& j) {
  detail::require_object(j, "protocol");
  ProtocolConfig pc;
  auto& p = pc.protocol;
  p.target_m = detail::get_or(j, "target_m", p.target_m);
  p.raman_duration = detail::get_or(j, "raman_duration_s", p.raman_duration);
  p.iterations = detail::get_or(j, "iterations", p.iterations);
  p.leak_rate = detail::get_or(j, "leak_rate_per_s", p.leak_rate);
  p.repump_duration = detail::get_or(j, "repump_duration_s", p.repump_duration);
  if (j.contains("repump")) p.repump = repump_from_json(j.at("repump"));
  pc.initial_state = detail::get_or<std::string>(j, "initial_state", pc.initial_state);
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return pc;
}

inline ScanConfig scan_from_json(const json& j) {
  detail::require_object(j, "scan");
  ScanConfig s;
  if (j.contains("detunings_hz")) {
    s.detunings_hz = detail::get_or<std::vector<double>>(j, "detunings_hz", {});
  } else {
    const double half = detail::get_or(j, "half_span_hz", 3.3e6);
    const int points = detail::get_or(j, "points", 161);
    if (points < 2) throw ConfigError("scan.points must be >= 2");
    s.detunings_hz = ScanConfig::symmetric_grid(half, points);
  }
  s.pulse_duration = detail::get_or(j, "pulse_duration_s", s.pulse_duration);
  s.decohered = detail::get_or(j, "decohered", s.decohered);
  if (j.contains("shots_per_point")) {
    const auto& v = j.at("shots_per_point");
    if (v.is_string()) {
      if (v.get<std::string>() != "analytic") throw ConfigError("scan.shots_per_point must be an integer or \"analytic\"");
      s.shots_per_point.reset();
    } else if (v.is_number_integer()) {
      s.shots_per_point = v.get<int>();
    } else {
      throw ConfigError("scan.shots_per_point must be an integer or \"analytic\"");
    }
  }
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

inline ReadoutModel readout_from_json(const json& j) {
  detail::require_object(j, "readout");
  ReadoutModel r;
  r.accuracy = detail::get_or(j, "accuracy", r.accuracy);
  r.background_p4 = detail::get_or(j, "background_p4", r.background_p4);
  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return r;
}

struct OracleConfig {
  int m = 0;
  std::vector<double> durations_s{1.0e-6};
  std::size_t seeds = 1024;
  /// When set, the oracle runs on a flat spectrum of this level instead of the synthesized one.
  std::optional<double> flat_level_dbm;
  double flat_half_span_hz = 10.0e6;
  double flat_step_hz = 50.0e3;
  bool hold_ground = true;
};

inline OracleConfig oracle_from_json(const json& j) {
  detail::require_object(j, "oracle");
  OracleConfig o;
  o.m = detail::get_or(j, "m", o.m);
  if (j.contains("durations_s")) o.durations_s = detail::get_or<std::vector<double>>(j, "durations_s", {});
  o.seeds = detail::get_or<std::size_t>(j, "seeds", o.seeds);
  if (j.contains("flat_level_dbm")) o.flat_level_dbm = detail::get_extended(j, "flat_level_dbm", 0.0);
  o.flat_half_span_hz = detail::get_or(j, "flat_half_span_hz", o.flat_half_span_hz);
  o.flat_step_hz = detail::get_or(j, "flat_step_hz", o.flat_step_hz);
  o.hold_ground = detail::get_or(j, "hold_ground", o.hold_ground);
  try {
    check_transition_m(o.m);
  } catch (const std::domain_error& e) {
    throw ConfigError(std::string("oracle: ") + e.what());
  }
  if (o.durations_s.empty()) throw ConfigError("oracle.durations_s must be nonempty");
  for (double t : o.durations_s)
    if (!(t > 0.0)) throw ConfigError("oracle.durations_s entries must be > 0");
  if (o.seeds < 1) throw ConfigError("oracle.seeds must be >= 1");
  if (!(o.flat_half_span_hz > 0.0) || !(o.flat_step_hz > 0.0)) throw ConfigError("oracle flat grid must be positive");
  return o;
}

/// Whole-run configuration. Every section is optional and defaults to the
/// documented values; `atom` must name exactly one of omega_b_hz / axial_field_gauss.
struct RunConfig {
  AtomParams atom;
  NoiseChainConfig noise_chain;
  RateCalibration calibration;
  ProtocolConfig protocol;
  ScanConfig scan;
  ReadoutModel readout;
  OracleConfig oracle;
  std::string output_dir = ".";
  std::optional<std::uint64_t> seed;
};

inline RunConfig run_config_from_json(const json& j) {
  detail::require_object(j, "config");
  RunConfig c;
  c.atom = j.contains("atom") ? atom_from_json(j.at("atom")) : AtomParams{};
  c.noise_chain = j.contains("noise_chain") ? noise_chain_from_json(j.at("noise_chain")) : NoiseChainConfig{};
  c.calibration = j.contains("calibration") ? calibration_from_json(j.at("calibration")) : RateCalibration{};
  c.protocol = j.contains("protocol") ? protocol_from_json(j.at("protocol")) : ProtocolConfig{};
  if (j.contains("scan")) {
    c.scan = scan_from_json(j.at("scan"));
  } else {
    c.scan.detunings_hz = ScanConfig::symmetric_grid();
  }
  c.readout = j.contains("readout") ? readout_from_json(j.at("readout")) : ReadoutModel{};
  c.oracle = j.contains("oracle") ? oracle_from_json(j.at("oracle")) : OracleConfig{};
  c.output_dir = detail::get_or<std::string>(j, "output_dir", c.output_dir);
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    if (!s.is_number_integer() || s.get<long long>() < 0) throw ConfigError("seed must be a non-negative integer");
    c.seed = s.get<std::uint64_t>();
  }
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error in " + path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(std::istream& in, const std::vector<std::string>& header) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty CSV input");
  if (split_csv_line(line) != header) {
    std::string expect;
    for (const auto& h : header) expect += (expect.empty() ? "" : ",") + h;
    throw ConfigError("unexpected CSV header, expected '" + expect + "'");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ConfigError("CSV row has wrong number of fields: " + line);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

inline void write_spectrum_csv(std::ostream& out, const PowerSpectrum& s) {
  out << "offset_hz,power_dbm\n";
  for (std::size_t i = 0; i < s.size(); ++i)
    out << csv_number(s.offsets_hz()[i]) << ',' << csv_number(s.power_dbm()[i]) << '\n';
}

inline PowerSpectrum read_spectrum_csv(std::istream& in, double ref_bandwidth_hz = 3000.0) {
  std::vector<double> f, p;
  for (const auto& row : detail::read_csv(in, {"offset_hz", "power_dbm"})) {
    f.push_back(parse_number(row[0]));
    p.push_back(parse_number(row[1]));
  }
  try {
    return {std::move(f), std::move(p), ref_bandwidth_hz};
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline void write_rates_csv(std::ostream& out, const RateTable& rates) {
  out << "m,gamma_per_us\n";
  for (int m = -3; m <= 3; ++m) out << m << ',' << csv_number(rates[transition_index(m)] * 1e-6) << '\n';
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "iteration,p3_target,total\n";
  for (const auto& r : trace) out << r.iteration << ',' << csv_number(r.p3_target) << ',' << csv_number(r.total) << '\n';
}

inline void write_scan_csv(std::ostream& out, const RamanScan& scan) {
  out << "delta_r_hz,p4,shots,successes\n";
  for (const auto& p : scan.points)
    out << csv_number(p.delta_r_hz) << ',' << csv_number(p.p4) << ',' << p.shots << ',' << p.successes << '\n';
}

inline RamanScan read_scan_csv(std::istream& in) {
  RamanScan scan;
  for (const auto& row : detail::read_csv(in, {"delta_r_hz", "p4", "shots", "successes"})) {
    ScanPoint pt;
    pt.delta_r_hz = parse_number(row[0]);
    pt.p4 = parse_number(row[1]);
    pt.shots = static_cast<int>(parse_number(row[2]));
    pt.successes = static_cast<int>(parse_number(row[3]));
    if (!(pt.p4 >= 0.0 && pt.p4 <= 1.0)) throw ConfigError("scan CSV: p4 outside [0, 1]");
    if (pt.shots < 0 || pt.successes < 0 || pt.successes > pt.shots)
      throw ConfigError("scan CSV: need 0 <= successes <= shots");
    // Sampled rows carry their own p4 = successes/shots.
    if (pt.shots > 0) pt.p4 = static_cast<double>(pt.successes) / pt.shots;
    scan.points.push_back(pt);
  }
  if (scan.points.empty()) throw ConfigError("scan CSV has no rows");
  return scan;
}

inline void write_model_csv(std::ostream& out, const FitModel& model, const std::vector<double>& detunings_hz) {
  out << "delta_r_hz,p4_model\n";
  for (double d : detunings_hz) out << csv_number(d) << ',' << csv_number(model_p4(kTwoPi * d, model)) << '\n';
}

// ---------------------------------------------------------------------------
// JSON documents

inline json state_to_json(const PopulationState& s) {
  std::vector<double> f3, f4;
  for (int m = -3; m <= 3; ++m) f3.push_back(s.p3(m));
  for (int m = -4; m <= 4; ++m) f4.push_back(s.p4(m));
  return {{"f3", f3}, {"f4", f4}, {"total", s.total()}};
}

inline PopulationState state_from_json(const json& j) {
  detail::require_object(j, "state");
  const auto f3 = detail::get_or<std::vector<double>>(j, "f3", {});
  const auto f4 = detail::get_or<std::vector<double>>(j, "f4", std::vector<double>(9, 0.0));
  if (f3.size() != 7 || f4.size() != 9) throw ConfigError("state: need f3[7] (m=-3..3) and f4[9] (m=-4..4)");
  PopulationState s;
  for (int m = -3; m <= 3; ++m) s[{3, m}] = f3[static_cast<std::size_t>(m + 3)];
  for (int m = -4; m <= 4; ++m) s[{4, m}] = f4[static_cast<std::size_t>(m + 4)];
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

inline json scan_metadata_to_json(const ScanMetadata& md, const ReadoutModel& readout) {
  return {{"atom", atom_to_json(md.params)},
          {"seed", md.seed},
          {"pulse_duration_s", md.pulse_duration},
          {"analytic", md.analytic},
          {"readout", {{"accuracy", readout.accuracy}, {"background_p4", readout.background_p4}}}};
}

inline json fit_result_to_json(const FitResult& r) {
  const auto& p = r.parameters;
  json pops = json::object(), errs = json::object();
  for (int m = -3; m <= 3; ++m) {
    pops[std::to_string(m)] = p.population(m);
    errs[std::to_string(m)] = detail::extended(r.std_errors[transition_index(m)]);
  }
  return {{"parameters",
           {{"populations", pops},
            {"omega_0_hz", p.Omega_0 / kTwoPi},
            {"omega_b_hz", p.omega_B / kTwoPi},
            {"p_b", p.p_b}}},
          {"std_errors",
           {{"populations", errs},
            {"omega_0_hz", detail::extended(r.std_errors[kOmega0Index] / kTwoPi)},
            {"omega_b_hz", detail::extended(r.std_errors[kOmegaBIndex] / kTwoPi)}}},
          {"population_sum", r.population_sum},
          {"population_sum_error", r.population_sum_error},
          {"residual_norm", r.residual_norm},
          {"converged", r.converged},
          {"ill_posed", r.ill_posed},
          {"iterations", r.iterations},
          {"message", r.message}};
}

/// JSON text with doubles printed at 17 significant digits.
inline std::string dump_json(const json& j, int indent = 2) {
  std::string out;
  auto emit = [&](auto&& self, const json& v, int depth) -> void {
    const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
    const std::string pad_close(static_cast<std::size_t>(indent * depth), ' ');
    switch (v.type()) {
      case json::value_t::object: {
        if (v.empty()) { out += "{}"; return; }
        out += "{\n";
        bool first = true;
        for (auto it = v.begin(); it != v.end(); ++it) {
          if (!first) out += ",\n";
          first = false;
          out += pad + json(it.key()).dump() + ": ";
          self(self, it.value(), depth + 1);
        }
        out += "\n" + pad_close + "}";
        return;
      }
      case json::value_t::array: {
        if (v.empty()) { out += "[]"; return; }
        out += "[\n";
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (i) out += ",\n";
          out += pad;
          self(self, v[i], depth + 1);
        }
        out += "\n" + pad_close + "]";
        return;
      }
      case json::value_t::number_float:
        out += std::isfinite(v.get<double>()) ? format_number(v.get<double>(), 17) : "null";
        return;
      default:
        out += v.dump();
    }
  };
  emit(emit, j, 0);
  out += "\n";
  return out;
}

/// Writes `content` to `path` through a temporary file so that a failed run
/// never leaves a partial output behind.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace zps

#endif  // ZPS_IO_HPP
