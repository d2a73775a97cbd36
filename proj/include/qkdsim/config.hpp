// Run configuration: a single JSON document, strictly checked.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qkdsim/compensation.hpp"
#include "qkdsim/detectors.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/transport.hpp"

namespace qkdsim::config {

using json = nlohmann::json;

enum class Mode { kCharacterize, kProtocolEstimate };

struct SiftingConfig {
  std::uint64_t batch_size = 4096;
  // Fraction of kept bits disclosed for the in-protocol QBER estimate.
  // Only used in protocol-estimate mode.
  double sample_fraction = 0.1;
  std::uint64_t block_size_bits = 5000;
};

struct ExportConfig {
  double duty_window_s = 10.0;
  double zoom_start_s = 30.0;
  double zoom_length_s = 2.0;
  std::string format = "csv";
};

struct RunConfig {
  std::uint64_t clock_hz = 250000;
  double duration_s = 120.0;
  std::uint64_t seed = 1;
  std::string transport = "inproc";
  Mode mode = Mode::kCharacterize;
  double physics_step_s = 1e-3;
  protocol::SourceConfig source;
  physics::ChannelConfig channel;
  physics::InterferometerConfig interferometer;
  detectors::ApdConfig apd0;
  detectors::ApdConfig apd1;
  detectors::ApdConfig apd2{0.10, 2e-5, 0.0, 4, 0.5};
  compensation::StretcherConfig stretcher;
  compensation::WalkerConfig polarization;
  SiftingConfig sifting;
  ExportConfig exports;
};

struct Violation {
  std::string path;
  std::string message;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<Violation> v)
      : std::runtime_error(describe(v)), violations_(std::move(v)) {}
  const std::vector<Violation>& violations() const { return violations_; }

  static std::string describe(const std::vector<Violation>& v) {
    std::string s = "invalid config:";
    for (const auto& x : v) s += "\n  " + x.path + ": " + x.message;
    return s;
  }

 private:
  std::vector<Violation> violations_;
};

inline const char* to_string(Mode m) {
  return m == Mode::kCharacterize ? "characterize" : "protocol-estimate";
}

namespace detail {

/// Reads known keys from one JSON object and reports the rest as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<Violation>& out)
      : j_(j), path_(std::move(path)), out_(out) {
    if (!j_.is_object()) out_.push_back({path_.empty() ? "<root>" : path_, "expected an object"});
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
            throw std::invalid_argument("expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      dst = v.get<T>();
    } catch (const std::exception& e) {
      out_.push_back({child(key), e.what()});
    }
  }

  const json* section(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) out_.push_back({child(k), "unknown key"});
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<Violation>& out_;
  std::set<std::string> seen_;
};

inline void read_apd(const json& j, const std::string& path, detectors::ApdConfig& a,
                     std::vector<Violation>& out) {
  ObjectReader r(j, path, out);
  r.read("efficiency", a.efficiency);
  r.read("dark_prob_per_gate", a.dark_prob_per_gate);
  r.read("afterpulse_prob", a.afterpulse_prob);
  r.read("afterpulse_decay_gates", a.afterpulse_decay_gates);
  r.read("afterpulse_decay_ratio", a.afterpulse_decay_ratio);
  r.finish();
}

inline json apd_json(const detectors::ApdConfig& a) {
  return {{"efficiency", a.efficiency},
          {"dark_prob_per_gate", a.dark_prob_per_gate},
          {"afterpulse_prob", a.afterpulse_prob},
          {"afterpulse_decay_gates", a.afterpulse_decay_gates},
          {"afterpulse_decay_ratio", a.afterpulse_decay_ratio}};
}

}  // namespace detail

/// Overlays a JSON document on the defaults. Type errors and unknown keys
/// are collected; value checks are left to validate().
inline RunConfig parse_config(const json& j, std::vector<Violation>& out) {
  RunConfig c;
  detail::ObjectReader root(j, "", out);
  root.read("clock_hz", c.clock_hz);
  root.read("duration_s", c.duration_s);
  root.read("seed", c.seed);
  root.read("transport", c.transport);
  std::string mode = to_string(c.mode);
  root.read("mode", mode);
  if (mode == "characterize") {
    c.mode = Mode::kCharacterize;
  } else if (mode == "protocol-estimate") {
    c.mode = Mode::kProtocolEstimate;
  } else {
    out.push_back({"mode", "must be 'characterize' or 'protocol-estimate'"});
  }
  root.read("physics_step_s", c.physics_step_s);

  if (const json* s = root.section("source")) {
    detail::ObjectReader r(*s, "source", out);
    r.read("signal_mean_photons", c.source.signal_mean_photons);
    r.read("reference_mean_photons", c.source.reference_mean_photons);
    r.read("delay_ns", c.source.delay_ns);
    r.finish();
  }
  if (const json* s = root.section("channel")) {
    detail::ObjectReader r(*s, "channel", out);
    auto& ch = c.channel;
    r.read("length_km", ch.length_km);
    r.read("loss_db", ch.loss_db);
    r.read("drift_rate_deg_per_s", ch.drift_rate_deg_per_s);
    r.read("drift_diffusion_time_s", ch.drift_diffusion_time_s);
    r.read("drift_reversal_rate_per_hour", ch.drift_reversal_rate_per_hour);
    r.read("shock_rate_per_hour", ch.shock_rate_per_hour);
    r.read("shock_magnitude_deg", ch.shock_magnitude_deg);
    r.read("pol_drift_rate", ch.pol_drift_rate);
    r.read("pol_axis_wander", ch.pol_axis_wander);
    r.read("initial_phase_offset_deg", ch.initial_phase_offset_deg);
    r.finish();
  }
  if (const json* s = root.section("interferometer")) {
    detail::ObjectReader r(*s, "interferometer", out);
    r.read("visibility", c.interferometer.visibility);
    r.read("interfering_fraction", c.interferometer.interfering_fraction);
    r.read("reference_split", c.interferometer.reference_split);
    r.finish();
  }
  if (const json* s = root.section("detectors")) {
    detail::ObjectReader r(*s, "detectors", out);
    if (const json* a = r.section("apd0")) detail::read_apd(*a, "detectors.apd0", c.apd0, out);
    if (const json* a = r.section("apd1")) detail::read_apd(*a, "detectors.apd1", c.apd1, out);
    if (const json* a = r.section("apd2")) detail::read_apd(*a, "detectors.apd2", c.apd2, out);
    r.finish();
  }
  if (const json* s = root.section("stretcher")) {
    detail::ObjectReader r(*s, "stretcher", out);
    auto& st = c.stretcher;
    r.read("enabled", st.enabled);
    r.read("v_min", st.v_min);
    r.read("v_max", st.v_max);
    r.read("coeff_deg_per_volt", st.coeff_deg_per_volt);
    r.read("dither_amplitude_v", st.dither_amplitude_v);
    r.read("dither_period_s", st.dither_period_s);
    r.read("integration_window_s", st.integration_window_s);
    r.read("gain", st.gain);
    r.read("integral_gain", st.integral_gain);
    r.read("capture_deg", st.capture_deg);
    r.read("scan_points", st.scan_points);
    r.read("sift_gate_deg", st.sift_gate_deg);
    r.finish();
  }
  if (const json* s = root.section("polarization")) {
    detail::ObjectReader r(*s, "polarization", out);
    r.read("enabled", c.polarization.enabled);
    r.read("step_size", c.polarization.step_size);
    r.read("epoch_s", c.polarization.epoch_s);
    r.finish();
  }
  if (const json* s = root.section("sifting")) {
    detail::ObjectReader r(*s, "sifting", out);
    r.read("batch_size", c.sifting.batch_size);
    r.read("sample_fraction", c.sifting.sample_fraction);
    r.read("block_size_bits", c.sifting.block_size_bits);
    r.finish();
  }
  if (const json* s = root.section("export")) {
    detail::ObjectReader r(*s, "export", out);
    r.read("duty_window_s", c.exports.duty_window_s);
    r.read("zoom_start_s", c.exports.zoom_start_s);
    r.read("zoom_length_s", c.exports.zoom_length_s);
    r.read("format", c.exports.format);
    r.finish();
  }
  root.finish();
  return c;
}

inline std::vector<Violation> validate(const RunConfig& c) {
  std::vector<Violation> v;
  auto finite = [](double x) { return std::isfinite(x); };
  auto check = [&](bool ok, const std::string& path, const std::string& msg) {
    if (!ok) v.push_back({path, msg});
  };
  auto unit = [&](double x, const std::string& path) {
    check(finite(x) && x >= 0.0 && x <= 1.0, path, "must lie in [0, 1]");
  };
  auto nonneg = [&](double x, const std::string& path) {
    check(finite(x) && x >= 0.0, path, "must be finite and >= 0");
  };
  auto positive = [&](double x, const std::string& path) {
    check(finite(x) && x > 0.0, path, "must be finite and > 0");
  };

  check(c.clock_hz > 0, "clock_hz", "must be > 0");
  positive(c.duration_s, "duration_s");
  positive(c.physics_step_s, "physics_step_s");
  if (c.clock_hz > 0 && finite(c.physics_step_s)) {
    check(c.physics_step_s * static_cast<double>(c.clock_hz) >= 1.0, "physics_step_s",
          "must span at least one clock period");
  }
  check(protocol::parse_transport(c.transport).has_value(), "transport",
        "must be 'inproc' or 'tcp:<host>:<port>'");

  nonneg(c.source.signal_mean_photons, "source.signal_mean_photons");
  nonneg(c.source.reference_mean_photons, "source.reference_mean_photons");
  nonneg(c.source.delay_ns, "source.delay_ns");

  const auto& ch = c.channel;
  nonneg(ch.length_km, "channel.length_km");
  nonneg(ch.loss_db, "channel.loss_db");
  nonneg(ch.drift_rate_deg_per_s, "channel.drift_rate_deg_per_s");
  nonneg(ch.drift_diffusion_time_s, "channel.drift_diffusion_time_s");
  nonneg(ch.drift_reversal_rate_per_hour, "channel.drift_reversal_rate_per_hour");
  nonneg(ch.shock_rate_per_hour, "channel.shock_rate_per_hour");
  nonneg(ch.shock_magnitude_deg, "channel.shock_magnitude_deg");
  nonneg(ch.pol_drift_rate, "channel.pol_drift_rate");
  nonneg(ch.pol_axis_wander, "channel.pol_axis_wander");
  check(finite(ch.initial_phase_offset_deg), "channel.initial_phase_offset_deg", "must be finite");

  unit(c.interferometer.visibility, "interferometer.visibility");
  unit(c.interferometer.interfering_fraction, "interferometer.interfering_fraction");
  unit(c.interferometer.reference_split, "interferometer.reference_split");

  for (const auto& [name, a] : {std::pair{"apd0", &c.apd0}, {"apd1", &c.apd1}, {"apd2", &c.apd2}}) {
    const std::string p = std::string("detectors.") + name + ".";
    unit(a->efficiency, p + "efficiency");
    unit(a->dark_prob_per_gate, p + "dark_prob_per_gate");
    unit(a->afterpulse_prob, p + "afterpulse_prob");
    check(a->afterpulse_decay_gates > 0, p + "afterpulse_decay_gates", "must be > 0");
    unit(a->afterpulse_decay_ratio, p + "afterpulse_decay_ratio");
  }

  const auto& st = c.stretcher;
  check(finite(st.v_min) && st.v_min <= 0.0, "stretcher.v_min", "must be finite and <= 0");
  check(finite(st.v_max) && st.v_max >= 0.0, "stretcher.v_max", "must be finite and >= 0");
  positive(st.coeff_deg_per_volt, "stretcher.coeff_deg_per_volt");
  positive(st.integration_window_s, "stretcher.integration_window_s");
  positive(st.dither_period_s, "stretcher.dither_period_s");
  if (st.enabled) {
    positive(st.dither_amplitude_v, "stretcher.dither_amplitude_v");
    if (finite(st.v_min) && finite(st.v_max) && finite(st.coeff_deg_per_volt) &&
        st.coeff_deg_per_volt > 0.0) {
      check(st.v_max - st.v_min - 2.0 * st.dither_amplitude_v >= 360.0 / st.coeff_deg_per_volt,
            "stretcher.v_max", "usable range must cover one fringe");
    }
    if (st.integration_window_s > 0.0 && st.dither_period_s > 0.0) {
      const double periods = st.integration_window_s / st.dither_period_s;
      check(std::abs(periods - std::round(periods)) < 1e-6 && std::round(periods) >= 1.0,
            "stretcher.integration_window_s", "must be a whole number of dither periods");
    }
    check(finite(st.gain) && st.gain > 0.0 && st.gain < 2.0, "stretcher.gain", "must lie in (0, 2)");
    nonneg(st.integral_gain, "stretcher.integral_gain");
    positive(st.capture_deg, "stretcher.capture_deg");
    check(st.scan_points >= 4, "stretcher.scan_points", "must be >= 4");
  }
  positive(st.sift_gate_deg, "stretcher.sift_gate_deg");

  positive(c.polarization.step_size, "polarization.step_size");
  positive(c.polarization.epoch_s, "polarization.epoch_s");

  check(c.sifting.batch_size > 0, "sifting.batch_size", "must be > 0");
  check(finite(c.sifting.sample_fraction) && c.sifting.sample_fraction >= 0.0 &&
            c.sifting.sample_fraction < 1.0,
        "sifting.sample_fraction", "must lie in [0, 1)");
  check(c.sifting.block_size_bits > 0, "sifting.block_size_bits", "must be > 0");

  positive(c.exports.duty_window_s, "export.duty_window_s");
  nonneg(c.exports.zoom_start_s, "export.zoom_start_s");
  nonneg(c.exports.zoom_length_s, "export.zoom_length_s");
  check(c.exports.format == "csv" || c.exports.format == "json", "export.format",
        "must be 'csv' or 'json'");
  return v;
}

/// Parses and validates; throws ConfigError listing every violation.
inline RunConfig from_json(const json& j) {
  std::vector<Violation> out;
  RunConfig c = parse_config(j, out);
  for (auto& v : validate(c)) out.push_back(std::move(v));
  if (!out.empty()) throw ConfigError(std::move(out));
  return c;
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({{path.string(), "cannot open file"}});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({{path.string(), std::string("malformed JSON: ") + e.what()}});
  }
  return from_json(j);
}

inline json to_json(const RunConfig& c) {
  const auto& ch = c.channel;
  const auto& st = c.stretcher;
  return {
      {"clock_hz", c.clock_hz},
      {"duration_s", c.duration_s},
      {"seed", c.seed},
      {"transport", c.transport},
      {"mode", to_string(c.mode)},
      {"physics_step_s", c.physics_step_s},
      {"source",
       {{"signal_mean_photons", c.source.signal_mean_photons},
        {"reference_mean_photons", c.source.reference_mean_photons},
        {"delay_ns", c.source.delay_ns}}},
      {"channel",
       {{"length_km", ch.length_km},
        {"loss_db", ch.loss_db},
        {"drift_rate_deg_per_s", ch.drift_rate_deg_per_s},
        {"drift_diffusion_time_s", ch.drift_diffusion_time_s},
        {"drift_reversal_rate_per_hour", ch.drift_reversal_rate_per_hour},
        {"shock_rate_per_hour", ch.shock_rate_per_hour},
        {"shock_magnitude_deg", ch.shock_magnitude_deg},
        {"pol_drift_rate", ch.pol_drift_rate},
        {"pol_axis_wander", ch.pol_axis_wander},
        {"initial_phase_offset_deg", ch.initial_phase_offset_deg}}},
      {"interferometer",
       {{"visibility", c.interferometer.visibility},
        {"interfering_fraction", c.interferometer.interfering_fraction},
        {"reference_split", c.interferometer.reference_split}}},
      {"detectors",
       {{"apd0", detail::apd_json(c.apd0)},
        {"apd1", detail::apd_json(c.apd1)},
        {"apd2", detail::apd_json(c.apd2)}}},
      {"stretcher",
       {{"enabled", st.enabled},
        {"v_min", st.v_min},
        {"v_max", st.v_max},
        {"coeff_deg_per_volt", st.coeff_deg_per_volt},
        {"dither_amplitude_v", st.dither_amplitude_v},
        {"dither_period_s", st.dither_period_s},
        {"integration_window_s", st.integration_window_s},
        {"gain", st.gain},
        {"integral_gain", st.integral_gain},
        {"capture_deg", st.capture_deg},
        {"scan_points", st.scan_points},
        {"sift_gate_deg", st.sift_gate_deg}}},
      {"polarization",
       {{"enabled", c.polarization.enabled},
        {"step_size", c.polarization.step_size},
        {"epoch_s", c.polarization.epoch_s}}},
      {"sifting",
       {{"batch_size", c.sifting.batch_size},
        {"sample_fraction", c.sifting.sample_fraction},
        {"block_size_bits", c.sifting.block_size_bits}}},
      {"export",
       {{"duty_window_s", c.exports.duty_window_s},
        {"zoom_start_s", c.exports.zoom_start_s},
        {"zoom_length_s", c.exports.zoom_length_s},
        {"format", c.exports.format}}},
  };
}

}  // namespace qkdsim::config
