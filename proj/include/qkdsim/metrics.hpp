// Figures of merit over a completed run: block QBER series and histogram,
// duty cycle, bit rate, error-budget decomposition, and their exports.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qkdsim/compensation.hpp"
#include "qkdsim/detectors.hpp"

namespace qkdsim::metrics {

using json = nlohmann::json;

/// One sifted bit with ground truth attached by the simulator.
struct SiftedRecord {
  std::uint64_t clock_index = 0;
  std::uint8_t alice_bit = 0;
  std::uint8_t bob_bit = 0;
  detectors::Cause cause = detectors::Cause::kPhoton;
  double residual_deg = 0.0;
  bool operator==(const SiftedRecord&) const = default;
};

struct BlockStats {
  std::uint64_t block_index = 0;
  std::uint64_t block_size_bits = 5000;
  std::uint64_t bits = 0;
  std::uint64_t errors = 0;
  double qber = 0.0;
  bool partial = false;
  std::uint64_t first_clock_index = 0;
  std::uint64_t last_clock_index = 0;
};

inline std::vector<BlockStats> qber_series(std::span<const std::uint8_t> alice,
                                           std::span<const std::uint8_t> bob,
                                           std::uint64_t block_size = 5000,
                                           std::span<const std::uint64_t> clock_indices = {}) {
  if (alice.size() != bob.size()) throw std::invalid_argument("qber_series: key length mismatch");
  if (block_size == 0) throw std::invalid_argument("qber_series: block_size must be > 0");
  if (!clock_indices.empty() && clock_indices.size() != alice.size()) {
    throw std::invalid_argument("qber_series: index length mismatch");
  }
  std::vector<BlockStats> out;
  for (std::uint64_t start = 0; start < alice.size(); start += block_size) {
    const std::uint64_t end = std::min<std::uint64_t>(start + block_size, alice.size());
    BlockStats b;
    b.block_index = out.size();
    b.block_size_bits = block_size;
    b.bits = end - start;
    for (std::uint64_t i = start; i < end; ++i) b.errors += alice[i] != bob[i];
    b.qber = static_cast<double>(b.errors) / static_cast<double>(b.bits);
    b.partial = b.bits < block_size;
    if (!clock_indices.empty()) {
      b.first_clock_index = clock_indices[start];
      b.last_clock_index = clock_indices[end - 1];
    }
    out.push_back(b);
  }
  return out;
}

inline std::vector<BlockStats> qber_series(std::span<const SiftedRecord> records,
                                           std::uint64_t block_size = 5000) {
  std::vector<std::uint8_t> a, b;
  std::vector<std::uint64_t> idx;
  a.reserve(records.size());
  b.reserve(records.size());
  idx.reserve(records.size());
  for (const auto& r : records) {
    a.push_back(r.alice_bit);
    b.push_back(r.bob_bit);
    idx.push_back(r.clock_index);
  }
  return qber_series(a, b, block_size, idx);
}

/// Total mismatches over total bits.
inline double mean_qber(std::span<const BlockStats> series) {
  std::uint64_t bits = 0, errors = 0;
  for (const auto& b : series) {
    bits += b.bits;
    errors += b.errors;
  }
  return bits ? static_cast<double>(errors) / static_cast<double>(bits) : 0.0;
}

struct QberHistogram {
  double bin_width = 0.001;
  double upper = 0.03;
  // counts.back() is the overflow bin (qber >= upper).
  std::vector<std::uint64_t> counts = std::vector<std::uint64_t>(31, 0);
  bool operator==(const QberHistogram&) const = default;
};

/// 0.1 % bins over [0, 3 %) plus overflow. Partial blocks are skipped unless
/// asked for.
inline QberHistogram qber_histogram(std::span<const BlockStats> series, bool include_partial = false) {
  QberHistogram h;
  const std::uint64_t nbins = h.counts.size() - 1;
  for (const auto& b : series) {
    if (b.partial && !include_partial) continue;
    if (b.bits == 0) continue;
    // Integer arithmetic keeps bin edges exact: bin = floor(1000 * errors / bits).
    const std::uint64_t bin = b.errors * 1000 / b.bits;
    ++h.counts[std::min(bin, nbins)];
  }
  return h;
}

/// eta = 2 * sifted / photons received.
inline double duty_cycle(std::uint64_t sifted_bits, std::uint64_t photons_received) {
  if (photons_received == 0) throw std::domain_error("duty_cycle: no photons received");
  return 2.0 * static_cast<double>(sifted_bits) / static_cast<double>(photons_received);
}

struct ErrorBudget {
  double optics = 0.0;
  double phase = 0.0;
  double detector = 0.0;
  double residual_pp_deg = 0.0;
  double measured_qber = 0.0;
  std::uint64_t bits = 0;

  double total() const { return optics + phase + detector; }
  /// Binomial standard error of the measured QBER.
  double sigma() const {
    if (bits == 0) return 0.0;
    return std::sqrt(measured_qber * (1.0 - measured_qber) / static_cast<double>(bits));
  }
};

/// Splits the QBER into optical imperfection (1 - V) / 2, phase
/// mis-compensation from the residual spread seen by photon-caused bits,
/// and the error fraction contributed by dark counts and afterpulses.
inline ErrorBudget error_budget(std::span<const SiftedRecord> records, double visibility) {
  ErrorBudget e;
  e.optics = 0.5 * (1.0 - visibility);
  e.bits = records.size();
  if (records.empty()) return e;
  double sq = 0.0;
  std::uint64_t photon_bits = 0, errors = 0, detector_errors = 0;
  for (const auto& r : records) {
    const bool wrong = r.alice_bit != r.bob_bit;
    errors += wrong;
    if (r.cause == detectors::Cause::kPhoton) {
      sq += r.residual_deg * r.residual_deg;
      ++photon_bits;
    } else if (wrong) {
      ++detector_errors;
    }
  }
  const double n = static_cast<double>(records.size());
  e.residual_pp_deg = photon_bits ? compensation::equivalent_peak_to_peak(sq / photon_bits) : 0.0;
  e.phase = compensation::qber_phase(e.residual_pp_deg);
  e.detector = static_cast<double>(detector_errors) / n;
  e.measured_qber = static_cast<double>(errors) / n;
  return e;
}

struct DutyWindow {
  double t_start_s = 0.0;
  double t_end_s = 0.0;
  std::uint64_t photons_received = 0;
  std::uint64_t sifted_bits = 0;

  double duty() const { return photons_received ? duty_cycle(sifted_bits, photons_received) : 0.0; }
  double rate_bps() const {
    const double dt = t_end_s - t_start_s;
    return dt > 0.0 ? static_cast<double>(sifted_bits) / dt : 0.0;
  }
};

struct VoltageSample {
  double time_s = 0.0;
  double voltage_v = 0.0;
  bool reset = false;
};

struct ZoomSample {
  double time_s = 0.0;
  double voltage_v = 0.0;
  double phase_deg = 0.0;
  double residual_deg = 0.0;
};

struct RunSummary {
  double duration_s = 0.0;
  std::uint64_t clock_hz = 0;
  std::uint64_t seed = 0;
  std::uint64_t sifted_bits = 0;
  std::uint64_t photons_received = 0;
  std::uint64_t double_clicks = 0;
  std::uint64_t reported_detections = 0;
  double kept_fraction = 0.0;
  double mean_qber = 0.0;
  double duty_cycle = 0.0;
  double sifted_rate_bps = 0.0;
  std::uint64_t reset_count = 0;
  double suspended_time_s = 0.0;
  double session_start_s = 0.0;
  ErrorBudget budget;
  QberHistogram qber_histogram;
  std::optional<double> estimated_qber;
};

// Output formatting: six significant digits everywhere.

inline std::string fmt6(double v) {
  if (v == 0.0) return "0";  // avoids "-0"
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline double round6(double v) { return std::strtod(fmt6(v).c_str(), nullptr); }

inline json to_json(const RunSummary& s) {
  json j;
  j["duration_s"] = round6(s.duration_s);
  j["clock_hz"] = s.clock_hz;
  j["seed"] = s.seed;
  j["sifted_bits"] = s.sifted_bits;
  j["photons_received"] = s.photons_received;
  j["double_clicks"] = s.double_clicks;
  j["reported_detections"] = s.reported_detections;
  j["kept_fraction"] = round6(s.kept_fraction);
  j["mean_qber"] = round6(s.mean_qber);
  j["duty_cycle"] = round6(s.duty_cycle);
  j["sifted_rate_bps"] = round6(s.sifted_rate_bps);
  j["reset_count"] = s.reset_count;
  j["suspended_time_s"] = round6(s.suspended_time_s);
  j["session_start_s"] = round6(s.session_start_s);
  j["error_budget"] = {{"optics", round6(s.budget.optics)},
                       {"phase", round6(s.budget.phase)},
                       {"detector", round6(s.budget.detector)},
                       {"residual_pp_deg", round6(s.budget.residual_pp_deg)},
                       {"measured_qber", round6(s.budget.measured_qber)},
                       {"bits", s.budget.bits}};
  j["qber_histogram"] = {{"bin_width", round6(s.qber_histogram.bin_width)},
                         {"upper", round6(s.qber_histogram.upper)},
                         {"counts", s.qber_histogram.counts}};
  j["estimated_qber"] = s.estimated_qber ? json(round6(*s.estimated_qber)) : json(nullptr);
  return j;
}

inline RunSummary summary_from_json(const json& j) {
  RunSummary s;
  s.duration_s = j.at("duration_s").get<double>();
  s.clock_hz = j.at("clock_hz").get<std::uint64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.sifted_bits = j.at("sifted_bits").get<std::uint64_t>();
  s.photons_received = j.at("photons_received").get<std::uint64_t>();
  s.double_clicks = j.at("double_clicks").get<std::uint64_t>();
  s.reported_detections = j.at("reported_detections").get<std::uint64_t>();
  s.kept_fraction = j.at("kept_fraction").get<double>();
  s.mean_qber = j.at("mean_qber").get<double>();
  s.duty_cycle = j.at("duty_cycle").get<double>();
  s.sifted_rate_bps = j.at("sifted_rate_bps").get<double>();
  s.reset_count = j.at("reset_count").get<std::uint64_t>();
  s.suspended_time_s = j.at("suspended_time_s").get<double>();
  s.session_start_s = j.at("session_start_s").get<double>();
  const auto& b = j.at("error_budget");
  s.budget.optics = b.at("optics").get<double>();
  s.budget.phase = b.at("phase").get<double>();
  s.budget.detector = b.at("detector").get<double>();
  s.budget.residual_pp_deg = b.at("residual_pp_deg").get<double>();
  s.budget.measured_qber = b.at("measured_qber").get<double>();
  s.budget.bits = b.at("bits").get<std::uint64_t>();
  const auto& h = j.at("qber_histogram");
  s.qber_histogram.bin_width = h.at("bin_width").get<double>();
  s.qber_histogram.upper = h.at("upper").get<double>();
  s.qber_histogram.counts = h.at("counts").get<std::vector<std::uint64_t>>();
  if (!j.at("estimated_qber").is_null()) s.estimated_qber = j.at("estimated_qber").get<double>();
  return s;
}

class ExportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Format { kCsv, kJson };

/// Row-oriented table written either as CSV or as a JSON array of objects.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;  // pre-formatted cells

  void write(const std::filesystem::path& path, Format format) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ExportError("cannot open " + path.string() + " for writing");
    if (format == Format::kCsv) {
      for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
      out << '\n';
      for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << '\n';
      }
    } else {
      json arr = json::array();
      for (const auto& r : rows) {
        json o = json::object();
        for (std::size_t i = 0; i < r.size(); ++i) o[columns[i]] = json::parse(r[i]);
        arr.push_back(std::move(o));
      }
      out << arr.dump(1) << '\n';
    }
    if (!out) throw ExportError("write failed: " + path.string());
  }
};

/// Reads a CSV written by Table::write; returns header and rows.
inline Table read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ExportError("cannot open " + path.string());
  Table t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  if (!std::getline(in, line)) throw ExportError("empty csv: " + path.string());
  t.columns = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.columns.size()) throw ExportError("ragged csv row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline std::string fmt_u(std::uint64_t v) { return std::to_string(v); }

inline Table qber_table(std::span<const BlockStats> series) {
  Table t{{"block_index", "first_clock_index", "last_clock_index", "bits", "errors", "qber", "partial"}, {}};
  for (const auto& b : series) {
    t.rows.push_back({fmt_u(b.block_index), fmt_u(b.first_clock_index), fmt_u(b.last_clock_index),
                      fmt_u(b.bits), fmt_u(b.errors), fmt6(b.qber), b.partial ? "1" : "0"});
  }
  return t;
}

inline Table voltage_table(std::span<const VoltageSample> trace) {
  Table t{{"time_s", "voltage_v", "reset_flag"}, {}};
  for (const auto& v : trace) t.rows.push_back({fmt6(v.time_s), fmt6(v.voltage_v), v.reset ? "1" : "0"});
  return t;
}

inline Table duty_table(std::span<const DutyWindow> windows) {
  Table t{{"t_start_s", "t_end_s", "photons_received", "sifted_bits", "duty_cycle", "sifted_rate_bps"}, {}};
  for (const auto& w : windows) {
    t.rows.push_back({fmt6(w.t_start_s), fmt6(w.t_end_s), fmt_u(w.photons_received),
                      fmt_u(w.sifted_bits), fmt6(w.duty()), fmt6(w.rate_bps())});
  }
  return t;
}

inline Table zoom_table(std::span<const ZoomSample> zoom) {
  Table t{{"time_s", "voltage_v", "phase_deg", "residual_deg"}, {}};
  for (const auto& z : zoom) {
    t.rows.push_back({fmt6(z.time_s), fmt6(z.voltage_v), fmt6(z.phase_deg), fmt6(z.residual_deg)});
  }
  return t;
}

inline Table sifted_table(std::span<const SiftedRecord> records) {
  Table t{{"clock_index", "alice_bit", "bob_bit", "cause", "residual_deg"}, {}};
  for (const auto& r : records) {
    t.rows.push_back({fmt_u(r.clock_index), fmt_u(r.alice_bit), fmt_u(r.bob_bit),
                      "\"" + std::string(detectors::to_string(r.cause)) + "\"", fmt6(r.residual_deg)});
  }
  return t;
}

inline std::vector<SiftedRecord> sifted_from_table(const Table& t) {
  std::vector<SiftedRecord> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    SiftedRecord s;
    s.clock_index = std::stoull(r.at(0));
    s.alice_bit = static_cast<std::uint8_t>(std::stoul(r.at(1)));
    s.bob_bit = static_cast<std::uint8_t>(std::stoul(r.at(2)));
    std::string cause = r.at(3);
    if (cause.size() >= 2 && cause.front() == '"') cause = cause.substr(1, cause.size() - 2);
    const auto c = detectors::cause_from_string(cause);
    if (!c) throw ExportError("unknown cause '" + cause + "'");
    s.cause = *c;
    s.residual_deg = std::stod(r.at(4));
    out.push_back(s);
  }
  return out;
}

inline std::vector<DutyWindow> duty_from_table(const Table& t) {
  std::vector<DutyWindow> out;
  for (const auto& r : t.rows) {
    out.push_back({std::stod(r.at(0)), std::stod(r.at(1)), std::stoull(r.at(2)), std::stoull(r.at(3))});
  }
  return out;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ExportError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw ExportError("write failed: " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ExportError("cannot open " + path.string());
  return json::parse(in);
}

}  // namespace qkdsim::metrics
