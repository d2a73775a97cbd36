// Discrete-event run of one QKD session: physics, detectors, feedback loops
// and the sifting protocol, advanced gate by gate on simulated time.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "qkdsim/compensation.hpp"
#include "qkdsim/config.hpp"
#include "qkdsim/detectors.hpp"
#include "qkdsim/metrics.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/rng.hpp"
#include "qkdsim/sifting.hpp"
#include "qkdsim/transport.hpp"

namespace qkdsim {

struct RunOptions {
  bool capture_wire = false;
};

struct RunResult {
  metrics::RunSummary summary;
  std::vector<metrics::BlockStats> series;
  std::vector<metrics::VoltageSample> voltage;
  std::vector<metrics::DutyWindow> duty;
  std::vector<metrics::ZoomSample> zoom;
  std::vector<metrics::SiftedRecord> sifted;
  // Lock error of the dither-free operating point, one sample per physics step.
  std::vector<float> lock_residual_deg;
  double physics_step_s = 0.0;
  std::vector<double> reset_times_s;
  protocol::SiftedKey alice_key;
  protocol::SiftedKey bob_key;
  std::vector<std::uint8_t> bob_wire;
};

namespace detail {

// Source of Bob's basis choices, one bit per gate.
class BitPool {
 public:
  explicit BitPool(Rng& rng) : rng_(rng) {}
  unsigned next() {
    if (left_ == 0) {
      word_ = rng_.bits();
      left_ = 64;
    }
    const unsigned b = static_cast<unsigned>(word_ & 1U);
    word_ >>= 1;
    --left_;
    return b;
  }

 private:
  Rng& rng_;
  std::uint64_t word_ = 0;
  int left_ = 0;
};

struct Diagnostic {
  std::uint64_t clock_index;
  detectors::Cause cause;
  double residual_deg;
};

}  // namespace detail

inline RunResult run(const config::RunConfig& cfg, const RunOptions& opts = {}) {
  using namespace qkdsim::protocol;
  using detectors::Apd;
  using detectors::DetectorId;

  if (auto v = config::validate(cfg); !v.empty()) throw config::ConfigError(std::move(v));
  const TransportSpec transport = *parse_transport(cfg.transport);

  // Substreams.
  Rng drift_rng(cfg.seed, "channel");
  Rng basis_rng(cfg.seed, "bob.basis");
  Rng signal_rng(cfg.seed, "detectors.signal");
  Rng reference_rng(cfg.seed, "detectors.reference");
  const CounterRng alice_rng(cfg.seed, "alice.prepare");
  ::qkdsim::detail::BitPool bob_bits(basis_rng);

  // Protocol parties and the channel between them.
  const bool estimate = cfg.mode == config::Mode::kProtocolEstimate && cfg.sifting.sample_fraction > 0.0;
  AliceEndpoint alice(alice_rng, estimate ? cfg.sifting.sample_fraction : 0.0,
                      substream_seed(cfg.seed, "alice.sample"));
  BobEndpoint bob(cfg.sifting.batch_size, estimate);
  std::unique_ptr<AliceTcpServer> server;
  std::unique_ptr<Link> link;
  if (transport.kind == TransportSpec::Kind::kTcp) {
    server = std::make_unique<AliceTcpServer>(alice, transport.host, transport.port);
    link = std::make_unique<TcpLink>(transport.host, server->port());
  } else {
    link = std::make_unique<InprocLink>(alice);
  }
  RunResult result;
  BobSession session(bob, *link, opts.capture_wire ? &result.bob_wire : nullptr);

  // Timing.
  const double clock = static_cast<double>(cfg.clock_hz);
  const double gate_dt = 1.0 / clock;
  const auto gates_for = [&](double seconds) {
    return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(seconds * clock)));
  };
  const std::uint64_t total_gates = gates_for(cfg.duration_s);
  const std::uint64_t step_gates = gates_for(cfg.physics_step_s);
  const std::uint64_t epoch_gates = gates_for(cfg.stretcher.integration_window_s);
  const std::uint64_t walker_gates = gates_for(cfg.polarization.epoch_s);
  const std::uint64_t duty_gates = gates_for(cfg.exports.duty_window_s);
  const double zoom_begin = cfg.exports.zoom_start_s;
  const double zoom_end = zoom_begin + cfg.exports.zoom_length_s;
  result.physics_step_s = static_cast<double>(step_gates) * gate_dt;

  // Optics.
  const double visibility = cfg.interferometer.visibility;
  const double transmit = physics::transmittance(cfg.channel.loss_db);
  const double signal_base =
      cfg.source.signal_mean_photons * transmit * cfg.interferometer.interfering_fraction;
  const double reference_base = cfg.source.reference_mean_photons * transmit *
                                cfg.interferometer.interfering_fraction *
                                cfg.interferometer.reference_split;

  // Feedback.
  const auto& st = cfg.stretcher;
  compensation::StretcherController stretcher(st);
  compensation::PolarizationWalker walker(cfg.polarization);
  const double coeff = st.coeff_deg_per_volt;
  const double dither_v = st.enabled ? st.dither_amplitude_v : 0.0;
  double v_center = stretcher.voltage();

  physics::DriftState drift = physics::initial_drift_state(cfg.channel, drift_rng);
  double coupling = physics::polarization_coupling(drift, walker.axes());

  Apd apd0(cfg.apd0, DetectorId::kApd0);
  Apd apd1(cfg.apd1, DetectorId::kApd1);
  Apd apd2(cfg.apd2, DetectorId::kApd2);

  // Accumulators.
  std::uint64_t ref_upper = 0, ref_lower = 0, gates_upper = 0, gates_lower = 0;
  std::uint64_t epoch_signal = 0, walker_signal = 0;
  std::uint64_t photons_received = 0, double_clicks = 0;
  metrics::DutyWindow window{0.0, 0.0, 0, 0};
  std::vector<::qkdsim::detail::Diagnostic> diagnostics;
  bool established = false;
  bool suspended = true;
  std::uint64_t suspended_steps = 0;

  for (std::uint64_t i = 0; i < total_gates; ++i) {
    const double t = static_cast<double>(i) * gate_dt;

    if (i % step_gates == 0) {
      if (i > 0) {
        drift = physics::advance_drift(drift, cfg.channel, result.physics_step_s, drift_rng);
        if (cfg.channel.pol_drift_rate > 0.0) coupling = physics::polarization_coupling(drift, walker.axes());
      }
      const double lock_error = physics::wrap_deg(drift.phase_offset_deg - coeff * v_center);
      result.lock_residual_deg.push_back(static_cast<float>(lock_error));
      if (!established && !stretcher.acquiring()) {
        // The session opens once the start-up scan has locked.
        established = true;
        suspended = false;
        session.start(i);
        result.summary.session_start_s = t;
      }
      if (established) {
        const bool now = stretcher.acquiring() || std::abs(lock_error) > st.sift_gate_deg;
        if (now != suspended) {
          session.control(now ? SessionCode::kSuspend : SessionCode::kResume, i);
          suspended = now;
        }
        suspended_steps += suspended;
      }
    }

    const double dither = dither_v > 0.0 ? compensation::triangle_wave(t, st.dither_period_s) : 0.0;
    const double v_applied = v_center + dither_v * dither;
    const double residual = physics::wrap_deg(drift.phase_offset_deg - coeff * v_applied);

    // Signal pulse.
    const QubitPrep prep = alice_prepare(alice_rng, i);
    const Basis bob_basis = bob_bits.next() ? Basis::kX : Basis::kZ;
    const MeasureOutcome m = bob_measure(prep.phase_deg, bob_basis, residual, signal_base * coupling,
                                         visibility, apd0, apd1, signal_rng, i);
    const unsigned clicks = m.apd0.has_value() + m.apd1.has_value();
    epoch_signal += clicks;
    walker_signal += clicks;
    if (m.single_click() && established) {
      ++photons_received;
      ++window.photons_received;
      if (!suspended) {
        diagnostics.push_back({i, m.cause(), metrics::round6(residual)});
        session.detection(i, bob_basis, m.bit());
      }
    } else if (m.double_click() && established) {
      ++double_clicks;
    }

    // Reference pulse, unmodulated, on the port that is dark at zero residual.
    const double p_dark_port = physics::interference_probabilities(residual, visibility).second;
    const bool ref_click = apd2.gate(reference_base * coupling * p_dark_port, reference_rng, i).has_value();
    if (dither > 0.0) {
      ++gates_upper;
      ref_upper += ref_click;
    } else {
      ++gates_lower;
      ref_lower += ref_click;
    }

    if (i % step_gates == 0 && t >= zoom_begin && t < zoom_end) {
      result.zoom.push_back({t, v_applied, coeff * v_applied, residual});
    }

    const std::uint64_t done = i + 1;
    const double t_end = static_cast<double>(done) * gate_dt;
    if (done % epoch_gates == 0) {
      const double w = static_cast<double>(epoch_gates) * gate_dt;
      compensation::FeedbackSample s;
      s.window_s = w;
      s.apd2_rate = static_cast<double>(ref_upper + ref_lower) / w;
      s.apd2_rate_upper = gates_upper ? static_cast<double>(ref_upper) / (gates_upper * gate_dt) : 0.0;
      s.apd2_rate_lower = gates_lower ? static_cast<double>(ref_lower) / (gates_lower * gate_dt) : 0.0;
      s.signal_rate = static_cast<double>(epoch_signal) / w;
      const auto step = stretcher.step(s);
      v_center = step.voltage;
      if (step.reset) result.reset_times_s.push_back(t_end);
      result.voltage.push_back({t_end, v_center, step.reset});
      ref_upper = ref_lower = gates_upper = gates_lower = epoch_signal = 0;
    }
    if (cfg.polarization.enabled && done % walker_gates == 0) {
      compensation::FeedbackSample s;
      s.window_s = static_cast<double>(walker_gates) * gate_dt;
      s.signal_rate = static_cast<double>(walker_signal) / s.window_s;
      walker.walk(s);
      coupling = physics::polarization_coupling(drift, walker.axes());
      walker_signal = 0;
    }
    if (done % duty_gates == 0 || done == total_gates) {
      window.t_end_s = t_end;
      result.duty.push_back(window);
      window = {t_end, t_end, 0, 0};
    }
  }
  if (!established) session.start(total_gates);
  session.finish(total_gates);
  if (server) server->join();

  // Both parties' keys must be index-aligned.
  result.alice_key = alice.key();
  result.bob_key = bob.key();
  if (result.alice_key.indices != result.bob_key.indices) {
    throw ProtocolError("sifted keys are not index-aligned");
  }

  // Attach ground truth to every sifted bit.
  const auto& keys = result.bob_key;
  result.sifted.reserve(keys.size());
  std::size_t d = 0;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    while (d < diagnostics.size() && diagnostics[d].clock_index < keys.indices[k]) ++d;
    metrics::SiftedRecord r;
    r.clock_index = keys.indices[k];
    r.alice_bit = result.alice_key.bits[k];
    r.bob_bit = keys.bits[k];
    if (d < diagnostics.size() && diagnostics[d].clock_index == r.clock_index) {
      r.cause = diagnostics[d].cause;
      r.residual_deg = diagnostics[d].residual_deg;
    }
    result.sifted.push_back(r);
  }
  for (const auto& r : result.sifted) {
    const auto w = static_cast<std::size_t>(r.clock_index / duty_gates);
    if (w < result.duty.size()) ++result.duty[w].sifted_bits;
  }

  auto& s = result.summary;
  s.duration_s = static_cast<double>(total_gates) * gate_dt;
  s.clock_hz = cfg.clock_hz;
  s.seed = cfg.seed;
  s.sifted_bits = result.sifted.size() + bob.sample_bits();
  s.photons_received = photons_received;
  s.double_clicks = double_clicks;
  s.reported_detections = bob.detections_reported();
  s.kept_fraction = s.reported_detections
                        ? static_cast<double>(s.sifted_bits) / static_cast<double>(s.reported_detections)
                        : 0.0;
  result.series = metrics::qber_series(result.sifted, cfg.sifting.block_size_bits);
  s.mean_qber = metrics::mean_qber(result.series);
  s.duty_cycle = photons_received ? metrics::duty_cycle(s.sifted_bits, photons_received) : 0.0;
  s.sifted_rate_bps = static_cast<double>(s.sifted_bits) / s.duration_s;
  s.reset_count = stretcher.reset_count();
  s.suspended_time_s = static_cast<double>(suspended_steps) * result.physics_step_s;
  s.budget = metrics::error_budget(result.sifted, visibility);
  s.qber_histogram = metrics::qber_histogram(result.series);
  s.estimated_qber = bob.estimated_qber();
  return result;
}

// Output files.

inline const char* extension(metrics::Format f) { return f == metrics::Format::kCsv ? ".csv" : ".json"; }

inline void write_outputs(const RunResult& r, const config::RunConfig& cfg,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw metrics::ExportError("cannot create " + dir.string() + ": " + ec.message());
  const auto fmt = cfg.exports.format == "json" ? metrics::Format::kJson : metrics::Format::kCsv;
  const std::string ext = extension(fmt);
  metrics::qber_table(r.series).write(dir / ("fig2_qber" + ext), fmt);
  metrics::voltage_table(r.voltage).write(dir / ("fig3a_voltage" + ext), fmt);
  metrics::duty_table(r.duty).write(dir / ("fig3bc_duty_rate" + ext), fmt);
  metrics::zoom_table(r.zoom).write(dir / ("fig4_voltage_zoom" + ext), fmt);
  metrics::sifted_table(r.sifted).write(dir / ("sifted_trace" + ext), fmt);
  metrics::write_json(dir / "summary.json", metrics::to_json(r.summary));
  metrics::write_json(dir / "config.json", config::to_json(cfg));
}

namespace detail {

inline metrics::Table read_table(const std::filesystem::path& dir, const std::string& stem) {
  const auto csv = dir / (stem + ".csv");
  if (std::filesystem::exists(csv)) return metrics::read_csv(csv);
  const auto jpath = dir / (stem + ".json");
  const auto j = metrics::read_json(jpath);
  metrics::Table t;
  if (!j.is_array()) throw metrics::ExportError("expected an array in " + jpath.string());
  for (const auto& row : j) {
    if (t.columns.empty()) {
      for (const auto& [k, v] : row.items()) t.columns.push_back(k);
    }
    std::vector<std::string> cells;
    for (const auto& c : t.columns) {
      const auto& v = row.at(c);
      cells.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace detail

/// Recomputes the run summary from the traces stored in `dir`.
inline metrics::RunSummary analyze(const std::filesystem::path& dir) {
  const config::RunConfig cfg = config::from_json(metrics::read_json(dir / "config.json"));
  const metrics::RunSummary stored = metrics::summary_from_json(metrics::read_json(dir / "summary.json"));

  auto sifted_t = detail::read_table(dir, "sifted_trace");
  // JSON tables come back with alphabetically ordered columns.
  const std::vector<std::string> order{"clock_index", "alice_bit", "bob_bit", "cause", "residual_deg"};
  if (sifted_t.columns != order) {
    metrics::Table t{order, {}};
    for (const auto& row : sifted_t.rows) {
      std::vector<std::string> cells;
      for (const auto& c : order) {
        const auto it = std::find(sifted_t.columns.begin(), sifted_t.columns.end(), c);
        if (it == sifted_t.columns.end()) throw metrics::ExportError("sifted trace lacks column " + c);
        cells.push_back(row[static_cast<std::size_t>(it - sifted_t.columns.begin())]);
      }
      t.rows.push_back(std::move(cells));
    }
    sifted_t = std::move(t);
  }
  const auto sifted = metrics::sifted_from_table(sifted_t);

  const auto duty_t = detail::read_table(dir, "fig3bc_duty_rate");
  std::uint64_t photons = 0;
  const auto col = [](const metrics::Table& t, const std::string& name) {
    const auto it = std::find(t.columns.begin(), t.columns.end(), name);
    if (it == t.columns.end()) throw metrics::ExportError("missing column " + name);
    return static_cast<std::size_t>(it - t.columns.begin());
  };
  for (const auto& row : duty_t.rows) photons += std::stoull(row[col(duty_t, "photons_received")]);

  const auto volt_t = detail::read_table(dir, "fig3a_voltage");
  std::uint64_t resets = 0;
  for (const auto& row : volt_t.rows) resets += row[col(volt_t, "reset_flag")] == "1";

  metrics::RunSummary s = stored;
  const auto series = metrics::qber_series(sifted, cfg.sifting.block_size_bits);
  const std::uint64_t sampled = stored.estimated_qber ? stored.sifted_bits - stored.budget.bits : 0;
  s.sifted_bits = sifted.size() + sampled;
  s.photons_received = photons;
  s.mean_qber = metrics::mean_qber(series);
  s.duty_cycle = photons ? metrics::duty_cycle(s.sifted_bits, photons) : 0.0;
  s.sifted_rate_bps = static_cast<double>(s.sifted_bits) / stored.duration_s;
  s.reset_count = resets;
  s.budget = metrics::error_budget(sifted, cfg.interferometer.visibility);
  s.qber_histogram = metrics::qber_histogram(series);
  return s;
}

}  // namespace qkdsim
