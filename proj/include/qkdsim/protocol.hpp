// BB84 phase encoding, Alice's pulse generation and Bob's measurement.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>

#include "qkdsim/detectors.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/rng.hpp"

namespace qkdsim::protocol {

enum class Basis : std::uint8_t { kZ = 0, kX = 1 };

struct SourceConfig {
  double signal_mean_photons = 0.2;
  double reference_mean_photons = 4.8;
  double delay_ns = 40.0;
};

struct QubitPrep {
  std::uint64_t clock_index = 0;
  Basis basis = Basis::kZ;
  std::uint8_t bit = 0;
  int phase_deg = 0;
};

/// The reference pulse is never phase-modulated; only the signal carries
/// Alice's phase.
struct PulsePair {
  std::uint64_t clock_index = 0;
  double signal_mean_photons = 0.2;
  double reference_mean_photons = 4.8;
  double delay_ns = 40.0;
  double alice_phase_deg = 0.0;
};

/// Z: 0 -> 0, 1 -> 180.  X: 0 -> 90, 1 -> 270.
constexpr int encode_phase(Basis basis, std::uint8_t bit) {
  return (basis == Basis::kX ? 90 : 0) + (bit ? 180 : 0);
}

inline std::pair<Basis, std::uint8_t> decode_phase(int phase_deg) {
  switch (phase_deg) {
    case 0: return {Basis::kZ, 0};
    case 180: return {Basis::kZ, 1};
    case 90: return {Basis::kX, 0};
    case 270: return {Basis::kX, 1};
    default: throw std::domain_error("decode_phase: not a BB84 phase");
  }
}

/// Phase applied by Bob's modulator for a measurement basis.
constexpr int bob_phase(Basis basis) { return basis == Basis::kX ? 90 : 0; }

/// Alice's choice for a clock index is a pure function of her generator and
/// the index, so she can recall it when Bob reveals his bases.
inline QubitPrep alice_prepare(const CounterRng& rng, std::uint64_t clock_index) {
  const std::uint64_t r = rng.at(clock_index);
  QubitPrep prep;
  prep.clock_index = clock_index;
  prep.basis = (r & 1U) ? Basis::kX : Basis::kZ;
  prep.bit = static_cast<std::uint8_t>((r >> 1) & 1U);
  prep.phase_deg = encode_phase(prep.basis, prep.bit);
  return prep;
}

inline std::pair<QubitPrep, PulsePair> alice_emit(const CounterRng& rng, std::uint64_t clock_index,
                                                  const SourceConfig& source = {}) {
  const QubitPrep prep = alice_prepare(rng, clock_index);
  PulsePair pulse;
  pulse.clock_index = clock_index;
  pulse.signal_mean_photons = source.signal_mean_photons;
  pulse.reference_mean_photons = source.reference_mean_photons;
  pulse.delay_ns = source.delay_ns;
  pulse.alice_phase_deg = prep.phase_deg;
  return {prep, pulse};
}

/// Probability that a photon in the interfering bin exits the port that
/// does not match Alice's bit. Meaningful for matched bases.
inline double bob_error_probability(int prep_phase_deg, Basis bob_basis, double residual_deg,
                                    double visibility) {
  const auto [p0, p1] = physics::interference_probabilities(
      prep_phase_deg - bob_phase(bob_basis) + residual_deg, visibility);
  const auto bit = decode_phase(prep_phase_deg).second;
  return bit == 0 ? p1 : p0;
}

struct MeasureOutcome {
  std::optional<detectors::DetectionEvent> apd0;
  std::optional<detectors::DetectionEvent> apd1;

  bool single_click() const { return apd0.has_value() != apd1.has_value(); }
  bool double_click() const { return apd0 && apd1; }
  std::uint8_t bit() const { return apd1 ? 1 : 0; }
  detectors::Cause cause() const { return apd1 ? apd1->cause : apd0->cause; }
};

/// One signal gate at Bob. `mean_photons` is the mean photon number reaching
/// his detectors in the interfering time bin; port 0 reads bit 0.
inline MeasureOutcome bob_measure(double prep_phase_deg, Basis bob_basis, double residual_deg,
                                  double mean_photons, double visibility, detectors::Apd& apd0,
                                  detectors::Apd& apd1, Rng& rng, std::uint64_t clock_index) {
  const auto [p0, p1] = physics::interference_probabilities(
      prep_phase_deg - bob_phase(bob_basis) + residual_deg, visibility);
  MeasureOutcome out;
  out.apd0 = apd0.gate(mean_photons * p0, rng, clock_index);
  out.apd1 = apd1.gate(mean_photons * p1, rng, clock_index);
  return out;
}

}  // namespace qkdsim::protocol
