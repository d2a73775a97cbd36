// Gated InGaAs APD click model with dark counts and afterpulsing.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "qkdsim/rng.hpp"

namespace qkdsim::detectors {

struct ApdConfig {
  double efficiency = 0.11;
  double dark_prob_per_gate = 1e-6;
  // Probability of an afterpulse in the first gate after an avalanche.
  double afterpulse_prob = 0.0;
  int afterpulse_decay_gates = 4;
  // Geometric ratio between consecutive gates inside the window.
  double afterpulse_decay_ratio = 0.5;
};

enum class DetectorId : std::uint8_t { kApd0 = 0, kApd1 = 1, kApd2 = 2 };
enum class Cause : std::uint8_t { kPhoton = 0, kDark = 1, kAfterpulse = 2 };

inline std::string_view to_string(Cause c) {
  switch (c) {
    case Cause::kPhoton: return "photon";
    case Cause::kDark: return "dark";
    case Cause::kAfterpulse: return "afterpulse";
  }
  return "?";
}

inline std::optional<Cause> cause_from_string(std::string_view s) {
  if (s == "photon") return Cause::kPhoton;
  if (s == "dark") return Cause::kDark;
  if (s == "afterpulse") return Cause::kAfterpulse;
  return std::nullopt;
}

// The cause is ground truth for diagnostics; it never reaches the protocol layer.
struct DetectionEvent {
  std::uint64_t clock_index = 0;
  DetectorId detector = DetectorId::kApd0;
  Cause cause = Cause::kPhoton;
};

/// Expected afterpulse clicks following one avalanche, ignoring re-arming:
/// a * (1 - r^N) / (1 - r).
inline double afterpulse_geometric_sum(const ApdConfig& cfg) {
  double sum = 0.0, p = cfg.afterpulse_prob;
  for (int k = 0; k < cfg.afterpulse_decay_gates; ++k) {
    sum += p;
    p *= cfg.afterpulse_decay_ratio;
  }
  return sum;
}

class Apd {
 public:
  explicit Apd(ApdConfig cfg, DetectorId id = DetectorId::kApd0) : cfg_(cfg), id_(id) {
    if (cfg_.afterpulse_decay_gates <= 0) {
      throw std::domain_error("Apd: afterpulse_decay_gates must be > 0");
    }
    after_.reserve(static_cast<std::size_t>(cfg_.afterpulse_decay_gates));
    double p = cfg_.afterpulse_prob;
    for (int k = 0; k < cfg_.afterpulse_decay_gates; ++k) {
      after_.push_back(p);
      p *= cfg_.afterpulse_decay_ratio;
    }
  }

  const ApdConfig& config() const { return cfg_; }
  DetectorId id() const { return id_; }

  double photon_probability(double mean_photons) const {
    if (!(mean_photons >= 0.0)) throw std::domain_error("Apd: mean_photons must be >= 0");
    return -std::expm1(-mean_photons * cfg_.efficiency);
  }

  /// Afterpulse probability the next gate will see.
  double armed_afterpulse_probability() const {
    return since_click_ < after_.size() ? after_[since_click_] : 0.0;
  }

  /// Click probability of the next gate, given the current afterpulse state.
  double click_probability(double mean_photons) const {
    const double p_ph = photon_probability(mean_photons);
    return 1.0 - (1.0 - p_ph) * (1.0 - cfg_.dark_prob_per_gate) *
                     (1.0 - armed_afterpulse_probability());
  }

  /// Evaluates one gate. A single uniform draw partitions the outcome space
  /// into photon / dark / afterpulse / no click, so the cause attribution is
  /// exact. Any click re-arms the afterpulse window.
  std::optional<DetectionEvent> gate(double mean_photons, Rng& rng, std::uint64_t clock_index) {
    const double p_ph = photon_probability(mean_photons);
    const double p_after = armed_afterpulse_probability();
    const double u = rng.uniform();
    std::optional<DetectionEvent> out;
    if (u < p_ph) {
      out = DetectionEvent{clock_index, id_, Cause::kPhoton};
    } else {
      const double miss_ph = 1.0 - p_ph;
      const double t_dark = p_ph + miss_ph * cfg_.dark_prob_per_gate;
      if (u < t_dark) {
        out = DetectionEvent{clock_index, id_, Cause::kDark};
      } else if (u < 1.0 - miss_ph * (1.0 - cfg_.dark_prob_per_gate) * (1.0 - p_after)) {
        out = DetectionEvent{clock_index, id_, Cause::kAfterpulse};
      }
    }
    if (out) {
      since_click_ = 0;
    } else if (since_click_ < after_.size()) {
      ++since_click_;
    }
    return out;
  }

  /// Marks an avalanche in the current gate without drawing randomness.
  void force_click() { since_click_ = 0; }

  void reset_afterpulse_state() { since_click_ = after_.size(); }

 private:
  ApdConfig cfg_;
  DetectorId id_;
  std::vector<double> after_;
  // Gates elapsed since the last avalanche; after_.size() means disarmed.
  std::size_t since_click_ = SIZE_MAX;
};

}  // namespace qkdsim::detectors
