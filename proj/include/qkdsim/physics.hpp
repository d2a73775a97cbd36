// Optical channel model: fiber attenuation, interferometric phase drift,
// polarization drift and double-AMZI interference.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "qkdsim/rng.hpp"

namespace qkdsim::physics {

using Vec3 = std::array<double, 3>;

struct ChannelConfig {
  double length_km = 20.3;
  double loss_db = 5.3;
  double drift_rate_deg_per_s = 0.18;
  // Diffusive jitter around the ramp: variance per second is rate^2 * time.
  double drift_diffusion_time_s = 0.05;
  double drift_reversal_rate_per_hour = 0.0;
  double shock_rate_per_hour = 0.5;
  double shock_magnitude_deg = 60.0;
  double pol_drift_rate = 2.0 * std::numbers::pi / 1800.0;  // rad/s
  double pol_axis_wander = 0.02;                             // rad/sqrt(s)
  double initial_phase_offset_deg = 0.0;
};

struct InterferometerConfig {
  double visibility = 0.9912;
  double interfering_fraction = 0.5;
  double reference_split = 0.18;
};

/// Phase is not wrapped: the stretcher range is finite so the absolute
/// accumulated offset matters.
struct DriftState {
  double phase_offset_deg = 0.0;
  Vec3 pol_rotation{0.0, 0.0, 0.0};
  // +1 or -1; sign of the systematic phase ramp.
  double drift_direction = 1.0;
  Vec3 pol_axis{0.0, 0.0, 1.0};
};

// Exact at multiples of 90 degrees so that ideal interference gives exact
// zeros instead of 1e-17 residues.
inline double cos_deg(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) r += 360.0;
  if (r == 0.0) return 1.0;
  if (r == 90.0 || r == 270.0) return 0.0;
  if (r == 180.0) return -1.0;
  return std::cos(r * std::numbers::pi / 180.0);
}

inline double sin_deg(double deg) { return cos_deg(deg - 90.0); }

/// Wrap to (-180, 180].
inline double wrap_deg(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r <= -180.0) r += 360.0;
  if (r > 180.0) r -= 360.0;
  return r;
}

inline double transmittance(double loss_db) {
  if (!(loss_db >= 0.0) || !std::isfinite(loss_db)) {
    throw std::domain_error("transmittance: loss_db must be finite and >= 0");
  }
  return std::pow(10.0, -loss_db / 10.0);
}

inline DriftState initial_drift_state(const ChannelConfig& cfg, Rng& rng) {
  DriftState s;
  s.phase_offset_deg = cfg.initial_phase_offset_deg;
  s.drift_direction = (rng.bits() & 1U) ? 1.0 : -1.0;
  Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
  const double n = std::hypot(axis[0], axis[1], axis[2]);
  if (n > 0.0) {
    for (auto& a : axis) a /= n;
    s.pol_axis = axis;
  }
  return s;
}

/// Advances the drift by dt seconds. The phase follows a ramp of magnitude
/// drift_rate_deg_per_s plus a small diffusive term, so the mean absolute
/// rate over any long window equals the configured rate. Shocks arrive as a
/// Poisson process. The polarization rotation vector advances along an axis
/// that itself wanders on the unit sphere.
inline DriftState advance_drift(const DriftState& state, const ChannelConfig& cfg, double dt,
                                Rng& rng) {
  if (dt < 0.0 || !std::isfinite(dt)) throw std::domain_error("advance_drift: dt must be >= 0");
  DriftState next = state;
  if (dt == 0.0) return next;

  const double rate = cfg.drift_rate_deg_per_s;
  if (rate > 0.0) {
    if (cfg.drift_reversal_rate_per_hour > 0.0) {
      const auto flips = rng.poisson(cfg.drift_reversal_rate_per_hour * dt / 3600.0);
      if (flips % 2 == 1) next.drift_direction = -next.drift_direction;
    }
    const double sigma = rate * std::sqrt(cfg.drift_diffusion_time_s * dt);
    next.phase_offset_deg += next.drift_direction * rate * dt + sigma * rng.normal();
  }

  if (cfg.shock_rate_per_hour > 0.0) {
    const auto shocks = rng.poisson(cfg.shock_rate_per_hour * dt / 3600.0);
    for (std::uint64_t i = 0; i < shocks; ++i) {
      next.phase_offset_deg += (rng.bits() & 1U) ? cfg.shock_magnitude_deg : -cfg.shock_magnitude_deg;
    }
  }

  if (cfg.pol_drift_rate > 0.0) {
    Vec3 axis = next.pol_axis;
    const double w = cfg.pol_axis_wander * std::sqrt(dt);
    for (auto& a : axis) a += w * rng.normal();
    const double n = std::hypot(axis[0], axis[1], axis[2]);
    if (n > 0.0) {
      for (auto& a : axis) a /= n;
      next.pol_axis = axis;
    }
    for (int i = 0; i < 3; ++i) next.pol_rotation[i] += cfg.pol_drift_rate * dt * next.pol_axis[i];
  }
  return next;
}

/// Output-port probabilities of the double AMZI for one photon in the
/// interfering time bin.
inline std::pair<double, double> interference_probabilities(double residual_phase_deg,
                                                            double visibility) {
  if (!(visibility >= 0.0 && visibility <= 1.0)) {
    throw std::domain_error("interference_probabilities: visibility must lie in [0, 1]");
  }
  const double c = visibility * cos_deg(residual_phase_deg);
  const double p0 = 0.5 * (1.0 + c);
  return {p0, 1.0 - p0};
}

// Poincare-sphere rotations.

using Mat3 = std::array<Vec3, 3>;

inline Vec3 mul(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

/// Rotation by |r| about r / |r| (Rodrigues).
inline Mat3 rotation_from_vector(const Vec3& r) {
  const double angle = std::hypot(r[0], r[1], r[2]);
  if (angle == 0.0) return Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  const double x = r[0] / angle, y = r[1] / angle, z = r[2] / angle;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  return Mat3{{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
               {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
               {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

inline Vec3 rotate_axis(const Vec3& v, int axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  switch (axis) {
    case 0: return {v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]};
    case 1: return {c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]};
    default: return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
  }
}

/// Stokes direction reaching Bob's polarizing beam splitter.
inline Vec3 received_stokes(const DriftState& state, const Vec3& controller_axes) {
  const Vec3 launch{1.0, 0.0, 0.0};
  Vec3 s = mul(rotation_from_vector(state.pol_rotation), launch);
  for (int i = 0; i < 3; ++i) s = rotate_axis(s, i, controller_axes[i]);
  return s;
}

/// Angle on the Poincare sphere between the received and the aligned state.
inline double mismatch_angle(const DriftState& state, const Vec3& controller_axes) {
  const Vec3 s = received_stokes(state, controller_axes);
  return std::acos(std::clamp(s[0], -1.0, 1.0));
}

/// Fraction of power transmitted into the aligned polarization:
/// cos^2(theta / 2) = (1 + s.x) / 2.
inline double polarization_coupling(const DriftState& state, const Vec3& controller_axes) {
  const Vec3 s = received_stokes(state, controller_axes);
  return std::clamp(0.5 * (1.0 + s[0]), 0.0, 1.0);
}

}  // namespace qkdsim::physics
