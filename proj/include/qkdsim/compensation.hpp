// Active compensation: fiber-stretcher phase lock on the reference detector
// and the three-axis polarization walker on the summed signal rate.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "qkdsim/physics.hpp"

namespace qkdsim::compensation {

inline constexpr double kDegPerRad = 180.0 / std::numbers::pi;

/// Mean phase-error probability for a residual spread uniformly over a
/// window of full width delta_phi_deg:
///   (1/dphi) * integral_{-dphi/2}^{dphi/2} (1 - cos phi) / 2 dphi
///   = 1/2 - sin(dphi/2) / dphi.
inline double qber_phase(double delta_phi_deg) {
  if (!(delta_phi_deg >= 0.0)) throw std::domain_error("qber_phase: width must be >= 0");
  if (delta_phi_deg == 0.0) return 0.0;
  const double x = delta_phi_deg / kDegPerRad;
  if (x < 0.1) {
    const double x2 = x * x;
    return x2 * (1.0 / 48.0 - x2 * (1.0 / 3840.0 - x2 * (1.0 / 645120.0 - x2 / 185794560.0)));
  }
  return 0.5 - physics::sin_deg(0.5 * delta_phi_deg) / x;
}

/// Full width of the uniform window whose phase QBER matches a residual
/// distribution with the given mean square (degrees^2).
inline double equivalent_peak_to_peak(double mean_square_deg2) {
  return std::sqrt(12.0 * std::max(0.0, mean_square_deg2));
}

struct StretcherConfig {
  bool enabled = true;
  double v_min = -5.0;
  double v_max = 5.0;
  double coeff_deg_per_volt = 294.0;
  double dither_amplitude_v = 0.035;
  double dither_period_s = 0.02;
  double integration_window_s = 0.2;
  double gain = 0.3;
  double integral_gain = 0.02;
  // Error estimates beyond this are corrected in one step.
  double capture_deg = 30.0;
  int scan_points = 12;
  double sift_gate_deg = 25.0;
};

inline double phase_from_voltage(double v, double coeff_deg_per_volt = 294.0) {
  return coeff_deg_per_volt * v;
}

/// Triangle wave in [-1, 1], zero at t = 0 and rising.
inline double triangle_wave(double t, double period) {
  double p = std::fmod(t / period, 1.0);
  if (p < 0.0) p += 1.0;
  if (p < 0.25) return 4.0 * p;
  if (p < 0.75) return 2.0 - 4.0 * p;
  return 4.0 * p - 4.0;
}

/// One integration window of detector rates, in counts per second.
/// The APD2 rate is also split by the sign of the dither offset applied
/// during each gate.
struct FeedbackSample {
  double apd2_rate = 0.0;
  double apd2_rate_upper = 0.0;
  double apd2_rate_lower = 0.0;
  double signal_rate = 0.0;
  double window_s = 0.0;
};

struct StretcherStep {
  double voltage = 0.0;
  bool reset = false;
};

/// Perturb-and-observe lock of the reference port to its dark fringe.
///
/// The stretcher voltage carries a triangular dither of +-dither_amplitude_v.
/// APD2 counts collected while the dither is positive and negative give the
/// odd (sin) and even (cos) components of the fringe at the operating point;
/// with the fringe offset and contrast known from the start-up scan these
/// yield a full-range estimate of the residual phase. Corrections are
/// proportional near lock, with a slow integral term that absorbs a steady
/// drift ramp. If the required voltage leaves the usable range the stretcher
/// drops to 0 V for one window, then re-enters at the equivalent fringe.
class StretcherController {
 public:
  enum class Mode { kHold, kScanning, kTracking, kResetting };

  explicit StretcherController(StretcherConfig cfg) : cfg_(cfg) {
    if (!(cfg_.coeff_deg_per_volt > 0.0)) throw std::domain_error("stretcher: coeff must be > 0");
    if (!(cfg_.v_min <= 0.0 && 0.0 <= cfg_.v_max)) {
      throw std::domain_error("stretcher: range must contain 0 V");
    }
    if (!cfg_.enabled) {
      mode_ = Mode::kHold;
      return;
    }
    if (!(cfg_.dither_amplitude_v > 0.0)) throw std::domain_error("stretcher: dither must be > 0");
    if (cfg_.scan_points < 4) throw std::domain_error("stretcher: scan_points must be >= 4");
    begin_scan(0.0);
  }

  const StretcherConfig& config() const { return cfg_; }
  double voltage() const { return voltage_; }
  std::uint64_t reset_count() const { return reset_count_; }
  Mode mode() const { return mode_; }
  bool acquiring() const { return mode_ == Mode::kScanning || mode_ == Mode::kResetting; }
  double dither_phase_deg() const { return cfg_.dither_amplitude_v * cfg_.coeff_deg_per_volt; }
  double fringe_offset() const { return fringe_offset_; }
  double fringe_contrast() const { return fringe_contrast_; }
  double last_estimate_deg() const { return last_estimate_deg_; }

  /// Skips the start-up scan using a known fringe (tests and warm starts).
  void assume_fringe(double offset_rate, double contrast_rate) {
    fringe_offset_ = offset_rate;
    fringe_contrast_ = contrast_rate;
    mode_ = Mode::kTracking;
  }

  void set_voltage(double v) { voltage_ = std::clamp(v, usable_min(), usable_max()); }

  /// Residual phase estimate (degrees) from one window, given the fringe.
  double estimate_residual_deg(const FeedbackSample& s) const {
    const double d = dither_phase_deg() / kDegPerRad;
    const double odd = 2.0 * fringe_contrast_ * (1.0 - std::cos(d)) / d;
    const double even = 2.0 * fringe_contrast_ * std::sin(d) / d;
    if (!(odd > 0.0) || !(even > 0.0)) return 0.0;
    const double sin_est = (s.apd2_rate_lower - s.apd2_rate_upper) / odd;
    const double cos_est = (2.0 * fringe_offset_ - (s.apd2_rate_upper + s.apd2_rate_lower)) / even;
    return std::atan2(sin_est, cos_est) * kDegPerRad;
  }

  StretcherStep step(const FeedbackSample& s) {
    if (!(s.window_s > 0.0)) throw std::invalid_argument("stretcher: empty feedback window");
    if (s.window_s < cfg_.integration_window_s * (1.0 - 1e-9)) {
      throw std::invalid_argument("stretcher: feedback window shorter than integration window");
    }
    switch (mode_) {
      case Mode::kHold:
        break;
      case Mode::kScanning:
        scan_step(s);
        break;
      case Mode::kResetting: {
        // Re-enter at the fringe equivalent to the phase that overflowed.
        const double target = physics::wrap_deg(pending_phase_deg_ + integral_deg_);
        voltage_ = target / cfg_.coeff_deg_per_volt;
        mode_ = Mode::kTracking;
        break;
      }
      case Mode::kTracking:
        return track_step(s);
    }
    return {voltage_, false};
  }

 private:
  double usable_min() const { return cfg_.v_min + cfg_.dither_amplitude_v; }
  double usable_max() const { return cfg_.v_max - cfg_.dither_amplitude_v; }
  double fringe_period_v() const { return 360.0 / cfg_.coeff_deg_per_volt; }

  double scan_voltage(int k) const {
    const double frac = static_cast<double>(k) / cfg_.scan_points - 0.5;
    return scan_center_ + frac * fringe_period_v();
  }

  void begin_scan(double center) {
    mode_ = Mode::kScanning;
    scan_center_ = std::clamp(center, usable_min() + 0.5 * fringe_period_v(),
                              usable_max() - 0.5 * fringe_period_v());
    scan_rates_.clear();
    voltage_ = scan_voltage(0);
  }

  // Fourier fit of rate(v) = a - b' cos(phi - coeff * v) over one fringe period.
  void scan_step(const FeedbackSample& s) {
    scan_rates_.push_back(s.apd2_rate);
    const int k = static_cast<int>(scan_rates_.size());
    if (k < cfg_.scan_points) {
      voltage_ = scan_voltage(k);
      return;
    }
    double mean = 0.0, pc = 0.0, ps = 0.0;
    for (int i = 0; i < k; ++i) {
      const double psi = phase_from_voltage(scan_voltage(i), cfg_.coeff_deg_per_volt);
      mean += scan_rates_[i];
      pc += scan_rates_[i] * physics::cos_deg(psi);
      ps += scan_rates_[i] * physics::sin_deg(psi);
    }
    mean /= k;
    const double p = -2.0 * pc / k, q = -2.0 * ps / k;
    const double d = dither_phase_deg() / kDegPerRad;
    fringe_offset_ = mean;
    fringe_contrast_ = std::hypot(p, q) * d / std::sin(d);
    const double phi = std::atan2(q, p) * kDegPerRad;
    const double center_phase = phase_from_voltage(scan_center_, cfg_.coeff_deg_per_volt);
    voltage_ = scan_center_ + physics::wrap_deg(phi - center_phase) / cfg_.coeff_deg_per_volt;
    voltage_ = std::clamp(voltage_, usable_min(), usable_max());
    integral_deg_ = 0.0;
    mode_ = Mode::kTracking;
  }

  StretcherStep track_step(const FeedbackSample& s) {
    const double est = estimate_residual_deg(s);
    last_estimate_deg_ = est;
    double correction;
    if (std::abs(est) > cfg_.capture_deg) {
      correction = est;
    } else {
      integral_deg_ += cfg_.integral_gain * est;
      correction = cfg_.gain * est;
    }
    const double required = voltage_ + (correction + integral_deg_) / cfg_.coeff_deg_per_volt;
    if (required > usable_max() || required < usable_min()) {
      pending_phase_deg_ = phase_from_voltage(required, cfg_.coeff_deg_per_volt);
      voltage_ = 0.0;
      ++reset_count_;
      mode_ = Mode::kResetting;
      return {voltage_, true};
    }
    voltage_ = required;
    return {voltage_, false};
  }

  StretcherConfig cfg_;
  Mode mode_ = Mode::kHold;
  double voltage_ = 0.0;
  std::uint64_t reset_count_ = 0;
  double scan_center_ = 0.0;
  std::vector<double> scan_rates_;
  double fringe_offset_ = 0.0;
  double fringe_contrast_ = 0.0;
  double integral_deg_ = 0.0;
  double pending_phase_deg_ = 0.0;
  double last_estimate_deg_ = 0.0;
};

struct WalkerConfig {
  bool enabled = true;
  double step_size = 0.08;  // rad
  double epoch_s = 0.5;
};

/// Coordinate-wise hill climb on the three controller axes. Each decision
/// takes two windows: a baseline measurement at the current axes, then a
/// measurement with one axis perturbed by +-step_size. The perturbation is
/// kept iff the rate did not decrease; otherwise it is undone and that
/// axis's next trial goes the other way. Axes are visited round-robin.
class PolarizationWalker {
 public:
  explicit PolarizationWalker(WalkerConfig cfg, physics::Vec3 axes = {0.0, 0.0, 0.0})
      : cfg_(cfg), axes_(axes) {
    if (!(cfg_.step_size > 0.0)) throw std::domain_error("walker: step_size must be > 0");
  }

  const physics::Vec3& axes() const { return axes_; }
  double best_rate() const { return best_rate_; }
  int current_axis() const { return axis_; }
  bool in_trial() const { return trial_; }

  physics::Vec3 walk(const FeedbackSample& s) {
    if (!trial_) {
      best_rate_ = s.signal_rate;
      axes_[axis_] += direction_[axis_] * cfg_.step_size;
      trial_ = true;
      return axes_;
    }
    if (s.signal_rate < best_rate_) {
      axes_[axis_] -= direction_[axis_] * cfg_.step_size;
      direction_[axis_] = -direction_[axis_];
    } else {
      best_rate_ = s.signal_rate;
    }
    axis_ = (axis_ + 1) % 3;
    trial_ = false;
    return axes_;
  }

 private:
  WalkerConfig cfg_;
  physics::Vec3 axes_;
  std::array<double, 3> direction_{1.0, 1.0, 1.0};
  int axis_ = 0;
  bool trial_ = false;
  double best_rate_ = 0.0;
};

}  // namespace qkdsim::compensation
