#include <gtest/gtest.h>

#include <cmath>

#include "qkdsim/detectors.hpp"

using namespace qkdsim;
using namespace qkdsim::detectors;

namespace {

ApdConfig quiet() {
  ApdConfig c;
  c.dark_prob_per_gate = 0.0;
  c.afterpulse_prob = 0.0;
  return c;
}

}  // namespace

TEST(Apd, DarkOnlyClickProbability) {
  ApdConfig c;
  c.dark_prob_per_gate = 1e-6;
  Apd apd(c);
  EXPECT_NEAR(apd.click_probability(0.0), 1e-6, 1e-15);
}

TEST(Apd, Saturation) {
  Apd apd(ApdConfig{});
  EXPECT_NEAR(apd.click_probability(1e4), 1.0, 1e-12);
}

TEST(Apd, PhotonProbability) {
  Apd apd(ApdConfig{});
  EXPECT_NEAR(apd.photon_probability(0.2), 0.02176, 5e-6);
  EXPECT_NEAR(apd.photon_probability(0.2), 1.0 - std::exp(-0.022), 1e-15);
}

TEST(Apd, RejectsNegativeMean) {
  Apd apd(ApdConfig{});
  Rng rng(1);
  EXPECT_THROW(apd.gate(-1.0, rng, 0), std::domain_error);
  EXPECT_THROW(Apd(ApdConfig{0.1, 0.0, 0.0, 0, 0.5}), std::domain_error);
}

TEST(Apd, ResetClearsArmedState) {
  ApdConfig c = quiet();
  c.afterpulse_prob = 0.3;
  Apd apd(c);
  apd.force_click();
  EXPECT_DOUBLE_EQ(apd.click_probability(0.0), 0.3);
  apd.reset_afterpulse_state();
  EXPECT_DOUBLE_EQ(apd.click_probability(0.0), 0.0);
  apd.reset_afterpulse_state();
  EXPECT_DOUBLE_EQ(apd.click_probability(0.0), 0.0);
}

TEST(Apd, ArmedStateDecaysGeometrically) {
  ApdConfig c = quiet();
  c.afterpulse_prob = 0.1;
  c.afterpulse_decay_gates = 3;
  c.afterpulse_decay_ratio = 0.5;
  Apd apd(c);
  EXPECT_DOUBLE_EQ(apd.armed_afterpulse_probability(), 0.0);
  apd.force_click();
  Rng rng(1);  // this seed draws no afterpulse in the walk below
  for (double expected : {0.1, 0.05, 0.025, 0.0, 0.0}) {
    EXPECT_DOUBLE_EQ(apd.armed_afterpulse_probability(), expected);
    ASSERT_FALSE(apd.gate(0.0, rng, 0).has_value());
  }
}

TEST(Apd, MonotoneInMeanDarkAndArming) {
  ApdConfig c;
  c.afterpulse_prob = 0.01;
  Apd apd(c);
  double prev = -1.0;
  for (double mu = 0.0; mu < 50.0; mu += 0.25) {
    const double p = apd.click_probability(mu);
    ASSERT_GE(p, prev);
    prev = p;
  }
  ApdConfig lo = c, hi = c;
  hi.dark_prob_per_gate = 1e-4;
  EXPECT_LE(Apd(lo).click_probability(0.1), Apd(hi).click_probability(0.1));
  Apd armed(c);
  armed.force_click();
  EXPECT_LE(Apd(c).click_probability(0.1), armed.click_probability(0.1));
}

TEST(Apd, NoNoiseNoClicks) {
  Apd apd(quiet());
  Rng rng(3);
  int clicks = 0;
  for (int i = 0; i < 1000000; ++i) clicks += apd.gate(0.0, rng, static_cast<std::uint64_t>(i)).has_value();
  EXPECT_EQ(clicks, 0);
}

TEST(Apd, DarkRateWithinBinomialBounds) {
  for (double p : {1e-6, 1e-4}) {
    ApdConfig c = quiet();
    c.dark_prob_per_gate = p;
    Apd apd(c);
    Rng rng(5);
    const double n = 1e7;
    std::uint64_t clicks = 0;
    for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(n); ++i) {
      auto ev = apd.gate(0.0, rng, i);
      if (ev) {
        ++clicks;
        ASSERT_EQ(ev->cause, Cause::kDark);
      }
    }
    const double sigma = std::sqrt(n * p * (1.0 - p));
    EXPECT_NEAR(static_cast<double>(clicks), n * p, 3.0 * sigma) << p;
  }
}

namespace {

// Counts afterpulse-tagged clicks following one forced avalanche, until the
// detector has been quiet for a whole decay window.
double afterpulses_per_click(const ApdConfig& c, int trials, std::uint64_t seed) {
  Apd apd(c);
  Rng rng(seed);
  std::uint64_t count = 0;
  for (int t = 0; t < trials; ++t) {
    apd.force_click();
    int quiet_gates = 0;
    while (quiet_gates < c.afterpulse_decay_gates) {
      auto ev = apd.gate(0.0, rng, 0);
      if (ev) {
        ++count;
        quiet_gates = 0;
      } else {
        ++quiet_gates;
      }
    }
  }
  return static_cast<double>(count) / trials;
}

}  // namespace

TEST(Apd, AfterpulsesPerClickMatchGeometricSum) {
  ApdConfig c = quiet();
  c.afterpulse_prob = 0.005;
  c.afterpulse_decay_gates = 4;
  c.afterpulse_decay_ratio = 0.5;
  const double sum = 0.005 * (1.0 + 0.5 + 0.25 + 0.125);
  EXPECT_DOUBLE_EQ(afterpulse_geometric_sum(c), sum);
  EXPECT_NEAR(afterpulses_per_click(c, 1000000, 7), sum, 0.05 * sum);
}

// Exact oracle including cascades: an afterpulse re-arms the window, so the
// expected count is q / (1 - q) with q the chance of any afterpulse in one
// window.
TEST(Apd, AfterpulseCascadeMatchesMarkovOracle) {
  ApdConfig c = quiet();
  c.afterpulse_prob = 0.08;
  c.afterpulse_decay_gates = 6;
  c.afterpulse_decay_ratio = 0.7;
  double none = 1.0, a = c.afterpulse_prob;
  for (int k = 0; k < c.afterpulse_decay_gates; ++k, a *= c.afterpulse_decay_ratio) none *= 1.0 - a;
  const double q = 1.0 - none;
  const double expected = q / (1.0 - q);
  const int trials = 400000;
  const double got = afterpulses_per_click(c, trials, 11);
  // Geometric count distribution: var = f (1 + f).
  EXPECT_NEAR(got, expected, 4.0 * std::sqrt(expected * (1.0 + expected) / trials));
}

TEST(Apd, CauseAttributionMatchesComposition) {
  ApdConfig c;
  c.dark_prob_per_gate = 0.01;
  c.afterpulse_prob = 0.0;
  Apd apd(c);
  Rng rng(13);
  const double mu = 0.5;
  const int n = 1000000;
  std::uint64_t photon = 0, dark = 0;
  for (int i = 0; i < n; ++i) {
    auto ev = apd.gate(mu, rng, 0);
    if (!ev) continue;
    (ev->cause == Cause::kPhoton ? photon : dark) += 1;
  }
  const double pp = apd.photon_probability(mu);
  const double pd = (1.0 - pp) * 0.01;
  EXPECT_NEAR(static_cast<double>(photon), n * pp, 4.0 * std::sqrt(n * pp));
  EXPECT_NEAR(static_cast<double>(dark), n * pd, 4.0 * std::sqrt(n * pd));
}

TEST(Cause, StringRoundTrip) {
  for (Cause c : {Cause::kPhoton, Cause::kDark, Cause::kAfterpulse}) {
    EXPECT_EQ(cause_from_string(to_string(c)), c);
  }
  EXPECT_FALSE(cause_from_string("cosmic").has_value());
}
