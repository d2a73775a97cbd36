// Alice and Bob sifting state machines. They share nothing but frames.
#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "qkdsim/frame.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/rng.hpp"

namespace qkdsim::protocol {

/// Sifted key material, index-aligned between the two parties.
struct SiftedKey {
  std::vector<std::uint64_t> indices;
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
};

class AliceEndpoint {
 public:
  /// `sample_fraction` > 0 enables the in-protocol QBER estimate: that
  /// fraction of each kept batch is disclosed to Bob and dropped from the key.
  explicit AliceEndpoint(CounterRng preparations, double sample_fraction = 0.0,
                         std::uint64_t sample_seed = 0)
      : prep_(preparations), sample_fraction_(sample_fraction), sample_rng_(sample_seed) {}

  std::vector<SiftFrame> handle(const SiftFrame& f) {
    switch (f.msg_type) {
      case MsgType::kBasisReveal:
        return on_reveal(parse_basis_reveal(f));
      case MsgType::kSessionCtrl: {
        const auto [code, idx] = parse_session_ctrl(f);
        (void)idx;
        if (code == SessionCode::kStart) started_ = true;
        if (code == SessionCode::kStop) stopped_ = true;
        if (code == SessionCode::kSuspend) ++suspensions_;
        return {};
      }
      default:
        throw ProtocolError("Alice: unexpected message type");
    }
  }

  const SiftedKey& key() const { return key_; }
  bool started() const { return started_; }
  bool stopped() const { return stopped_; }
  std::uint64_t suspensions() const { return suspensions_; }
  std::uint64_t revealed() const { return revealed_; }

 private:
  std::vector<SiftFrame> on_reveal(const std::vector<BasisEntry>& entries) {
    if (!started_ || stopped_) throw ProtocolError("Alice: reveal outside session");
    std::vector<std::uint64_t> kept;
    std::vector<BitEntry> sample;
    for (const auto& e : entries) {
      if (have_last_ && e.clock_index <= last_index_) {
        throw ProtocolError("Alice: reveal indices not increasing");
      }
      have_last_ = true;
      last_index_ = e.clock_index;
      ++revealed_;
      const QubitPrep prep = alice_prepare(prep_, e.clock_index);
      if (prep.basis != e.basis) continue;
      kept.push_back(e.clock_index);
      if (sample_fraction_ > 0.0 && sample_rng_.bernoulli(sample_fraction_)) {
        sample.push_back({e.clock_index, prep.bit});
      } else {
        key_.indices.push_back(e.clock_index);
        key_.bits.push_back(prep.bit);
      }
    }
    std::vector<SiftFrame> out;
    out.push_back(make_sift_keep(kept));
    if (sample_fraction_ > 0.0) out.push_back(make_qber_sample(sample));
    return out;
  }

  CounterRng prep_;
  double sample_fraction_;
  Rng sample_rng_;
  SiftedKey key_;
  bool started_ = false;
  bool stopped_ = false;
  bool have_last_ = false;
  std::uint64_t last_index_ = 0;
  std::uint64_t revealed_ = 0;
  std::uint64_t suspensions_ = 0;
};

class BobEndpoint {
 public:
  explicit BobEndpoint(std::size_t batch_size = 4096, bool expects_sample = false)
      : batch_size_(std::max<std::size_t>(1, batch_size)), expects_sample_(expects_sample) {}

  bool expects_sample() const { return expects_sample_; }

  /// Records a gate with exactly one signal click. Returns a reveal frame
  /// when a batch is full.
  std::optional<SiftFrame> on_detection(std::uint64_t clock_index, Basis basis, std::uint8_t bit) {
    pending_.push_back({clock_index, basis, bit});
    if (pending_.size() >= batch_size_) return flush();
    return std::nullopt;
  }

  /// Reveal frame for whatever is pending, if anything.
  std::optional<SiftFrame> flush() {
    if (pending_.empty()) return std::nullopt;
    if (!awaiting_.empty()) throw ProtocolError("Bob: previous batch not yet sifted");
    awaiting_.assign(pending_.begin(), pending_.end());
    pending_.clear();
    std::vector<BasisEntry> entries;
    entries.reserve(awaiting_.size());
    for (const auto& d : awaiting_) entries.push_back({d.clock_index, d.basis});
    ++reveals_;
    return make_basis_reveal(entries);
  }

  void handle(const SiftFrame& f) {
    switch (f.msg_type) {
      case MsgType::kSiftKeep:
        on_keep(parse_sift_keep(f));
        break;
      case MsgType::kQberSample:
        on_sample(parse_qber_sample(f));
        break;
      default:
        throw ProtocolError("Bob: unexpected message type");
    }
  }

  const SiftedKey& key() const { return key_; }
  std::uint64_t detections_reported() const { return reported_; }
  std::uint64_t reveals() const { return reveals_; }
  std::uint64_t sample_bits() const { return sample_bits_; }
  std::uint64_t sample_errors() const { return sample_errors_; }
  std::optional<double> estimated_qber() const {
    if (sample_bits_ == 0) return std::nullopt;
    return static_cast<double>(sample_errors_) / static_cast<double>(sample_bits_);
  }

 private:
  struct Detection {
    std::uint64_t clock_index;
    Basis basis;
    std::uint8_t bit;
  };

  void on_keep(const std::vector<std::uint64_t>& kept) {
    std::size_t j = 0;
    for (auto idx : kept) {
      while (j < awaiting_.size() && awaiting_[j].clock_index < idx) ++j;
      if (j == awaiting_.size() || awaiting_[j].clock_index != idx) {
        throw ProtocolError("Bob: SIFT_KEEP names an unrevealed index");
      }
      key_.indices.push_back(idx);
      key_.bits.push_back(awaiting_[j].bit);
      ++j;
    }
    reported_ += awaiting_.size();
    awaiting_.clear();
  }

  void on_sample(const std::vector<BitEntry>& sample) {
    if (sample.empty()) return;
    std::vector<bool> drop(key_.size(), false);
    for (const auto& s : sample) {
      const auto it = std::lower_bound(key_.indices.begin(), key_.indices.end(), s.clock_index);
      if (it == key_.indices.end() || *it != s.clock_index) {
        throw ProtocolError("Bob: QBER_SAMPLE names an unsifted index");
      }
      const auto pos = static_cast<std::size_t>(it - key_.indices.begin());
      ++sample_bits_;
      if (key_.bits[pos] != s.bit) ++sample_errors_;
      drop[pos] = true;
    }
    std::size_t w = 0;
    for (std::size_t r = 0; r < key_.size(); ++r) {
      if (drop[r]) continue;
      key_.indices[w] = key_.indices[r];
      key_.bits[w] = key_.bits[r];
      ++w;
    }
    key_.indices.resize(w);
    key_.bits.resize(w);
  }

  std::size_t batch_size_;
  bool expects_sample_;
  std::deque<Detection> pending_;
  std::vector<Detection> awaiting_;
  SiftedKey key_;
  std::uint64_t reported_ = 0;
  std::uint64_t reveals_ = 0;
  std::uint64_t sample_bits_ = 0;
  std::uint64_t sample_errors_ = 0;
};

}  // namespace qkdsim::protocol
