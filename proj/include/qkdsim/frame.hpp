// Length-prefixed frames for the classical sifting channel.
//
//   frame        = [msg_type: u8][payload_len: u32 LE][payload]
//   BASIS_REVEAL = repeated { clock_index: u64 LE, basis: u8 (0 = Z, 1 = X) }
//   SIFT_KEEP    = repeated { clock_index: u64 LE }
//   SESSION_CTRL = { code: u8, clock_index: u64 LE }
//   QBER_SAMPLE  = repeated { clock_index: u64 LE, bit: u8 }   (Alice -> Bob)
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qkdsim/protocol.hpp"

namespace qkdsim::protocol {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MsgType : std::uint8_t {
  kBasisReveal = 1,
  kSiftKeep = 2,
  kSessionCtrl = 3,
  kQberSample = 4,
};

enum class SessionCode : std::uint8_t { kStart = 0, kStop = 1, kSuspend = 2, kResume = 3 };

inline constexpr std::size_t kFrameHeaderSize = 5;
inline constexpr std::uint32_t kMaxPayload = 64U << 20;

struct SiftFrame {
  MsgType msg_type = MsgType::kSessionCtrl;
  std::vector<std::uint8_t> payload;

  bool operator==(const SiftFrame&) const = default;
};

inline bool known_msg_type(std::uint8_t t) { return t >= 1 && t <= 4; }

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

inline std::vector<std::uint8_t> frame_encode(const SiftFrame& f) {
  if (f.payload.size() > kMaxPayload) throw ProtocolError("frame payload too large");
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + f.payload.size());
  out.push_back(static_cast<std::uint8_t>(f.msg_type));
  const auto len = static_cast<std::uint32_t>(f.payload.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

enum class DecodeStatus { kOk, kTruncated, kUnknownType, kOverLength };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::kTruncated;
  SiftFrame frame;
  std::size_t consumed = 0;
};

/// Decodes the frame at the front of `bytes`. Never throws; a short buffer
/// reports kTruncated so stream readers can wait for more input.
inline DecodeResult frame_decode_prefix(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  if (bytes.empty()) return r;
  if (!known_msg_type(bytes[0])) {
    r.status = DecodeStatus::kUnknownType;
    return r;
  }
  if (bytes.size() < kFrameHeaderSize) return r;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[1 + i]) << (8 * i);
  if (len > kMaxPayload) {
    r.status = DecodeStatus::kOverLength;
    return r;
  }
  if (bytes.size() - kFrameHeaderSize < len) return r;
  r.status = DecodeStatus::kOk;
  r.frame.msg_type = static_cast<MsgType>(bytes[0]);
  r.frame.payload.assign(bytes.begin() + kFrameHeaderSize,
                         bytes.begin() + kFrameHeaderSize + len);
  r.consumed = kFrameHeaderSize + len;
  return r;
}

/// Decodes exactly one frame; trailing bytes are a length mismatch.
inline DecodeResult frame_decode(std::span<const std::uint8_t> bytes) {
  DecodeResult r = frame_decode_prefix(bytes);
  if (r.status == DecodeStatus::kOk && r.consumed != bytes.size()) {
    r.status = DecodeStatus::kOverLength;
    r.frame = {};
  }
  return r;
}

inline const char* to_string(DecodeStatus s) {
  switch (s) {
    case DecodeStatus::kOk: return "ok";
    case DecodeStatus::kTruncated: return "truncated frame";
    case DecodeStatus::kUnknownType: return "unknown message type";
    case DecodeStatus::kOverLength: return "frame length mismatch";
  }
  return "?";
}

/// Accumulates stream bytes and yields whole frames.
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  /// Next complete frame, or nothing if more bytes are needed.
  /// Throws ProtocolError on a malformed stream.
  std::optional<SiftFrame> next() {
    const auto r = frame_decode_prefix(std::span(buf_).subspan(pos_));
    if (r.status == DecodeStatus::kTruncated) {
      compact();
      return std::nullopt;
    }
    if (r.status != DecodeStatus::kOk) throw ProtocolError(to_string(r.status));
    pos_ += r.consumed;
    return r.frame;
  }

  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  void compact() {
    if (pos_ > 0) {
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
      pos_ = 0;
    }
  }

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

// Payload codecs.

struct BasisEntry {
  std::uint64_t clock_index = 0;
  Basis basis = Basis::kZ;
  bool operator==(const BasisEntry&) const = default;
};

struct BitEntry {
  std::uint64_t clock_index = 0;
  std::uint8_t bit = 0;
  bool operator==(const BitEntry&) const = default;
};

inline SiftFrame make_basis_reveal(std::span<const BasisEntry> entries) {
  SiftFrame f{MsgType::kBasisReveal, {}};
  f.payload.reserve(entries.size() * 9);
  for (const auto& e : entries) {
    put_u64(f.payload, e.clock_index);
    f.payload.push_back(static_cast<std::uint8_t>(e.basis));
  }
  return f;
}

inline std::vector<BasisEntry> parse_basis_reveal(const SiftFrame& f) {
  if (f.msg_type != MsgType::kBasisReveal) throw ProtocolError("expected BASIS_REVEAL");
  if (f.payload.size() % 9 != 0) throw ProtocolError("BASIS_REVEAL payload length");
  std::vector<BasisEntry> out;
  out.reserve(f.payload.size() / 9);
  const std::span<const std::uint8_t> p(f.payload);
  for (std::size_t i = 0; i < p.size(); i += 9) {
    const std::uint8_t b = p[i + 8];
    if (b > 1) throw ProtocolError("BASIS_REVEAL basis byte");
    out.push_back({get_u64(p.subspan(i, 8)), static_cast<Basis>(b)});
  }
  return out;
}

inline SiftFrame make_sift_keep(std::span<const std::uint64_t> indices) {
  SiftFrame f{MsgType::kSiftKeep, {}};
  f.payload.reserve(indices.size() * 8);
  for (auto idx : indices) put_u64(f.payload, idx);
  return f;
}

inline std::vector<std::uint64_t> parse_sift_keep(const SiftFrame& f) {
  if (f.msg_type != MsgType::kSiftKeep) throw ProtocolError("expected SIFT_KEEP");
  if (f.payload.size() % 8 != 0) throw ProtocolError("SIFT_KEEP payload length");
  std::vector<std::uint64_t> out;
  out.reserve(f.payload.size() / 8);
  const std::span<const std::uint8_t> p(f.payload);
  for (std::size_t i = 0; i < p.size(); i += 8) out.push_back(get_u64(p.subspan(i, 8)));
  return out;
}

inline SiftFrame make_session_ctrl(SessionCode code, std::uint64_t clock_index) {
  SiftFrame f{MsgType::kSessionCtrl, {static_cast<std::uint8_t>(code)}};
  put_u64(f.payload, clock_index);
  return f;
}

inline std::pair<SessionCode, std::uint64_t> parse_session_ctrl(const SiftFrame& f) {
  if (f.msg_type != MsgType::kSessionCtrl) throw ProtocolError("expected SESSION_CTRL");
  if (f.payload.size() != 9 || f.payload[0] > 3) throw ProtocolError("SESSION_CTRL payload");
  return {static_cast<SessionCode>(f.payload[0]), get_u64(std::span(f.payload).subspan(1, 8))};
}

inline SiftFrame make_qber_sample(std::span<const BitEntry> entries) {
  SiftFrame f{MsgType::kQberSample, {}};
  f.payload.reserve(entries.size() * 9);
  for (const auto& e : entries) {
    put_u64(f.payload, e.clock_index);
    f.payload.push_back(e.bit);
  }
  return f;
}

inline std::vector<BitEntry> parse_qber_sample(const SiftFrame& f) {
  if (f.msg_type != MsgType::kQberSample) throw ProtocolError("expected QBER_SAMPLE");
  if (f.payload.size() % 9 != 0) throw ProtocolError("QBER_SAMPLE payload length");
  std::vector<BitEntry> out;
  const std::span<const std::uint8_t> p(f.payload);
  for (std::size_t i = 0; i < p.size(); i += 9) {
    if (p[i + 8] > 1) throw ProtocolError("QBER_SAMPLE bit byte");
    out.push_back({get_u64(p.subspan(i, 8)), p[i + 8]});
  }
  return out;
}

}  // namespace qkdsim::protocol
