#include <gtest/gtest.h>

#include <cmath>

#include "qkdsim/detectors.hpp"
#include "qkdsim/frame.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/sifting.hpp"
#include "qkdsim/transport.hpp"

using namespace qkdsim;
using namespace qkdsim::protocol;

// Encoding table.

TEST(Encoding, TableAnchors) {
  EXPECT_EQ(encode_phase(Basis::kZ, 0), 0);
  EXPECT_EQ(encode_phase(Basis::kZ, 1), 180);
  EXPECT_EQ(encode_phase(Basis::kX, 0), 90);
  EXPECT_EQ(encode_phase(Basis::kX, 1), 270);
}

TEST(Encoding, RoundTrip) {
  for (Basis b : {Basis::kZ, Basis::kX}) {
    for (std::uint8_t v : {0, 1}) EXPECT_EQ(decode_phase(encode_phase(b, v)), std::make_pair(b, v));
  }
  EXPECT_THROW(decode_phase(45), std::domain_error);
}

TEST(AliceEmit, ReproducibleAndCarriesSourceSettings) {
  const CounterRng a(5, "alice"), b(5, "alice");
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto [pa, pulse] = alice_emit(a, i);
    const auto [pb, pulse_b] = alice_emit(b, i);
    ASSERT_EQ(pa.phase_deg, pb.phase_deg);
    ASSERT_EQ(pulse.alice_phase_deg, static_cast<double>(pa.phase_deg));
    ASSERT_EQ(pulse.signal_mean_photons, 0.2);
    ASSERT_NEAR(pulse.reference_mean_photons / pulse.signal_mean_photons, 24.0, 1e-12);
    ASSERT_EQ(pulse.delay_ns, 40.0);
  }
}

TEST(AliceEmit, BasisAndBitBalance) {
  const CounterRng rng(1, "alice");
  const std::uint64_t n = 1000000;
  std::uint64_t x = 0, ones = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto p = alice_prepare(rng, i);
    x += p.basis == Basis::kX;
    ones += p.bit;
  }
  const double sigma = std::sqrt(n * 0.25);
  EXPECT_NEAR(static_cast<double>(x), n / 2.0, 3.0 * sigma);
  EXPECT_NEAR(static_cast<double>(ones), n / 2.0, 3.0 * sigma);
}

TEST(BobMeasure, ErrorProbabilities) {
  for (Basis b : {Basis::kZ, Basis::kX}) {
    for (std::uint8_t v : {0, 1}) {
      const int phase = encode_phase(b, v);
      EXPECT_NEAR(bob_error_probability(phase, b, 0.0, 1.0), 0.0, 1e-15);
      EXPECT_NEAR(bob_error_probability(phase, b, 0.0, 0.9912), 0.0044, 1e-12);
      const Basis other = b == Basis::kZ ? Basis::kX : Basis::kZ;
      const auto [p0, p1] = physics::interference_probabilities(phase - bob_phase(other), 0.7);
      EXPECT_NEAR(p0, 0.5, 1e-15);
      EXPECT_NEAR(p1, 0.5, 1e-15);
    }
  }
}

TEST(BobMeasure, ReadsAliceBitWithIdealOptics) {
  detectors::ApdConfig c;
  c.efficiency = 1.0;
  c.dark_prob_per_gate = 0.0;
  detectors::Apd apd0(c, detectors::DetectorId::kApd0), apd1(c, detectors::DetectorId::kApd1);
  Rng rng(3);
  const CounterRng alice(3, "alice");
  int clicks = 0;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    const auto p = alice_prepare(alice, i);
    const auto m = bob_measure(p.phase_deg, p.basis, 0.0, 2.0, 1.0, apd0, apd1, rng, i);
    ASSERT_FALSE(m.double_click());
    if (m.single_click()) {
      ++clicks;
      ASSERT_EQ(m.bit(), p.bit);
    }
  }
  EXPECT_GT(clicks, 15000);
}

// Frames.

TEST(Frame, EmptyPayloadIsFiveBytes) {
  const auto bytes = frame_encode(SiftFrame{MsgType::kSiftKeep, {}});
  ASSERT_EQ(bytes.size(), 5U);
  EXPECT_EQ(bytes[0], 2);
  const auto r = frame_decode(bytes);
  EXPECT_EQ(r.status, DecodeStatus::kOk);
  EXPECT_TRUE(r.frame.payload.empty());
}

TEST(Frame, WireLayout) {
  const std::vector<BasisEntry> e{{0x0102030405060708ULL, Basis::kX}};
  const auto bytes = frame_encode(make_basis_reveal(e));
  const std::vector<std::uint8_t> expected{1, 9, 0, 0, 0, 8, 7, 6, 5, 4, 3, 2, 1, 1};
  EXPECT_EQ(bytes, expected);
}

TEST(Frame, ThousandEntryRevealRoundTrips) {
  Rng rng(1);
  std::vector<BasisEntry> entries;
  for (int i = 0; i < 1000; ++i) entries.push_back({rng.bits(), (rng.bits() & 1) ? Basis::kX : Basis::kZ});
  const SiftFrame f = make_basis_reveal(entries);
  const auto r = frame_decode(frame_encode(f));
  ASSERT_EQ(r.status, DecodeStatus::kOk);
  EXPECT_EQ(r.frame, f);
  EXPECT_EQ(parse_basis_reveal(r.frame), entries);
}

TEST(Frame, TruncatedPayloadRejected) {
  std::vector<std::uint8_t> bytes{2, 10, 0, 0, 0};
  bytes.resize(5 + 9, 0);
  EXPECT_EQ(frame_decode(bytes).status, DecodeStatus::kTruncated);
  bytes.push_back(0);
  EXPECT_EQ(frame_decode(bytes).status, DecodeStatus::kOk);
  bytes.push_back(0);
  EXPECT_EQ(frame_decode(bytes).status, DecodeStatus::kOverLength);
}

TEST(Frame, UnknownTypeAndOversizeRejected) {
  EXPECT_EQ(frame_decode(std::vector<std::uint8_t>{0, 0, 0, 0, 0}).status, DecodeStatus::kUnknownType);
  EXPECT_EQ(frame_decode(std::vector<std::uint8_t>{9, 0, 0, 0, 0}).status, DecodeStatus::kUnknownType);
  EXPECT_EQ(frame_decode(std::vector<std::uint8_t>{1, 0xff, 0xff, 0xff, 0xff}).status, DecodeStatus::kOverLength);
}

TEST(Frame, PayloadParsersRejectMalformed) {
  EXPECT_THROW(parse_sift_keep(SiftFrame{MsgType::kSiftKeep, std::vector<std::uint8_t>(7)}), ProtocolError);
  EXPECT_THROW(parse_basis_reveal(SiftFrame{MsgType::kBasisReveal, std::vector<std::uint8_t>(10)}), ProtocolError);
  std::vector<std::uint8_t> bad(9, 0);
  bad[8] = 2;
  EXPECT_THROW(parse_basis_reveal(SiftFrame{MsgType::kBasisReveal, bad}), ProtocolError);
  EXPECT_THROW(parse_session_ctrl(SiftFrame{MsgType::kSessionCtrl, {7, 0, 0, 0, 0, 0, 0, 0, 0}}), ProtocolError);
  EXPECT_THROW(parse_sift_keep(SiftFrame{MsgType::kBasisReveal, {}}), ProtocolError);
}

namespace {

SiftFrame random_frame(Rng& rng) {
  const auto type = 1 + rng.bits() % 4;
  const std::size_t n = rng.bits() % 64;
  switch (type) {
    case 1: {
      std::vector<BasisEntry> e;
      for (std::size_t i = 0; i < n; ++i) e.push_back({rng.bits(), (rng.bits() & 1) ? Basis::kX : Basis::kZ});
      return make_basis_reveal(e);
    }
    case 2: {
      std::vector<std::uint64_t> e;
      for (std::size_t i = 0; i < n; ++i) e.push_back(rng.bits());
      return make_sift_keep(e);
    }
    case 3:
      return make_session_ctrl(static_cast<SessionCode>(rng.bits() % 4), rng.bits());
    default: {
      std::vector<BitEntry> e;
      for (std::size_t i = 0; i < n; ++i) e.push_back({rng.bits(), static_cast<std::uint8_t>(rng.bits() & 1)});
      return make_qber_sample(e);
    }
  }
}

}  // namespace

TEST(Frame, RandomValidFramesRoundTrip) {
  Rng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const SiftFrame f = random_frame(rng);
    const auto r = frame_decode(frame_encode(f));
    ASSERT_EQ(r.status, DecodeStatus::kOk);
    ASSERT_EQ(r.frame, f);
  }
}

TEST(Frame, FuzzedInputNeverCrashes) {
  Rng rng(77);
  std::uint64_t ok = 0;
  for (int i = 0; i < 200000; ++i) {
    std::vector<std::uint8_t> bytes;
    if (rng.bits() & 1) {
      bytes = frame_encode(random_frame(rng));
      const std::size_t flips = 1 + rng.bits() % 4;
      for (std::size_t k = 0; k < flips && !bytes.empty(); ++k) bytes[rng.bits() % bytes.size()] ^= static_cast<std::uint8_t>(rng.bits());
      if (rng.bits() & 1) bytes.resize(rng.bits() % (bytes.size() + 1));
    } else {
      bytes.resize(rng.bits() % 40);
      for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.bits());
    }
    const auto r = frame_decode(bytes);
    if (r.status == DecodeStatus::kOk) {
      ++ok;
      ASSERT_EQ(frame_encode(r.frame), bytes);
      // Payload parsers may reject but must not crash.
      try {
        switch (r.frame.msg_type) {
          case MsgType::kBasisReveal: parse_basis_reveal(r.frame); break;
          case MsgType::kSiftKeep: parse_sift_keep(r.frame); break;
          case MsgType::kSessionCtrl: parse_session_ctrl(r.frame); break;
          case MsgType::kQberSample: parse_qber_sample(r.frame); break;
        }
      } catch (const ProtocolError&) {
      }
    }
    FrameReader reader;
    reader.feed(bytes);
    try {
      while (reader.next()) {
      }
    } catch (const ProtocolError&) {
    }
  }
  EXPECT_GT(ok, 0U);
}

TEST(FrameReader, ReassemblesByteByByte) {
  Rng rng(8);
  std::vector<SiftFrame> sent;
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(random_frame(rng));
    const auto b = frame_encode(sent.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  FrameReader reader;
  std::vector<SiftFrame> got;
  for (auto byte : stream) {
    reader.feed(std::span<const std::uint8_t>(&byte, 1));
    while (auto f = reader.next()) got.push_back(*f);
  }
  EXPECT_EQ(got, sent);
  EXPECT_EQ(reader.buffered(), 0U);
}

TEST(FrameReader, ThrowsOnCorruptStream) {
  FrameReader reader;
  reader.feed(std::vector<std::uint8_t>{0x42, 0, 0, 0, 0});
  EXPECT_THROW(reader.next(), ProtocolError);
}

// Sifting.

namespace {

struct Detection {
  std::uint64_t index;
  Basis basis;
  std::uint8_t bit;
};

std::vector<Detection> detections_matching(const CounterRng& alice, int n, bool same_basis, bool flip_bits = false) {
  std::vector<Detection> out;
  for (std::uint64_t i = 0; out.size() < static_cast<std::size_t>(n); i += 3) {
    const auto p = alice_prepare(alice, i);
    Basis b = p.basis;
    if (!same_basis) b = b == Basis::kZ ? Basis::kX : Basis::kZ;
    out.push_back({i, b, static_cast<std::uint8_t>(p.bit ^ flip_bits)});
  }
  return out;
}

std::vector<std::uint8_t> run_session(const CounterRng& alice_rng, const std::vector<Detection>& dets,
                                      AliceEndpoint& alice, BobEndpoint& bob) {
  InprocLink link(alice);
  std::vector<std::uint8_t> capture;
  BobSession session(bob, link, &capture);
  (void)alice_rng;
  session.start(0);
  for (const auto& d : dets) session.detection(d.index, d.basis, d.bit);
  session.finish(dets.empty() ? 0 : dets.back().index + 1);
  return capture;
}

}  // namespace

TEST(Sifting, AllBasesEqualKeepsEverything) {
  const CounterRng rng(4, "alice");
  AliceEndpoint alice(rng);
  BobEndpoint bob(100);
  const auto dets = detections_matching(rng, 1000, true);
  run_session(rng, dets, alice, bob);
  EXPECT_EQ(bob.key().size(), 1000U);
  EXPECT_EQ(alice.key().indices, bob.key().indices);
  EXPECT_EQ(alice.key().bits, bob.key().bits);
  EXPECT_TRUE(alice.stopped());
}

TEST(Sifting, AllBasesOppositeKeepsNothing) {
  const CounterRng rng(4, "alice");
  AliceEndpoint alice(rng);
  BobEndpoint bob(100);
  run_session(rng, detections_matching(rng, 1000, false), alice, bob);
  EXPECT_EQ(bob.key().size(), 0U);
  EXPECT_EQ(alice.key().size(), 0U);
  EXPECT_EQ(bob.detections_reported(), 1000U);
}

TEST(Sifting, RandomBasesKeepHalf) {
  const CounterRng alice_rng(6, "alice");
  Rng bob_rng(6, "bob");
  AliceEndpoint alice(alice_rng);
  BobEndpoint bob(4096);
  std::vector<Detection> dets;
  for (std::uint64_t i = 0; i < 100000; ++i) {
    const auto p = alice_prepare(alice_rng, i);
    const Basis b = (bob_rng.bits() & 1) ? Basis::kX : Basis::kZ;
    dets.push_back({i, b, b == p.basis ? p.bit : static_cast<std::uint8_t>(bob_rng.bits() & 1)});
  }
  run_session(alice_rng, dets, alice, bob);
  EXPECT_EQ(alice.key().bits, bob.key().bits);
  EXPECT_NEAR(static_cast<double>(bob.key().size()), 50000.0, 3.0 * std::sqrt(100000 * 0.25));
}

TEST(Sifting, SampleDisclosureEstimatesQber) {
  const CounterRng alice_rng(6, "alice");
  Rng noise(12);
  AliceEndpoint alice(alice_rng, 0.2, 99);
  BobEndpoint bob(1000, true);
  std::vector<Detection> dets;
  for (std::uint64_t i = 0; i < 200000; ++i) {
    const auto p = alice_prepare(alice_rng, i);
    dets.push_back({i, p.basis, static_cast<std::uint8_t>(p.bit ^ noise.bernoulli(0.05))});
  }
  run_session(alice_rng, dets, alice, bob);
  ASSERT_TRUE(bob.estimated_qber().has_value());
  const double n = static_cast<double>(bob.sample_bits());
  EXPECT_NEAR(n, 40000.0, 4.0 * std::sqrt(200000 * 0.16));
  EXPECT_NEAR(*bob.estimated_qber(), 0.05, 4.0 * std::sqrt(0.05 * 0.95 / n));
  // Disclosed bits leave both keys.
  EXPECT_EQ(alice.key().indices, bob.key().indices);
  EXPECT_EQ(bob.key().size() + bob.sample_bits(), 200000U);
}

TEST(Sifting, RevealOutsideSessionAborts) {
  const CounterRng rng(1, "alice");
  AliceEndpoint alice(rng);
  const std::vector<BasisEntry> e{{5, Basis::kZ}};
  EXPECT_THROW(alice.handle(make_basis_reveal(e)), ProtocolError);
}

TEST(Sifting, NonIncreasingIndicesAbort) {
  const CounterRng rng(1, "alice");
  AliceEndpoint alice(rng);
  alice.handle(make_session_ctrl(SessionCode::kStart, 0));
  const std::vector<BasisEntry> e{{5, Basis::kZ}, {5, Basis::kX}};
  EXPECT_THROW(alice.handle(make_basis_reveal(e)), ProtocolError);
}

TEST(Sifting, BobRejectsKeepForUnrevealedIndex) {
  BobEndpoint bob(10);
  bob.on_detection(3, Basis::kZ, 1);
  ASSERT_TRUE(bob.flush().has_value());
  const std::vector<std::uint64_t> keep{4};
  EXPECT_THROW(bob.handle(make_sift_keep(keep)), ProtocolError);
}

TEST(Sifting, BobOutboundBytesIndependentOfBits) {
  const CounterRng rng(10, "alice");
  Rng bases(10, "bob");
  std::vector<Detection> dets;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    dets.push_back({i * 2, (bases.bits() & 1) ? Basis::kX : Basis::kZ, static_cast<std::uint8_t>(bases.bits() & 1)});
  }
  auto flipped = dets;
  for (auto& d : flipped) d.bit ^= 1;
  AliceEndpoint a1(rng), a2(rng);
  BobEndpoint b1(512), b2(512);
  const auto c1 = run_session(rng, dets, a1, b1);
  const auto c2 = run_session(rng, flipped, a2, b2);
  EXPECT_EQ(c1, c2);
  // Only reveals and session control leave Bob.
  FrameReader reader;
  reader.feed(c1);
  std::size_t frames = 0;
  while (auto f = reader.next()) {
    ++frames;
    ASSERT_TRUE(f->msg_type == MsgType::kBasisReveal || f->msg_type == MsgType::kSessionCtrl);
  }
  EXPECT_GT(frames, 2U);
}

// Transports.

TEST(Transport, ParseSpec) {
  EXPECT_EQ(parse_transport("inproc")->kind, TransportSpec::Kind::kInproc);
  const auto t = parse_transport("tcp:127.0.0.1:5000");
  ASSERT_TRUE(t.has_value());
  EXPECT_EQ(t->host, "127.0.0.1");
  EXPECT_EQ(t->port, 5000);
  EXPECT_FALSE(parse_transport("udp:x:1").has_value());
  EXPECT_FALSE(parse_transport("tcp::1").has_value());
  EXPECT_FALSE(parse_transport("tcp:host:99999").has_value());
  EXPECT_FALSE(parse_transport("tcp:host:").has_value());
}

TEST(Transport, TcpMatchesInproc) {
  const CounterRng rng(14, "alice");
  Rng bases(14, "bob");
  std::vector<Detection> dets;
  for (std::uint64_t i = 0; i < 30000; ++i) {
    const auto p = alice_prepare(rng, i);
    const Basis b = (bases.bits() & 1) ? Basis::kX : Basis::kZ;
    dets.push_back({i, b, p.bit});
  }
  AliceEndpoint a_in(rng, 0.1, 5);
  BobEndpoint b_in(1000, true);
  run_session(rng, dets, a_in, b_in);

  AliceEndpoint a_tcp(rng, 0.1, 5);
  BobEndpoint b_tcp(1000, true);
  AliceTcpServer server(a_tcp, "127.0.0.1", 0);
  {
    TcpLink link("127.0.0.1", server.port());
    BobSession session(b_tcp, link);
    session.start(0);
    for (const auto& d : dets) session.detection(d.index, d.basis, d.bit);
    session.finish(dets.back().index + 1);
  }
  server.join();
  EXPECT_EQ(a_tcp.key().indices, a_in.key().indices);
  EXPECT_EQ(b_tcp.key().bits, b_in.key().bits);
  EXPECT_EQ(b_tcp.sample_bits(), b_in.sample_bits());
}

TEST(Transport, ConnectFailureIsTransportError) {
  // Bind then close a listener to find a port with nothing behind it.
  int port;
  {
    const CounterRng rng(1, "alice");
    AliceEndpoint alice(rng);
    AliceTcpServer server(alice, "127.0.0.1", 0);
    port = server.port();
    TcpLink wake("127.0.0.1", port);
  }
  EXPECT_THROW(TcpLink("127.0.0.1", port), TransportError);
}

TEST(Transport, PeerCloseMidSessionIsTransportError) {
  const CounterRng rng(1, "alice");
  AliceEndpoint alice(rng);
  AliceTcpServer server(alice, "127.0.0.1", 0);
  TcpLink link("127.0.0.1", server.port());
  // A reveal before start makes Alice abort and close the connection.
  const std::vector<BasisEntry> e{{1, Basis::kZ}};
  link.send(make_basis_reveal(e));
  EXPECT_THROW(link.receive(), TransportError);
  EXPECT_THROW(server.join(), ProtocolError);
}
