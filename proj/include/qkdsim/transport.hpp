// Byte transports between Bob and Alice: an in-process channel and TCP.
#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <exception>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "qkdsim/frame.hpp"
#include "qkdsim/sifting.hpp"

namespace qkdsim::protocol {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TransportSpec {
  enum class Kind { kInproc, kTcp } kind = Kind::kInproc;
  std::string host;
  int port = 0;
};

/// "inproc" or "tcp:<host>:<port>"; port 0 picks an ephemeral port.
inline std::optional<TransportSpec> parse_transport(const std::string& s) {
  if (s == "inproc") return TransportSpec{};
  if (s.rfind("tcp:", 0) != 0) return std::nullopt;
  const auto colon = s.rfind(':');
  if (colon <= 4) return std::nullopt;
  TransportSpec t;
  t.kind = TransportSpec::Kind::kTcp;
  t.host = s.substr(4, colon - 4);
  const std::string port = s.substr(colon + 1);
  if (t.host.empty() || port.empty() || port.size() > 5) return std::nullopt;
  for (char c : port) {
    if (c < '0' || c > '9') return std::nullopt;
  }
  t.port = std::stoi(port);
  if (t.port > 65535) return std::nullopt;
  return t;
}

/// Bob's end of the classical channel.
class Link {
 public:
  virtual ~Link() = default;
  virtual void send(const SiftFrame& f) = 0;
  virtual SiftFrame receive() = 0;
};

/// Runs Alice synchronously inside send(); frames still cross as bytes.
class InprocLink final : public Link {
 public:
  explicit InprocLink(AliceEndpoint& alice) : alice_(alice) {}

  void send(const SiftFrame& f) override {
    to_alice_.feed(frame_encode(f));
    while (auto in = to_alice_.next()) {
      for (const auto& reply : alice_.handle(*in)) to_bob_.feed(frame_encode(reply));
    }
  }

  SiftFrame receive() override {
    auto f = to_bob_.next();
    if (!f) throw TransportError("inproc: no frame from Alice");
    return *std::move(f);
  }

 private:
  AliceEndpoint& alice_;
  FrameReader to_alice_;
  FrameReader to_bob_;
};

namespace detail {

inline void write_all(int fd, const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp send: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

/// Blocks until one whole frame is available; nullopt on orderly EOF.
inline std::optional<SiftFrame> read_frame(int fd, FrameReader& reader) {
  std::uint8_t buf[65536];
  for (;;) {
    if (auto f = reader.next()) return f;
    const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
    if (n == 0) {
      if (reader.buffered() != 0) throw TransportError("tcp: connection closed mid-frame");
      return std::nullopt;
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp recv: ") + std::strerror(errno));
    }
    reader.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
  }
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }
  int get() const { return fd_; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

inline sockaddr_in resolve_ipv4(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw TransportError("tcp: cannot resolve host " + host);
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  return addr;
}

}  // namespace detail

/// Serves one Alice endpoint on a background thread for a single Bob
/// connection. The session ends on SESSION_CTRL stop or EOF.
class AliceTcpServer {
 public:
  AliceTcpServer(AliceEndpoint& alice, const std::string& host, int port) : alice_(alice) {
    listener_ = detail::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (listener_.get() < 0) throw TransportError("tcp: socket() failed");
    int one = 1;
    ::setsockopt(listener_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = detail::resolve_ipv4(host, port);
    if (::bind(listener_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw TransportError("tcp: bind failed on " + host + ":" + std::to_string(port) + ": " +
                           std::strerror(errno));
    }
    if (::listen(listener_.get(), 1) != 0) throw TransportError("tcp: listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(listener_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { serve(); });
  }

  AliceTcpServer(const AliceTcpServer&) = delete;
  AliceTcpServer& operator=(const AliceTcpServer&) = delete;

  ~AliceTcpServer() {
    if (thread_.joinable()) {
      ::shutdown(listener_.get(), SHUT_RDWR);
      thread_.join();
    }
  }

  int port() const { return port_; }

  /// Waits for the session to end; rethrows any error from Alice's side.
  void join() {
    if (thread_.joinable()) thread_.join();
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void serve() {
    try {
      detail::Socket conn(::accept(listener_.get(), nullptr, nullptr));
      if (conn.get() < 0) throw TransportError("tcp: accept failed");
      detail::set_nodelay(conn.get());
      FrameReader reader;
      while (auto f = detail::read_frame(conn.get(), reader)) {
        for (const auto& reply : alice_.handle(*f)) detail::write_all(conn.get(), frame_encode(reply));
        if (alice_.stopped()) break;
      }
    } catch (...) {
      error_ = std::current_exception();
    }
  }

  AliceEndpoint& alice_;
  detail::Socket listener_;
  int port_ = 0;
  std::thread thread_;
  std::exception_ptr error_;
};

class TcpLink final : public Link {
 public:
  TcpLink(const std::string& host, int port) {
    sock_ = detail::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (sock_.get() < 0) throw TransportError("tcp: socket() failed");
    sockaddr_in addr = detail::resolve_ipv4(host, port);
    if (::connect(sock_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw TransportError("tcp: connect to " + host + ":" + std::to_string(port) + " failed: " +
                           std::strerror(errno));
    }
    detail::set_nodelay(sock_.get());
  }

  void send(const SiftFrame& f) override { detail::write_all(sock_.get(), frame_encode(f)); }

  SiftFrame receive() override {
    auto f = detail::read_frame(sock_.get(), reader_);
    if (!f) throw TransportError("tcp: Alice closed the connection");
    return *std::move(f);
  }

 private:
  detail::Socket sock_;
  FrameReader reader_;
};

/// Bob's side of a session: feeds detections to the endpoint and runs the
/// reveal / keep exchange over a link. Optionally captures Bob's outbound
/// bytes.
class BobSession {
 public:
  BobSession(BobEndpoint& bob, Link& link, std::vector<std::uint8_t>* capture = nullptr)
      : bob_(bob), link_(link), capture_(capture) {}

  void start(std::uint64_t clock_index) { send(make_session_ctrl(SessionCode::kStart, clock_index)); }

  void detection(std::uint64_t clock_index, Basis basis, std::uint8_t bit) {
    if (auto f = bob_.on_detection(clock_index, basis, bit)) exchange(*f);
  }

  void control(SessionCode code, std::uint64_t clock_index) {
    send(make_session_ctrl(code, clock_index));
  }

  void finish(std::uint64_t clock_index) {
    if (auto f = bob_.flush()) exchange(*f);
    send(make_session_ctrl(SessionCode::kStop, clock_index));
  }

 private:
  void send(const SiftFrame& f) {
    if (capture_) {
      const auto bytes = frame_encode(f);
      capture_->insert(capture_->end(), bytes.begin(), bytes.end());
    }
    link_.send(f);
  }

  void exchange(const SiftFrame& reveal) {
    send(reveal);
    bob_.handle(link_.receive());
    if (bob_.expects_sample()) bob_.handle(link_.receive());
  }

  BobEndpoint& bob_;
  Link& link_;
  std::vector<std::uint8_t>* capture_;
};

}  // namespace qkdsim::protocol
