#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedabc/error.hpp"
#include "fedabc/wire.hpp"

namespace fedabc {

using Millis = std::chrono::milliseconds;

/// One reliable, ordered, bidirectional link between the server and a site.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const WireMessage& msg) = 0;
  /// nullopt on timeout; TransportError when the peer is gone.
  virtual std::optional<WireMessage> receive(Millis timeout) = 0;
};

namespace detail {

class MessageQueue {
 public:
  void push(WireMessage m) {
    {
      std::lock_guard lock(mu_);
      if (closed_) throw TransportError("in-process peer has closed the link");
      q_.push_back(std::move(m));
    }
    cv_.notify_one();
  }

  std::optional<WireMessage> pop(Millis timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !q_.empty() || closed_; })) return std::nullopt;
    if (q_.empty()) throw TransportError("in-process peer has closed the link");
    WireMessage m = std::move(q_.front());
    q_.pop_front();
    return m;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<WireMessage> q_;
  bool closed_ = false;
};

class InProcessChannel final : public Channel {
 public:
  InProcessChannel(std::shared_ptr<MessageQueue> in, std::shared_ptr<MessageQueue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~InProcessChannel() override {
    out_->close();
    in_->close();
  }

  // Messages are copied, as they would be on a wire.
  void send(const WireMessage& msg) override { out_->push(msg); }
  std::optional<WireMessage> receive(Millis timeout) override { return in_->pop(timeout); }

 private:
  std::shared_ptr<MessageQueue> in_;
  std::shared_ptr<MessageQueue> out_;
};

}  // namespace detail

/// Two connected in-process endpoints: {server side, site side}.
inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> in_process_pair() {
  auto a = std::make_shared<detail::MessageQueue>();
  auto b = std::make_shared<detail::MessageQueue>();
  return {std::make_unique<detail::InProcessChannel>(a, b), std::make_unique<detail::InProcessChannel>(b, a)};
}

/// Length-prefixed JSON frames over a connected stream socket.
class TcpChannel final : public Channel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

  void send(const WireMessage& msg) override {
    const std::string frame = encode_frame(msg);
    std::size_t off = 0;
    while (off < frame.size()) {
      const ssize_t w = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("send failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(w);
    }
  }

  std::optional<WireMessage> receive(Millis timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto msg = try_extract()) return msg;
      const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("poll failed: ") + std::strerror(errno));
      }
      if (r == 0) return std::nullopt;
      char chunk[1 << 16];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n == 0) throw TransportError("connection closed by peer");
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw TransportError(std::string("recv failed: ") + std::strerror(errno));
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  std::optional<WireMessage> try_extract() {
    const auto len = frame_length(buffer_);
    if (!len || buffer_.size() < 4 + static_cast<std::size_t>(*len)) return std::nullopt;
    const std::size_t total = 4 + *len;
    WireMessage m = decode_frame(std::span<const char>(buffer_.data(), total));
    buffer_.erase(0, total);
    return m;
  }

  int fd_;
  std::string buffer_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;

  /// Parses "host:port".
  static Endpoint parse(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw ConfigError("address must be host:port, got '" + s + "'");
    Endpoint e;
    e.host = s.substr(0, colon);
    try {
      e.port = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad port in address '" + s + "'");
    }
    if (e.port < 0 || e.port > 65535) throw ConfigError("port out of range in '" + s + "'");
    return e;
  }
  std::string str() const { return host + ":" + std::to_string(port); }
};

namespace detail {

inline sockaddr_in resolve(const Endpoint& e) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(e.port));
  if (::inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(e.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw TransportError("cannot resolve host '" + e.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

}  // namespace detail

/// Listening socket for the server role. Port 0 binds an ephemeral port.
class TcpListener {
 public:
  explicit TcpListener(const Endpoint& at) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw TransportError(std::string("socket failed: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = detail::resolve(at);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw TransportError("bind " + at.str() + " failed: " + err);
    }
    if (::listen(fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw TransportError("listen failed: " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    bound_ = {at.host, ntohs(addr.sin_port)};
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  const Endpoint& endpoint() const { return bound_; }

  std::unique_ptr<Channel> accept(Millis timeout) {
    pollfd p{fd_, POLLIN, 0};
    for (;;) {
      const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) throw TransportError("timed out waiting for a site to connect");
      break;
    }
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) throw TransportError(std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<TcpChannel>(c);
  }

 private:
  int fd_ = -1;
  Endpoint bound_;
};

/// Connects to a server, retrying until `timeout` elapses.
inline std::unique_ptr<Channel> tcp_connect(const Endpoint& to, Millis timeout = Millis{10'000}) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  const sockaddr_in addr = detail::resolve(to);
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError(std::string("socket failed: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      return std::make_unique<TcpChannel>(fd);
    }
    const std::string err = std::strerror(errno);
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw TransportError("connect to " + to.str() + " failed: " + err);
    }
    std::this_thread::sleep_for(Millis{20});
  }
}

}  // namespace fedabc
