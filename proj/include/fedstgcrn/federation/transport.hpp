// Message channels between the server and one client. Both transports move
// the same encoded frames; only the byte pipe differs.
#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/federation/message.hpp"

namespace fedstgcrn {

using Millis = std::chrono::milliseconds;

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Message& m) = 0;
  // Throws FederationError on timeout or when the peer has gone away.
  virtual Message receive(Millis timeout) = 0;
  // Wakes a peer blocked in receive(); idempotent.
  virtual void close() = 0;
};

// ---------------------------------------------------------------------------
// In-process: a pair of frame queues.
// ---------------------------------------------------------------------------

namespace transport_detail {

struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Bytes> queue[2];  // queue[i] is read by endpoint i
  bool closed = false;
};

}  // namespace transport_detail

class InProcChannel final : public Channel {
 public:
  InProcChannel(std::shared_ptr<transport_detail::Pipe> pipe, int side) : pipe_(std::move(pipe)), side_(side) {}
  ~InProcChannel() override { close(); }

  void send(const Message& m) override {
    Bytes frame = encode_frame(m);
    std::lock_guard lock(pipe_->mu);
    if (pipe_->closed) throw FederationError("in-process channel closed");
    pipe_->queue[1 - side_].push_back(std::move(frame));
    pipe_->cv.notify_all();
  }

  Message receive(Millis timeout) override {
    std::unique_lock lock(pipe_->mu);
    auto& q = pipe_->queue[side_];
    if (!pipe_->cv.wait_for(lock, timeout, [&] { return !q.empty() || pipe_->closed; })) {
      throw FederationError("timed out after " + std::to_string(timeout.count()) + " ms waiting for a message");
    }
    if (q.empty()) throw FederationError("peer disconnected");
    Bytes frame = std::move(q.front());
    q.pop_front();
    lock.unlock();
    return decode_frame(frame);
  }

  void close() override {
    std::lock_guard lock(pipe_->mu);
    pipe_->closed = true;
    pipe_->cv.notify_all();
  }

 private:
  std::shared_ptr<transport_detail::Pipe> pipe_;
  int side_;
};

// {server end, client end}
inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_inproc_pair() {
  auto pipe = std::make_shared<transport_detail::Pipe>();
  return {std::make_unique<InProcChannel>(pipe, 0), std::make_unique<InProcChannel>(pipe, 1)};
}

// ---------------------------------------------------------------------------
// TCP sockets.
// ---------------------------------------------------------------------------

namespace transport_detail {

inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

using Clock = std::chrono::steady_clock;

// Waits for `events` on fd until the deadline.
inline void wait_fd(int fd, short events, Clock::time_point deadline, Millis budget) {
  for (;;) {
    const auto left = std::chrono::duration_cast<Millis>(deadline - Clock::now()).count();
    if (left <= 0) throw FederationError("timed out after " + std::to_string(budget.count()) + " ms on socket");
    pollfd p{fd, events, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
    if (rc > 0) return;
    if (rc < 0 && errno != EINTR) throw FederationError(errno_text("poll"));
  }
}

inline sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw FederationError("cannot resolve host '" + host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

}  // namespace transport_detail

class SocketChannel final : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~SocketChannel() override {
    close();
    if (fd_ >= 0) ::close(fd_);
  }
  SocketChannel(const SocketChannel&) = delete;
  SocketChannel& operator=(const SocketChannel&) = delete;

  void send(const Message& m) override {
    const Bytes frame = encode_frame(m);
    std::size_t done = 0;
    while (done < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + done, frame.size() - done, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw FederationError(transport_detail::errno_text("send"));
      }
      done += static_cast<std::size_t>(n);
    }
  }

  Message receive(Millis timeout) override {
    const auto deadline = transport_detail::Clock::now() + timeout;
    std::uint8_t prefix[4];
    read_exact(prefix, 4, deadline, timeout);
    Bytes frame(prefix, prefix + 4);
    frame.resize(4 + frame_length(std::span<const std::uint8_t, 4>(prefix, 4)));
    read_exact(frame.data() + 4, frame.size() - 4, deadline, timeout);
    return decode_frame(frame);
  }

  void close() override {
    if (fd_ >= 0 && !shut_) {
      ::shutdown(fd_, SHUT_RDWR);
      shut_ = true;
    }
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n, transport_detail::Clock::time_point deadline, Millis budget) {
    std::size_t done = 0;
    while (done < n) {
      transport_detail::wait_fd(fd_, POLLIN, deadline, budget);
      const ssize_t got = ::recv(fd_, dst + done, n - done, 0);
      if (got == 0) throw FederationError("peer disconnected");
      if (got < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw FederationError(transport_detail::errno_text("recv"));
      }
      done += static_cast<std::size_t>(got);
    }
  }

  int fd_;
  bool shut_ = false;
};

class SocketListener {
 public:
  // Port 0 picks a free ephemeral port; see port().
  SocketListener(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw FederationError(transport_detail::errno_text("socket"));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = transport_detail::resolve(host, port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string msg = transport_detail::errno_text("bind");
      ::close(fd_);
      throw FederationError(msg + " (" + host + ":" + std::to_string(port) + ")");
    }
    if (::listen(fd_, 64) != 0) {
      const std::string msg = transport_detail::errno_text("listen");
      ::close(fd_);
      throw FederationError(msg);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~SocketListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  SocketListener(const SocketListener&) = delete;
  SocketListener& operator=(const SocketListener&) = delete;

  std::uint16_t port() const { return port_; }

  std::unique_ptr<Channel> accept(Millis timeout) {
    transport_detail::wait_fd(fd_, POLLIN, transport_detail::Clock::now() + timeout, timeout);
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw FederationError(transport_detail::errno_text("accept"));
    return std::make_unique<SocketChannel>(fd);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// Retries until the listener is up or the timeout passes.
inline std::unique_ptr<Channel> connect_socket(const std::string& host, std::uint16_t port, Millis timeout) {
  const auto deadline = transport_detail::Clock::now() + timeout;
  const sockaddr_in addr = transport_detail::resolve(host, port);
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw FederationError(transport_detail::errno_text("socket"));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      return std::make_unique<SocketChannel>(fd);
    }
    const std::string msg = transport_detail::errno_text("connect");
    ::close(fd);
    if (transport_detail::Clock::now() >= deadline) {
      throw FederationError(msg + " (" + host + ":" + std::to_string(port) + ")");
    }
    std::this_thread::sleep_for(Millis(20));
  }
}

}  // namespace fedstgcrn
