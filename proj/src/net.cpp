#include "miencap/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "miencap/error.hpp"

namespace miencap::net {

namespace {

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host.empty() || ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) {
    return addr;
  }
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  MIENCAP_THROW_IF(getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res, IoError, "cannot resolve '{}'", host);
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

} // namespace

Endpoint parse_endpoint(std::string_view text) {
  Endpoint ep;
  std::string_view port_part = text;
  if (auto colon = text.rfind(':'); colon != std::string_view::npos) {
    if (colon > 0) {
      ep.host = std::string(text.substr(0, colon));
    }
    port_part = text.substr(colon + 1);
  }
  try {
    const int port = std::stoi(std::string(port_part));
    MIENCAP_THROW_IF(port < 0 || port > 65535, ValidationError, "port {} out of range", port);
    ep.port = static_cast<uint16_t>(port);
  } catch (const std::logic_error&) {
    throw ValidationError(fmt::format("bad endpoint '{}'", text));
  }
  return ep;
}

FileDescriptor& FileDescriptor::operator=(FileDescriptor&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) {
      ::close(fd_);
    }
    fd_ = other.release();
  }
  return *this;
}

FileDescriptor::~FileDescriptor() {
  if (fd_ >= 0) {
    ::close(fd_);
  }
}

TcpStream TcpStream::connect(const Endpoint& endpoint) {
  FileDescriptor fd(::socket(AF_INET, SOCK_STREAM, 0));
  MIENCAP_THROW_IF(!fd.valid(), IoError, "socket: {}", std::strerror(errno));
  const auto addr = resolve(endpoint);
  MIENCAP_THROW_IF(
      ::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0,
      IoError,
      "connect to {}:{} failed: {}",
      endpoint.host,
      endpoint.port,
      std::strerror(errno));
  TcpStream s(std::move(fd));
  s.set_no_delay();
  return s;
}

bool TcpStream::read_line(std::string& line) {
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      line.assign(buffer_, 0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') {
        line.pop_back();
      }
      return true;
    }
    char chunk[4096];
    const ssize_t n = ::recv(fd_.get(), chunk, sizeof(chunk), 0);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    if (n <= 0) {
      return false;
    }
    buffer_.append(chunk, static_cast<size_t>(n));
  }
}

bool TcpStream::write_all(std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd_.get(), data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    if (n <= 0) {
      return false;
    }
    data.remove_prefix(static_cast<size_t>(n));
  }
  return true;
}

void TcpStream::set_read_timeout(std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd_.get(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

void TcpStream::set_no_delay() {
  int one = 1;
  ::setsockopt(fd_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

void TcpStream::shutdown() {
  if (fd_.valid()) {
    ::shutdown(fd_.get(), SHUT_RDWR);
  }
}

TcpListener::TcpListener(const Endpoint& endpoint) : fd_(::socket(AF_INET, SOCK_STREAM, 0)) {
  MIENCAP_THROW_IF(!fd_.valid(), IoError, "socket: {}", std::strerror(errno));
  int one = 1;
  ::setsockopt(fd_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  auto addr = resolve(endpoint);
  MIENCAP_THROW_IF(
      ::bind(fd_.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0,
      IoError,
      "bind {}:{} failed: {}",
      endpoint.host,
      endpoint.port,
      std::strerror(errno));
  MIENCAP_THROW_IF(::listen(fd_.get(), 16) != 0, IoError, "listen failed: {}", std::strerror(errno));
  socklen_t len = sizeof(addr);
  ::getsockname(fd_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

std::optional<TcpStream> TcpListener::accept() {
  for (;;) {
    const int fd = ::accept(fd_.get(), nullptr, nullptr);
    if (fd >= 0) {
      TcpStream s{FileDescriptor(fd)};
      s.set_no_delay();
      return s;
    }
    if (errno == EINTR || errno == ECONNABORTED) {
      continue;
    }
    return std::nullopt;
  }
}

void TcpListener::shutdown() {
  if (fd_.valid()) {
    ::shutdown(fd_.get(), SHUT_RDWR);
  }
}

} // namespace miencap::net
