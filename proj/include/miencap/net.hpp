#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace miencap::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  uint16_t port = 0;
};

/// Parses "host:port" (or ":port", "port").
Endpoint parse_endpoint(std::string_view text);

/// Owning file descriptor.
class FileDescriptor {
 public:
  FileDescriptor() = default;
  explicit FileDescriptor(int fd) : fd_(fd) {}
  FileDescriptor(FileDescriptor&& other) noexcept : fd_(other.release()) {}
  FileDescriptor& operator=(FileDescriptor&& other) noexcept;
  FileDescriptor(const FileDescriptor&) = delete;
  FileDescriptor& operator=(const FileDescriptor&) = delete;
  ~FileDescriptor();

  int get() const {
    return fd_;
  }
  bool valid() const {
    return fd_ >= 0;
  }
  int release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }

 private:
  int fd_ = -1;
};

/// Line-oriented TCP stream.
class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(FileDescriptor fd) : fd_(std::move(fd)) {}

  static TcpStream connect(const Endpoint& endpoint);

  /// Reads one LF-terminated line (terminator stripped). False on EOF,
  /// error, or timeout.
  bool read_line(std::string& line);
  bool write_all(std::string_view data);
  /// Limits how long read_line blocks; zero disables the limit.
  void set_read_timeout(std::chrono::milliseconds timeout);
  void set_no_delay();
  /// Unblocks readers and writers on other threads.
  void shutdown();
  bool valid() const {
    return fd_.valid();
  }

 private:
  FileDescriptor fd_;
  std::string buffer_;
};

class TcpListener {
 public:
  /// Binds and listens; port 0 picks an ephemeral port.
  explicit TcpListener(const Endpoint& endpoint);

  uint16_t port() const {
    return port_;
  }
  /// Blocks until a client connects; nullopt once shutdown() is called.
  std::optional<TcpStream> accept();
  void shutdown();

 private:
  FileDescriptor fd_;
  uint16_t port_ = 0;
};

} // namespace miencap::net
