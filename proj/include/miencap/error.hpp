#pragma once

#include <stdexcept>
#include <string>

#include <fmt/format.h>

namespace miencap {

/// Base class for every error raised by the library. `kind()` is a stable
/// lowercase tag used in machine-readable CLI error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept {
    return kind_;
  }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct DegenerateError : Error {
  explicit DegenerateError(const std::string& m) : Error("degenerate", m) {}
};

struct StreamError : Error {
  explicit StreamError(const std::string& m) : Error("stream", m) {}
};

/// Raised by sgd_train when the loss becomes non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& m) : Error("divergence", m), epoch_(epoch) {}
  int epoch() const noexcept {
    return epoch_;
  }

 private:
  int epoch_;
};

struct InfiniteDivergenceError : Error {
  explicit InfiniteDivergenceError(const std::string& m) : Error("infinite-divergence", m) {}
};

} // namespace miencap

#define MIENCAP_THROW_IF(cond, ErrType, ...) \
  do {                                       \
    if (cond) {                              \
      throw ErrType(fmt::format(__VA_ARGS__)); \
    }                                        \
  } while (0)
