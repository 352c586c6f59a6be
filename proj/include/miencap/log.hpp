#pragma once

#include <memory>

namespace spdlog {
class logger;
}

namespace miencap {

/// Process-wide diagnostic logger. Verbosity comes from the MIENCAP_LOG
/// environment variable (trace, debug, info, warn, error, off); default warn.
spdlog::logger& log();

} // namespace miencap
