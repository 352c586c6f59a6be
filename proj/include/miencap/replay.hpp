#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "miencap/retarget.hpp"
#include "miencap/wire.hpp"

namespace miencap {

/// Receives one encoded output record (no trailing newline).
using LineSink = std::function<void(std::string_view)>;

struct ReplayOptions {
  double fps = 24.0; ///< 0 = as fast as possible
  std::optional<std::chrono::duration<double>> max_duration;
  bool include_secondaries = true;
};

struct ReplayStats {
  size_t frames = 0;
  double mean_latency_ms = 0.0; ///< output written minus scheduled send time
  double max_latency_ms = 0.0;
  double elapsed_s = 0.0;
};

/// Output records for one pipeline step: primary first, then secondaries.
std::vector<wire::BroadcastRecord> to_records(const StepOutput& out, const RetargetPipeline& pipeline, bool include_secondaries = true);

/// Drives frames through the pipeline at a fixed pace. Never drops frames.
ReplayStats replay(RetargetPipeline& pipeline, std::span<const BlendshapeFrame> frames, const ReplayOptions& options, const LineSink& sink);

} // namespace miencap
