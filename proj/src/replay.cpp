#include "miencap/replay.hpp"

#include <algorithm>
#include <thread>

namespace miencap {

std::vector<wire::BroadcastRecord> to_records(const StepOutput& out, const RetargetPipeline& pipeline, bool include_secondaries) {
  std::vector<wire::BroadcastRecord> records;
  records.push_back({out.primary.timestamp, pipeline.primary_rig().id, out.primary.values, out.stale});
  if (include_secondaries) {
    for (size_t i = 0; i < out.secondaries.size(); ++i) {
      records.push_back({out.secondaries[i].timestamp, pipeline.secondaries()[i].rig.id, out.secondaries[i].values, out.stale});
    }
  }
  return records;
}

ReplayStats replay(RetargetPipeline& pipeline, std::span<const BlendshapeFrame> frames, const ReplayOptions& options, const LineSink& sink) {
  using clock = std::chrono::steady_clock;
  ReplayStats stats;
  const auto start = clock::now();
  const bool paced = options.fps > 0.0;
  double latency_sum = 0.0;
  for (size_t i = 0; i < frames.size(); ++i) {
    auto scheduled = start;
    if (paced) {
      scheduled += std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(static_cast<double>(i) / options.fps));
      if (options.max_duration && scheduled - start >= *options.max_duration) {
        break;
      }
      std::this_thread::sleep_until(scheduled);
    } else {
      scheduled = clock::now();
    }
    const auto out = pipeline.process(frames[i]);
    for (const auto& r : to_records(out, pipeline, options.include_secondaries)) {
      sink(wire::encode_broadcast(r));
    }
    const double latency = std::chrono::duration<double, std::milli>(clock::now() - scheduled).count();
    latency_sum += latency;
    stats.max_latency_ms = std::max(stats.max_latency_ms, latency);
    ++stats.frames;
  }
  stats.mean_latency_ms = stats.frames ? latency_sum / static_cast<double>(stats.frames) : 0.0;
  stats.elapsed_s = std::chrono::duration<double>(clock::now() - start).count();
  return stats;
}

} // namespace miencap
