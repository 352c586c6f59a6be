#pragma once

#include <chrono>
#include <filesystem>
#include <memory>

#include "miencap/net.hpp"
#include "miencap/retarget.hpp"
#include "miencap/wire.hpp"

namespace miencap {

struct ServiceConfig {
  net::Endpoint frame_listen{"127.0.0.1", 9100};
  net::Endpoint control_listen{"127.0.0.1", 9101};
  std::filesystem::path manifest;
  std::chrono::milliseconds metrics_interval{1000};
  size_t ingest_queue_capacity = 64;      ///< frames; oldest dropped when full
  size_t subscriber_queue_capacity = 256; ///< messages; slow subscribers are disconnected
  size_t recalibration_frames = 30;

  void validate() const;
};

/// Live retargeting service.
///
/// Three stages connected by bounded queues: ingestion (one reader per frame
/// connection), the pipeline stage (the only mutator of pipeline state;
/// control commands are serialized with frames), and per-subscriber
/// broadcast writers.
///
/// Frame socket: newline-delimited `{"t":..,"w":[..]}` records.
/// Control socket: duplex; clients send `{"kind":..,"args":{..}}`, receive
/// `{"ok":..,"kind":..,"seq":..}` acks, and once subscribed, broadcast
/// records and periodic `{"metrics":{..}}` lines.
class Service {
 public:
  /// Loads the pipeline from config.manifest.
  explicit Service(ServiceConfig config);
  Service(ServiceConfig config, RetargetPipeline pipeline);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds both sockets and starts the worker threads. Throws IoError when
  /// a port cannot be bound.
  void start();
  /// Idempotent; joins every thread.
  void stop();

  uint16_t frame_port() const;
  uint16_t control_port() const;
  wire::MetricsSnapshot metrics() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

} // namespace miencap
