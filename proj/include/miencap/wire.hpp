#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "miencap/retarget.hpp"

namespace miencap::wire {

/// Ingestion record: {"t":<float>,"w":[<float>...]}
std::string encode_frame(const BlendshapeFrame& frame);
BlendshapeFrame decode_frame(std::string_view line);

/// Broadcast / output-stream record: {"t":..,"char":"..","v":[..],"stale":false}
struct BroadcastRecord {
  double t = 0.0;
  std::string character;
  std::vector<double> values;
  bool stale = false;

  bool operator==(const BroadcastRecord&) const = default;
};

std::string encode_broadcast(const BroadcastRecord& record);
BroadcastRecord decode_broadcast(std::string_view line);

enum class ControlKind { set_character, recalibrate, set_params, subscribe, list_characters };

const char* to_string(ControlKind kind);
std::optional<ControlKind> parse_control_kind(std::string_view name);

/// Control request: {"kind":"..","args":{...}}. `args_json` is the args
/// object serialized compactly (keys in received order).
struct ControlMessage {
  ControlKind kind = ControlKind::list_characters;
  std::string args_json = "{}";

  bool operator==(const ControlMessage&) const = default;
};

std::string encode_control(const ControlMessage& message);
/// Validates the kind and its argument schema.
ControlMessage decode_control(std::string_view line);

/// Acknowledgment: {"ok":true,"kind":"..","seq":N} plus optional
/// "error" (string) or "chars" (array) members.
struct Ack {
  bool ok = true;
  std::string kind;
  uint64_t seq = 0;
  std::optional<std::string> error;
  std::optional<std::vector<std::string>> characters;

  bool operator==(const Ack&) const = default;
};

std::string encode_ack(const Ack& ack);
Ack decode_ack(std::string_view line);

/// Control arguments, decoded per kind.
struct SetCharacterArgs {
  std::string id;
};
struct SetParamsArgs {
  std::optional<double> stale_timeout_ms;
  std::optional<double> target_fps;
};
struct SubscribeArgs {
  bool all = false;
};

SetCharacterArgs set_character_args(const ControlMessage& m);
SetParamsArgs set_params_args(const ControlMessage& m);
SubscribeArgs subscribe_args(const ControlMessage& m);

struct MetricsSnapshot {
  uint64_t frames_in = 0;
  uint64_t frames_out = 0;
  uint64_t frames_rejected = 0;
  uint64_t frames_dropped = 0;
  double mean_latency_ms = 0.0;
  double max_latency_ms = 0.0;
  double fps = 0.0;
  double jitter = 0.0;
};

/// {"metrics":{...}}
std::string encode_metrics(const MetricsSnapshot& m);
MetricsSnapshot decode_metrics(std::string_view line);

/// Classifies a line received on the control socket.
enum class MessageType { broadcast, ack, metrics, unknown };
MessageType classify(std::string_view line);

// Stream files (newline-delimited records).
std::vector<BlendshapeFrame> read_frame_stream(const std::filesystem::path& path);
void write_frame_stream(std::span<const BlendshapeFrame> frames, const std::filesystem::path& path);
std::vector<BroadcastRecord> read_output_stream(const std::filesystem::path& path);
void write_output_stream(std::span<const BroadcastRecord> records, const std::filesystem::path& path);

/// Controller frames for one character from an output stream.
std::vector<ControllerFrame> controller_frames(std::span<const BroadcastRecord> records, const std::string& character);

} // namespace miencap::wire
