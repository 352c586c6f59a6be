#include "miencap/wire.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "miencap/error.hpp"

namespace miencap::wire {

using ojson = nlohmann::ordered_json;

namespace {

ojson parse_object(std::string_view line, const char* what) {
  ojson doc;
  try {
    doc = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("malformed {} record: {}", what, e.what()));
  }
  MIENCAP_THROW_IF(!doc.is_object(), FormatError, "{} record must be a JSON object", what);
  return doc;
}

double number_field(const ojson& doc, const char* key, const char* what) {
  auto it = doc.find(key);
  MIENCAP_THROW_IF(it == doc.end() || !it->is_number(), FormatError, "{} record needs numeric '{}'", what, key);
  const double v = it->get<double>();
  MIENCAP_THROW_IF(!std::isfinite(v), FormatError, "{} record field '{}' is not finite", what, key);
  return v;
}

std::vector<double> number_array(const ojson& doc, const char* key, const char* what) {
  auto it = doc.find(key);
  MIENCAP_THROW_IF(it == doc.end() || !it->is_array(), FormatError, "{} record needs array '{}'", what, key);
  std::vector<double> out;
  out.reserve(it->size());
  for (const auto& v : *it) {
    MIENCAP_THROW_IF(!v.is_number(), FormatError, "{} record '{}' contains a non-number", what, key);
    out.push_back(v.get<double>());
  }
  return out;
}

void reject_unknown(const ojson& doc, std::initializer_list<const char*> allowed, const char* what) {
  for (const auto& [k, v] : doc.items()) {
    bool known = false;
    for (const char* a : allowed) {
      known = known || k == a;
    }
    MIENCAP_THROW_IF(!known, FormatError, "{} has unknown field '{}'", what, k);
  }
}

ojson args_of(const ControlMessage& m) {
  return ojson::parse(m.args_json);
}

} // namespace

std::string encode_frame(const BlendshapeFrame& frame) {
  ojson doc;
  doc["t"] = frame.timestamp;
  doc["w"] = frame.weights;
  return doc.dump();
}

BlendshapeFrame decode_frame(std::string_view line) {
  const auto doc = parse_object(line, "frame");
  reject_unknown(doc, {"t", "w"}, "frame record");
  BlendshapeFrame f{number_field(doc, "t", "frame"), number_array(doc, "w", "frame")};
  return f;
}

std::string encode_broadcast(const BroadcastRecord& r) {
  ojson doc;
  doc["t"] = r.t;
  doc["char"] = r.character;
  doc["v"] = r.values;
  doc["stale"] = r.stale;
  return doc.dump();
}

BroadcastRecord decode_broadcast(std::string_view line) {
  const auto doc = parse_object(line, "broadcast");
  reject_unknown(doc, {"t", "char", "v", "stale"}, "broadcast record");
  BroadcastRecord r;
  r.t = number_field(doc, "t", "broadcast");
  auto c = doc.find("char");
  MIENCAP_THROW_IF(c == doc.end() || !c->is_string(), FormatError, "broadcast record needs string 'char'");
  r.character = c->get<std::string>();
  r.values = number_array(doc, "v", "broadcast");
  auto s = doc.find("stale");
  MIENCAP_THROW_IF(s == doc.end() || !s->is_boolean(), FormatError, "broadcast record needs boolean 'stale'");
  r.stale = s->get<bool>();
  return r;
}

const char* to_string(ControlKind kind) {
  switch (kind) {
    case ControlKind::set_character:
      return "set_character";
    case ControlKind::recalibrate:
      return "recalibrate";
    case ControlKind::set_params:
      return "set_params";
    case ControlKind::subscribe:
      return "subscribe";
    case ControlKind::list_characters:
      return "list_characters";
  }
  return "unknown";
}

std::optional<ControlKind> parse_control_kind(std::string_view name) {
  for (auto k : {ControlKind::set_character,
                 ControlKind::recalibrate,
                 ControlKind::set_params,
                 ControlKind::subscribe,
                 ControlKind::list_characters}) {
    if (name == to_string(k)) {
      return k;
    }
  }
  return std::nullopt;
}

std::string encode_control(const ControlMessage& m) {
  ojson doc;
  doc["kind"] = to_string(m.kind);
  doc["args"] = args_of(m);
  return doc.dump();
}

ControlMessage decode_control(std::string_view line) {
  const auto doc = parse_object(line, "control");
  reject_unknown(doc, {"kind", "args"}, "control message");
  auto k = doc.find("kind");
  MIENCAP_THROW_IF(k == doc.end() || !k->is_string(), FormatError, "control message needs string 'kind'");
  const auto kind = parse_control_kind(k->get<std::string>());
  MIENCAP_THROW_IF(!kind, FormatError, "unknown control kind '{}'", k->get<std::string>());

  ojson args = ojson::object();
  if (auto a = doc.find("args"); a != doc.end()) {
    MIENCAP_THROW_IF(!a->is_object(), FormatError, "control 'args' must be an object");
    args = *a;
  }
  ControlMessage m{*kind, args.dump()};
  // Schema checks; the typed accessors below re-read the same fields.
  switch (*kind) {
    case ControlKind::set_character:
      set_character_args(m);
      break;
    case ControlKind::set_params:
      set_params_args(m);
      break;
    case ControlKind::subscribe:
      subscribe_args(m);
      break;
    case ControlKind::recalibrate:
    case ControlKind::list_characters:
      reject_unknown(args, {}, "control args");
      break;
  }
  return m;
}

SetCharacterArgs set_character_args(const ControlMessage& m) {
  const auto args = args_of(m);
  reject_unknown(args, {"id"}, "set_character args");
  auto id = args.find("id");
  MIENCAP_THROW_IF(id == args.end() || !id->is_string() || id->get<std::string>().empty(), FormatError, "set_character needs string 'id'");
  return {id->get<std::string>()};
}

SetParamsArgs set_params_args(const ControlMessage& m) {
  const auto args = args_of(m);
  reject_unknown(args, {"stale_timeout_ms", "target_fps"}, "set_params args");
  SetParamsArgs out;
  if (args.contains("stale_timeout_ms")) {
    out.stale_timeout_ms = number_field(args, "stale_timeout_ms", "set_params");
    MIENCAP_THROW_IF(*out.stale_timeout_ms <= 0.0, FormatError, "stale_timeout_ms must be positive");
  }
  if (args.contains("target_fps")) {
    out.target_fps = number_field(args, "target_fps", "set_params");
    MIENCAP_THROW_IF(*out.target_fps <= 0.0, FormatError, "target_fps must be positive");
  }
  MIENCAP_THROW_IF(!out.stale_timeout_ms && !out.target_fps, FormatError, "set_params needs at least one parameter");
  return out;
}

SubscribeArgs subscribe_args(const ControlMessage& m) {
  const auto args = args_of(m);
  reject_unknown(args, {"all"}, "subscribe args");
  SubscribeArgs out;
  if (auto a = args.find("all"); a != args.end()) {
    MIENCAP_THROW_IF(!a->is_boolean(), FormatError, "subscribe 'all' must be boolean");
    out.all = a->get<bool>();
  }
  return out;
}

std::string encode_ack(const Ack& ack) {
  ojson doc;
  doc["ok"] = ack.ok;
  doc["kind"] = ack.kind;
  doc["seq"] = ack.seq;
  if (ack.error) {
    doc["error"] = *ack.error;
  }
  if (ack.characters) {
    doc["chars"] = *ack.characters;
  }
  return doc.dump();
}

Ack decode_ack(std::string_view line) {
  const auto doc = parse_object(line, "ack");
  reject_unknown(doc, {"ok", "kind", "seq", "error", "chars"}, "ack");
  Ack ack;
  try {
    ack.ok = doc.at("ok").get<bool>();
    ack.kind = doc.at("kind").get<std::string>();
    ack.seq = doc.at("seq").get<uint64_t>();
    if (doc.contains("error")) {
      ack.error = doc.at("error").get<std::string>();
    }
    if (doc.contains("chars")) {
      ack.characters = doc.at("chars").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("malformed ack: {}", e.what()));
  }
  return ack;
}

std::string encode_metrics(const MetricsSnapshot& m) {
  ojson body;
  body["frames_in"] = m.frames_in;
  body["frames_out"] = m.frames_out;
  body["frames_rejected"] = m.frames_rejected;
  body["frames_dropped"] = m.frames_dropped;
  body["mean_latency_ms"] = m.mean_latency_ms;
  body["max_latency_ms"] = m.max_latency_ms;
  body["fps"] = m.fps;
  body["jitter"] = m.jitter;
  ojson doc;
  doc["metrics"] = body;
  return doc.dump();
}

MetricsSnapshot decode_metrics(std::string_view line) {
  const auto doc = parse_object(line, "metrics");
  MetricsSnapshot m;
  try {
    const auto& b = doc.at("metrics");
    m.frames_in = b.at("frames_in").get<uint64_t>();
    m.frames_out = b.at("frames_out").get<uint64_t>();
    m.frames_rejected = b.at("frames_rejected").get<uint64_t>();
    m.frames_dropped = b.at("frames_dropped").get<uint64_t>();
    m.mean_latency_ms = b.at("mean_latency_ms").get<double>();
    m.max_latency_ms = b.at("max_latency_ms").get<double>();
    m.fps = b.at("fps").get<double>();
    m.jitter = b.at("jitter").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("malformed metrics: {}", e.what()));
  }
  return m;
}

MessageType classify(std::string_view line) {
  if (line.rfind("{\"t\":", 0) == 0) return MessageType::broadcast;
  if (line.rfind("{\"ok\":", 0) == 0) return MessageType::ack;
  if (line.rfind("{\"metrics\":", 0) == 0) return MessageType::metrics;
  return MessageType::unknown;
}

namespace {

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    try {
      fn(line);
    } catch (const FormatError& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
}

void write_lines(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << text;
  MIENCAP_THROW_IF(!out, IoError, "write failed for '{}'", path.string());
}

} // namespace

std::vector<BlendshapeFrame> read_frame_stream(const std::filesystem::path& path) {
  std::vector<BlendshapeFrame> frames;
  for_each_line(path, [&](const std::string& line) { frames.push_back(decode_frame(line)); });
  return frames;
}

void write_frame_stream(std::span<const BlendshapeFrame> frames, const std::filesystem::path& path) {
  std::string text;
  for (const auto& f : frames) {
    text += encode_frame(f);
    text += '\n';
  }
  write_lines(path, text);
}

std::vector<BroadcastRecord> read_output_stream(const std::filesystem::path& path) {
  std::vector<BroadcastRecord> records;
  for_each_line(path, [&](const std::string& line) { records.push_back(decode_broadcast(line)); });
  return records;
}

void write_output_stream(std::span<const BroadcastRecord> records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) {
    text += encode_broadcast(r);
    text += '\n';
  }
  write_lines(path, text);
}

std::vector<ControllerFrame> controller_frames(std::span<const BroadcastRecord> records, const std::string& character) {
  std::vector<ControllerFrame> out;
  for (const auto& r : records) {
    if (r.character == character) {
      out.push_back({r.t, r.values});
    }
  }
  return out;
}

} // namespace miencap::wire
