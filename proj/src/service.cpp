#include "miencap/service.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <list>
#include <mutex>
#include <optional>
#include <thread>
#include <variant>

#include <spdlog/spdlog.h>

#include "miencap/error.hpp"
#include "miencap/log.hpp"
#include "miencap/manifest.hpp"
#include "miencap/replay.hpp"

namespace miencap {

void ServiceConfig::validate() const {
  MIENCAP_THROW_IF(
      frame_listen.port != 0 && frame_listen.port == control_listen.port,
      ValidationError,
      "frame and control ports must differ (both {})",
      frame_listen.port);
  MIENCAP_THROW_IF(metrics_interval.count() <= 0, ValidationError, "metrics interval must be positive");
  MIENCAP_THROW_IF(ingest_queue_capacity == 0 || subscriber_queue_capacity == 0, ValidationError, "queue capacities must be positive");
  MIENCAP_THROW_IF(recalibration_frames == 0, ValidationError, "recalibration window must be positive");
}

namespace {

using Clock = std::chrono::steady_clock;

/// FIFO of outgoing lines for one control connection.
class OutboundQueue {
 public:
  explicit OutboundQueue(size_t capacity) : capacity_(capacity) {}

  /// False when full or closed.
  bool push(std::string line) {
    std::lock_guard lock(mutex_);
    if (closed_ || items_.size() >= capacity_) {
      return false;
    }
    items_.push_back(std::move(line));
    cv_.notify_one();
    return true;
  }

  std::optional<std::string> pop() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) {
      return std::nullopt;
    }
    auto line = std::move(items_.front());
    items_.pop_front();
    return line;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::string> items_;
  size_t capacity_;
  bool closed_ = false;
};

struct Session {
  explicit Session(net::TcpStream s, size_t capacity) : stream(std::move(s)), outbound(capacity) {}

  net::TcpStream stream;
  OutboundQueue outbound;
  std::atomic<bool> alive{true};
  // Touched only by the pipeline thread.
  bool subscribed = false;
  bool all_characters = false;

  void disconnect() {
    if (alive.exchange(false)) {
      outbound.close();
      stream.shutdown();
    }
  }
};

struct IngestedFrame {
  BlendshapeFrame frame;
  Clock::time_point received;
};

struct Command {
  wire::ControlMessage message;
  uint64_t seq = 0;
  std::shared_ptr<Session> session;
};

using WorkItem = std::variant<IngestedFrame, Command>;

/// Pipeline-stage input. Frames beyond capacity evict the oldest frame;
/// commands are never dropped.
class WorkQueue {
 public:
  explicit WorkQueue(size_t frame_capacity) : capacity_(frame_capacity) {}

  /// Returns true when a frame had to be dropped.
  bool push_frame(IngestedFrame f) {
    std::lock_guard lock(mutex_);
    bool dropped = false;
    if (frames_ >= capacity_) {
      for (auto it = items_.begin(); it != items_.end(); ++it) {
        if (std::holds_alternative<IngestedFrame>(*it)) {
          items_.erase(it);
          --frames_;
          dropped = true;
          break;
        }
      }
    }
    items_.emplace_back(std::move(f));
    ++frames_;
    cv_.notify_one();
    return dropped;
  }

  void push_command(Command c) {
    std::lock_guard lock(mutex_);
    items_.emplace_back(std::move(c));
    cv_.notify_one();
  }

  /// nullopt on timeout or when closed and drained.
  std::optional<WorkItem> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) {
      return std::nullopt;
    }
    WorkItem item = std::move(items_.front());
    items_.pop_front();
    if (std::holds_alternative<IngestedFrame>(item)) {
      --frames_;
    }
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_.notify_all();
  }

  bool closed() {
    std::lock_guard lock(mutex_);
    return closed_;
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<WorkItem> items_;
  size_t frames_ = 0;
  size_t capacity_;
  bool closed_ = false;
};

constexpr size_t kMetricsWindow = 48;

} // namespace

struct Service::Impl {
  ServiceConfig config;
  RetargetPipeline pipeline;
  WorkQueue work;

  std::optional<net::TcpListener> frame_listener;
  std::optional<net::TcpListener> control_listener;

  std::atomic<bool> running{false};
  bool started = false;
  std::atomic<uint64_t> next_seq{1};

  std::mutex threads_mutex;
  std::vector<std::thread> threads;
  std::list<std::shared_ptr<net::TcpStream>> frame_streams;
  std::list<std::shared_ptr<Session>> sessions;

  // Pipeline-thread state.
  std::string active_character;
  std::vector<BlendshapeFrame> calibration_window;
  bool capturing_calibration = false;
  std::deque<ControllerFrame> recent_primary;
  std::deque<Clock::time_point> recent_out_times;
  double latency_sum_ms = 0.0;
  Clock::time_point last_real_frame{};
  Clock::time_point last_output{};
  double last_input_t = 0.0;

  mutable std::mutex metrics_mutex;
  wire::MetricsSnapshot snapshot;
  std::atomic<uint64_t> frames_rejected{0};
  std::atomic<uint64_t> frames_dropped{0};

  Impl(ServiceConfig c, RetargetPipeline p)
      : config(std::move(c)), pipeline(std::move(p)), work(config.ingest_queue_capacity) {
    config.validate();
    active_character = pipeline.primary_rig().id;
  }

  void spawn(std::function<void()> fn) {
    std::lock_guard lock(threads_mutex);
    threads.emplace_back(std::move(fn));
  }

  // --- ingestion -----------------------------------------------------------

  void accept_frames() {
    while (running) {
      auto stream = frame_listener->accept();
      if (!stream || !running) {
        break;
      }
      auto shared = std::make_shared<net::TcpStream>(std::move(*stream));
      {
        std::lock_guard lock(threads_mutex);
        frame_streams.push_back(shared);
      }
      spawn([this, shared] { read_frames(*shared); });
    }
  }

  void read_frames(net::TcpStream& stream) {
    std::string line;
    while (running && stream.read_line(line)) {
      if (line.empty()) {
        continue;
      }
      try {
        IngestedFrame f{wire::decode_frame(line), Clock::now()};
        if (work.push_frame(std::move(f))) {
          ++frames_dropped;
        }
      } catch (const Error& e) {
        ++frames_rejected;
        log().warn("rejected frame: {}", e.what());
      }
    }
  }

  // --- control ---------------------------------------------------------------

  void accept_control() {
    while (running) {
      auto stream = control_listener->accept();
      if (!stream || !running) {
        break;
      }
      auto session = std::make_shared<Session>(std::move(*stream), config.subscriber_queue_capacity);
      {
        std::lock_guard lock(threads_mutex);
        sessions.push_back(session);
      }
      spawn([session] {
        while (auto line = session->outbound.pop()) {
          line->push_back('\n');
          if (!session->stream.write_all(*line)) {
            session->disconnect();
            break;
          }
        }
      });
      spawn([this, session] { read_control(session); });
    }
  }

  void read_control(const std::shared_ptr<Session>& session) {
    std::string line;
    while (running && session->alive && session->stream.read_line(line)) {
      if (line.empty()) {
        continue;
      }
      const uint64_t seq = next_seq++;
      try {
        work.push_command({wire::decode_control(line), seq, session});
      } catch (const Error& e) {
        wire::Ack nack{false, "unknown", seq, std::string(e.what()), std::nullopt};
        session->outbound.push(wire::encode_ack(nack));
        log().warn("rejected control message: {}", e.what());
      }
    }
    session->disconnect();
  }

  // --- pipeline stage ------------------------------------------------------

  void send(const std::shared_ptr<Session>& s, std::string line) {
    if (s->alive && !s->outbound.push(std::move(line))) {
      log().warn("subscriber queue full; disconnecting");
      s->disconnect();
    }
  }

  void apply(const Command& cmd) {
    wire::Ack ack{true, wire::to_string(cmd.message.kind), cmd.seq, std::nullopt, std::nullopt};
    try {
      switch (cmd.message.kind) {
        case wire::ControlKind::set_character: {
          const auto args = wire::set_character_args(cmd.message);
          const auto ids = pipeline.character_ids();
          MIENCAP_THROW_IF(
              std::find(ids.begin(), ids.end(), args.id) == ids.end(), ValidationError, "unknown character '{}'", args.id);
          active_character = args.id;
          break;
        }
        case wire::ControlKind::recalibrate:
          calibration_window.clear();
          capturing_calibration = true;
          break;
        case wire::ControlKind::set_params: {
          const auto args = wire::set_params_args(cmd.message);
          if (args.stale_timeout_ms) {
            pipeline.config().stale_timeout =
                std::chrono::milliseconds(static_cast<int64_t>(std::max(1.0, *args.stale_timeout_ms)));
          }
          if (args.target_fps) {
            pipeline.config().target_fps = *args.target_fps;
          }
          break;
        }
        case wire::ControlKind::subscribe:
          cmd.session->subscribed = true;
          cmd.session->all_characters = wire::subscribe_args(cmd.message).all;
          break;
        case wire::ControlKind::list_characters:
          ack.characters = pipeline.character_ids();
          break;
      }
    } catch (const Error& e) {
      ack.ok = false;
      ack.error = e.what();
    }
    send(cmd.session, wire::encode_ack(ack));
  }

  void broadcast(const StepOutput& out, Clock::time_point received) {
    const auto records = to_records(out, pipeline, true);
    std::vector<std::shared_ptr<Session>> targets;
    {
      std::lock_guard lock(threads_mutex);
      targets.assign(sessions.begin(), sessions.end());
    }
    std::optional<std::string> active_line;
    std::vector<std::string> all_lines;
    for (const auto& s : targets) {
      if (!s->alive || !s->subscribed) {
        continue;
      }
      if (s->all_characters) {
        if (all_lines.empty()) {
          for (const auto& r : records) all_lines.push_back(wire::encode_broadcast(r));
        }
        for (const auto& l : all_lines) send(s, l);
      } else {
        if (!active_line) {
          for (const auto& r : records) {
            if (r.character == active_character) active_line = wire::encode_broadcast(r);
          }
        }
        if (active_line) send(s, *active_line);
      }
    }

    const auto now = Clock::now();
    recent_primary.push_back(out.primary);
    recent_out_times.push_back(now);
    while (recent_primary.size() > kMetricsWindow) recent_primary.pop_front();
    while (recent_out_times.size() > kMetricsWindow) recent_out_times.pop_front();
    const double latency = std::chrono::duration<double, std::milli>(now - received).count();

    std::lock_guard lock(metrics_mutex);
    ++snapshot.frames_out;
    latency_sum_ms += latency;
    snapshot.mean_latency_ms = latency_sum_ms / static_cast<double>(snapshot.frames_out);
    snapshot.max_latency_ms = std::max(snapshot.max_latency_ms, latency);
    if (recent_out_times.size() >= 2) {
      const double span = std::chrono::duration<double>(recent_out_times.back() - recent_out_times.front()).count();
      snapshot.fps = span > 0.0 ? static_cast<double>(recent_out_times.size() - 1) / span : 0.0;
      snapshot.jitter = jitter_metric(std::vector<ControllerFrame>(recent_primary.begin(), recent_primary.end()));
    }
  }

  void handle_frame(IngestedFrame& in) {
    {
      std::lock_guard lock(metrics_mutex);
      ++snapshot.frames_in;
    }
    if (capturing_calibration && in.frame.weights.size() == pipeline.channels().size()) {
      calibration_window.push_back(in.frame);
      if (calibration_window.size() >= config.recalibration_frames) {
        pipeline.set_calibration(calibrate(calibration_window));
        capturing_calibration = false;
        log().info("recalibrated from {} frames", calibration_window.size());
      }
    }
    try {
      const auto out = pipeline.process(in.frame);
      last_real_frame = Clock::now();
      last_output = last_real_frame;
      last_input_t = in.frame.timestamp;
      broadcast(out, in.received);
    } catch (const Error& e) {
      ++frames_rejected;
      log().warn("frame at t={} rejected: {}", in.frame.timestamp, e.what());
    }
  }

  void publish_metrics() {
    const auto line = wire::encode_metrics(snapshot_copy());
    std::lock_guard lock(threads_mutex);
    for (const auto& s : sessions) {
      if (s->alive && s->subscribed) {
        if (!s->outbound.push(line)) s->disconnect();
      }
    }
  }

  wire::MetricsSnapshot snapshot_copy() const {
    std::lock_guard lock(metrics_mutex);
    auto m = snapshot;
    m.frames_rejected = frames_rejected;
    m.frames_dropped = frames_dropped;
    return m;
  }

  void run_pipeline() {
    auto next_metrics = Clock::now() + config.metrics_interval;
    while (running) {
      const auto stale_timeout = pipeline.config().stale_timeout;
      const auto wait = std::min<Clock::duration>(stale_timeout, std::max<Clock::duration>(next_metrics - Clock::now(), Clock::duration::zero()));
      auto item = work.pop(std::chrono::duration_cast<std::chrono::milliseconds>(wait) + std::chrono::milliseconds(1));
      if (item) {
        if (auto* f = std::get_if<IngestedFrame>(&*item)) {
          handle_frame(*f);
        } else {
          apply(std::get<Command>(*item));
        }
      } else if (work.closed()) {
        break;
      }
      const auto now = Clock::now();
      if (pipeline.has_last_input() && now - last_output >= stale_timeout) {
        const double t = last_input_t + std::chrono::duration<double>(now - last_real_frame).count();
        try {
          broadcast(pipeline.repeat_last(t), now);
        } catch (const Error& e) {
          log().warn("stale repeat failed: {}", e.what());
        }
        last_output = now;
      }
      if (now >= next_metrics) {
        publish_metrics();
        next_metrics = now + config.metrics_interval;
      }
    }
  }
};

Service::Service(ServiceConfig config) {
  auto pipeline = load_pipeline(config.manifest);
  impl_ = std::make_unique<Impl>(std::move(config), std::move(pipeline));
}

Service::Service(ServiceConfig config, RetargetPipeline pipeline)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(pipeline))) {}

Service::~Service() {
  stop();
}

void Service::start() {
  auto& d = *impl_;
  MIENCAP_THROW_IF(d.started, ValidationError, "service already started");
  d.frame_listener.emplace(d.config.frame_listen);
  d.control_listener.emplace(d.config.control_listen);
  d.started = true;
  d.running = true;
  d.spawn([&d] { d.run_pipeline(); });
  d.spawn([&d] { d.accept_frames(); });
  d.spawn([&d] { d.accept_control(); });
  log().info("serving frames on {} and control on {}", d.frame_listener->port(), d.control_listener->port());
}

void Service::stop() {
  if (!impl_) {
    return;
  }
  auto& d = *impl_;
  if (!d.running.exchange(false)) {
    return;
  }
  d.work.close();
  d.frame_listener->shutdown();
  d.control_listener->shutdown();
  std::vector<std::thread> to_join;
  {
    std::lock_guard lock(d.threads_mutex);
    for (auto& s : d.frame_streams) s->shutdown();
    for (auto& s : d.sessions) s->disconnect();
  }
  // Threads may still spawn siblings while we wait, so drain until empty.
  for (;;) {
    {
      std::lock_guard lock(d.threads_mutex);
      if (d.threads.empty()) break;
      to_join.swap(d.threads);
    }
    for (auto& t : to_join) {
      if (t.joinable()) t.join();
    }
    to_join.clear();
    std::lock_guard lock(d.threads_mutex);
    for (auto& s : d.frame_streams) s->shutdown();
    for (auto& s : d.sessions) s->disconnect();
  }
}

uint16_t Service::frame_port() const {
  return impl_->frame_listener ? impl_->frame_listener->port() : 0;
}

uint16_t Service::control_port() const {
  return impl_->control_listener ? impl_->control_listener->port() : 0;
}

wire::MetricsSnapshot Service::metrics() const {
  return impl_->snapshot_copy();
}

} // namespace miencap
