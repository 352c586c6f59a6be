#include <doctest.h>

#include <thread>

#include "helpers.hpp"
#include "miencap/error.hpp"
#include "miencap/net.hpp"
#include "miencap/service.hpp"
#include "pipelines.hpp"

using namespace miencap;
using namespace std::chrono_literals;

namespace {

ServiceConfig ephemeral() {
  ServiceConfig c;
  c.frame_listen.port = 0;
  c.control_listen.port = 0;
  c.metrics_interval = 250ms;
  return c;
}

struct Client {
  net::TcpStream control;

  explicit Client(uint16_t port) : control(net::TcpStream::connect({"127.0.0.1", port})) {
    control.set_read_timeout(3s);
  }

  // Next line that is not a metrics record.
  std::string next() {
    std::string line;
    while (control.read_line(line)) {
      if (wire::classify(line) != wire::MessageType::metrics) return line;
    }
    return {};
  }

  wire::Ack request(const std::string& json) {
    control.write_all(json + "\n");
    for (;;) {
      const auto line = next();
      REQUIRE(!line.empty());
      if (wire::classify(line) == wire::MessageType::ack) return wire::decode_ack(line);
    }
  }
};

void feed(net::TcpStream& s, const BlendshapeFrame& f) {
  s.write_all(wire::encode_frame(f) + "\n");
}

std::vector<BlendshapeFrame> frames(size_t n, size_t channels, uint64_t seed) {
  Rng rng(seed);
  std::vector<BlendshapeFrame> out;
  for (size_t i = 0; i < n; ++i) out.push_back({static_cast<double>(i) / 24.0, testing::random_vector(rng, channels)});
  return out;
}

} // namespace

TEST_SUITE("service") {

TEST_CASE("start and immediate stop") {
  Service s(ephemeral(), testing::small_pipeline(4, 3, 1, 1));
  s.start();
  CHECK(s.frame_port() != 0);
  CHECK(s.control_port() != 0);
  CHECK(s.frame_port() != s.control_port());
  s.stop();
  s.stop();
  CHECK(s.metrics().frames_in == 0);
  CHECK(s.metrics().frames_out == 0);
}

TEST_CASE("startup errors") {
  auto bad = ephemeral();
  bad.frame_listen.port = 9555;
  bad.control_listen.port = 9555;
  CHECK_THROWS_AS(Service(bad, testing::small_pipeline(4, 3, 0, 2)), ValidationError);

  Service first(ephemeral(), testing::small_pipeline(4, 3, 0, 3));
  first.start();
  auto clash = ephemeral();
  clash.frame_listen.port = first.frame_port();
  Service second(clash, testing::small_pipeline(4, 3, 0, 3));
  CHECK_THROWS_AS(second.start(), IoError);

  auto missing = ephemeral();
  missing.manifest = "/nonexistent/manifest.json";
  CHECK_THROWS_AS(Service{missing}, IoError);
}

TEST_CASE("a paced 240-frame stream reaches the subscriber in order") {
  Service s(ephemeral(), testing::small_pipeline(8, 5, 2, 4));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"subscribe","args":{}})").ok);
  auto in = net::TcpStream::connect({"127.0.0.1", s.frame_port()});
  const auto input = frames(240, 8, 5);
  std::thread sender([&] {
    const auto start = std::chrono::steady_clock::now();
    for (size_t i = 0; i < input.size(); ++i) {
      std::this_thread::sleep_until(start + std::chrono::microseconds(static_cast<int64_t>(i * 1e6 / 24)));
      feed(in, input[i]);
    }
  });
  std::vector<wire::BroadcastRecord> got;
  while (got.size() < 240) {
    const auto line = c.next();
    if (line.empty()) break;
    const auto r = wire::decode_broadcast(line);
    if (!r.stale) got.push_back(r);
  }
  sender.join();
  REQUIRE(got.size() == 240);
  for (size_t i = 0; i < 240; ++i) {
    CHECK(got[i].t == input[i].timestamp);
    CHECK(got[i].character == "primary");
  }
  const auto m = s.metrics();
  CHECK(m.frames_in == 240);
  CHECK(m.frames_dropped == 0);
  CHECK(m.fps == doctest::Approx(24.0).epsilon(0.05));
  s.stop();
}

TEST_CASE("set_character takes effect right after its acknowledgment") {
  Service s(ephemeral(), testing::small_pipeline(8, 5, 2, 6));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"subscribe","args":{}})").ok);
  auto in = net::TcpStream::connect({"127.0.0.1", s.frame_port()});
  const auto input = frames(60, 8, 7);
  for (size_t i = 0; i < 30; ++i) {
    feed(in, input[i]);
    std::this_thread::sleep_for(5ms);
  }
  c.control.write_all(R"({"kind":"set_character","args":{"id":"secondary_1"}})" "\n");
  for (size_t i = 30; i < 60; ++i) {
    feed(in, input[i]);
    std::this_thread::sleep_for(5ms);
  }
  bool acked = false;
  size_t before = 0, after = 0;
  while (before + after < 60) {
    const auto line = c.next();
    REQUIRE(!line.empty());
    if (wire::classify(line) == wire::MessageType::ack) {
      const auto ack = wire::decode_ack(line);
      CHECK(ack.ok);
      CHECK(ack.kind == "set_character");
      acked = true;
      continue;
    }
    const auto r = wire::decode_broadcast(line);
    if (r.stale) continue;
    if (acked) {
      CHECK(r.character == "secondary_1");
      CHECK(r.values.size() == 4);
      ++after;
    } else {
      CHECK(r.character == "primary");
      ++before;
    }
  }
  CHECK(acked);
  CHECK(before >= 30);

  const auto bad = c.request(R"({"kind":"set_character","args":{"id":"nobody"}})");
  CHECK(!bad.ok);
  CHECK(bad.error->find("nobody") != std::string::npos);
  const auto list = c.request(R"({"kind":"list_characters","args":{}})");
  CHECK(list.characters == std::vector<std::string>{"primary", "secondary_0", "secondary_1"});
  const auto junk = c.request("this is not json");
  CHECK(!junk.ok);
  s.stop();
}

TEST_CASE("malformed frames are rejected without ending the stream") {
  Service s(ephemeral(), testing::small_pipeline(4, 3, 0, 8));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"subscribe","args":{"all":true}})").ok);
  auto in = net::TcpStream::connect({"127.0.0.1", s.frame_port()});
  const auto input = frames(20, 4, 9);
  for (size_t i = 0; i < 20; ++i) {
    if (i == 10) {
      in.write_all("{\"t\":0.5,\"w\":[0.1,\"x\"]}\n");
      in.write_all("garbage\n");
      feed(in, {0.42, {0.1, 0.2}}); // wrong width: decoded but refused by the pipeline
    }
    feed(in, input[i]);
    std::this_thread::sleep_for(2ms);
  }
  std::vector<double> ts;
  while (ts.size() < 20) {
    const auto line = c.next();
    REQUIRE(!line.empty());
    const auto r = wire::decode_broadcast(line);
    if (!r.stale) ts.push_back(r.t);
  }
  for (size_t i = 0; i < 20; ++i) CHECK(ts[i] == input[i].timestamp);
  std::this_thread::sleep_for(50ms);
  CHECK(s.metrics().frames_rejected == 3);
  s.stop();
}

TEST_CASE("recalibration captures the next frames as neutral") {
  auto cfg = ephemeral();
  cfg.recalibration_frames = 10;
  Service s(cfg, testing::small_pipeline(4, 3, 0, 10));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"subscribe","args":{}})").ok);
  CHECK(c.request(R"({"kind":"recalibrate","args":{}})").ok);
  auto in = net::TcpStream::connect({"127.0.0.1", s.frame_port()});
  const BlendshapeFrame neutral{0.0, {0.3, 0.1, 0.5, 0.2}};
  // The reference pipeline sees the same frames with the same calibration switch.
  auto ref = testing::small_pipeline(4, 3, 0, 10);
  std::vector<ControllerFrame> expect;
  for (int i = 0; i < 15; ++i) {
    BlendshapeFrame f = neutral;
    f.timestamp = i / 24.0;
    if (i == 9) {
      const std::vector<BlendshapeFrame> window(10, neutral);
      ref.set_calibration(calibrate(window));
    }
    expect.push_back(ref.retarget_step(f));
    feed(in, f);
    std::this_thread::sleep_for(2ms);
  }
  std::vector<wire::BroadcastRecord> got;
  while (got.size() < 15) {
    const auto line = c.next();
    REQUIRE(!line.empty());
    const auto r = wire::decode_broadcast(line);
    if (!r.stale) got.push_back(r);
  }
  for (size_t i = 0; i < 15; ++i) CHECK(got[i].values == expect[i].values);
  s.stop();
}

TEST_CASE("a silent input repeats the last frame flagged stale") {
  auto cfg = ephemeral();
  Service s(cfg, testing::small_pipeline(4, 3, 0, 11));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"set_params","args":{"stale_timeout_ms":50.0}})").ok);
  CHECK(c.request(R"({"kind":"subscribe","args":{}})").ok);
  auto in = net::TcpStream::connect({"127.0.0.1", s.frame_port()});
  feed(in, {1.0, {0.2, 0.2, 0.2, 0.2}});
  const auto first = wire::decode_broadcast(c.next());
  CHECK(!first.stale);
  const auto second = wire::decode_broadcast(c.next());
  CHECK(second.stale);
  CHECK(second.t > first.t);
  s.stop();
}

TEST_CASE("metrics reach subscribers") {
  Service s(ephemeral(), testing::small_pipeline(4, 3, 0, 12));
  s.start();
  Client c(s.control_port());
  CHECK(c.request(R"({"kind":"subscribe","args":{}})").ok);
  std::string line;
  bool seen = false;
  for (int i = 0; i < 10 && !seen; ++i) {
    REQUIRE(c.control.read_line(line));
    seen = wire::classify(line) == wire::MessageType::metrics;
  }
  CHECK(seen);
  CHECK(wire::decode_metrics(line).frames_in == 0);
  s.stop();
}

}
