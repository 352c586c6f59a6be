// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "../oracles.hpp"
#include "../unit/cli_runner.hpp"
#include "../unit/pipelines.hpp"
#include "../workloads.hpp"
#include "miencap/error.hpp"
#include "miencap/net.hpp"
#include "miencap/replay.hpp"
#include "miencap/retarget.hpp"
#include "miencap/service.hpp"
#include "miencap/synth.hpp"
#include "miencap/wire.hpp"

using namespace miencap;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::string> fixture_lines(const std::string& name) {
  std::istringstream in(testing::slurp(std::filesystem::path(MIENCAP_FIXTURES) / "wire" / name));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome distance_suite() {
  Rng rng(1);
  const double ln2 = std::log(2.0);
  size_t failures = 0;
  double worst_sym = 0, worst_oracle = 0;
  for (size_t i = 0; i < kEmotionCount; ++i) {
    for (size_t j = 0; j < kEmotionCount; ++j) {
      EmotionDistribution a, b;
      a.p[i] = 1;
      b.p[j] = 1;
      const double expect = i == j ? 0.0 : ln2;
      failures += std::abs(jsd(a, b) - expect) > 1e-9;
    }
  }
  for (int n = 0; n < 10000; ++n) {
    const double sharp = 0.5 + 3.0 * rng.uniform();
    const auto p = workload::random_emotion(rng, sharp), q = workload::random_emotion(rng, sharp);
    const double d = jsd(p, q);
    failures += jsd(p, p) > 1e-9;
    failures += d < 0.0 || d > ln2 + 1e-9;
    worst_sym = std::max(worst_sym, std::abs(d - jsd(q, p)));
    worst_oracle = std::max(worst_oracle, std::abs(d - oracle::jsd(p.p, q.p)));
  }
  failures += worst_sym > 1e-9;
  failures += worst_oracle > 1e-9;
  return {failures == 0, fmt::format("10000 pairs, max asymmetry {:.1e}, max oracle gap {:.1e}", worst_sym, worst_oracle)};
}

Outcome retrieval_equivalence() {
  const auto db = workload::random_database(1000, 2);
  Rng rng(3);
  size_t agree = 0, outside_top = 0;
  for (int i = 0; i < 100; ++i) {
    const auto q = workload::random_record(rng, "q" + std::to_string(i));
    const auto m = two_step_match(q, db, 30);
    agree += m.match_id == db.records[oracle::brute_force_match(q, db, 30)].id;
    const auto top = emotional_top_k(q.emotion, db, 30);
    outside_top += std::none_of(top.begin(), top.end(), [&](size_t t) { return db.records[t].id == m.match_id; });
  }
  size_t adversarial_ok = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto adv = workload::random_database(1000, 100 + trial);
    const size_t decoy = rng.below(adv.records.size());
    const auto q = workload::plant_adversary(adv, rng, 30, decoy);
    size_t nearest = 0;
    for (size_t i = 1; i < adv.records.size(); ++i) {
      if (geometric_distance(q.geometry, adv.records[i].geometry) < geometric_distance(q.geometry, adv.records[nearest].geometry)) {
        nearest = i;
      }
    }
    const auto top = emotional_top_k(q.emotion, adv, 30);
    const bool decoy_outside = std::find(top.begin(), top.end(), decoy) == top.end();
    const auto m = two_step_match(q, adv, 30);
    adversarial_ok += nearest == decoy && decoy_outside && m.match_id != adv.records[decoy].id &&
                      m.match_id == adv.records[oracle::brute_force_match(q, adv, 30)].id;
  }
  return {agree == 100 && outside_top == 0 && adversarial_ok == 10,
          fmt::format("{}/100 queries agree, {}/10 adversarial cases exclude the decoy", agree, adversarial_ok)};
}

Outcome gradient_checks() {
  Rng rng(4);
  double worst = 0;
  int cases = 0;
  for (auto kind : {LossKind::squared_error, LossKind::softmax_cross_entropy}) {
    for (size_t depth = 1; depth <= 3; ++depth) {
      for (uint64_t seed : {1, 2, 3}) {
        const size_t out = kind == LossKind::softmax_cross_entropy ? kEmotionCount : 6;
        auto model = make_mlp(9, std::vector<size_t>(depth, 12), out, seed);
        for (auto& l : model.layers) {
          for (auto& b : l.bias) b = rng.uniform(-0.1, 0.1);
        }
        std::vector<double> x(9), t(out);
        for (auto& v : x) v = rng.uniform(-1, 1);
        if (kind == LossKind::softmax_cross_entropy) {
          const auto e = workload::random_emotion(rng);
          t.assign(e.p.begin(), e.p.end());
        } else {
          for (auto& v : t) v = rng.uniform();
        }
        worst = std::max(worst, gradient_check(model, x, t, kind, 1e-5));
        ++cases;
      }
    }
  }
  return {worst < 1e-4, fmt::format("{} cases, max relative error {:.2e}", cases, worst)};
}

struct AdaptionRun {
  NetworkModel model;
  std::vector<BlendshapeFrame> heldout_weights;
  std::vector<ControllerFrame> heldout_truth;
};

std::optional<AdaptionRun> adaption_run;

constexpr size_t kChannels = 52;
constexpr size_t kControllers = 100;
constexpr int kAdaptionEpochs = 200;

Outcome adaption_learnability() {
  const synth::AdaptionTask task(kChannels, kControllers, 0.5, 2024);
  const auto train_w = task.weights(0, 5000);
  const auto train_c = task.controllers(train_w);
  auto held_w = task.weights(5000, 1000);
  auto held_c = task.controllers(held_w);
  const auto train = to_dataset(build_training_tuples(train_w, train_c));
  const auto held = build_training_tuples(held_w, held_c);

  const size_t hidden[] = {256, 256};
  auto model = make_mlp(kChannels + kHistoryLength * kControllers, hidden, kControllers, 1, "adaption");
  model.metadata[kLayoutKey] = adaption_layout(kChannels, kControllers);
  TrainConfig cfg; // lr 0.01, batch 10
  cfg.epochs = kAdaptionEpochs;
  cfg.seed = 1;
  auto result = sgd_train(std::move(model), train, cfg, LossKind::squared_error);

  // Teacher-forced held-out error, outputs clamped to the rig range as in retarget_step.
  std::vector<double> se(kControllers, 0.0);
  for (const auto& t : held) {
    const auto y = forward(result.model, t.input);
    for (size_t d = 0; d < kControllers; ++d) {
      const double e = std::clamp(y[d], 0.0, 1.0) - t.target[d];
      se[d] += e * e;
    }
  }
  double total = 0, worst = 0;
  for (double s : se) {
    total += s;
    worst = std::max(worst, std::sqrt(s / static_cast<double>(held.size())));
  }
  const double rmse = std::sqrt(total / static_cast<double>(held.size() * kControllers));

  // Closed-loop replay of the same frames through the live pipeline (reported only).
  RetargetPipeline pipe(default_channels(), make_default_rig("primary", kControllers), result.model, {}, zero_profile(kChannels));
  double closed = 0;
  size_t n = 0;
  for (size_t t = 0; t < held_w.size(); ++t) {
    const auto out = pipe.retarget_step(held_w[t]);
    if (t < kHistoryLength) continue;
    for (size_t d = 0; d < kControllers; ++d) closed += std::pow(out.values[d] - held_c[t].values[d], 2);
    ++n;
  }
  const double closed_rmse = std::sqrt(closed / static_cast<double>(n * kControllers));

  adaption_run = AdaptionRun{result.model, std::move(held_w), std::move(held_c)};
  return {rmse < 0.02,
          fmt::format("{} epochs, held-out RMSE per dimension {:.4f} (worst dimension {:.4f}, closed-loop {:.4f}), final loss {:.4f}",
                      kAdaptionEpochs, rmse, worst, closed_rmse, result.loss_curve.back())};
}

constexpr size_t kSecondaryIn = 100;
constexpr size_t kSecondaryOut = 80;
constexpr size_t kMapTrain = 5000;
constexpr size_t kMapStride = 2;
constexpr int kMapEpochs = 60;

// Every kMapStride-th primary controller frame of a synthetic performance,
// mapped through the secondary map.
Dataset mapped_controllers(const synth::PiecewiseLinearMap& map, const synth::AdaptionTask& task, size_t first, size_t count) {
  const auto controllers = task.controllers(task.weights(first, count * kMapStride));
  Dataset d;
  for (size_t i = 0; i < count; ++i) {
    d.inputs.push_back(controllers[i * kMapStride].values);
    d.targets.push_back(map(d.inputs.back()));
  }
  return d;
}

Outcome secondary_adaptation() {
  const synth::PiecewiseLinearMap map(kSecondaryIn, kSecondaryOut, 11);
  const synth::AdaptionTask performance(kChannels, kSecondaryIn, 0.5, 31);
  const auto train = mapped_controllers(map, performance, 0, kMapTrain);
  const auto held = mapped_controllers(map, performance, kMapTrain * kMapStride + 100, 1000);
  const size_t hidden[] = {128, 128};
  TrainConfig cfg;
  cfg.epochs = kMapEpochs;
  cfg.seed = 14;
  const auto result = sgd_train(make_mlp(kSecondaryIn, hidden, kSecondaryOut, 15), train, cfg, LossKind::squared_error);
  std::vector<double> se(kSecondaryOut, 0.0), mean(kSecondaryOut, 0.0), var(kSecondaryOut, 0.0);
  for (size_t i = 0; i < held.size(); ++i) {
    const auto y = forward(result.model, held.inputs[i]);
    for (size_t d = 0; d < kSecondaryOut; ++d) {
      se[d] += std::pow(y[d] - held.targets[i][d], 2);
      mean[d] += held.targets[i][d] / static_cast<double>(held.size());
    }
  }
  for (const auto& t : held.targets) {
    for (size_t d = 0; d < kSecondaryOut; ++d) var[d] += std::pow(t[d] - mean[d], 2);
  }
  double total = 0, worst = 0, spread = 0;
  for (size_t d = 0; d < kSecondaryOut; ++d) {
    total += se[d];
    spread += var[d];
    worst = std::max(worst, std::sqrt(se[d] / static_cast<double>(held.size())));
  }
  const double n = static_cast<double>(held.size() * kSecondaryOut);
  const double rmse = std::sqrt(total / n);
  return {rmse < 0.05, fmt::format("{} epochs on {} controller frames, held-out RMSE {:.4f} (worst dimension {:.4f}, target "
                                   "std {:.4f})",
                                   kMapEpochs, kMapTrain, rmse, worst, std::sqrt(spread / n))};
}

Outcome flicker() {
  if (!adaption_run) return {false, "needs the model from criterion 4"};
  RetargetPipeline pipe(default_channels(), make_default_rig("primary", kControllers), adaption_run->model, {},
                        zero_profile(kChannels));
  auto frame = adaption_run->heldout_weights[500];
  std::vector<ControllerFrame> tail;
  for (int i = 0; i < 230; ++i) {
    frame.timestamp = i / 24.0;
    auto out = pipe.retarget_step(frame);
    if (i >= 30) tail.push_back(std::move(out));
  }
  std::vector<std::vector<double>> raw;
  for (const auto& f : tail) raw.push_back(f.values);
  const double j = jitter_metric(tail);
  const double gap = std::abs(j - oracle::jitter(raw));
  return {j < 1e-3 && gap < 1e-12, fmt::format("jitter over 200 frames {:.3e}", j)};
}

RetargetPipeline throughput_pipeline() {
  NetworkModel adaption;
  if (adaption_run) {
    adaption = adaption_run->model;
  } else {
    const size_t hidden[] = {256, 256};
    adaption = make_mlp(kChannels + kHistoryLength * kControllers, hidden, kControllers, 21);
  }
  std::vector<SecondaryCharacter> secs;
  const size_t hidden[] = {128, 128};
  for (uint64_t k = 0; k < 3; ++k) {
    secs.push_back({make_default_rig("secondary_" + std::to_string(k), kSecondaryOut),
                    make_mlp(kControllers, hidden, kSecondaryOut, 30 + k)});
  }
  return RetargetPipeline(default_channels(), make_default_rig("primary", kControllers), std::move(adaption),
                          std::move(secs), zero_profile(kChannels));
}

Outcome throughput() {
  const synth::AdaptionTask task(kChannels, kControllers, 0.5, 77);
  const auto frames = task.weights(0, 5000);
  auto pipe = throughput_pipeline();
  const auto t0 = Clock::now();
  double sink = 0;
  for (const auto& f : frames) sink += pipe.process(f).secondaries[2].values[0];
  const double fps = static_cast<double>(frames.size()) / seconds_since(t0);

  auto paced = throughput_pipeline();
  ReplayOptions opt;
  opt.fps = 24.0;
  size_t lines = 0;
  const std::span<const BlendshapeFrame> live(frames.data(), 72);
  const auto stats = replay(paced, live, opt, [&](std::string_view) { ++lines; });
  const bool ok = fps >= 1000.0 && std::isfinite(sink) && stats.frames == 72 && lines == 72 * 4 &&
                  stats.mean_latency_ms < 5.0;
  return {ok, fmt::format("{:.0f} fps offline with 3 secondaries; paced 24 fps replay of {} frames, mean latency {:.3f} ms "
                          "(max {:.3f} ms)",
                          fps, stats.frames, stats.mean_latency_ms, stats.max_latency_ms)};
}

Outcome upsampling() {
  const std::vector<std::vector<double>> key_values = {{0.0, 1.0, 0.2}, {0.9, 0.5, 0.2}, {0.3, 0.75, 0.7}, {0.6, 0.0, 0.1}};
  std::vector<ControllerFrame> keys;
  for (size_t k = 0; k < 4; ++k) keys.push_back({static_cast<double>(k) / 3.0, key_values[k]});
  const auto out = upsample_linear(keys, 3.0, 24.0);
  if (out.size() != 25) return {false, fmt::format("{} frames instead of 25", out.size())};
  double worst = 0;
  for (size_t i = 0; i < out.size(); ++i) {
    const size_t seg = std::min<size_t>(i / 8, 2);
    const double u = static_cast<double>(i - 8 * seg) / 8.0;
    worst = std::max(worst, std::abs(out[i].timestamp - static_cast<double>(i) / 24.0));
    for (size_t d = 0; d < 3; ++d) {
      const double a = key_values[seg][d], b = key_values[seg + 1][d];
      worst = std::max(worst, std::abs(out[i].values[d] - (a + u * (b - a))));
    }
  }
  const bool exact = out.front() == keys.front() && out.back().values == keys.back().values &&
                     out.back().timestamp == keys.back().timestamp && out[8].values == keys[1].values &&
                     out[16].values == keys[2].values;
  return {worst < 1e-12 && exact, fmt::format("25 frames, max deviation {:.1e}, keys reproduced exactly: {}", worst, exact)};
}

std::string quoted(const std::filesystem::path& p) {
  return "'" + p.string() + "'";
}

struct CliArtifacts {
  std::string pairs, model, output;
};

std::optional<CliArtifacts> cli_run(const testing::TempDir& dir, std::string& failure) {
  const auto ws = dir / "ws";
  auto run = [&](const std::string& args) {
    const auto r = testing::run_cli(dir.path(), args);
    if (r.exit_code != 0 && failure.empty()) failure = args.substr(0, args.find(' ')) + ": " + r.err;
    return r.exit_code == 0;
  };
  const bool ok =
      run("synth --out " + quoted(ws) + " --seed 5 --frames 240 --faces 80 --human-faces 30") &&
      run("build-db --landmarks " + quoted(ws / "primary_landmarks.txt") + " --emotions " +
          quoted(ws / "primary_emotions.txt") + " --tag primary --out " + quoted(ws / "primary.db")) &&
      run("build-db --landmarks " + quoted(ws / "secondary_0_landmarks.txt") + " --emotions " +
          quoted(ws / "secondary_0_emotions.txt") + " --tag secondary_0 --out " + quoted(ws / "secondary_0.db")) &&
      run("build-pairs --source " + quoted(ws / "primary.db") + " --target " + quoted(ws / "secondary_0.db") + " --out " +
          quoted(ws / "p2s.csv")) &&
      run("train-secondary --pairs " + quoted(ws / "p2s.csv") + " --source-controllers " +
          quoted(ws / "primary_controllers.ndjson") + " --target-controllers " +
          quoted(ws / "secondary_0_controllers.ndjson") + " --epochs 2 --hidden 32 --out " +
          quoted(ws / "secondary_0.model")) &&
      run("calibrate --input " + quoted(ws / "neutral_weights.ndjson") + " --out " + quoted(ws / "calibration.json")) &&
      run("train-adaption --weights " + quoted(ws / "train_weights.ndjson") + " --truth " +
          quoted(ws / "train_controllers.ndjson") + " --epochs 3 --hidden 64,64 --out " + quoted(ws / "adaption.model")) &&
      run("replay --manifest " + quoted(ws / "manifest.json") + " --input " + quoted(ws / "live_weights.ndjson") +
          " --fps 0 --out " + quoted(ws / "out.ndjson"));
  if (!ok) return std::nullopt;
  return CliArtifacts{testing::slurp(ws / "p2s.csv"), testing::slurp(ws / "adaption.model"),
                      testing::slurp(ws / "out.ndjson")};
}

Outcome determinism() {
  testing::TempDir a("accept_a"), b("accept_b");
  std::string failure;
  const auto first = cli_run(a, failure);
  const auto second = cli_run(b, failure);
  if (!first || !second) return {false, "CLI run failed: " + failure};
  const bool empty = first->pairs.empty() || first->model.empty() || first->output.empty();
  const bool same = first->pairs == second->pairs && first->model == second->model && first->output == second->output;
  return {same && !empty, fmt::format("pairs {} B, model {} B, output {} B; identical: {}", first->pairs.size(),
                                      first->model.size(), first->output.size(), same)};
}

Outcome wire_goldens() {
  size_t lines = 0, mismatches = 0;
  auto check = [&](const std::string& name, auto roundtrip) {
    for (const auto& line : fixture_lines(name)) {
      ++lines;
      mismatches += roundtrip(line) != line;
    }
  };
  check("frames.ndjson", [](const std::string& l) { return wire::encode_frame(wire::decode_frame(l)); });
  check("broadcast.ndjson", [](const std::string& l) { return wire::encode_broadcast(wire::decode_broadcast(l)); });
  check("control.ndjson", [](const std::string& l) { return wire::encode_control(wire::decode_control(l)); });
  check("acks.ndjson", [](const std::string& l) { return wire::encode_ack(wire::decode_ack(l)); });
  check("metrics.ndjson", [](const std::string& l) { return wire::encode_metrics(wire::decode_metrics(l)); });

  const auto malformed = fixture_lines("malformed_frames.txt");
  size_t refused = 0;
  for (const auto& line : malformed) {
    try {
      wire::decode_frame(line);
    } catch (const FormatError&) {
      ++refused;
    }
  }

  // Live service: malformed lines interleaved with good frames on one connection.
  ServiceConfig cfg;
  cfg.frame_listen.port = 0;
  cfg.control_listen.port = 0;
  cfg.metrics_interval = std::chrono::milliseconds(200);
  Service service(cfg, testing::small_pipeline(kChannels, 6, 1, 3));
  service.start();
  auto control = net::TcpStream::connect({"127.0.0.1", service.control_port()});
  control.set_read_timeout(std::chrono::seconds(3));
  control.write_all(R"({"kind":"subscribe","args":{"all":true}})" "\n");
  std::string line;
  bool acked = false;
  while (!acked && control.read_line(line)) acked = wire::classify(line) == wire::MessageType::ack && wire::decode_ack(line).ok;
  auto in = net::TcpStream::connect({"127.0.0.1", service.frame_port()});
  Rng rng(9);
  constexpr size_t kGood = 20;
  for (size_t i = 0; i < kGood; ++i) {
    in.write_all(wire::encode_frame({static_cast<double>(i) / 24.0, testing::random_vector(rng, kChannels)}) + "\n");
    if (i < malformed.size()) in.write_all(malformed[i] + "\n");
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  std::vector<double> primary_ts;
  while (primary_ts.size() < kGood && control.read_line(line)) {
    if (wire::classify(line) != wire::MessageType::broadcast) continue;
    const auto r = wire::decode_broadcast(line);
    if (r.character == "primary" && !r.stale) primary_ts.push_back(r.t);
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  const auto m = service.metrics();
  service.stop();
  bool ordered = primary_ts.size() == kGood;
  for (size_t i = 0; ordered && i < kGood; ++i) ordered = primary_ts[i] == static_cast<double>(i) / 24.0;

  const bool ok = lines > 0 && mismatches == 0 && refused == malformed.size() && acked && ordered &&
                  m.frames_rejected == malformed.size();
  return {ok, fmt::format("{} golden lines, {} mismatches; {}/{} malformed refused; live stream delivered {}/{} frames "
                          "with {} rejected",
                          lines, mismatches, refused, malformed.size(), primary_ts.size(), kGood, m.frames_rejected)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s; ///< 0 = no runtime bound
  std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "distance suite", 1.0, distance_suite},
      {2, "two-step retrieval equivalence", 5.0, retrieval_equivalence},
      {3, "gradient checks", 10.0, gradient_checks},
      {4, "adaption network learnability", 120.0, adaption_learnability},
      {5, "secondary adaptation", 60.0, secondary_adaptation},
      {6, "flicker", 0.0, flicker},
      {7, "throughput and paced latency", 0.0, throughput},
      {8, "upsampling", 0.0, upsampling},
      {9, "CLI determinism", 0.0, determinism},
      {10, "wire protocol goldens", 0.0, wire_goldens},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  if (selected.contains(6)) selected.insert(4);

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = c.budget_s == 0.0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    const std::string budget = c.budget_s == 0.0 ? std::string() : fmt::format(" < {:.0f} s", c.budget_s);
    fmt::print("{} criterion {:>2} {}: {} [{:.2f} s{}]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs, budget);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
