#include <doctest.h>

#include <json.hpp>

#include "cli_runner.hpp"
#include "helpers.hpp"
#include "miencap/neural.hpp"
#include "miencap/retrieval.hpp"
#include "miencap/wire.hpp"

using namespace miencap;
using nlohmann::json;

namespace {

json first_json(const std::string& text) {
  return json::parse(text.substr(0, text.find('\n')));
}

std::string q(const std::filesystem::path& p) {
  return "'" + p.string() + "'";
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("eval of identical streams reports zero error") {
  testing::TempDir dir("cli_eval");
  Rng rng(101);
  std::vector<wire::BroadcastRecord> recs;
  for (int i = 0; i < 30; ++i) recs.push_back({i / 24.0, "primary", testing::random_vector(rng, 5), false});
  wire::write_output_stream(recs, dir / "a.ndjson");
  wire::write_output_stream(recs, dir / "b.ndjson");
  const auto r = testing::run_cli(dir.path(), "eval --pred " + q(dir / "a.ndjson") + " --truth " + q(dir / "b.ndjson"));
  REQUIRE(r.exit_code == 0);
  const auto doc = json::parse(r.out);
  CHECK(doc["rmse"].get<double>() == 0.0);
  CHECK(doc["jitter_delta"].get<double>() == 0.0);
  CHECK(doc["frames"].get<int>() == 30);
  CHECK(doc["char"] == "primary");
}

TEST_CASE("build-pairs reproduces the golden pair file") {
  testing::TempDir dir("cli_pairs");
  const auto r = testing::run_cli(dir.path(), "build-pairs --k 30 --source " + q(testing::fixture("human.db")) +
                                                  " --target " + q(testing::fixture("primary.db")) + " --out " +
                                                  q(dir / "pairs.csv"));
  REQUIRE(r.exit_code == 0);
  CHECK(testing::slurp(dir / "pairs.csv") == testing::slurp(testing::fixture("pairs_k30.csv")));
  const auto piped = testing::run_cli(dir.path(), "build-pairs --source " + q(testing::fixture("human.db")) +
                                                      " --target " + q(testing::fixture("primary.db")));
  CHECK(piped.out == testing::slurp(testing::fixture("pairs_k30.csv")));
}

TEST_CASE("usage errors exit with status 2") {
  testing::TempDir dir("cli_usage");
  auto r = testing::run_cli(dir.path(), "eval --pred x --truth y --bogus");
  CHECK(r.exit_code == 2);
  CHECK(first_json(r.err)["error"] == "usage");
  r = testing::run_cli(dir.path(), "build-pairs --source /no/such.db --target /no/other.db");
  CHECK(r.exit_code == 2);
  CHECK(first_json(r.err)["error"] == "usage");
  r = testing::run_cli(dir.path(), "");
  CHECK(r.exit_code == 2);
  r = testing::run_cli(dir.path(), "frobnicate");
  CHECK(r.exit_code == 2);
}

TEST_CASE("library errors exit nonzero with a machine-readable line") {
  testing::TempDir dir("cli_err");
  testing::spit(dir / "bad.db", "expr-db 7\n");
  const auto r = testing::run_cli(dir.path(), "build-pairs --source " + q(dir / "bad.db") + " --target " + q(dir / "bad.db"));
  CHECK(r.exit_code == 1);
  const auto doc = first_json(r.err);
  CHECK(doc["error"] == "format");
  CHECK(doc["message"].get<std::string>().find("version") != std::string::npos);
}

TEST_CASE("workflow on a synthetic workspace") {
  testing::TempDir dir("cli_flow");
  const auto ws = dir / "ws";
  auto ok = [&](const std::string& args) {
    const auto r = testing::run_cli(dir.path(), args);
    CAPTURE(args);
    CAPTURE(r.err);
    REQUIRE(r.exit_code == 0);
    return r;
  };
  ok("synth --out " + q(ws) + " --seed 3 --frames 160 --faces 50 --human-faces 20");
  for (const char* who : {"primary", "secondary_0"}) {
    ok(std::string("build-db --landmarks ") + q(ws / (std::string(who) + "_landmarks.txt")) + " --emotions " +
       q(ws / (std::string(who) + "_emotions.txt")) + " --tag " + who + " --out " + q(ws / (std::string(who) + ".db")));
  }
  ok("build-pairs --source " + q(ws / "primary.db") + " --target " + q(ws / "secondary_0.db") + " --out " + q(ws / "p2s.csv"));

  SUBCASE("secondary training echoes the default hyperparameters") {
    const auto r = ok("train-secondary --pairs " + q(ws / "p2s.csv") + " --source-controllers " +
                      q(ws / "primary_controllers.ndjson") + " --target-controllers " +
                      q(ws / "secondary_0_controllers.ndjson") + " --epochs 2 --out " + q(ws / "secondary_0.model") +
                      " --report " + q(ws / "report.csv"));
    const auto echo = first_json(r.out);
    CHECK(echo["command"] == "train-secondary");
    CHECK(echo["lr"].get<double>() == 0.01);
    CHECK(echo["batch"].get<int>() == 10);
    CHECK(echo["hidden"] == json::array({128, 128}));
    const auto m = load_model(ws / "secondary_0.model");
    CHECK(m.input_dim() == 100);
    CHECK(m.output_dim() == 80);
    const auto report = testing::slurp(ws / "report.csv");
    CHECK(report.rfind("epoch,mean_loss,wall_ms\n1,", 0) == 0);
    CHECK(std::count(report.begin(), report.end(), '\n') == 3);
  }
  SUBCASE("adaption training, calibration and replay") {
    ok("calibrate --input " + q(ws / "neutral_weights.ndjson") + " --out " + q(ws / "calibration.json"));
    const auto r = ok("train-adaption --weights " + q(ws / "train_weights.ndjson") + " --truth " +
                      q(ws / "train_controllers.ndjson") + " --epochs 2 --hidden 32,32 --out " + q(ws / "adaption.model"));
    CHECK(first_json(r.out)["lr"].get<double>() == 0.01);
    const auto m = load_model(ws / "adaption.model");
    CHECK(m.metadata.at("input_layout") == "w52+h3x100");
    CHECK(m.metadata.at("character") == "primary");
    ok("train-secondary --pairs " + q(ws / "p2s.csv") + " --source-controllers " + q(ws / "primary_controllers.ndjson") +
       " --target-controllers " + q(ws / "secondary_0_controllers.ndjson") + " --epochs 1 --hidden 16 --out " +
       q(ws / "secondary_0.model"));
    ok("replay --manifest " + q(ws / "manifest.json") + " --input " + q(ws / "live_weights.ndjson") + " --fps 0 --out " +
       q(ws / "out.ndjson"));
    const auto out = wire::read_output_stream(ws / "out.ndjson");
    const auto live = wire::read_frame_stream(ws / "live_weights.ndjson");
    REQUIRE(out.size() == 2 * live.size());
    CHECK(out[0].character == "primary");
    CHECK(out[1].character == "secondary_0");
    CHECK(out[0].values.size() == 100);
    CHECK(out[1].values.size() == 80);
    ok("replay --manifest " + q(ws / "manifest.json") + " --input " + q(ws / "live_weights.ndjson") +
       " --fps 0 --primary-only --out " + q(ws / "primary.ndjson"));
    CHECK(wire::read_output_stream(ws / "primary.ndjson").size() == live.size());
    const auto e = ok("eval --pred " + q(ws / "out.ndjson") + " --truth " + q(ws / "out.ndjson") + " --char secondary_0");
    CHECK(json::parse(e.out)["frames"].get<size_t>() == live.size());
  }
}

TEST_CASE("compose writes a mesh") {
  testing::TempDir dir("cli_compose");
  BlendshapeBank bank;
  bank.neutral.vertices = {0, 0, 0, 1, 1, 1};
  bank.deltas.push_back({"up", {{0, 1, 0, 0, 1, 0}}});
  bank.deltas.push_back({"out", {{1, 0, 0, 1, 0, 0}}});
  save_bank(bank, dir / "bank.json");
  auto r = testing::run_cli(dir.path(), "compose --bank " + q(dir / "bank.json") + " --weights 0.5,0.25 --out " + q(dir / "m.obj"));
  REQUIRE(r.exit_code == 0);
  CHECK(testing::slurp(dir / "m.obj") == "v 0.25 0.5 0\nv 1.25 1.5 1\n");
  r = testing::run_cli(dir.path(), "compose --bank " + q(dir / "bank.json") + " --weights 0.5 --out " + q(dir / "m.obj"));
  CHECK(r.exit_code == 1);
  r = testing::run_cli(dir.path(), "compose --bank " + q(dir / "bank.json") + " --weights 0.5,abc --out " + q(dir / "m.obj"));
  CHECK(r.exit_code == 1);
}

}
