#include <doctest.h>

#include "helpers.hpp"
#include "miencap/synth.hpp"

using namespace miencap;

TEST_SUITE("synth") {

TEST_CASE("adaption task streams are seeded and bounded") {
  const synth::AdaptionTask a(52, 100, 0.5, 9), b(52, 100, 0.5, 9), c(52, 100, 0.5, 10);
  const auto wa = a.weights(0, 200), wb = b.weights(0, 200), wc = c.weights(0, 200);
  CHECK(wa == wb);
  CHECK(!(wa == wc));
  for (const auto& f : wa) {
    REQUIRE(f.weights.size() == 52);
    for (double w : f.weights) {
      CHECK(w >= 0.0);
      CHECK(w <= 1.0);
    }
  }
  CHECK(wa[24].timestamp == doctest::Approx(1.0));
  // A later window continues the same stream.
  const auto tail = a.weights(150, 50);
  CHECK(tail[0].weights == wa[150].weights);
}

TEST_CASE("ground truth follows the smoothing recursion") {
  const double lambda = 0.6;
  const synth::AdaptionTask task(10, 6, lambda, 4);
  const auto w = task.weights(0, 40);
  const auto truth = task.controllers(w);
  REQUIRE(truth.size() == 40);
  const auto first = task.target_map(w[0].weights);
  CHECK(truth[0].values == first);
  for (size_t t = 1; t < truth.size(); ++t) {
    const auto target = task.target_map(w[t].weights);
    for (size_t j = 0; j < 6; ++j) {
      CHECK(std::abs(truth[t].values[j] - (lambda * truth[t - 1].values[j] + (1 - lambda) * target[j])) < 1e-15);
      CHECK(target[j] > 0.0);
      CHECK(target[j] < 1.0);
    }
  }
}

TEST_CASE("piecewise-linear map") {
  const synth::PiecewiseLinearMap map(100, 80, 3);
  const auto d = map.sample(50, 4);
  REQUIRE(d.size() == 50);
  for (size_t i = 0; i < d.size(); ++i) {
    CHECK(map(d.inputs[i]) == d.targets[i]);
    for (double y : d.targets[i]) {
      CHECK(y >= 0.0);
      CHECK(y <= 1.0);
    }
  }
  // Linear inside the unclamped region: midpoints map to midpoints.
  const std::vector<double> mid(100, 0.5);
  const auto y = map(mid);
  auto x2 = mid;
  x2[0] = 0.51;
  auto x3 = mid;
  x3[0] = 0.49;
  const auto y2 = map(x2), y3 = map(x3);
  for (size_t j = 0; j < 80; ++j) {
    if (y[j] > 0.05 && y[j] < 0.95) CHECK(std::abs(0.5 * (y2[j] + y3[j]) - y[j]) < 1e-12);
  }
}

TEST_CASE("synthetic faces") {
  const auto faces = synth::make_faces(40, "f", 1.0, 5);
  REQUIRE(faces.size() == 40);
  CHECK(faces[7].landmarks.id == "f00007");
  CHECK(faces[7].emotion.id == "f00007");
  for (const auto& f : faces) {
    CHECK_NOTHROW(f.emotion.emotion.validate());
    CHECK_NOTHROW(register_landmarks(f.landmarks.landmarks, default_mean_face()));
    const auto& p = f.emotion.emotion.p;
    CHECK(std::max_element(p.begin(), p.end()) - p.begin() == static_cast<long>(f.emotion.label));
  }
  const auto c = synth::code_to_controllers(faces[0].code, 20, 1);
  CHECK(c.size() == 20);
  CHECK(c == synth::code_to_controllers(faces[0].code, 20, 1));
}

TEST_CASE("workspace and controller tables") {
  testing::TempDir dir("synth");
  synth::WorkspaceOptions opt;
  opt.human_faces = 12;
  opt.character_faces = 15;
  opt.stream_frames = 40;
  opt.secondary_controllers = {30, 20};
  synth::write_workspace(dir.path(), opt);
  for (const char* f : {"manifest.json", "primary_rig.json", "secondary_1_rig.json", "train_weights.ndjson",
                        "train_controllers.ndjson", "human_landmarks.txt", "secondary_1_controllers.ndjson"}) {
    CHECK(std::filesystem::exists(dir / f));
  }
  const auto table = synth::load_controller_table(dir / "secondary_1_controllers.ndjson");
  REQUIRE(table.size() == 15);
  CHECK(table[0].values.size() == 20);
  synth::save_controller_table(table, dir / "copy.ndjson");
  CHECK(testing::slurp(dir / "copy.ndjson") == testing::slurp(dir / "secondary_1_controllers.ndjson"));

  testing::TempDir again("synth");
  synth::write_workspace(again.path(), opt);
  CHECK(testing::slurp(dir / "train_weights.ndjson") == testing::slurp(again / "train_weights.ndjson"));
}

}
