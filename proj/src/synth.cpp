#include "miencap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include <json.hpp>

#include "miencap/error.hpp"
#include "miencap/manifest.hpp"
#include "miencap/wire.hpp"

namespace miencap::synth {

namespace {


constexpr size_t kLatents = 8;

double sigmoid(double x) {
  return 1.0 / (1.0 + std::exp(-x));
}

} // namespace

// ---------------------------------------------------------------------------

AdaptionTask::AdaptionTask(size_t channels, size_t controllers, double smoothing, uint64_t seed, double gain)
    : channels_(channels), controllers_(controllers), smoothing_(smoothing) {
  MIENCAP_THROW_IF(!(smoothing >= 0.0 && smoothing < 1.0), ValidationError, "smoothing must lie in [0, 1)");
  Rng rng(seed);
  stream_seed_ = rng.next();
  mixing_.resize(channels * kLatents);
  rest_.resize(channels);
  for (size_t c = 0; c < channels; ++c) {
    rest_[c] = rng.uniform(0.0, 0.1);
    // Each channel follows two or three latent expressions.
    for (size_t k = 0; k < 3; ++k) {
      mixing_[c * kLatents + rng.below(kLatents)] += rng.uniform(0.2, 0.7);
    }
  }

  // Centre the map on the stationary mean so the nonlinearity is used on
  // both sides; the mean is estimated from a long stream.
  const auto probe = weights(0, 4000);
  std::vector<double> mean(channels, 0.0), var(channels, 0.0);
  for (const auto& f : probe) {
    for (size_t c = 0; c < channels; ++c) {
      mean[c] += f.weights[c] / static_cast<double>(probe.size());
    }
  }
  for (const auto& f : probe) {
    for (size_t c = 0; c < channels; ++c) {
      const double d = f.weights[c] - mean[c];
      var[c] += d * d / static_cast<double>(probe.size());
    }
  }
  double spread = 0.0;
  for (double v : var) {
    spread += v;
  }
  const double scale = gain / std::sqrt(std::max(spread, 1e-12));
  matrix_.resize(controllers * channels);
  offset_.resize(controllers);
  for (size_t j = 0; j < controllers; ++j) {
    double centre = 0.0;
    for (size_t c = 0; c < channels; ++c) {
      const double a = scale * rng.normal();
      matrix_[j * channels + c] = a;
      centre += a * mean[c];
    }
    offset_[j] = -centre + 0.3 * gain * rng.normal();
  }
}

std::vector<BlendshapeFrame> AdaptionTask::weights(size_t first, size_t count, double fps) const {
  // Critically damped second-order smoothing of white noise, time constant
  // ~0.3 s, run from frame 0 so any window of the stream is reproducible.
  const double a = std::exp(-1.0 / (0.3 * fps));
  const double gain = std::sqrt((1.0 - a * a) * (1.0 - a * a) * (1.0 - a * a) / (1.0 + a * a));
  Rng rng(stream_seed_);
  std::array<double, kLatents> u{}, v{};
  std::vector<BlendshapeFrame> frames;
  frames.reserve(count);
  for (size_t i = 0; i < first + count; ++i) {
    for (size_t k = 0; k < kLatents; ++k) {
      u[k] = a * u[k] + gain * rng.normal();
      v[k] = a * v[k] + u[k];
    }
    std::vector<double> noise(channels_);
    for (auto& n : noise) {
      n = 0.005 * rng.normal();
    }
    if (i < first) {
      continue;
    }
    BlendshapeFrame f;
    f.timestamp = static_cast<double>(i) / fps;
    f.weights.resize(channels_);
    for (size_t c = 0; c < channels_; ++c) {
      double w = rest_[c] + noise[c];
      for (size_t k = 0; k < kLatents; ++k) {
        w += mixing_[c * kLatents + k] * sigmoid(2.0 * v[k] - 1.5);
      }
      f.weights[c] = std::clamp(w, 0.0, 1.0);
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

std::vector<double> AdaptionTask::target_map(const std::vector<double>& w) const {
  std::vector<double> out(controllers_);
  for (size_t j = 0; j < controllers_; ++j) {
    double z = offset_[j];
    for (size_t c = 0; c < channels_; ++c) {
      z += matrix_[j * channels_ + c] * w[c];
    }
    out[j] = sigmoid(z);
  }
  return out;
}

std::vector<ControllerFrame> AdaptionTask::controllers(const std::vector<BlendshapeFrame>& weights) const {
  std::vector<ControllerFrame> out;
  out.reserve(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    auto target = target_map(weights[i].weights);
    if (i > 0) {
      const auto& prev = out.back().values;
      for (size_t j = 0; j < controllers_; ++j) {
        target[j] = smoothing_ * prev[j] + (1.0 - smoothing_) * target[j];
      }
    }
    out.push_back({weights[i].timestamp, std::move(target)});
  }
  return out;
}

// ---------------------------------------------------------------------------

PiecewiseLinearMap::PiecewiseLinearMap(size_t inputs, size_t outputs, uint64_t seed)
    : inputs_(inputs), outputs_(outputs), matrix_(inputs * outputs, 0.0), center_(outputs) {
  Rng rng(seed);
  const size_t fan = std::min<size_t>(5, inputs);
  for (size_t j = 0; j < outputs; ++j) {
    for (size_t k = 0; k < fan; ++k) {
      matrix_[j * inputs + rng.below(inputs)] += 0.6 * rng.normal();
    }
    center_[j] = rng.uniform(0.3, 0.7);
  }
}

std::vector<double> PiecewiseLinearMap::operator()(const std::vector<double>& x) const {
  std::vector<double> y(outputs_);
  for (size_t j = 0; j < outputs_; ++j) {
    double v = center_[j];
    for (size_t i = 0; i < inputs_; ++i) {
      v += matrix_[j * inputs_ + i] * (x[i] - 0.5);
    }
    y[j] = std::clamp(v, 0.0, 1.0);
  }
  return y;
}

Dataset PiecewiseLinearMap::sample(size_t count, uint64_t seed) const {
  Rng rng(seed);
  Dataset data;
  for (size_t s = 0; s < count; ++s) {
    std::vector<double> x(inputs_);
    for (auto& v : x) {
      v = rng.uniform();
    }
    data.targets.push_back((*this)(x));
    data.inputs.push_back(std::move(x));
  }
  return data;
}

// ---------------------------------------------------------------------------

namespace {

// Latent code: smile, mouth_open, brow_raise, brow_lower, eye_wide, squint.
constexpr size_t kCodeSize = 6;
constexpr std::array<std::array<double, kCodeSize>, kEmotionCount> kLabelCodes = {{
    {0.0, 0.0, 0.0, 0.0, 0.0, 0.0},   // neutral
    {0.0, 0.1, 0.0, 0.8, 0.0, 0.4},   // anger
    {-0.5, 0.0, 0.3, 0.0, 0.0, 0.2},  // sadness
    {-0.2, 0.4, 0.7, 0.0, 0.6, 0.0},  // fear
    {-0.4, 0.0, 0.0, 0.5, 0.0, 0.6},  // disgust
    {0.9, 0.3, 0.0, 0.0, 0.0, 0.3},   // joy
    {0.0, 0.9, 0.9, 0.0, 0.9, 0.0},   // surprise
}};

LandmarkSet deform(const std::vector<double>& code, double style, Rng& rng) {
  LandmarkSet s = default_mean_face();
  auto& p = s.points;
  const double smile = style * code[0];
  const double open = style * code[1];
  const double raise = style * code[2];
  const double lower = style * code[3];
  const double wide = style * code[4];
  const double squint = style * code[5];

  for (size_t i : {31u, 37u}) {
    p[i][1] += 0.12 * smile;
    p[i][0] += (i == 31 ? -1.0 : 1.0) * 0.06 * std::max(0.0, smile);
  }
  for (size_t i : {38u, 39u, 40u, 41u, 42u, 46u, 47u, 48u}) {
    p[i][1] -= 0.25 * open;
  }
  for (size_t i = 0; i < 10; ++i) {
    p[i][1] += 0.15 * raise - 0.10 * lower;
  }
  for (size_t i : {3u, 4u}) p[i][0] += 0.04 * lower;
  for (size_t i : {5u, 6u}) p[i][0] -= 0.04 * lower;
  for (size_t i : {20u, 21u, 26u, 27u}) p[i][1] += 0.05 * wide - 0.04 * squint;
  for (size_t i : {23u, 24u, 29u, 30u}) p[i][1] += -0.03 * wide + 0.03 * squint;

  for (auto& q : p) {
    q[0] += 0.005 * rng.normal();
    q[1] += 0.005 * rng.normal();
  }

  // Random camera-like affine pose, removed again by registration.
  const double scale = rng.uniform(80.0, 120.0);
  const double angle = rng.uniform(-0.2, 0.2);
  const double shear = rng.uniform(-0.05, 0.05);
  const double tx = rng.uniform(100.0, 300.0);
  const double ty = rng.uniform(100.0, 300.0);
  const double c = std::cos(angle), sn = std::sin(angle);
  for (auto& q : p) {
    const double x = q[0] + shear * q[1];
    const double y = q[1];
    q = {scale * (c * x - sn * y) + tx, scale * (sn * x + c * y) + ty};
  }
  return s;
}

} // namespace

std::vector<FaceSample> make_faces(size_t count, const std::string& id_prefix, double style, uint64_t seed) {
  Rng rng(seed);
  std::vector<FaceSample> out;
  out.reserve(count);
  for (size_t n = 0; n < count; ++n) {
    const auto label = static_cast<size_t>(rng.below(kEmotionCount));
    const double intensity = rng.uniform(0.4, 1.0);
    std::vector<double> code(kCodeSize);
    for (size_t k = 0; k < kCodeSize; ++k) {
      code[k] = intensity * kLabelCodes[label][k] + 0.08 * rng.normal();
    }

    std::array<double, kEmotionCount> logits{};
    for (auto& z : logits) {
      z = 0.3 * rng.normal();
    }
    logits[label] += 3.0 * intensity;
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    EmotionDistribution emo;
    for (size_t i = 0; i < kEmotionCount; ++i) {
      emo.p[i] = std::exp(logits[i] - m);
      sum += emo.p[i];
    }
    for (auto& v : emo.p) {
      v /= sum;
    }

    FaceSample sample;
    const std::string id = fmt::format("{}{:05d}", id_prefix, n);
    sample.landmarks = {id, deform(code, style, rng)};
    sample.emotion = {id, emo, static_cast<Expression>(label), id};
    sample.code = std::move(code);
    out.push_back(std::move(sample));
  }
  return out;
}

std::vector<double> code_to_controllers(const std::vector<double>& code, size_t controllers, uint64_t rig_seed) {
  Rng rng(rig_seed);
  std::vector<double> out(controllers);
  for (size_t j = 0; j < controllers; ++j) {
    double z = 0.5 * rng.normal();
    for (double c : code) {
      z += 1.2 * rng.normal() * c;
    }
    out[j] = sigmoid(z);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ControllerTableEntry> load_controller_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  std::vector<ControllerTableEntry> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto doc = nlohmann::json::parse(line);
      out.push_back({doc.at("id").get<std::string>(), doc.at("v").get<std::vector<double>>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

void save_controller_table(const std::vector<ControllerTableEntry>& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  for (const auto& e : table) {
    nlohmann::ordered_json doc;
    doc["id"] = e.id;
    doc["v"] = e.values;
    out << doc.dump() << '\n';
  }
}

void write_workspace(const std::filesystem::path& dir, const WorkspaceOptions& o) {
  std::filesystem::create_directories(dir);
  save_mean_face(default_mean_face(), dir / "mean_face.txt");
  save_semantic_map(default_semantic_map(), dir / "semantic_map.json");

  auto write_faces = [&](const std::vector<FaceSample>& faces, const std::string& stem) {
    std::vector<LandmarkRecord> lm;
    std::vector<EmotionRecord> em;
    for (const auto& f : faces) {
      lm.push_back(f.landmarks);
      em.push_back(f.emotion);
    }
    save_landmarks(lm, dir / (stem + "_landmarks.txt"));
    save_emotions(em, dir / (stem + "_emotions.txt"));
  };
  auto write_table = [&](const std::vector<FaceSample>& faces, size_t controllers, uint64_t rig_seed, const std::string& stem) {
    std::vector<ControllerTableEntry> table;
    for (const auto& f : faces) {
      table.push_back({f.landmarks.id, code_to_controllers(f.code, controllers, rig_seed)});
    }
    save_controller_table(table, dir / (stem + "_controllers.ndjson"));
  };

  write_faces(make_faces(o.human_faces, "h", 1.0, o.seed), "human");

  const auto primary = make_faces(o.character_faces, "p", 1.6, o.seed + 1);
  write_faces(primary, "primary");
  write_table(primary, o.primary_controllers, o.seed + 100, "primary");
  save_rig(make_default_rig("primary", o.primary_controllers), dir / "primary_rig.json");

  PipelineManifest manifest;
  manifest.primary = {"primary_rig.json", "adaption.model"};
  for (size_t k = 0; k < o.secondary_controllers.size(); ++k) {
    const std::string stem = fmt::format("secondary_{}", k);
    const auto faces = make_faces(o.character_faces, fmt::format("s{}_", k), 2.2 + 0.3 * static_cast<double>(k), o.seed + 2 + k);
    write_faces(faces, stem);
    write_table(faces, o.secondary_controllers[k], o.seed + 200 + k, stem);
    save_rig(make_default_rig(stem, o.secondary_controllers[k]), dir / (stem + "_rig.json"));
    manifest.secondaries.push_back({stem + "_rig.json", stem + ".model"});
  }

  const AdaptionTask task(default_channels().size(), o.primary_controllers, 0.5, o.seed + 300);
  const auto train = task.weights(0, o.stream_frames);
  const auto truth = task.controllers(train);
  wire::write_frame_stream(train, dir / "train_weights.ndjson");
  std::vector<wire::BroadcastRecord> truth_records;
  for (const auto& f : truth) {
    truth_records.push_back({f.timestamp, "primary", f.values, false});
  }
  wire::write_output_stream(truth_records, dir / "train_controllers.ndjson");
  wire::write_frame_stream(task.weights(o.stream_frames, o.stream_frames / 4), dir / "live_weights.ndjson");

  // A neutral hold: small tracker offsets around a resting face.
  Rng rng(o.seed + 400);
  std::vector<double> rest(default_channels().size());
  for (auto& r : rest) {
    r = rng.uniform(0.0, 0.15);
  }
  std::vector<BlendshapeFrame> neutral;
  for (size_t i = 0; i < 30; ++i) {
    BlendshapeFrame f{static_cast<double>(i) / 24.0, rest};
    for (auto& w : f.weights) {
      w = std::clamp(w + 0.005 * rng.normal(), 0.0, 1.0);
    }
    neutral.push_back(std::move(f));
  }
  wire::write_frame_stream(neutral, dir / "neutral_weights.ndjson");
  manifest.calibration = "calibration.json";
  manifest.save(dir / "manifest.json");
}

} // namespace miencap::synth
