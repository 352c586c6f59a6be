#include "miencap/manifest.hpp"

#include <fstream>

#include <json.hpp>

#include "miencap/error.hpp"

namespace miencap {

namespace {

constexpr int kManifestVersion = 1;
constexpr int kCalibrationVersion = 1;

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
}

void write_json(const nlohmann::ordered_json& doc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << doc.dump(2) << '\n';
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() ? p : base.parent_path() / p;
}

} // namespace

PipelineManifest PipelineManifest::load(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  PipelineManifest m;
  try {
    MIENCAP_THROW_IF(
        doc.value("version", 0) != kManifestVersion, FormatError, "'{}': unsupported manifest version", path.string());
    if (doc.contains("channels")) {
      m.channels = doc.at("channels").get<std::vector<std::string>>();
    }
    const auto& p = doc.at("primary");
    m.primary = {resolve(path, p.at("rig").get<std::string>()), resolve(path, p.at("model").get<std::string>())};
    if (doc.contains("secondaries")) {
      for (const auto& s : doc.at("secondaries")) {
        m.secondaries.push_back(
            {resolve(path, s.at("rig").get<std::string>()), resolve(path, s.at("model").get<std::string>())});
      }
    }
    if (doc.contains("calibration")) {
      m.calibration = resolve(path, doc.at("calibration").get<std::string>());
    }
    m.target_fps = doc.value("target_fps", 24.0);
    m.stale_timeout_ms = doc.value("stale_timeout_ms", 200);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  MIENCAP_THROW_IF(m.target_fps <= 0.0, ValidationError, "'{}': target_fps must be positive", path.string());
  MIENCAP_THROW_IF(m.stale_timeout_ms <= 0, ValidationError, "'{}': stale_timeout_ms must be positive", path.string());
  return m;
}

void PipelineManifest::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json doc;
  doc["version"] = kManifestVersion;
  if (!channels.empty()) {
    doc["channels"] = channels;
  }
  doc["primary"] = {{"rig", primary.rig.generic_string()}, {"model", primary.model.generic_string()}};
  auto& sec = doc["secondaries"] = nlohmann::ordered_json::array();
  for (const auto& s : secondaries) {
    sec.push_back({{"rig", s.rig.generic_string()}, {"model", s.model.generic_string()}});
  }
  if (calibration) {
    doc["calibration"] = calibration->generic_string();
  }
  doc["target_fps"] = target_fps;
  doc["stale_timeout_ms"] = stale_timeout_ms;
  write_json(doc, path);
}

RetargetPipeline build_pipeline(const PipelineManifest& manifest) {
  auto channels = manifest.channels.empty() ? default_channels() : manifest.channels;
  auto rig = load_rig(manifest.primary.rig);
  auto adaption = load_model(manifest.primary.model);
  std::vector<SecondaryCharacter> secondaries;
  for (const auto& s : manifest.secondaries) {
    secondaries.push_back({load_rig(s.rig), load_model(s.model)});
  }
  auto calibration = manifest.calibration ? load_calibration(*manifest.calibration) : zero_profile(channels.size());
  PipelineConfig config;
  config.target_fps = manifest.target_fps;
  config.stale_timeout = std::chrono::milliseconds(manifest.stale_timeout_ms);
  return RetargetPipeline(
      std::move(channels), std::move(rig), std::move(adaption), std::move(secondaries), std::move(calibration), config);
}

RetargetPipeline load_pipeline(const std::filesystem::path& manifest_path) {
  return build_pipeline(PipelineManifest::load(manifest_path));
}

CalibrationProfile load_calibration(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  CalibrationProfile p;
  try {
    MIENCAP_THROW_IF(
        doc.value("version", 0) != kCalibrationVersion, FormatError, "'{}': unsupported calibration version", path.string());
    p.neutral_weights = doc.at("neutral_weights").get<std::vector<double>>();
    p.sample_count = doc.value("sample_count", size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  for (double v : p.neutral_weights) {
    MIENCAP_THROW_IF(!(v >= 0.0 && v <= 1.0), ValidationError, "'{}': calibration value {} outside [0, 1]", path.string(), v);
  }
  return p;
}

void save_calibration(const CalibrationProfile& profile, const std::filesystem::path& path) {
  nlohmann::ordered_json doc;
  doc["version"] = kCalibrationVersion;
  doc["neutral_weights"] = profile.neutral_weights;
  doc["sample_count"] = profile.sample_count;
  write_json(doc, path);
}

} // namespace miencap
