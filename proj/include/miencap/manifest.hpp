#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "miencap/retarget.hpp"

namespace miencap {

/// Binds channels, models, rigs and calibration into a runnable pipeline.
/// Relative paths resolve against the manifest's directory.
struct PipelineManifest {
  struct Character {
    std::filesystem::path rig;
    std::filesystem::path model;
  };

  std::vector<std::string> channels; // empty: default 52-channel list
  Character primary;                 // model is the adaption network
  std::vector<Character> secondaries;
  std::optional<std::filesystem::path> calibration;
  double target_fps = 24.0;
  int stale_timeout_ms = 200;

  static PipelineManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

RetargetPipeline build_pipeline(const PipelineManifest& manifest);
RetargetPipeline load_pipeline(const std::filesystem::path& manifest_path);

CalibrationProfile load_calibration(const std::filesystem::path& path);
void save_calibration(const CalibrationProfile& profile, const std::filesystem::path& path);

} // namespace miencap
