#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miencap/features.hpp"
#include "miencap/retrieval.hpp"
#include "miencap/retarget.hpp"

namespace miencap::synth {

/// Tracker-like blendshape streams and a smooth ground-truth controller map:
/// alpha(t) = smoothing * alpha(t-1) + (1 - smoothing) * sigmoid(A w(t) + b).
///
/// Weights come from a few smooth latent expression intensities (second-order
/// filtered noise) mixed into correlated channels, plus small tracker noise.
class AdaptionTask {
 public:
  /// `gain` is the standard deviation of A w(t) + b over the stream.
  AdaptionTask(size_t channels, size_t controllers, double smoothing, uint64_t seed, double gain = 1.0);

  /// Calibrated weights sampled at `fps`, starting at frame index `first`.
  std::vector<BlendshapeFrame> weights(size_t first, size_t count, double fps = 24.0) const;

  /// Ground-truth controllers for a weight stream, seeded at the stationary
  /// value of its first frame.
  std::vector<ControllerFrame> controllers(const std::vector<BlendshapeFrame>& weights) const;

  std::vector<double> target_map(const std::vector<double>& w) const;

  size_t channels() const {
    return channels_;
  }
  size_t controllers() const {
    return controllers_;
  }

 private:
  size_t channels_;
  size_t controllers_;
  double smoothing_;
  uint64_t stream_seed_;
  std::vector<double> matrix_; // controllers x channels
  std::vector<double> offset_;
  std::vector<double> mixing_; // channels x latents
  std::vector<double> rest_;   // per-channel resting level
};

/// Clamped sparse linear map between controller spaces:
/// y = clamp(c + P (x - 0.5), 0, 1).
class PiecewiseLinearMap {
 public:
  PiecewiseLinearMap(size_t inputs, size_t outputs, uint64_t seed);

  std::vector<double> operator()(const std::vector<double>& x) const;
  Dataset sample(size_t count, uint64_t seed) const;

 private:
  size_t inputs_;
  size_t outputs_;
  std::vector<double> matrix_;
  std::vector<double> center_;
};

/// Synthetic face/emotion corpus. Each sample has a latent expression code;
/// `style` exaggerates the deformation to mimic a stylized character.
struct FaceSample {
  LandmarkRecord landmarks;
  EmotionRecord emotion;
  std::vector<double> code;
};

std::vector<FaceSample> make_faces(size_t count, const std::string& id_prefix, double style, uint64_t seed);

/// Controllers driven by a latent expression code.
std::vector<double> code_to_controllers(const std::vector<double>& code, size_t controllers, uint64_t rig_seed);

/// Writes a self-contained demo workspace (databases, controller tables,
/// rigs, streams, manifest skeleton) into `dir`.
struct WorkspaceOptions {
  uint64_t seed = 7;
  size_t human_faces = 300;
  size_t character_faces = 200;
  size_t primary_controllers = 100;
  std::vector<size_t> secondary_controllers = {80};
  size_t stream_frames = 1200;
};

void write_workspace(const std::filesystem::path& dir, const WorkspaceOptions& options);

/// Controller table: one `{"id":..,"v":[..]}` object per line.
struct ControllerTableEntry {
  std::string id;
  std::vector<double> values;
};
std::vector<ControllerTableEntry> load_controller_table(const std::filesystem::path& path);
void save_controller_table(const std::vector<ControllerTableEntry>& table, const std::filesystem::path& path);

} // namespace miencap::synth
