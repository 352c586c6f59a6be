#pragma once

#include <array>
#include <chrono>
#include <span>
#include <string>
#include <vector>

#include "miencap/neural.hpp"
#include "miencap/rig.hpp"

namespace miencap {

inline constexpr size_t kHistoryLength = 3;

/// ARKit-style 52-channel FACS name list.
const std::vector<std::string>& default_channels();

struct BlendshapeFrame {
  double timestamp = 0.0;
  std::vector<double> weights;

  bool operator==(const BlendshapeFrame&) const = default;
};

struct CalibrationProfile {
  std::vector<double> neutral_weights;
  size_t sample_count = 0;

  bool operator==(const CalibrationProfile&) const = default;
};

/// Per-channel mean of a neutral-pose window.
CalibrationProfile calibrate(std::span<const BlendshapeFrame> frames);

/// w' = clamp((w - n) / (1 - n), 0, 1); n = 1 maps to 0.
BlendshapeFrame apply_calibration(const BlendshapeFrame& frame, const CalibrationProfile& profile);

/// Identity calibration for `channels` channels.
CalibrationProfile zero_profile(size_t channels);

/// The three most recent primary frames, newest first.
class HistoryBuffer {
 public:
  HistoryBuffer() = default;
  /// Three copies of the rig neutral pose.
  explicit HistoryBuffer(const CharacterRig& rig);

  void push(const ControllerFrame& frame);
  const ControllerFrame& at(size_t age) const {
    return frames_[age];
  }
  const std::array<ControllerFrame, kHistoryLength>& frames() const {
    return frames_;
  }
  size_t controller_count() const {
    return frames_[0].values.size();
  }

 private:
  std::array<ControllerFrame, kHistoryLength> frames_;
};

/// Calibrated weights, then controllers at t-1, t-2, t-3.
std::vector<double> build_adaption_input(const BlendshapeFrame& frame, const HistoryBuffer& history);
void build_adaption_input_into(const BlendshapeFrame& frame, const HistoryBuffer& history, std::vector<double>& out);

/// Layout tag stored in adaption model metadata, e.g. "w52+h3x100".
std::string adaption_layout(size_t channels, size_t controllers);
inline constexpr const char* kLayoutKey = "input_layout";

ControllerFrame adapt_secondary(const NetworkModel& model, const ControllerFrame& primary, const CharacterRig& rig);

struct SecondaryCharacter {
  CharacterRig rig;
  NetworkModel model;
};

struct PipelineConfig {
  double target_fps = 24.0;
  std::chrono::milliseconds stale_timeout{200};
};

struct StepOutput {
  ControllerFrame primary;
  std::vector<ControllerFrame> secondaries; ///< same order as the pipeline's secondaries
  bool stale = false;
};

class RetargetPipeline {
 public:
  RetargetPipeline(
      std::vector<std::string> channels,
      CharacterRig primary,
      NetworkModel adaption,
      std::vector<SecondaryCharacter> secondaries,
      CalibrationProfile calibration,
      PipelineConfig config = {});

  /// Calibrate, build the adaption input, run the network, clamp, record
  /// history. Throws StreamError when the frame width drifts.
  ControllerFrame retarget_step(const BlendshapeFrame& frame);

  /// retarget_step plus secondary fan-out.
  StepOutput process(const BlendshapeFrame& frame, bool stale = false, Execution exec = Execution::serial);

  /// Repeats the last calibrated input at `timestamp`; output flagged stale.
  StepOutput repeat_last(double timestamp);
  bool has_last_input() const {
    return has_last_;
  }

  void set_calibration(CalibrationProfile profile);
  void reset_history();

  const std::vector<std::string>& channels() const {
    return channels_;
  }
  const CharacterRig& primary_rig() const {
    return primary_;
  }
  const std::vector<SecondaryCharacter>& secondaries() const {
    return secondaries_;
  }
  const HistoryBuffer& history() const {
    return history_;
  }
  const CalibrationProfile& calibration() const {
    return calibration_;
  }
  PipelineConfig& config() {
    return config_;
  }
  const PipelineConfig& config() const {
    return config_;
  }
  /// Ids of the primary and all secondaries, primary first.
  std::vector<std::string> character_ids() const;

 private:
  ControllerFrame step_calibrated(const BlendshapeFrame& calibrated);

  std::vector<std::string> channels_;
  CharacterRig primary_;
  NetworkModel adaption_;
  std::vector<SecondaryCharacter> secondaries_;
  CalibrationProfile calibration_;
  PipelineConfig config_;
  HistoryBuffer history_;
  BlendshapeFrame last_calibrated_;
  bool has_last_ = false;
  std::vector<double> beta_;
  InferenceScratch scratch_;
  std::vector<double> raw_out_;
};

/// Linear inbetweening of keyframes onto a dst_fps grid spanning
/// [first, last]; key times are reproduced exactly.
std::vector<ControllerFrame> upsample_linear(std::span<const ControllerFrame> keys, double src_fps, double dst_fps);

struct TrainingTuple {
  std::vector<double> input;  ///< weights(t) | alpha(t-1) | alpha(t-2) | alpha(t-3)
  std::vector<double> target; ///< alpha(t)
};

/// Teacher-forced tuples for t = 3 .. n-1.
std::vector<TrainingTuple> build_training_tuples(
    std::span<const BlendshapeFrame> weights,
    std::span<const ControllerFrame> ground_truth);

Dataset to_dataset(std::span<const TrainingTuple> tuples);

/// Mean over consecutive pairs of the mean absolute per-controller delta.
double jitter_metric(std::span<const ControllerFrame> frames);

} // namespace miencap
