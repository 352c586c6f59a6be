#include "miencap/retarget.hpp"

#include <algorithm>
#include <cmath>

#include "miencap/error.hpp"

namespace miencap {

const std::vector<std::string>& default_channels() {
  static const std::vector<std::string> channels = {
      "browDownLeft",      "browDownRight",     "browInnerUp",       "browOuterUpLeft",   "browOuterUpRight",
      "cheekPuff",         "cheekSquintLeft",   "cheekSquintRight",  "eyeBlinkLeft",      "eyeBlinkRight",
      "eyeLookDownLeft",   "eyeLookDownRight",  "eyeLookInLeft",     "eyeLookInRight",    "eyeLookOutLeft",
      "eyeLookOutRight",   "eyeLookUpLeft",     "eyeLookUpRight",    "eyeSquintLeft",     "eyeSquintRight",
      "eyeWideLeft",       "eyeWideRight",      "jawForward",        "jawLeft",           "jawOpen",
      "jawRight",          "mouthClose",        "mouthDimpleLeft",   "mouthDimpleRight",  "mouthFrownLeft",
      "mouthFrownRight",   "mouthFunnel",       "mouthLeft",         "mouthLowerDownLeft", "mouthLowerDownRight",
      "mouthPressLeft",    "mouthPressRight",   "mouthPucker",       "mouthRight",        "mouthRollLower",
      "mouthRollUpper",    "mouthShrugLower",   "mouthShrugUpper",   "mouthSmileLeft",    "mouthSmileRight",
      "mouthStretchLeft",  "mouthStretchRight", "mouthUpperUpLeft",  "mouthUpperUpRight", "noseSneerLeft",
      "noseSneerRight",    "tongueOut",
  };
  return channels;
}

CalibrationProfile calibrate(std::span<const BlendshapeFrame> frames) {
  MIENCAP_THROW_IF(frames.empty(), ValidationError, "calibration window is empty");
  const size_t width = frames.front().weights.size();
  CalibrationProfile profile{std::vector<double>(width, 0.0), frames.size()};
  for (const auto& f : frames) {
    MIENCAP_THROW_IF(f.weights.size() != width, ValidationError, "calibration frames have mixed channel counts");
    for (size_t c = 0; c < width; ++c) {
      profile.neutral_weights[c] += f.weights[c];
    }
  }
  for (auto& v : profile.neutral_weights) {
    v = std::clamp(v / static_cast<double>(frames.size()), 0.0, 1.0);
  }
  return profile;
}

CalibrationProfile zero_profile(size_t channels) {
  return {std::vector<double>(channels, 0.0), 0};
}

BlendshapeFrame apply_calibration(const BlendshapeFrame& frame, const CalibrationProfile& profile) {
  MIENCAP_THROW_IF(
      frame.weights.size() != profile.neutral_weights.size(),
      ValidationError,
      "frame has {} channels, calibration has {}",
      frame.weights.size(),
      profile.neutral_weights.size());
  BlendshapeFrame out{frame.timestamp, std::vector<double>(frame.weights.size())};
  for (size_t c = 0; c < frame.weights.size(); ++c) {
    const double w = frame.weights[c];
    const double n = profile.neutral_weights[c];
    MIENCAP_THROW_IF(!std::isfinite(w), ValidationError, "non-finite weight on channel {}", c);
    out.weights[c] = n >= 1.0 ? 0.0 : std::clamp((w - n) / (1.0 - n), 0.0, 1.0);
  }
  return out;
}

HistoryBuffer::HistoryBuffer(const CharacterRig& rig) {
  const ControllerFrame neutral{0.0, rig.neutral_values()};
  frames_.fill(neutral);
}

void HistoryBuffer::push(const ControllerFrame& frame) {
  frames_[2] = std::move(frames_[1]);
  frames_[1] = std::move(frames_[0]);
  frames_[0] = frame;
}

void build_adaption_input_into(const BlendshapeFrame& frame, const HistoryBuffer& history, std::vector<double>& out) {
  out.clear();
  out.insert(out.end(), frame.weights.begin(), frame.weights.end());
  for (const auto& h : history.frames()) {
    out.insert(out.end(), h.values.begin(), h.values.end());
  }
}

std::vector<double> build_adaption_input(const BlendshapeFrame& frame, const HistoryBuffer& history) {
  std::vector<double> out;
  out.reserve(frame.weights.size() + kHistoryLength * history.controller_count());
  build_adaption_input_into(frame, history, out);
  return out;
}

std::string adaption_layout(size_t channels, size_t controllers) {
  return fmt::format("w{}+h{}x{}", channels, kHistoryLength, controllers);
}

ControllerFrame adapt_secondary(const NetworkModel& model, const ControllerFrame& primary, const CharacterRig& rig) {
  MIENCAP_THROW_IF(
      model.input_dim() != primary.values.size(),
      DimensionError,
      "secondary model '{}' expects {} primary controllers, got {}",
      model.name,
      model.input_dim(),
      primary.values.size());
  return clamp_controllers(rig, forward(model, primary.values), primary.timestamp);
}

RetargetPipeline::RetargetPipeline(
    std::vector<std::string> channels,
    CharacterRig primary,
    NetworkModel adaption,
    std::vector<SecondaryCharacter> secondaries,
    CalibrationProfile calibration,
    PipelineConfig config)
    : channels_(std::move(channels)),
      primary_(std::move(primary)),
      adaption_(std::move(adaption)),
      secondaries_(std::move(secondaries)),
      calibration_(std::move(calibration)),
      config_(config),
      history_(primary_) {
  primary_.validate();
  adaption_.validate();
  const size_t n = primary_.controller_count();
  const size_t expected_in = channels_.size() + kHistoryLength * n;
  MIENCAP_THROW_IF(
      adaption_.input_dim() != expected_in,
      ValidationError,
      "adaption model input {} != {} channels + 3 x {} controllers",
      adaption_.input_dim(),
      channels_.size(),
      n);
  MIENCAP_THROW_IF(
      adaption_.output_dim() != n, ValidationError, "adaption model outputs {}, primary rig has {}", adaption_.output_dim(), n);
  if (auto it = adaption_.metadata.find(kLayoutKey); it != adaption_.metadata.end()) {
    MIENCAP_THROW_IF(
        it->second != adaption_layout(channels_.size(), n),
        ValidationError,
        "adaption model layout '{}' does not match pipeline layout '{}'",
        it->second,
        adaption_layout(channels_.size(), n));
  }
  for (const auto& s : secondaries_) {
    s.rig.validate();
    s.model.validate();
    MIENCAP_THROW_IF(
        s.model.input_dim() != n, ValidationError, "secondary '{}' model expects {} inputs, primary has {}", s.rig.id, s.model.input_dim(), n);
    MIENCAP_THROW_IF(
        s.model.output_dim() != s.rig.controller_count(),
        ValidationError,
        "secondary '{}' model outputs {}, rig has {}",
        s.rig.id,
        s.model.output_dim(),
        s.rig.controller_count());
  }
  MIENCAP_THROW_IF(
      calibration_.neutral_weights.size() != channels_.size(),
      ValidationError,
      "calibration has {} channels, pipeline has {}",
      calibration_.neutral_weights.size(),
      channels_.size());
  MIENCAP_THROW_IF(!(config_.target_fps > 0.0), ValidationError, "target fps must be positive");
}

ControllerFrame RetargetPipeline::step_calibrated(const BlendshapeFrame& calibrated) {
  build_adaption_input_into(calibrated, history_, beta_);
  forward_into(adaption_, beta_, scratch_, raw_out_);
  ControllerFrame out{calibrated.timestamp, raw_out_};
  clamp_in_place(primary_, out.values);
  history_.push(out);
  last_calibrated_ = calibrated;
  has_last_ = true;
  return out;
}

ControllerFrame RetargetPipeline::retarget_step(const BlendshapeFrame& frame) {
  MIENCAP_THROW_IF(
      frame.weights.size() != channels_.size(),
      StreamError,
      "frame at t={} has {} channels, stream expects {}",
      frame.timestamp,
      frame.weights.size(),
      channels_.size());
  return step_calibrated(apply_calibration(frame, calibration_));
}

StepOutput RetargetPipeline::process(const BlendshapeFrame& frame, bool stale, Execution exec) {
  StepOutput out;
  out.primary = retarget_step(frame);
  out.stale = stale;
  out.secondaries.resize(secondaries_.size());
  const auto count = static_cast<std::ptrdiff_t>(secondaries_.size());
  if (exec == Execution::parallel && count > 1) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      out.secondaries[i] = adapt_secondary(secondaries_[i].model, out.primary, secondaries_[i].rig);
    }
  } else {
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      out.secondaries[i] = adapt_secondary(secondaries_[i].model, out.primary, secondaries_[i].rig);
    }
  }
  return out;
}

StepOutput RetargetPipeline::repeat_last(double timestamp) {
  MIENCAP_THROW_IF(!has_last_, StreamError, "no frame received yet; nothing to repeat");
  BlendshapeFrame again = last_calibrated_;
  again.timestamp = timestamp;
  StepOutput out;
  out.primary = step_calibrated(again);
  out.stale = true;
  for (const auto& s : secondaries_) {
    out.secondaries.push_back(adapt_secondary(s.model, out.primary, s.rig));
  }
  return out;
}

void RetargetPipeline::set_calibration(CalibrationProfile profile) {
  MIENCAP_THROW_IF(
      profile.neutral_weights.size() != channels_.size(),
      ValidationError,
      "calibration has {} channels, pipeline has {}",
      profile.neutral_weights.size(),
      channels_.size());
  calibration_ = std::move(profile);
}

void RetargetPipeline::reset_history() {
  history_ = HistoryBuffer(primary_);
  has_last_ = false;
}

std::vector<std::string> RetargetPipeline::character_ids() const {
  std::vector<std::string> ids{primary_.id};
  for (const auto& s : secondaries_) {
    ids.push_back(s.rig.id);
  }
  return ids;
}

std::vector<ControllerFrame> upsample_linear(std::span<const ControllerFrame> keys, double src_fps, double dst_fps) {
  MIENCAP_THROW_IF(!(src_fps > 0.0) || !(dst_fps > 0.0), ValidationError, "frame rates must be positive");
  MIENCAP_THROW_IF(keys.empty(), ValidationError, "no keyframes to upsample");
  const size_t width = keys.front().values.size();
  for (size_t i = 0; i < keys.size(); ++i) {
    MIENCAP_THROW_IF(keys[i].values.size() != width, ValidationError, "keyframe {} has a different controller count", i);
    MIENCAP_THROW_IF(
        i > 0 && !(keys[i].timestamp > keys[i - 1].timestamp), ValidationError, "keyframes are not strictly increasing at {}", i);
  }
  if (keys.size() == 1) {
    return {keys.front()};
  }

  constexpr double kSnap = 1e-9;
  const double first = keys.front().timestamp;
  const double last = keys.back().timestamp;
  const auto steps = static_cast<size_t>(std::floor((last - first) * dst_fps + kSnap));

  std::vector<ControllerFrame> out;
  out.reserve(steps + 2);
  size_t seg = 0;
  auto sample = [&](double t) {
    while (seg + 2 < keys.size() && keys[seg + 1].timestamp <= t + kSnap) {
      ++seg;
    }
    const auto& a = keys[seg];
    const auto& b = keys[seg + 1];
    if (std::abs(t - a.timestamp) <= kSnap) {
      out.push_back(a);
      return;
    }
    if (std::abs(t - b.timestamp) <= kSnap) {
      out.push_back(b);
      return;
    }
    const double u = (t - a.timestamp) / (b.timestamp - a.timestamp);
    ControllerFrame f{t, std::vector<double>(width)};
    for (size_t c = 0; c < width; ++c) {
      f.values[c] = a.values[c] + u * (b.values[c] - a.values[c]);
    }
    out.push_back(std::move(f));
  };
  for (size_t k = 0; k <= steps; ++k) {
    sample(first + static_cast<double>(k) / dst_fps);
  }
  if (out.back().timestamp < last - kSnap) {
    out.push_back(keys.back());
  }
  return out;
}

std::vector<TrainingTuple> build_training_tuples(
    std::span<const BlendshapeFrame> weights,
    std::span<const ControllerFrame> ground_truth) {
  MIENCAP_THROW_IF(
      weights.size() != ground_truth.size(),
      ValidationError,
      "blendshape stream has {} frames, ground truth {}",
      weights.size(),
      ground_truth.size());
  MIENCAP_THROW_IF(weights.size() < kHistoryLength + 1, ValidationError, "need at least 4 aligned frames, got {}", weights.size());
  std::vector<TrainingTuple> tuples;
  tuples.reserve(weights.size() - kHistoryLength);
  for (size_t t = kHistoryLength; t < weights.size(); ++t) {
    TrainingTuple tuple;
    tuple.input = weights[t].weights;
    for (size_t lag = 1; lag <= kHistoryLength; ++lag) {
      const auto& h = ground_truth[t - lag].values;
      tuple.input.insert(tuple.input.end(), h.begin(), h.end());
    }
    tuple.target = ground_truth[t].values;
    tuples.push_back(std::move(tuple));
  }
  return tuples;
}

Dataset to_dataset(std::span<const TrainingTuple> tuples) {
  Dataset data;
  data.inputs.reserve(tuples.size());
  data.targets.reserve(tuples.size());
  for (const auto& t : tuples) {
    data.inputs.push_back(t.input);
    data.targets.push_back(t.target);
  }
  return data;
}

double jitter_metric(std::span<const ControllerFrame> frames) {
  MIENCAP_THROW_IF(frames.size() < 2, ValidationError, "jitter needs at least 2 frames, got {}", frames.size());
  const size_t width = frames.front().values.size();
  MIENCAP_THROW_IF(width == 0, ValidationError, "jitter needs at least one controller");
  double total = 0.0;
  for (size_t i = 1; i < frames.size(); ++i) {
    MIENCAP_THROW_IF(frames[i].values.size() != width, ValidationError, "frame {} has a different controller count", i);
    double pair = 0.0;
    for (size_t c = 0; c < width; ++c) {
      pair += std::abs(frames[i].values[c] - frames[i - 1].values[c]);
    }
    total += pair / static_cast<double>(width);
  }
  return total / static_cast<double>(frames.size() - 1);
}

} // namespace miencap
