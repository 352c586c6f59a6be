#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace miencap {

inline constexpr size_t kLandmarkCount = 49;
inline constexpr size_t kGeometricFeatureCount = 9;
inline constexpr size_t kEmotionCount = 7;

using Point2 = std::array<double, 2>;

/// 49-point frontal face layout.
///
///   0-4   right eyebrow (image left), 2 is the top
///   5-9   left eyebrow, 7 is the top
///   10-13 nose bridge, 14-18 nose base (14 leftmost, 18 rightmost)
///   19-24 right eye: 19 outer, 20/21 top, 22 inner, 23/24 bottom
///   25-30 left eye: 25 inner, 26/27 top, 28 outer, 29/30 bottom
///   31-42 outer lip contour (31 right corner, 34 top mid, 37 left corner, 40 bottom mid)
///   43-48 inner lip contour (44 upper mid, 47 lower mid)
struct LandmarkSet {
  std::array<Point2, kLandmarkCount> points{};

  void validate() const;
};

/// Average frontal face with its centroid at the origin.
using MeanFace = LandmarkSet;

struct SemanticIndexMap {
  size_t left_mouth_corner = 37;
  size_t right_mouth_corner = 31;
  size_t upper_lip_mid = 44;
  size_t lower_lip_mid = 47;
  size_t nose_leftmost = 14;
  size_t nose_rightmost = 18;
  size_t left_eyebrow_top = 7;
  size_t right_eyebrow_top = 2;
  size_t left_eye_top = 26;
  size_t left_eye_bottom = 30;
  size_t right_eye_top = 20;
  size_t right_eye_bottom = 24;
  size_t left_lower_eyelid = 29;
  size_t right_lower_eyelid = 23;

  void validate() const;
};

/// mouth_width, closed_mouth_height, nose_width, left/right eyebrow height,
/// left/right eyelid height, left/right lip height.
struct GeometricFeatureVector {
  std::array<double, kGeometricFeatureCount> values{};

  bool operator==(const GeometricFeatureVector&) const = default;
};

inline constexpr std::array<const char*, kGeometricFeatureCount> kGeometricFeatureNames = {
    "mouth_width",
    "closed_mouth_height",
    "nose_width",
    "left_eyebrow_height",
    "right_eyebrow_height",
    "left_eyelid_height",
    "right_eyelid_height",
    "left_lip_height",
    "right_lip_height",
};

/// Probabilities ordered (neutral, anger, sadness, fear, disgust, joy, surprise).
struct EmotionDistribution {
  std::array<double, kEmotionCount> p{};

  void validate() const;
  bool operator==(const EmotionDistribution&) const = default;
};

enum class Expression { neutral, anger, sadness, fear, disgust, joy, surprise };

inline constexpr std::array<const char*, kEmotionCount> kExpressionNames = {
    "neutral", "anger", "sadness", "fear", "disgust", "joy", "surprise"};

const char* to_string(Expression e);
Expression parse_expression(const std::string& name);

struct FeatureStats {
  std::array<double, kGeometricFeatureCount> min{};
  std::array<double, kGeometricFeatureCount> max{};

  void validate() const;
  bool operator==(const FeatureStats&) const = default;
};

const MeanFace& default_mean_face();
const SemanticIndexMap& default_semantic_map();

/// Least-squares affine registration of `raw` onto `mean`.
LandmarkSet register_landmarks(const LandmarkSet& raw, const MeanFace& mean);

GeometricFeatureVector geometric_features(const LandmarkSet& registered, const SemanticIndexMap& map);

FeatureStats fit_stats(std::span<const GeometricFeatureVector> dataset);

/// Min-max rescale, clamped to [0, 1]; zero-width components map to 0.
GeometricFeatureVector normalize_features(const GeometricFeatureVector& raw, const FeatureStats& stats);

/// Inverse of normalize_features for in-range values.
GeometricFeatureVector denormalize_features(const GeometricFeatureVector& normalized, const FeatureStats& stats);

// File formats.

struct LandmarkRecord {
  std::string id;
  LandmarkSet landmarks;
};

std::vector<LandmarkRecord> load_landmarks(const std::filesystem::path& path);
void save_landmarks(std::span<const LandmarkRecord> records, const std::filesystem::path& path);

MeanFace load_mean_face(const std::filesystem::path& path);
void save_mean_face(const MeanFace& face, const std::filesystem::path& path);

SemanticIndexMap load_semantic_map(const std::filesystem::path& path);
void save_semantic_map(const SemanticIndexMap& map, const std::filesystem::path& path);

FeatureStats load_stats(const std::filesystem::path& path);
void save_stats(const FeatureStats& stats, const std::filesystem::path& path);

/// Averages a landmark corpus after centering and scale-normalizing each sample.
MeanFace fit_mean_face(std::span<const LandmarkSet> corpus);

} // namespace miencap
