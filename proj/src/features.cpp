#include "miencap/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "miencap/error.hpp"

namespace miencap {

namespace {

// Hand-laid frontal face in canonical units, y up. Recentered on load.
constexpr std::array<Point2, kLandmarkCount> kCanonicalLayout = {{
    {-0.90, 0.55}, {-0.70, 0.68}, {-0.48, 0.72}, {-0.28, 0.66}, {-0.12, 0.58},
    {0.12, 0.58},  {0.28, 0.66},  {0.48, 0.72},  {0.70, 0.68},  {0.90, 0.55},
    {0.00, 0.42},  {0.00, 0.28},  {0.00, 0.14},  {0.00, 0.00},
    {-0.22, -0.10}, {-0.11, -0.14}, {0.00, -0.16}, {0.11, -0.14}, {0.22, -0.10},
    {-0.72, 0.38}, {-0.60, 0.46}, {-0.44, 0.46}, {-0.30, 0.38}, {-0.44, 0.31}, {-0.60, 0.31},
    {0.30, 0.38},  {0.44, 0.46},  {0.60, 0.46},  {0.72, 0.38},  {0.60, 0.31},  {0.44, 0.31},
    {-0.40, -0.50}, {-0.26, -0.42}, {-0.10, -0.38}, {0.00, -0.40}, {0.10, -0.38}, {0.26, -0.42},
    {0.40, -0.50},  {0.26, -0.60},  {0.10, -0.65},  {0.00, -0.66}, {-0.10, -0.65}, {-0.26, -0.60},
    {-0.20, -0.48}, {0.00, -0.47}, {0.20, -0.48}, {0.20, -0.52}, {0.00, -0.53}, {-0.20, -0.52},
}};

constexpr int kStatsVersion = 1;
constexpr int kMeanFaceVersion = 1;

LandmarkSet centered(const LandmarkSet& s) {
  double cx = 0.0, cy = 0.0;
  for (const auto& p : s.points) {
    cx += p[0];
    cy += p[1];
  }
  cx /= kLandmarkCount;
  cy /= kLandmarkCount;
  LandmarkSet out = s;
  for (auto& p : out.points) {
    p[0] -= cx;
    p[1] -= cy;
  }
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  return out;
}

void expect_header(std::istream& in, const std::string& magic, int version, const std::filesystem::path& path) {
  std::string m;
  int v = 0;
  MIENCAP_THROW_IF(!(in >> m >> v) || m != magic, FormatError, "'{}': expected '{}' header", path.string(), magic);
  MIENCAP_THROW_IF(v != version, FormatError, "'{}': unsupported {} version {}", path.string(), magic, v);
}

} // namespace

void LandmarkSet::validate() const {
  for (const auto& p : points) {
    MIENCAP_THROW_IF(!std::isfinite(p[0]) || !std::isfinite(p[1]), ValidationError, "non-finite landmark");
  }
}

void SemanticIndexMap::validate() const {
  const size_t all[] = {
      left_mouth_corner,
      right_mouth_corner,
      upper_lip_mid,
      lower_lip_mid,
      nose_leftmost,
      nose_rightmost,
      left_eyebrow_top,
      right_eyebrow_top,
      left_eye_top,
      left_eye_bottom,
      right_eye_top,
      right_eye_bottom,
      left_lower_eyelid,
      right_lower_eyelid};
  for (size_t idx : all) {
    MIENCAP_THROW_IF(idx >= kLandmarkCount, ValidationError, "semantic index {} out of range", idx);
  }
  const std::pair<size_t, size_t> must_differ[] = {
      {left_mouth_corner, right_mouth_corner},
      {upper_lip_mid, lower_lip_mid},
      {nose_leftmost, nose_rightmost},
      {left_eye_top, left_eye_bottom},
      {right_eye_top, right_eye_bottom},
      {left_eyebrow_top, right_eyebrow_top},
  };
  for (auto [a, b] : must_differ) {
    MIENCAP_THROW_IF(a == b, ValidationError, "semantic indices must differ (both {})", a);
  }
}

void EmotionDistribution::validate() const {
  double sum = 0.0;
  for (double v : p) {
    MIENCAP_THROW_IF(!(v >= 0.0 && v <= 1.0), ValidationError, "emotion probability {} outside [0, 1]", v);
    sum += v;
  }
  MIENCAP_THROW_IF(std::abs(sum - 1.0) > 1e-6, ValidationError, "emotion probabilities sum to {}", sum);
}

const char* to_string(Expression e) {
  return kExpressionNames[static_cast<size_t>(e)];
}

Expression parse_expression(const std::string& name) {
  for (size_t i = 0; i < kExpressionNames.size(); ++i) {
    if (name == kExpressionNames[i]) {
      return static_cast<Expression>(i);
    }
  }
  throw ValidationError(fmt::format("unknown expression label '{}'", name));
}

void FeatureStats::validate() const {
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    MIENCAP_THROW_IF(!(min[i] <= max[i]), ValidationError, "feature stats min > max at component {}", i);
  }
}

const MeanFace& default_mean_face() {
  static const MeanFace face = [] {
    LandmarkSet s;
    std::copy(kCanonicalLayout.begin(), kCanonicalLayout.end(), s.points.begin());
    return centered(s);
  }();
  return face;
}

const SemanticIndexMap& default_semantic_map() {
  static const SemanticIndexMap map{};
  return map;
}

LandmarkSet register_landmarks(const LandmarkSet& raw, const MeanFace& mean) {
  raw.validate();
  mean.validate();
  Eigen::Matrix<double, kLandmarkCount, 3> design;
  Eigen::Matrix<double, kLandmarkCount, 2> target;
  for (size_t i = 0; i < kLandmarkCount; ++i) {
    design(i, 0) = raw.points[i][0];
    design(i, 1) = raw.points[i][1];
    design(i, 2) = 1.0;
    target(i, 0) = mean.points[i][0];
    target(i, 1) = mean.points[i][1];
  }
  Eigen::ColPivHouseholderQR<Eigen::Matrix<double, kLandmarkCount, 3>> qr(design);
  MIENCAP_THROW_IF(qr.rank() < 3, DegenerateError, "landmark configuration is degenerate (rank {})", qr.rank());
  const Eigen::Matrix<double, 3, 2> transform = qr.solve(target);
  const Eigen::Matrix<double, kLandmarkCount, 2> fitted = design * transform;
  LandmarkSet out;
  for (size_t i = 0; i < kLandmarkCount; ++i) {
    out.points[i] = {fitted(i, 0), fitted(i, 1)};
  }
  return out;
}

GeometricFeatureVector geometric_features(const LandmarkSet& registered, const SemanticIndexMap& map) {
  map.validate();
  const auto& p = registered.points;
  auto dist = [&](size_t a, size_t b) { return std::hypot(p[a][0] - p[b][0], p[a][1] - p[b][1]); };
  auto vertical = [&](double ya, double yb) { return std::abs(ya - yb); };
  auto eye_center_y = [&](size_t top, size_t bottom) { return 0.5 * (p[top][1] + p[bottom][1]); };

  GeometricFeatureVector f;
  f.values[0] = dist(map.left_mouth_corner, map.right_mouth_corner);
  f.values[1] = vertical(p[map.upper_lip_mid][1], p[map.lower_lip_mid][1]);
  f.values[2] = dist(map.nose_leftmost, map.nose_rightmost);
  f.values[3] = vertical(p[map.left_eyebrow_top][1], eye_center_y(map.left_eye_top, map.left_eye_bottom));
  f.values[4] = vertical(p[map.right_eyebrow_top][1], eye_center_y(map.right_eye_top, map.right_eye_bottom));
  f.values[5] = vertical(p[map.left_eye_top][1], p[map.left_eye_bottom][1]);
  f.values[6] = vertical(p[map.right_eye_top][1], p[map.right_eye_bottom][1]);
  f.values[7] = vertical(p[map.left_mouth_corner][1], p[map.left_lower_eyelid][1]);
  f.values[8] = vertical(p[map.right_mouth_corner][1], p[map.right_lower_eyelid][1]);
  return f;
}

FeatureStats fit_stats(std::span<const GeometricFeatureVector> dataset) {
  MIENCAP_THROW_IF(dataset.empty(), ValidationError, "cannot fit feature stats on an empty dataset");
  FeatureStats s;
  s.min = dataset.front().values;
  s.max = dataset.front().values;
  for (const auto& f : dataset) {
    for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
      s.min[i] = std::min(s.min[i], f.values[i]);
      s.max[i] = std::max(s.max[i], f.values[i]);
    }
  }
  return s;
}

GeometricFeatureVector normalize_features(const GeometricFeatureVector& raw, const FeatureStats& stats) {
  GeometricFeatureVector out;
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    const double range = stats.max[i] - stats.min[i];
    out.values[i] = range > 0.0 ? std::clamp((raw.values[i] - stats.min[i]) / range, 0.0, 1.0) : 0.0;
  }
  return out;
}

GeometricFeatureVector denormalize_features(const GeometricFeatureVector& normalized, const FeatureStats& stats) {
  GeometricFeatureVector out;
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    out.values[i] = stats.min[i] + normalized.values[i] * (stats.max[i] - stats.min[i]);
  }
  return out;
}

std::vector<LandmarkRecord> load_landmarks(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<LandmarkRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream ss(line);
    LandmarkRecord rec;
    MIENCAP_THROW_IF(!(ss >> rec.id), FormatError, "{}:{}: missing id", path.string(), lineno);
    for (auto& p : rec.landmarks.points) {
      MIENCAP_THROW_IF(!(ss >> p[0] >> p[1]), FormatError, "{}:{}: expected 49 x/y pairs", path.string(), lineno);
    }
    std::string extra;
    MIENCAP_THROW_IF(static_cast<bool>(ss >> extra), FormatError, "{}:{}: trailing data", path.string(), lineno);
    rec.landmarks.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

void save_landmarks(std::span<const LandmarkRecord> records, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& r : records) {
    out << r.id;
    for (const auto& p : r.landmarks.points) {
      out << fmt::format(" {:.17g} {:.17g}", p[0], p[1]);
    }
    out << '\n';
  }
}

MeanFace load_mean_face(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_header(in, "mean-face", kMeanFaceVersion, path);
  MeanFace face;
  for (auto& p : face.points) {
    MIENCAP_THROW_IF(!(in >> p[0] >> p[1]), FormatError, "'{}': expected 49 points", path.string());
  }
  face.validate();
  return face;
}

void save_mean_face(const MeanFace& face, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "mean-face " << kMeanFaceVersion << '\n';
  for (const auto& p : face.points) {
    out << fmt::format("{:.17g} {:.17g}\n", p[0], p[1]);
  }
}

#define MIENCAP_SEMANTIC_FIELDS(X) \
  X(left_mouth_corner)             \
  X(right_mouth_corner)            \
  X(upper_lip_mid)                 \
  X(lower_lip_mid)                 \
  X(nose_leftmost)                 \
  X(nose_rightmost)                \
  X(left_eyebrow_top)              \
  X(right_eyebrow_top)             \
  X(left_eye_top)                  \
  X(left_eye_bottom)               \
  X(right_eye_top)                 \
  X(right_eye_bottom)              \
  X(left_lower_eyelid)             \
  X(right_lower_eyelid)

SemanticIndexMap load_semantic_map(const std::filesystem::path& path) {
  auto in = open_in(path);
  SemanticIndexMap map;
  try {
    const auto doc = nlohmann::json::parse(in);
#define X(field) map.field = doc.value(#field, map.field);
    MIENCAP_SEMANTIC_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  map.validate();
  return map;
}

void save_semantic_map(const SemanticIndexMap& map, const std::filesystem::path& path) {
  nlohmann::ordered_json doc;
#define X(field) doc[#field] = map.field;
  MIENCAP_SEMANTIC_FIELDS(X)
#undef X
  auto out = open_out(path);
  out << doc.dump(2) << '\n';
}

#undef MIENCAP_SEMANTIC_FIELDS

FeatureStats load_stats(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_header(in, "feature-stats", kStatsVersion, path);
  std::string key, base;
  MIENCAP_THROW_IF(!(in >> key >> base) || key != "log-base", FormatError, "'{}': missing log-base", path.string());
  MIENCAP_THROW_IF(base != "e", FormatError, "'{}': unsupported log base '{}'", path.string(), base);
  FeatureStats s;
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    std::string name;
    MIENCAP_THROW_IF(
        !(in >> name >> s.min[i] >> s.max[i]), FormatError, "'{}': expected 9 min/max rows", path.string());
  }
  s.validate();
  return s;
}

void save_stats(const FeatureStats& stats, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "feature-stats " << kStatsVersion << "\nlog-base e\n";
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    out << fmt::format("{} {:.17g} {:.17g}\n", kGeometricFeatureNames[i], stats.min[i], stats.max[i]);
  }
}

MeanFace fit_mean_face(std::span<const LandmarkSet> corpus) {
  MIENCAP_THROW_IF(corpus.empty(), ValidationError, "cannot fit a mean face on an empty corpus");
  MeanFace acc;
  for (const auto& sample : corpus) {
    const auto c = centered(sample);
    double rms = 0.0;
    for (const auto& p : c.points) {
      rms += p[0] * p[0] + p[1] * p[1];
    }
    rms = std::sqrt(rms / kLandmarkCount);
    MIENCAP_THROW_IF(rms == 0.0, DegenerateError, "landmark sample collapses to a point");
    for (size_t i = 0; i < kLandmarkCount; ++i) {
      acc.points[i][0] += c.points[i][0] / rms / corpus.size();
      acc.points[i][1] += c.points[i][1] / rms / corpus.size();
    }
  }
  return centered(acc);
}

} // namespace miencap
