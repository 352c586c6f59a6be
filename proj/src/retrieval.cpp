#include "miencap/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "miencap/error.hpp"

namespace miencap {

namespace {

constexpr int kDatabaseVersion = 1;

void check_token(const std::string& s, const char* what) {
  MIENCAP_THROW_IF(s.empty(), ValidationError, "empty {}", what);
  for (char c : s) {
    MIENCAP_THROW_IF(
        std::isspace(static_cast<unsigned char>(c)) || c == ',', ValidationError, "{} '{}' contains a separator", what, s);
  }
}

double emotion_term(double p, double m) {
  return p > 0.0 ? p * std::log(p / m) : 0.0;
}

} // namespace

void ExpressionDatabase::validate() const {
  stats.validate();
  std::unordered_set<std::string> ids;
  for (const auto& r : records) {
    r.emotion.validate();
    for (double g : r.geometry.values) {
      MIENCAP_THROW_IF(!std::isfinite(g), ValidationError, "record '{}' has non-finite geometry", r.id);
    }
    MIENCAP_THROW_IF(!ids.insert(r.id).second, ValidationError, "duplicate record id '{}'", r.id);
  }
}

double kl_divergence(const EmotionDistribution& p, const EmotionDistribution& q) {
  double sum = 0.0;
  for (size_t i = 0; i < kEmotionCount; ++i) {
    if (p.p[i] == 0.0) {
      continue;
    }
    MIENCAP_THROW_IF(
        q.p[i] == 0.0, InfiniteDivergenceError, "KL divergence is infinite: q[{}] = 0 while p[{}] = {}", i, i, p.p[i]);
    sum += p.p[i] * std::log(p.p[i] / q.p[i]);
  }
  return sum;
}

double jsd(const EmotionDistribution& h, const EmotionDistribution& c) {
  double dh = 0.0, dc = 0.0;
  for (size_t i = 0; i < kEmotionCount; ++i) {
    const double m = 0.5 * (h.p[i] + c.p[i]);
    if (m == 0.0) {
      continue;
    }
    dh += emotion_term(h.p[i], m);
    dc += emotion_term(c.p[i], m);
  }
  // Rounding can leave a tiny negative value for identical inputs.
  return std::max(0.0, 0.5 * dh + 0.5 * dc);
}

double geometric_distance(const GeometricFeatureVector& a, const GeometricFeatureVector& b) {
  double sum = 0.0;
  for (size_t i = 0; i < kGeometricFeatureCount; ++i) {
    const double d = a.values[i] - b.values[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

std::vector<size_t> emotional_top_k(const EmotionDistribution& query, const ExpressionDatabase& db, size_t k) {
  MIENCAP_THROW_IF(k == 0, ValidationError, "top-k size must be at least 1");
  const size_t n = db.records.size();
  std::vector<double> dist(n);
  for (size_t i = 0; i < n; ++i) {
    dist[i] = jsd(query, db.records[i].emotion);
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  const size_t keep = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](size_t a, size_t b) {
    return dist[a] != dist[b] ? dist[a] < dist[b] : a < b;
  });
  order.resize(keep);
  return order;
}

MatchPair two_step_match(const ExpressionRecord& query, const ExpressionDatabase& db, size_t k) {
  MIENCAP_THROW_IF(db.records.empty(), ValidationError, "cannot match against an empty database");
  const auto shortlist = emotional_top_k(query.emotion, db, k);
  size_t best = shortlist.front();
  double best_geo = geometric_distance(query.geometry, db.records[best].geometry);
  for (size_t idx : shortlist) {
    const double g = geometric_distance(query.geometry, db.records[idx].geometry);
    if (g < best_geo || (g == best_geo && idx < best)) {
      best = idx;
      best_geo = g;
    }
  }
  const auto& match = db.records[best];
  return {query.id, match.id, jsd(query.emotion, match.emotion), best_geo};
}

std::vector<MatchPair> build_pair_database(
    const ExpressionDatabase& source,
    const ExpressionDatabase& target,
    size_t k,
    Execution exec) {
  MIENCAP_THROW_IF(target.records.empty(), ValidationError, "target database is empty");
  const bool same_stats = source.stats == target.stats;
  auto match_one = [&](size_t i) {
    ExpressionRecord query = source.records[i];
    if (!same_stats) {
      query.geometry = normalize_features(denormalize_features(query.geometry, source.stats), target.stats);
    }
    return two_step_match(query, target, k);
  };

  std::vector<MatchPair> pairs(source.records.size());
  const auto n = static_cast<std::ptrdiff_t>(pairs.size());
  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(dynamic, 8)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      pairs[i] = match_one(static_cast<size_t>(i));
    }
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      pairs[i] = match_one(static_cast<size_t>(i));
    }
  }
  return pairs;
}

ExpressionDatabase load_database(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  auto fail = [&](const std::string& what) { return FormatError(fmt::format("'{}': {}", path.string(), what)); };

  ExpressionDatabase db;
  std::string magic, key, base;
  int version = 0;
  size_t count = 0;
  if (!(in >> magic >> version) || magic != "expr-db") {
    throw fail("missing expr-db header");
  }
  if (version != kDatabaseVersion) {
    throw fail(fmt::format("unsupported database version {}", version));
  }
  if (!(in >> key >> db.source_tag) || key != "source") {
    throw fail("missing source tag");
  }
  if (!(in >> key >> base) || key != "log-base" || base != "e") {
    throw fail("missing or unsupported log-base");
  }
  if (!(in >> key) || key != "stats-min") {
    throw fail("missing stats-min");
  }
  for (auto& v : db.stats.min) {
    if (!(in >> v)) throw fail("truncated stats-min");
  }
  if (!(in >> key) || key != "stats-max") {
    throw fail("missing stats-max");
  }
  for (auto& v : db.stats.max) {
    if (!(in >> v)) throw fail("truncated stats-max");
  }
  if (!(in >> key >> count) || key != "records") {
    throw fail("missing record count");
  }
  db.records.reserve(count);
  for (size_t r = 0; r < count; ++r) {
    ExpressionRecord rec;
    std::string label;
    if (!(in >> rec.id)) throw fail(fmt::format("truncated at record {}", r));
    for (auto& p : rec.emotion.p) {
      if (!(in >> p)) throw fail(fmt::format("record '{}': bad emotion vector", rec.id));
    }
    for (auto& g : rec.geometry.values) {
      if (!(in >> g)) throw fail(fmt::format("record '{}': bad geometry vector", rec.id));
    }
    if (!(in >> label >> rec.payload)) throw fail(fmt::format("record '{}': missing label or payload", rec.id));
    rec.label = parse_expression(label);
    db.records.push_back(std::move(rec));
  }
  db.validate();
  return db;
}

void save_database(const ExpressionDatabase& db, const std::filesystem::path& path) {
  db.validate();
  check_token(db.source_tag, "source tag");
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << "expr-db " << kDatabaseVersion << "\nsource " << db.source_tag << "\nlog-base e\nstats-min";
  for (double v : db.stats.min) out << fmt::format(" {:.17g}", v);
  out << "\nstats-max";
  for (double v : db.stats.max) out << fmt::format(" {:.17g}", v);
  out << "\nrecords " << db.records.size() << '\n';
  for (const auto& r : db.records) {
    check_token(r.id, "record id");
    check_token(r.payload, "payload");
    out << r.id;
    for (double p : r.emotion.p) out << fmt::format(" {:.17g}", p);
    for (double g : r.geometry.values) out << fmt::format(" {:.17g}", g);
    out << ' ' << to_string(r.label) << ' ' << r.payload << '\n';
  }
}

std::string format_pairs_csv(std::span<const MatchPair> pairs) {
  std::string text = "query_id,match_id,emotional_distance,geometric_distance\n";
  for (const auto& p : pairs) {
    text += fmt::format("{},{},{:.17g},{:.17g}\n", p.query_id, p.match_id, p.emotional_distance, p.geometric_distance);
  }
  return text;
}

void save_pairs(std::span<const MatchPair> pairs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << format_pairs_csv(pairs);
}

std::vector<MatchPair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  std::string line;
  MIENCAP_THROW_IF(
      !std::getline(in, line) || line != "query_id,match_id,emotional_distance,geometric_distance",
      FormatError,
      "'{}': missing pair CSV header",
      path.string());
  std::vector<MatchPair> pairs;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) {
      cols.push_back(col);
    }
    MIENCAP_THROW_IF(cols.size() != 4, FormatError, "{}:{}: expected 4 columns", path.string(), lineno);
    try {
      pairs.push_back({cols[0], cols[1], std::stod(cols[2]), std::stod(cols[3])});
    } catch (const std::exception&) {
      throw FormatError(fmt::format("{}:{}: bad distance value", path.string(), lineno));
    }
  }
  return pairs;
}

std::vector<EmotionRecord> load_emotions(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  std::vector<EmotionRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream ss(line);
    EmotionRecord rec;
    std::string label;
    bool ok = static_cast<bool>(ss >> rec.id);
    for (auto& p : rec.emotion.p) {
      ok = ok && static_cast<bool>(ss >> p);
    }
    ok = ok && static_cast<bool>(ss >> label >> rec.payload);
    MIENCAP_THROW_IF(!ok, FormatError, "{}:{}: expected id, 7 probabilities, label, payload", path.string(), lineno);
    rec.label = parse_expression(label);
    rec.emotion.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

void save_emotions(std::span<const EmotionRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  for (const auto& r : records) {
    out << r.id;
    for (double p : r.emotion.p) out << fmt::format(" {:.17g}", p);
    out << ' ' << to_string(r.label) << ' ' << r.payload << '\n';
  }
}

ExpressionDatabase build_database(
    std::span<const LandmarkRecord> landmarks,
    std::span<const EmotionRecord> emotions,
    const MeanFace& mean,
    const SemanticIndexMap& map,
    const std::string& source_tag) {
  MIENCAP_THROW_IF(
      landmarks.size() != emotions.size(),
      ValidationError,
      "{} landmark records but {} emotion records",
      landmarks.size(),
      emotions.size());
  MIENCAP_THROW_IF(landmarks.empty(), ValidationError, "cannot build an empty database");
  std::vector<GeometricFeatureVector> raw;
  raw.reserve(landmarks.size());
  for (size_t i = 0; i < landmarks.size(); ++i) {
    MIENCAP_THROW_IF(
        landmarks[i].id != emotions[i].id,
        ValidationError,
        "record {} id mismatch: '{}' vs '{}'",
        i,
        landmarks[i].id,
        emotions[i].id);
    raw.push_back(geometric_features(register_landmarks(landmarks[i].landmarks, mean), map));
  }
  ExpressionDatabase db;
  db.source_tag = source_tag;
  db.stats = fit_stats(raw);
  for (size_t i = 0; i < raw.size(); ++i) {
    db.records.push_back(
        {emotions[i].id, emotions[i].emotion, normalize_features(raw[i], db.stats), emotions[i].label, emotions[i].payload});
  }
  db.validate();
  return db;
}

} // namespace miencap
