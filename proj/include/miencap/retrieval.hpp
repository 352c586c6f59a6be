#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "miencap/features.hpp"
#include "miencap/kernels.hpp"

namespace miencap {

inline constexpr size_t kDefaultTopK = 30;

struct ExpressionRecord {
  std::string id;
  EmotionDistribution emotion;
  GeometricFeatureVector geometry; // normalized with the owning database's stats
  Expression label = Expression::neutral;
  std::string payload;
};

struct ExpressionDatabase {
  std::vector<ExpressionRecord> records;
  FeatureStats stats;
  std::string source_tag = "human";

  void validate() const;
};

struct MatchPair {
  std::string query_id;
  std::string match_id;
  double emotional_distance = 0.0;
  double geometric_distance = 0.0;

  bool operator==(const MatchPair&) const = default;
};

/// sum_i p_i ln(p_i / q_i), with 0 ln(0/x) = 0.
double kl_divergence(const EmotionDistribution& p, const EmotionDistribution& q);

/// Jensen-Shannon divergence, natural log; bounded by ln 2.
double jsd(const EmotionDistribution& h, const EmotionDistribution& c);

double geometric_distance(const GeometricFeatureVector& a, const GeometricFeatureVector& b);

/// Indices of the min(k, |db|) records closest to `query` in emotional
/// distance, ordered by (distance, position).
std::vector<size_t> emotional_top_k(const EmotionDistribution& query, const ExpressionDatabase& db, size_t k);

/// Emotional shortlist of size k, then the geometrically nearest candidate.
MatchPair two_step_match(const ExpressionRecord& query, const ExpressionDatabase& db, size_t k = kDefaultTopK);

/// One pair per source record, in source order. Source geometry is mapped
/// back to raw features and renormalized on the target's stats first.
std::vector<MatchPair> build_pair_database(
    const ExpressionDatabase& source,
    const ExpressionDatabase& target,
    size_t k = kDefaultTopK,
    Execution exec = Execution::parallel);

ExpressionDatabase load_database(const std::filesystem::path& path);
void save_database(const ExpressionDatabase& db, const std::filesystem::path& path);

std::string format_pairs_csv(std::span<const MatchPair> pairs);
void save_pairs(std::span<const MatchPair> pairs, const std::filesystem::path& path);
std::vector<MatchPair> load_pairs(const std::filesystem::path& path);

/// Builds a database from landmark and emotion files: registration,
/// geometric features, stats fit, normalization.
struct EmotionRecord {
  std::string id;
  EmotionDistribution emotion;
  Expression label = Expression::neutral;
  std::string payload;
};

std::vector<EmotionRecord> load_emotions(const std::filesystem::path& path);
void save_emotions(std::span<const EmotionRecord> records, const std::filesystem::path& path);

ExpressionDatabase build_database(
    std::span<const LandmarkRecord> landmarks,
    std::span<const EmotionRecord> emotions,
    const MeanFace& mean,
    const SemanticIndexMap& map,
    const std::string& source_tag);

} // namespace miencap
