#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "keydyn/dataset.hpp"
#include "keydyn/encoder.hpp"
#include "keydyn/scoring.hpp"

namespace keydyn {

inline constexpr std::size_t kEnrollmentPool = 10;  // enrollment drawn from the first 10 sessions
inline constexpr std::size_t kQueryPool = 5;        // genuine queries are the last 5 sessions
inline constexpr std::size_t kProtocolSessions = kEnrollmentPool + kQueryPool;

struct ProtocolConfig {
  std::size_t enrollment = 5;
  std::size_t length = 50;
  std::size_t impostors_per_subject = 0;  // 0: one per other subject
  std::uint64_t seed = 0;
  ScorerConfig scorer;

  void validate() const;
};

nlohmann::json protocol_config_to_json(const ProtocolConfig& config);

struct ScoreSet {
  std::string subject_id;
  std::vector<double> genuine;
  std::vector<double> impostor;
};

/// Session indices chosen for one subject.
struct SubjectPlan {
  std::string subject_id;
  std::vector<std::size_t> enrollment;
  std::vector<std::size_t> genuine;
  std::vector<std::size_t> impostor;
};

struct ProtocolPlan {
  std::vector<SubjectPlan> subjects;
  std::vector<std::string> warnings;  // skipped subjects
};

/// Subjects with fewer than 15 sessions are skipped with a warning. Session
/// order within a subject is the order in `sessions`.
ProtocolPlan plan_protocol(std::span<const KeystrokeSession> sessions, const ProtocolConfig& config);

using Embedder = std::function<Embedding(const KeystrokeSession&)>;

std::vector<ScoreSet> run_protocol_with(std::span<const KeystrokeSession> sessions,
                                        const ProtocolPlan& plan, const ProtocolConfig& config,
                                        const Embedder& embed);

/// Bi-encoder: embeddings scored by config.scorer. Cross-encoder: mean
/// P(similar) over enrollment sessions (source) against the query (target).
std::vector<ScoreSet> run_protocol(std::span<const KeystrokeSession> sessions,
                                   const EncoderModel& model, const ProtocolConfig& config,
                                   std::vector<std::string>* warnings = nullptr);

struct EerPoint {
  double eer = 0.0;
  double threshold = 0.0;
};

/// Accept iff score >= t. Sweeps thresholds over the sorted unique scores plus
/// one sentinel below and above, and interpolates FAR/FRR linearly between the
/// two thresholds that bracket the crossing.
EerPoint eer_point(std::span<const double> genuine, std::span<const double> impostor);
double eer(std::span<const double> genuine, std::span<const double> impostor);

struct RocPoint {
  double far = 0.0;
  double tar = 0.0;
  double threshold = 0.0;
};

/// Ascending FAR; starts at (0, 0) and ends at (1, 1).
std::vector<RocPoint> roc_curve(std::span<const double> genuine, std::span<const double> impostor);

double adaptive_eer(std::span<const ScoreSet> sets);

struct GlobalEer {
  double eer = 0.0;
  double threshold = 0.0;
  std::vector<RocPoint> roc;
};

GlobalEer global_eer(std::span<const ScoreSet> sets);

struct EvalReport {
  double adaptive = 0.0;
  GlobalEer global;
  std::vector<std::pair<std::string, double>> per_subject;
  std::vector<std::string> warnings;
  nlohmann::json config;

  nlohmann::json to_json() const;
  std::string roc_csv() const;
};

/// Builds the report; per-subject or aggregate EERs above 0.5 add a polarity warning.
EvalReport make_report(std::span<const ScoreSet> sets, nlohmann::json config,
                       std::vector<std::string> warnings = {});

struct SweepRow {
  std::size_t enrollment = 0;
  std::size_t length = 0;
  std::string scorer;
  double adaptive = 0.0;
  double global = 0.0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;
  nlohmann::json config;
  std::string config_hash;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Cross product E x L x scorer. Cross-encoder models emit one row per (E, L)
/// with scorer "p_similar".
SweepTable sweep(std::span<const KeystrokeSession> sessions, const EncoderModel& model,
                 std::span<const std::size_t> enrollments, std::span<const std::size_t> lengths,
                 std::span<const ScorerConfig> scorers, const ProtocolConfig& base,
                 const std::string& checkpoint_id = {});

}  // namespace keydyn
