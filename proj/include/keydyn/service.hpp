#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "keydyn/dataset.hpp"
#include "keydyn/encoder.hpp"
#include "keydyn/scoring.hpp"

namespace httplib {
class Server;
}

namespace keydyn {

inline constexpr std::size_t kEnrollmentCap = 10;

enum class CapPolicy { Evict, Reject };
CapPolicy parse_cap_policy(std::string_view text);

struct ServiceConfig {
  ScorerConfig scorer;
  double threshold = 0.0;
  CapPolicy cap_policy = CapPolicy::Evict;
  std::size_t cap = kEnrollmentCap;
  std::filesystem::path journal;  // empty: in-memory store
  std::size_t compact_every = 256;  // journal appends between compactions
};

/// Request failure carrying the HTTP status it maps to.
class ServiceFailure : public std::runtime_error {
 public:
  ServiceFailure(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

struct VerifyDecision {
  double score = 0.0;
  double threshold = 0.0;
  bool accept = false;
  ScorerKind scorer = ScorerKind::AvgDistance;
  std::size_t enrollments = 0;

  nlohmann::json to_json() const;
};

struct SubjectRecord {
  std::string subject_id;
  std::vector<Embedding> embeddings;  // oldest first
  std::int64_t created_ms = 0;
  std::int64_t updated_ms = 0;
  std::shared_ptr<const FittedScorer> scorer;  // set once the scorer minimum is met
};

/// Enrollment store plus verification logic, independent of the HTTP layer.
/// Reads take a shared lock; writes are serialized.
class VerificationService {
 public:
  VerificationService(EncoderModel model, std::string model_hash, ServiceConfig config);

  /// Returns the number of stored enrollments. Throws ServiceFailure 422 for
  /// invalid events and 409 when the cap is reached under the reject policy.
  std::size_t enroll(const std::string& subject_id, const std::vector<KeyEvent>& events);
  VerifyDecision verify(const std::string& subject_id, const std::vector<KeyEvent>& events) const;
  nlohmann::json list() const;
  bool remove(const std::string& subject_id);
  nlohmann::json health() const;

  Embedding embed(const std::vector<KeyEvent>& events) const;
  const ServiceConfig& config() const noexcept { return config_; }

  /// Rewrites the journal with one record per live subject.
  void compact();

 private:
  void refit(SubjectRecord& record) const;
  void compact_locked();
  void replay();
  void append(const nlohmann::json& entry);

  EncoderModel model_;
  std::string model_hash_;
  ServiceConfig config_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, SubjectRecord> store_;
  std::ofstream journal_;
  std::size_t appends_ = 0;
};

/// Parses {"events": [{keycode, press_ms, release_ms}, ...]}; ServiceFailure 422 on bad input.
std::vector<KeyEvent> parse_events_body(const std::string& body);

/// HTTP+JSON front end with permissive CORS.
class HttpFrontend {
 public:
  explicit HttpFrontend(VerificationService& service);
  ~HttpFrontend();

  bool listen(const std::string& host, int port);
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  bool running() const;

 private:
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace keydyn
