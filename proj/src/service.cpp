#include "keydyn/service.hpp"

#include <chrono>
#include <cmath>
#include <mutex>

#include <httplib.h>

#include "keydyn/errors.hpp"
#include "keydyn/features.hpp"

namespace keydyn {

namespace fs = std::filesystem;

CapPolicy parse_cap_policy(std::string_view text) {
  if (text == "evict") return CapPolicy::Evict;
  if (text == "reject") return CapPolicy::Reject;
  throw ConfigError("unknown enrollment cap policy '" + std::string(text) + "'");
}

nlohmann::json VerifyDecision::to_json() const {
  return {{"score", score},
          {"threshold", threshold},
          {"accept", accept},
          {"scorer", to_string(scorer)},
          {"enrollments", enrollments}};
}

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

nlohmann::json record_to_json(const SubjectRecord& r) {
  nlohmann::json emb = nlohmann::json::array();
  for (const auto& e : r.embeddings) emb.push_back(std::vector<double>(e.data(), e.data() + e.size()));
  return {{"subject_id", r.subject_id},
          {"created_ms", r.created_ms},
          {"updated_ms", r.updated_ms},
          {"embeddings", std::move(emb)}};
}

SubjectRecord record_from_json(const nlohmann::json& j) {
  SubjectRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.created_ms = j.at("created_ms").get<std::int64_t>();
  r.updated_ms = j.at("updated_ms").get<std::int64_t>();
  for (const auto& e : j.at("embeddings")) {
    const auto v = e.get<std::vector<double>>();
    r.embeddings.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return r;
}

}  // namespace

VerificationService::VerificationService(EncoderModel model, std::string model_hash,
                                         ServiceConfig config)
    : model_(std::move(model)), model_hash_(std::move(model_hash)), config_(std::move(config)) {
  if (model_.config.mode != EncoderMode::Bi) {
    throw ConfigError("the verification service needs a bi-encoder checkpoint");
  }
  config_.scorer.validate();
  if (config_.cap == 0) throw ConfigError("enrollment cap must be positive");
  if (!config_.journal.empty()) {
    replay();
    compact_locked();
  }
}

void VerificationService::refit(SubjectRecord& record) const {
  record.scorer.reset();
  if (record.embeddings.size() >= config_.scorer.min_enrollment()) {
    record.scorer = std::make_shared<const FittedScorer>(record.embeddings, config_.scorer);
  }
}

void VerificationService::replay() {
  std::ifstream in(config_.journal);
  if (!in) return;  // fresh store
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto op = j.at("op").get<std::string>();
      if (op == "put") {
        auto r = record_from_json(j.at("record"));
        for (const auto& e : r.embeddings) {
          if (e.size() != static_cast<Eigen::Index>(model_.config.out_dim)) {
            throw CorruptionError("embedding dimension does not match the model");
          }
        }
        refit(r);
        store_[r.subject_id] = std::move(r);
      } else if (op == "delete") {
        store_.erase(j.at("subject_id").get<std::string>());
      }
    } catch (const nlohmann::json::exception& ex) {
      // A torn final write is expected after a crash; anything earlier is damage.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw CorruptionError("journal line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
}

void VerificationService::compact() {
  std::unique_lock lock(mutex_);
  compact_locked();
}

void VerificationService::compact_locked() {
  if (config_.journal.empty()) return;
  if (journal_.is_open()) journal_.close();
  const auto tmp = fs::path(config_.journal.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    for (const auto& [id, r] : store_) {
      out << nlohmann::json{{"op", "put"}, {"record", record_to_json(r)}}.dump() << '\n';
    }
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, config_.journal);
  journal_.open(config_.journal, std::ios::app);
  if (!journal_) throw IoError("cannot open journal " + config_.journal.string());
  appends_ = 0;
}

void VerificationService::append(const nlohmann::json& entry) {
  if (config_.journal.empty()) return;
  journal_ << entry.dump() << '\n';
  journal_.flush();
  if (!journal_) throw IoError("journal write failed");
  if (++appends_ >= config_.compact_every) compact_locked();
}

std::vector<KeyEvent> parse_events_body(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw ServiceFailure(422, "body is not valid JSON");
  }
  if (!j.is_object() || !j.contains("events") || !j["events"].is_array()) {
    throw ServiceFailure(422, "body must be {\"events\": [...]}");
  }
  std::vector<KeyEvent> events;
  for (const auto& e : j["events"]) {
    if (!e.is_object() || !e.contains("keycode") || !e.contains("press_ms") ||
        !e.contains("release_ms") || !e["keycode"].is_number_integer() ||
        !e["press_ms"].is_number() || !e["release_ms"].is_number()) {
      throw ServiceFailure(422, "each event needs integer keycode and numeric press_ms, release_ms");
    }
    const double press = e["press_ms"].get<double>();
    const double release = e["release_ms"].get<double>();
    if (!std::isfinite(press) || !std::isfinite(release)) {
      throw ServiceFailure(422, "non-finite timestamp");
    }
    events.push_back({e["keycode"].get<int>(), std::llround(press), std::llround(release)});
  }
  return events;
}

Embedding VerificationService::embed(const std::vector<KeyEvent>& events) const {
  KeystrokeSession session{"", "request", events};
  sort_events(session.events);
  try {
    validate_session(session);
  } catch (const ArgumentError& ex) {
    throw ServiceFailure(422, ex.what());
  }
  return encode(vectorize(session, model_.norm, model_.sequence_length), model_);
}

std::size_t VerificationService::enroll(const std::string& subject_id,
                                        const std::vector<KeyEvent>& events) {
  if (subject_id.empty()) throw ServiceFailure(422, "empty subject id");
  auto embedding = embed(events);
  std::unique_lock lock(mutex_);
  auto [it, inserted] = store_.try_emplace(subject_id);
  auto& record = it->second;
  SubjectRecord updated = record;
  const auto now = now_ms();
  if (inserted) {
    updated.subject_id = subject_id;
    updated.created_ms = now;
  }
  if (updated.embeddings.size() >= config_.cap) {
    if (config_.cap_policy == CapPolicy::Reject) {
      if (inserted) store_.erase(it);
      throw ServiceFailure(409, "subject " + subject_id + " already has " +
                                    std::to_string(config_.cap) + " enrollments");
    }
    updated.embeddings.erase(updated.embeddings.begin());
  }
  updated.embeddings.push_back(std::move(embedding));
  updated.updated_ms = now;
  refit(updated);
  record = std::move(updated);
  append({{"op", "put"}, {"record", record_to_json(record)}});
  return record.embeddings.size();
}

VerifyDecision VerificationService::verify(const std::string& subject_id,
                                           const std::vector<KeyEvent>& events) const {
  std::shared_ptr<const FittedScorer> scorer;
  std::size_t count = 0;
  {
    std::shared_lock lock(mutex_);
    const auto it = store_.find(subject_id);
    if (it == store_.end()) throw ServiceFailure(404, "unknown subject " + subject_id);
    scorer = it->second.scorer;
    count = it->second.embeddings.size();
  }
  if (!scorer) {
    throw ServiceFailure(409, std::string(to_string(config_.scorer.kind)) + " needs " +
                                  std::to_string(config_.scorer.min_enrollment()) +
                                  " enrollments, subject has " + std::to_string(count));
  }
  VerifyDecision d;
  d.score = scorer->score(embed(events));
  d.threshold = config_.threshold;
  d.accept = d.score >= d.threshold;
  d.scorer = config_.scorer.kind;
  d.enrollments = count;
  return d;
}

nlohmann::json VerificationService::list() const {
  std::shared_lock lock(mutex_);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [id, r] : store_) {
    out.push_back({{"subject_id", id},
                   {"enrollments", r.embeddings.size()},
                   {"created_ms", r.created_ms},
                   {"updated_ms", r.updated_ms}});
  }
  return out;
}

bool VerificationService::remove(const std::string& subject_id) {
  std::unique_lock lock(mutex_);
  if (store_.erase(subject_id) == 0) return false;
  append({{"op", "delete"}, {"subject_id", subject_id}});
  return true;
}

nlohmann::json VerificationService::health() const {
  return {{"status", "ok"},
          {"model_hash", model_hash_},
          {"scorer", scorer_config_to_json(config_.scorer)},
          {"L", model_.sequence_length},
          {"threshold", config_.threshold},
          {"out_dim", model_.config.out_dim}};
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ServiceFailure& ex) {
    send_json(res, ex.status(), {{"error", ex.what()}});
  } catch (const ProtocolError& ex) {
    send_json(res, 409, {{"error", ex.what()}});
  } catch (const ArgumentError& ex) {
    send_json(res, 422, {{"error", ex.what()}});
  } catch (const std::exception& ex) {
    send_json(res, 500, {{"error", ex.what()}});
  }
}

}  // namespace

HttpFrontend::HttpFrontend(VerificationService& service)
    : server_(std::make_unique<httplib::Server>()) {
  auto& srv = *server_;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  srv.Post(R"(/subjects/([^/]+)/enroll)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto events = parse_events_body(req.body);
      send_json(res, 200, {{"enrollments", service.enroll(req.matches[1].str(), events)}});
    });
  });
  srv.Post(R"(/subjects/([^/]+)/verify)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto events = parse_events_body(req.body);
      send_json(res, 200, service.verify(req.matches[1].str(), events).to_json());
    });
  });
  srv.Get("/subjects", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.list()); });
  });
  srv.Delete(R"(/subjects/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto id = req.matches[1].str();
      if (!service.remove(id)) throw ServiceFailure(404, "unknown subject " + id);
      send_json(res, 200, {{"deleted", id}});
    });
  });
  srv.Get("/health", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.health()); });
  });
}

HttpFrontend::~HttpFrontend() = default;

bool HttpFrontend::listen(const std::string& host, int port) { return server_->listen(host, port); }
int HttpFrontend::bind_any_port(const std::string& host) { return server_->bind_to_any_port(host); }
bool HttpFrontend::listen_after_bind() { return server_->listen_after_bind(); }
void HttpFrontend::stop() { server_->stop(); }
bool HttpFrontend::running() const { return server_->is_running(); }

}  // namespace keydyn
