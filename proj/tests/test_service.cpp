#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "keydyn/errors.hpp"
#include "keydyn/service.hpp"

#include <httplib.h>

using namespace keydyn;
namespace fs = std::filesystem;

namespace {

const std::vector<KeystrokeSession>& corpus() {
  static const auto sessions = generate_synthetic(3, 15, 30, 8);
  return sessions;
}

EncoderModel tiny_model() {
  EncoderConfig c;
  c.max_len = 40;
  c.key_embed_dim = 4;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 32;
  c.out_dim = 8;
  return init_model(c, fit_norm_stats(corpus(), 30), 30, 5);
}

const std::vector<KeyEvent>& session(std::size_t i) { return corpus()[i].events; }

std::string body_of(const std::vector<KeyEvent>& events) {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : events) ev.push_back({{"keycode", e.keycode}, {"press_ms", e.press_ms}, {"release_ms", e.release_ms}});
  return nlohmann::json{{"events", ev}}.dump();
}

int status_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ServiceFailure& ex) {
    return ex.status();
  }
  return 200;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("enroll counts, cap policies and scorer minimum") {
  ServiceConfig c;
  VerificationService evict(tiny_model(), "h", c);
  for (std::size_t i = 0; i < 10; ++i) CHECK(evict.enroll("a", session(i)) == i + 1);
  CHECK(evict.enroll("a", session(10)) == 10);
  CHECK(evict.enroll("a", session(11)) == 10);

  c.cap_policy = CapPolicy::Reject;
  VerificationService reject(tiny_model(), "h", c);
  for (std::size_t i = 0; i < 10; ++i) reject.enroll("a", session(i));
  CHECK(status_of([&] { reject.enroll("a", session(10)); }) == 409);

  c = ServiceConfig{};
  c.scorer.kind = ScorerKind::Ocsvm;
  VerificationService svm(tiny_model(), "h", c);
  svm.enroll("a", session(0));
  CHECK(status_of([&] { svm.verify("a", session(1)); }) == 409);
  svm.enroll("a", session(2));
  CHECK(std::isfinite(svm.verify("a", session(1)).score));
  CHECK(parse_cap_policy("reject") == CapPolicy::Reject);
  CHECK_THROWS_AS(parse_cap_policy("drop"), ConfigError);
}

TEST_CASE("eviction drops the oldest enrollment") {
  VerificationService s(tiny_model(), "h", ServiceConfig{});
  for (std::size_t i = 0; i < 11; ++i) s.enroll("a", session(i));
  // Session 0 is gone: a fresh store holding sessions 1..10 scores identically.
  VerificationService fresh(tiny_model(), "h", ServiceConfig{});
  for (std::size_t i = 1; i < 11; ++i) fresh.enroll("a", session(i));
  CHECK(s.verify("a", session(20)).score == fresh.verify("a", session(20)).score);
}

TEST_CASE("verifying an enrolled session scores zero and accepts") {
  ServiceConfig c;
  c.threshold = 0.0;
  VerificationService s(tiny_model(), "h", c);
  s.enroll("a", session(3));
  const auto d = s.verify("a", session(3));
  CHECK(d.score == 0.0);
  CHECK(d.accept);
  CHECK(d.enrollments == 1);
  CHECK(d.scorer == ScorerKind::AvgDistance);
  const auto other = s.verify("a", session(40));
  CHECK(other.score < 0.0);
  CHECK(other.accept == (other.score >= c.threshold));
}

TEST_CASE("verify is read-only and repeatable") {
  VerificationService s(tiny_model(), "h", ServiceConfig{});
  for (std::size_t i = 0; i < 5; ++i) s.enroll("a", session(i));
  const auto before = s.list();
  const auto a = s.verify("a", session(7));
  const auto b = s.verify("a", session(7));
  CHECK(a.score == b.score);
  CHECK(a.accept == b.accept);
  CHECK(s.list() == before);
}

TEST_CASE("invalid bodies and unknown subjects") {
  VerificationService s(tiny_model(), "h", ServiceConfig{});
  CHECK(status_of([&] { s.enroll("a", {session(0)[0]}); }) == 422);
  CHECK(status_of([&] { s.verify("nobody", session(0)); }) == 404);
  CHECK_FALSE(s.remove("nobody"));

  CHECK(status_of([] { parse_events_body("not json"); }) == 422);
  CHECK(status_of([] { parse_events_body(R"({"events": 3})"); }) == 422);
  CHECK(status_of([] { parse_events_body(R"({"events":[{"keycode":65,"press_ms":0}]})"); }) == 422);
  const auto bad_key = parse_events_body(R"({"events":[{"keycode":999,"press_ms":0,"release_ms":5},{"keycode":65,"press_ms":9,"release_ms":20}]})");
  CHECK(status_of([&] { s.enroll("a", bad_key); }) == 422);
  const auto ev = parse_events_body(R"({"events":[{"keycode":66,"press_ms":10.4,"release_ms":30},{"keycode":65,"press_ms":0,"release_ms":5}]})");
  REQUIRE(ev.size() == 2);
  CHECK(ev[0].press_ms == 10);
  // Arrival order does not matter once embedded.
  s.enroll("b", session(4));
  auto shuffled = session(4);
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(s.verify("b", shuffled).score == 0.0);
}

TEST_CASE("store survives a restart, deletes included") {
  const auto dir = scratch("keydyn_test_store");
  ServiceConfig c;
  c.journal = dir / "store.jsonl";
  double score_before;
  {
    VerificationService s(tiny_model(), "h", c);
    for (std::size_t i = 0; i < 5; ++i) s.enroll("a", session(i));
    s.enroll("b", session(20));
    s.enroll("gone", session(30));
    CHECK(s.remove("gone"));
    score_before = s.verify("a", session(9)).score;
  }
  VerificationService s(tiny_model(), "h", c);
  const auto listed = s.list();
  REQUIRE(listed.size() == 2);
  CHECK(listed[0]["subject_id"] == "a");
  CHECK(listed[0]["enrollments"] == 5);
  CHECK(s.verify("a", session(9)).score == score_before);
  CHECK(status_of([&] { s.verify("gone", session(9)); }) == 404);

  // A torn final line (crash mid-write) is ignored.
  std::ofstream(c.journal, std::ios::app) << R"({"op":"put","subject_id":"c","embe)";
  VerificationService torn(tiny_model(), "h", c);
  CHECK(torn.list().size() == 2);
  CHECK(torn.verify("a", session(9)).score == score_before);
  fs::remove_all(dir);
}

TEST_CASE("journal compaction keeps one record per subject") {
  const auto dir = scratch("keydyn_test_compact");
  ServiceConfig c;
  c.journal = dir / "store.jsonl";
  c.compact_every = 4;
  auto lines = [&] {
    std::ifstream in(c.journal);
    std::size_t n = 0;
    for (std::string l; std::getline(in, l);) n += !l.empty();
    return n;
  };
  {
    VerificationService s(tiny_model(), "h", c);
    for (std::size_t i = 0; i < 9; ++i) s.enroll(i % 2 ? "a" : "b", session(i));
    CHECK(lines() <= 2 + 4);
    s.compact();
    CHECK(lines() == 2);
  }
  VerificationService s(tiny_model(), "h", c);
  CHECK(s.list()[0]["enrollments"] == 4);
  CHECK(s.list()[1]["enrollments"] == 5);
  fs::remove_all(dir);
}

TEST_CASE("concurrent verifies agree with sequential ones") {
  VerificationService s(tiny_model(), "h", ServiceConfig{});
  for (std::size_t i = 0; i < 5; ++i) s.enroll("a", session(i));
  std::vector<double> expected;
  for (std::size_t q = 0; q < 8; ++q) expected.push_back(s.verify("a", session(15 + q)).score);
  std::vector<double> got(8);
  std::vector<std::thread> threads;
  for (std::size_t q = 0; q < 8; ++q) {
    threads.emplace_back([&, q] { got[q] = s.verify("a", session(15 + q)).score; });
  }
  std::thread writer([&] { s.enroll("b", session(30)); });
  for (auto& t : threads) t.join();
  writer.join();
  CHECK(got == expected);
}

TEST_CASE("HTTP routes, status codes and CORS") {
  ServiceConfig c;
  c.threshold = -0.25;
  VerificationService service(tiny_model(), "abc123", c);
  HttpFrontend http(service);
  const int port = http.bind_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server([&] { http.listen_after_bind(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 100 && !http.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));

  auto res = client.Get("/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  auto j = nlohmann::json::parse(res->body);
  CHECK(j["model_hash"] == "abc123");
  CHECK(j["L"] == 30);
  CHECK(j["threshold"] == -0.25);
  CHECK(j["scorer"]["kind"] == "avg_distance");

  res = client.Get("/subjects");
  CHECK(nlohmann::json::parse(res->body).empty());

  for (std::size_t i = 0; i < 5; ++i) {
    res = client.Post("/subjects/alice/enroll", body_of(session(i)), "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(nlohmann::json::parse(res->body)["enrollments"] == i + 1);
  }
  res = client.Post("/subjects/alice/verify", body_of(session(7)), "application/json");
  CHECK(res->status == 200);
  j = nlohmann::json::parse(res->body);
  for (const auto* key : {"score", "threshold", "accept", "scorer", "enrollments"}) CHECK(j.contains(key));
  CHECK(j["accept"] == (j["score"].get<double>() >= -0.25));
  CHECK(j["enrollments"] == 5);

  res = client.Post("/subjects/bob/verify", body_of(session(7)), "application/json");
  CHECK(res->status == 404);
  res = client.Post("/subjects/alice/enroll", body_of({session(0)[0]}), "application/json");
  CHECK(res->status == 422);
  res = client.Post("/subjects/alice/enroll", "{", "application/json");
  CHECK(res->status == 422);
  CHECK(nlohmann::json::parse(res->body).contains("error"));

  res = client.Options("/subjects/alice/enroll");
  REQUIRE(res);
  CHECK(res->status == 204);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");

  res = client.Delete("/subjects/alice");
  CHECK(res->status == 200);
  res = client.Delete("/subjects/alice");
  CHECK(res->status == 404);
  res = client.Post("/subjects/alice/verify", body_of(session(7)), "application/json");
  CHECK(res->status == 404);

  http.stop();
  server.join();
}
