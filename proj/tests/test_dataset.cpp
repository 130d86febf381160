#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "keydyn/dataset.hpp"
#include "keydyn/errors.hpp"
#include "keydyn/features.hpp"

using namespace keydyn;

TEST_CASE("import parses a tab separated log") {
  std::istringstream in(
      "PARTICIPANT\tSECTION\tKEYCODE\tPRESS\tRELEASE\n"
      "7\t1\t65\t1000100\t1000180\n"
      "7\t1\t66\t1000250\t1000320\n"
      "7\t1\t67\t1000400\t1000500\n");
  const auto r = import_sessions(in);
  REQUIRE(r.sessions.size() == 1);
  const auto& s = r.sessions[0];
  CHECK(s.subject_id == "7");
  CHECK(s.session_id == "1");
  REQUIRE(s.events.size() == 3);
  // rebased to the first press
  CHECK(s.events[0] == KeyEvent{65, 0, 80});
  CHECK(s.events[1] == KeyEvent{66, 150, 220});
  CHECK(s.events[2] == KeyEvent{67, 300, 400});
  CHECK(r.dropped_sessions == 0);
}

TEST_CASE("import drops single-event sessions and skips bad rows") {
  std::istringstream in(
      "participant,section,keycode,press,release\n"
      "1,a,65,100,180\n"
      "1,a,66,250,320\n"
      "1,b,65,100,180\n"
      "1,a,67,xx,500\n"
      "1,a,300,600,700\n");
  const auto r = import_sessions(in);
  CHECK(r.sessions.size() == 1);
  CHECK(r.dropped_sessions == 1);
  CHECK(r.skipped_rows == 2);
}

TEST_CASE("import re-sorts events by press time") {
  std::istringstream in(
      "participant,section,keycode,press,release\n"
      "1,a,67,400,500\n"
      "1,a,65,100,180\n"
      "1,a,66,250,320\n");
  const auto r = import_sessions(in);
  REQUIRE(r.sessions.size() == 1);
  CHECK(r.sessions[0].events[0].keycode == 65);
  CHECK(r.sessions[0].events[1].keycode == 66);
  CHECK(r.sessions[0].events[2].keycode == 67);
  CHECK_NOTHROW(validate_session(r.sessions[0]));
}

TEST_CASE("import with a custom column map and a missing column") {
  std::istringstream good("user,sess,key,down,up\n1,a,65,0,10\n1,a,66,20,30\n");
  ColumnMap map{"user", "sess", "key", "down", "up"};
  CHECK(import_sessions(good, map).sessions.size() == 1);

  std::istringstream bad("participant,section,keycode,press\n1,a,65,0\n");
  CHECK_THROWS_AS(import_sessions(bad), ConfigError);
}

TEST_CASE("random delimited files always yield valid sessions") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    std::ostringstream text;
    text << "participant,section,keycode,press,release\n";
    std::uniform_int_distribution<int> subj(0, 3), key(-5, 260), ts(0, 5000), dur(-20, 200), junk(0, 20);
    for (int row = 0; row < 60; ++row) {
      const int p = ts(rng);
      if (junk(rng) == 0) {
        text << "x,y,z,w,v\n";
        continue;
      }
      text << subj(rng) << ",s" << subj(rng) << ',' << key(rng) << ',' << p << ',' << p + dur(rng) << '\n';
    }
    std::istringstream in(text.str());
    for (const auto& s : import_sessions(in).sessions) {
      CHECK_NOTHROW(validate_session(s));
      CHECK(s.events.front().press_ms == 0);
    }
  }
}

TEST_CASE("session JSONL round trip is identity") {
  const auto sessions = generate_synthetic(3, 4, 12, 5);
  std::stringstream buf;
  write_sessions(buf, sessions);
  CHECK(read_sessions(buf) == sessions);
}

TEST_CASE("read_sessions rejects invalid records") {
  std::istringstream in(R"({"subject_id":"a","session_id":"1","events":[{"keycode":65,"press_ms":0,"release_ms":10}]})"
                        "\n");
  CHECK_THROWS_AS(read_sessions(in), ParseError);
  std::istringstream garbage("{not json\n");
  CHECK_THROWS_AS(read_sessions(garbage), ParseError);
}

TEST_CASE("synthetic generator shape and determinism") {
  const auto a = generate_synthetic(2, 15, 50, 7);
  CHECK(a.size() == 30);
  for (const auto& s : a) {
    CHECK(s.events.size() == 50);
    CHECK_NOTHROW(validate_session(s));
    for (std::size_t i = 1; i < s.events.size(); ++i) CHECK(s.events[i].press_ms > s.events[i - 1].press_ms);
  }
  std::ostringstream x, y;
  write_sessions(x, a);
  write_sessions(y, generate_synthetic(2, 15, 50, 7));
  CHECK(x.str() == y.str());
  CHECK_THROWS_AS(generate_synthetic(0, 15, 50, 7), ArgumentError);
  CHECK_THROWS_AS(generate_synthetic(2, 0, 50, 7), ArgumentError);
  CHECK_THROWS_AS(generate_synthetic(2, 15, 0, 7), ArgumentError);
}

TEST_CASE("synthetic subjects are closer to themselves than to others") {
  const auto sessions = generate_synthetic(40, 15, 60, 1);
  // Session summary: mean of each raw channel over the digraph rows.
  std::vector<Eigen::VectorXd> summary;
  for (const auto& s : sessions) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(5);
    const auto n = s.events.size();
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const auto& e = s.events[i];
      const auto& f = s.events[i + 1];
      v[0] += static_cast<double>(e.release_ms - e.press_ms);
      v[1] += static_cast<double>(f.press_ms - e.press_ms);
      v[2] += static_cast<double>(f.release_ms - e.release_ms);
      v[3] += static_cast<double>(f.press_ms - e.release_ms);
      v[4] += static_cast<double>(f.release_ms - e.press_ms);
    }
    summary.push_back(v / static_cast<double>(n - 1));
  }
  double within = 0.0, across = 0.0;
  std::size_t nw = 0, na = 0;
  for (std::size_t i = 0; i < sessions.size(); ++i)
    for (std::size_t j = i + 1; j < sessions.size(); ++j) {
      const double d = (summary[i] - summary[j]).norm();
      if (sessions[i].subject_id == sessions[j].subject_id) {
        within += d;
        ++nw;
      } else {
        across += d;
        ++na;
      }
    }
  CHECK(within / static_cast<double>(nw) < across / static_cast<double>(na));
}

TEST_CASE("subject split") {
  const auto sessions = generate_synthetic(40, 2, 5, 3);
  const auto split = split_subjects(sessions, 30, 11);
  CHECK(split.train_subjects.size() == 30);
  CHECK(split.eval_subjects.size() == 10);
  for (const auto& s : split.train_subjects) CHECK(split.eval_subjects.count(s) == 0);
  CHECK(split_subjects(sessions, 30, 11).train_subjects == split.train_subjects);
  CHECK_THROWS_AS(split_subjects(sessions, 40, 11), ArgumentError);

  const auto train = select_subjects(sessions, split.train_subjects);
  CHECK(train.size() == 60);
}
