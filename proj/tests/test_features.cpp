#include <doctest.h>

#include <algorithm>
#include <random>

#include "keydyn/dataset.hpp"
#include "keydyn/errors.hpp"
#include "keydyn/features.hpp"

using namespace keydyn;

namespace {

KeystrokeSession make(std::vector<std::pair<std::int64_t, std::int64_t>> times, int key = 65) {
  KeystrokeSession s{"s", "t", {}};
  for (auto [p, r] : times) s.events.push_back({key, p, r});
  return s;
}

}  // namespace

TEST_CASE("latency definitions on two keys") {
  const auto raw = extract_raw(make({{0, 80}, {150, 260}}), 50);
  REQUIRE(raw.length == 2);
  CHECK(raw.values(0, kHold) == 80);
  CHECK(raw.values(0, kPress) == 150);
  CHECK(raw.values(0, kRelease) == 180);
  CHECK(raw.values(0, kInner) == 70);
  CHECK(raw.values(0, kOuter) == 260);
  CHECK(raw.values(1, kHold) == 110);
  for (int c = 1; c < 5; ++c) CHECK(raw.values(1, c) == 0);
}

TEST_CASE("overlapping keys give a negative inner latency") {
  const auto raw = extract_raw(make({{0, 200}, {120, 300}}), 50);
  CHECK(raw.values(0, kInner) == -80);
}

TEST_CASE("long sessions are truncated to max_len") {
  std::vector<std::pair<std::int64_t, std::int64_t>> t;
  for (int i = 0; i < 70; ++i) t.push_back({i * 100, i * 100 + 50});
  const auto raw = extract_raw(make(t), 50);
  CHECK(raw.length == 50);
  CHECK(raw.values.rows() == 50);
  // row 49 is the last kept key: its digraph channels are zero even though key 50 exists
  CHECK(raw.values(49, kPress) == 0);
  CHECK_THROWS_AS(extract_raw(make(t), 1), ArgumentError);
}

TEST_CASE("normalization of a constant channel floors the stddev") {
  const auto stats = fit_norm_stats(std::vector{make({{0, 80}, {200, 280}, {400, 480}})}, 50);
  CHECK(stats.mean[kHold] == doctest::Approx(80));
  CHECK(stats.stddev[kHold] == kStddevFloor);
  CHECK_THROWS_AS(fit_norm_stats(std::vector<KeystrokeSession>{}, 50), ArgumentError);
}

TEST_CASE("normalization statistics match an independent single-pass computation") {
  const auto sessions = generate_synthetic(6, 5, 40, 21);
  const std::size_t L = 30;
  const auto stats = fit_norm_stats(sessions, L);

  // Welford single pass per channel; digraph channels skip each session's last real row.
  for (int c = 0; c < 5; ++c) {
    double mean = 0.0, m2 = 0.0, count = 0.0;
    for (const auto& s : sessions) {
      const std::size_t n = std::min(s.events.size(), L);
      for (std::size_t i = 0; i < n; ++i) {
        if (c != kHold && i + 1 == n) continue;
        const auto& e = s.events[i];
        double v;
        if (c == kHold) {
          v = static_cast<double>(e.release_ms - e.press_ms);
        } else {
          const auto& f = s.events[i + 1];
          v = c == kPress     ? static_cast<double>(f.press_ms - e.press_ms)
              : c == kRelease ? static_cast<double>(f.release_ms - e.release_ms)
              : c == kInner   ? static_cast<double>(f.press_ms - e.release_ms)
                              : static_cast<double>(f.release_ms - e.press_ms);
        }
        count += 1.0;
        const double delta = v - mean;
        mean += delta / count;
        m2 += delta * (v - mean);
      }
    }
    CHECK(stats.mean[c] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(stats.stddev[c] == doctest::Approx(std::sqrt(m2 / count)).epsilon(1e-12));
  }

  auto shuffled = sessions;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(4));
  const auto again = fit_norm_stats(shuffled, L);
  for (int c = 0; c < 5; ++c) {
    CHECK(again.mean[c] == doctest::Approx(stats.mean[c]).epsilon(1e-12));
    CHECK(again.stddev[c] == doctest::Approx(stats.stddev[c]).epsilon(1e-12));
  }
}

TEST_CASE("standardized training channels have zero mean and unit variance") {
  const auto sessions = generate_synthetic(5, 6, 45, 8);
  const std::size_t L = 40;
  const auto stats = fit_norm_stats(sessions, L);
  for (int c = 0; c < 5; ++c) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const auto& s : sessions) {
      const auto f = vectorize(s, stats, L);
      for (std::size_t i = 0; i < f.length; ++i) {
        if (c != kHold && i + 1 == f.length) continue;
        sum += f.values(static_cast<Eigen::Index>(i), c);
        sq += f.values(static_cast<Eigen::Index>(i), c) * f.values(static_cast<Eigen::Index>(i), c);
        n += 1.0;
      }
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) < 1e-6);
  }
}

TEST_CASE("vectorize masks and pads") {
  const auto s = make({{0, 80}, {150, 260}});
  NormStats stats;
  const auto f = vectorize(s, stats, 50);
  CHECK(f.max_len() == 50);
  CHECK(f.length == 2);
  CHECK(f.mask[0]);
  CHECK(f.mask[1]);
  for (std::size_t i = 2; i < 50; ++i) {
    CHECK_FALSE(f.mask[i]);
    CHECK(f.keycodes[i] == 0);
    CHECK(f.values.row(static_cast<Eigen::Index>(i)).isZero(0.0));
  }
  const auto g = vectorize(s, stats, 50);
  CHECK(f.values == g.values);

  std::vector<std::pair<std::int64_t, std::int64_t>> t;
  for (int i = 0; i < 50; ++i) t.push_back({i * 100, i * 100 + 50});
  const auto full = vectorize(make(t), stats, 50);
  CHECK(std::all_of(full.mask.begin(), full.mask.end(), [](bool b) { return b; }));

  CHECK_THROWS_AS(vectorize(make({{0, 80}}), stats, 50), ArgumentError);
}

TEST_CASE("extra padding leaves real rows untouched") {
  const auto sessions = generate_synthetic(1, 3, 30, 2);
  const auto stats = fit_norm_stats(sessions, 60);
  for (const auto& s : sessions) {
    const auto a = vectorize(s, stats, 30);
    const auto b = vectorize(s, stats, 60);
    CHECK(b.values.topRows(30) == a.values);
    CHECK(b.values.bottomRows(30).isZero(0.0));
  }
}

TEST_CASE("features are invariant to a shift of absolute time") {
  auto s = generate_synthetic(1, 1, 25, 6)[0];
  const auto stats = fit_norm_stats(std::vector{s}, 30);
  const auto base = vectorize(s, stats, 30);
  for (auto& e : s.events) {
    e.press_ms += 1'700'000'000'000;
    e.release_ms += 1'700'000'000'000;
  }
  CHECK(vectorize(s, stats, 30).values == base.values);
}
