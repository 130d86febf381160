#include "keydyn/features.hpp"

#include <algorithm>
#include <cmath>

#include "keydyn/errors.hpp"

namespace keydyn {

RawFeatures extract_raw(const KeystrokeSession& session, std::size_t max_len) {
  if (max_len < 2) throw ArgumentError("max_len must be at least 2");
  const auto& ev = session.events;
  const std::size_t n = std::min(ev.size(), max_len);

  RawFeatures raw;
  raw.length = n;
  raw.values = TemporalMatrix::Zero(static_cast<Eigen::Index>(n), kTemporalChannels);
  raw.keycodes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const auto p = static_cast<double>(ev[i].press_ms);
    const auto r = static_cast<double>(ev[i].release_ms);
    raw.keycodes[i] = ev[i].keycode;
    raw.values(row, kHold) = r - p;
    if (i + 1 < n) {
      const auto pn = static_cast<double>(ev[i + 1].press_ms);
      const auto rn = static_cast<double>(ev[i + 1].release_ms);
      raw.values(row, kPress) = pn - p;
      raw.values(row, kRelease) = rn - r;
      raw.values(row, kInner) = pn - r;
      raw.values(row, kOuter) = rn - p;
    }
  }
  return raw;
}

NormStats fit_norm_stats(std::span<const KeystrokeSession> sessions, std::size_t max_len) {
  if (sessions.empty()) throw ArgumentError("cannot fit normalization on zero sessions");

  // Two passes: mean first, then centred second moment.
  std::array<double, kTemporalChannels> sum{};
  std::array<std::size_t, kTemporalChannels> count{};
  std::vector<RawFeatures> raws;
  raws.reserve(sessions.size());
  for (const auto& s : sessions) {
    raws.push_back(extract_raw(s, max_len));
    const auto& raw = raws.back();
    for (std::size_t i = 0; i < raw.length; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const bool last = i + 1 == raw.length;
      for (int c = 0; c < kTemporalChannels; ++c) {
        if (c != kHold && last) continue;
        sum[c] += raw.values(row, c);
        ++count[c];
      }
    }
  }

  NormStats stats;
  for (int c = 0; c < kTemporalChannels; ++c) {
    stats.mean[c] = count[c] ? sum[c] / static_cast<double>(count[c]) : 0.0;
  }
  std::array<double, kTemporalChannels> sq{};
  for (const auto& raw : raws) {
    for (std::size_t i = 0; i < raw.length; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const bool last = i + 1 == raw.length;
      for (int c = 0; c < kTemporalChannels; ++c) {
        if (c != kHold && last) continue;
        const double d = raw.values(row, c) - stats.mean[c];
        sq[c] += d * d;
      }
    }
  }
  for (int c = 0; c < kTemporalChannels; ++c) {
    const double var = count[c] ? sq[c] / static_cast<double>(count[c]) : 0.0;
    stats.stddev[c] = std::max(std::sqrt(var), kStddevFloor);
  }
  return stats;
}

FeatureSequence vectorize(const KeystrokeSession& session, const NormStats& stats,
                          std::size_t max_len) {
  if (session.events.size() < 2) {
    throw ArgumentError("session " + session.session_id + " has fewer than 2 events");
  }
  const auto raw = extract_raw(session, max_len);
  const auto L = static_cast<Eigen::Index>(max_len);

  FeatureSequence seq;
  seq.length = raw.length;
  seq.values = TemporalMatrix::Zero(L, kTemporalChannels);
  seq.mask.assign(max_len, false);
  seq.keycodes.assign(max_len, 0);
  for (std::size_t i = 0; i < raw.length; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const bool last = i + 1 == raw.length;
    seq.mask[i] = true;
    seq.keycodes[i] = raw.keycodes[i];
    for (int c = 0; c < kTemporalChannels; ++c) {
      if (c != kHold && last) continue;
      seq.values(row, c) = (raw.values(row, c) - stats.mean[c]) / stats.stddev[c];
    }
  }
  return seq;
}

}  // namespace keydyn
