#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "keydyn/dataset.hpp"

namespace keydyn {

/// Temporal channels per keystroke, in column order.
enum TemporalChannel : int {
  kHold = 0,     // release_i - press_i
  kPress = 1,    // press_{i+1} - press_i
  kRelease = 2,  // release_{i+1} - release_i
  kInner = 3,    // press_{i+1} - release_i (negative when keys overlap)
  kOuter = 4,    // release_{i+1} - press_i
};
inline constexpr int kTemporalChannels = 5;

using TemporalMatrix = Eigen::Matrix<double, Eigen::Dynamic, kTemporalChannels>;

struct RawFeatures {
  TemporalMatrix values;       // n x 5, milliseconds
  std::vector<int> keycodes;   // n
  std::size_t length = 0;      // n = min(events, max_len)
};

/// Latencies of the first max_len events. The four digraph channels of the
/// last row are zero because there is no following key.
RawFeatures extract_raw(const KeystrokeSession& session, std::size_t max_len);

/// Per-channel standardization statistics (milliseconds).
struct NormStats {
  std::array<double, kTemporalChannels> mean{};
  std::array<double, kTemporalChannels> stddev{1.0, 1.0, 1.0, 1.0, 1.0};

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kStddevFloor = 1e-6;

/// Population mean/stddev per channel over real entries. The hold channel uses
/// every real row; digraph channels skip each session's last row.
NormStats fit_norm_stats(std::span<const KeystrokeSession> sessions, std::size_t max_len);

/// Fixed-length model input: standardized latencies, padding mask and keycodes.
struct FeatureSequence {
  TemporalMatrix values;       // L x 5
  std::vector<bool> mask;      // L, prefix of trues
  std::vector<int> keycodes;   // L, 0 for padding
  std::size_t length = 0;      // number of real rows

  std::size_t max_len() const noexcept { return mask.size(); }
};

/// Standardizes real rows and zero-pads to max_len. The missing digraph
/// entries of the last real row stay at zero (the standardized mean).
FeatureSequence vectorize(const KeystrokeSession& session, const NormStats& stats,
                          std::size_t max_len);

}  // namespace keydyn
