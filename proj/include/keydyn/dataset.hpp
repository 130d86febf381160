#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace keydyn {

/// One key press/release. Keycodes follow the 0-255 range of the desktop
/// keystroke corpora; timestamps are milliseconds.
struct KeyEvent {
  int keycode = 0;
  std::int64_t press_ms = 0;
  std::int64_t release_ms = 0;

  friend bool operator==(const KeyEvent&, const KeyEvent&) = default;
};

/// Ordered events of one typing session of one subject.
struct KeystrokeSession {
  std::string subject_id;
  std::string session_id;
  std::vector<KeyEvent> events;

  friend bool operator==(const KeystrokeSession&, const KeystrokeSession&) = default;
};

/// Throws ArgumentError if the session breaks the keycode range, ordering,
/// release >= press or minimum-length invariants.
void validate_session(const KeystrokeSession& session);

/// Sorts by press time, ties broken by release time.
void sort_events(std::vector<KeyEvent>& events);

/// Header names used when reading delimited keystroke logs.
struct ColumnMap {
  std::string subject = "participant";
  std::string session = "section";
  std::string keycode = "keycode";
  std::string press = "press";
  std::string release = "release";
};

struct ImportResult {
  std::vector<KeystrokeSession> sessions;
  std::size_t dropped_sessions = 0;  // fewer than two events
  std::size_t skipped_rows = 0;      // unparsable or out-of-range rows
};

/// Reads a tab- or comma-delimited log with a header row. Header matching is
/// case-insensitive. Timestamps are rebased to the first press of each session.
ImportResult import_sessions(const std::filesystem::path& path,
                             const ColumnMap& columns = {});
ImportResult import_sessions(std::istream& in, const ColumnMap& columns = {});

// Canonical JSON-lines format: one session per line.
nlohmann::json session_to_json(const KeystrokeSession& session);
KeystrokeSession session_from_json(const nlohmann::json& j);

void write_sessions(std::ostream& out, std::span<const KeystrokeSession> sessions);
void write_sessions(const std::filesystem::path& path,
                    std::span<const KeystrokeSession> sessions);
std::vector<KeystrokeSession> read_sessions(std::istream& in);
std::vector<KeystrokeSession> read_sessions(const std::filesystem::path& path);

/// Desk-scale stand-in for a real corpus. Each subject gets its own hold and
/// digraph timing profile so that same-subject sessions sit closer together
/// than cross-subject sessions. Pure function of its arguments.
std::vector<KeystrokeSession> generate_synthetic(std::size_t n_subjects,
                                                 std::size_t sessions_per_subject,
                                                 std::size_t keys_per_session,
                                                 std::uint64_t seed);

struct DatasetSplit {
  std::set<std::string> train_subjects;
  std::set<std::string> eval_subjects;
};

DatasetSplit split_subjects(std::span<const KeystrokeSession> sessions,
                            std::size_t n_train, std::uint64_t seed);

/// Subject ids in order of first appearance.
std::vector<std::string> subject_ids(std::span<const KeystrokeSession> sessions);

std::vector<KeystrokeSession> select_subjects(std::span<const KeystrokeSession> sessions,
                                              const std::set<std::string>& subjects);

}  // namespace keydyn
