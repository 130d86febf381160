#include "keydyn/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "keydyn/errors.hpp"
#include "keydyn/random.hpp"

namespace keydyn {

void validate_session(const KeystrokeSession& session) {
  if (session.events.size() < 2) {
    throw ArgumentError("session " + session.session_id + " has fewer than 2 events");
  }
  for (std::size_t i = 0; i < session.events.size(); ++i) {
    const auto& e = session.events[i];
    if (e.keycode < 0 || e.keycode > 255) {
      throw ArgumentError("keycode " + std::to_string(e.keycode) + " outside 0-255");
    }
    if (e.release_ms < e.press_ms) {
      throw ArgumentError("release before press at event " + std::to_string(i));
    }
    if (i > 0) {
      const auto& p = session.events[i - 1];
      if (e.press_ms < p.press_ms ||
          (e.press_ms == p.press_ms && e.release_ms < p.release_ms)) {
        throw ArgumentError("events not sorted by press time at event " + std::to_string(i));
      }
    }
  }
}

void sort_events(std::vector<KeyEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const KeyEvent& a, const KeyEvent& b) {
    if (a.press_ms != b.press_ms) return a.press_ms < b.press_ms;
    return a.release_ms < b.release_ms;
  });
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

bool parse_int(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec == std::errc() && ptr == s.data() + s.size()) return true;
  // Some dumps write timestamps as floats ("1473284537607.0").
  double d = 0.0;
  auto [dptr, dec] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (dec != std::errc() || dptr != s.data() + s.size() || !std::isfinite(d)) return false;
  out = std::llround(d);
  return true;
}

}  // namespace

ImportResult import_sessions(std::istream& in, const ColumnMap& columns) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ConfigError("keystroke log is empty (no header row)");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const char delim = line.find('\t') != std::string::npos ? '\t' : ',';

  const auto header = split(line, delim);
  auto find_column = [&](const std::string& name) -> std::size_t {
    const auto want = lower(name);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (lower(header[i]) == want) return i;
    }
    throw ConfigError("missing column '" + name + "'");
  };
  const std::size_t c_subject = find_column(columns.subject);
  const std::size_t c_session = find_column(columns.session);
  const std::size_t c_key = find_column(columns.keycode);
  const std::size_t c_press = find_column(columns.press);
  const std::size_t c_release = find_column(columns.release);
  const std::size_t needed =
      std::max({c_subject, c_session, c_key, c_press, c_release}) + 1;

  ImportResult result;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<KeystrokeSession> sessions;

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split(line, delim);
    if (fields.size() < needed) {
      ++result.skipped_rows;
      continue;
    }
    std::int64_t key = 0, press = 0, release = 0;
    if (!parse_int(fields[c_key], key) || !parse_int(fields[c_press], press) ||
        !parse_int(fields[c_release], release) || key < 0 || key > 255 || release < press) {
      ++result.skipped_rows;
      continue;
    }
    std::pair<std::string, std::string> id{std::string(fields[c_subject]),
                                           std::string(fields[c_session])};
    auto [it, inserted] = index.try_emplace(id, sessions.size());
    if (inserted) {
      sessions.push_back(KeystrokeSession{id.first, id.second, {}});
    }
    sessions[it->second].events.push_back(KeyEvent{static_cast<int>(key), press, release});
  }

  for (auto& s : sessions) {
    if (s.events.size() < 2) {
      ++result.dropped_sessions;
      continue;
    }
    sort_events(s.events);
    const auto origin = s.events.front().press_ms;
    for (auto& e : s.events) {
      e.press_ms -= origin;
      e.release_ms -= origin;
    }
    result.sessions.push_back(std::move(s));
  }
  return result;
}

ImportResult import_sessions(const std::filesystem::path& path, const ColumnMap& columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return import_sessions(in, columns);
}

nlohmann::json session_to_json(const KeystrokeSession& session) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : session.events) {
    events.push_back({{"keycode", e.keycode}, {"press_ms", e.press_ms}, {"release_ms", e.release_ms}});
  }
  return {{"subject_id", session.subject_id},
          {"session_id", session.session_id},
          {"events", std::move(events)}};
}

KeystrokeSession session_from_json(const nlohmann::json& j) {
  try {
    KeystrokeSession s;
    s.subject_id = j.at("subject_id").get<std::string>();
    s.session_id = j.at("session_id").get<std::string>();
    for (const auto& e : j.at("events")) {
      s.events.push_back(KeyEvent{e.at("keycode").get<int>(), e.at("press_ms").get<std::int64_t>(),
                                  e.at("release_ms").get<std::int64_t>()});
    }
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("malformed session record: ") + ex.what());
  }
}

void write_sessions(std::ostream& out, std::span<const KeystrokeSession> sessions) {
  for (const auto& s : sessions) {
    out << session_to_json(s).dump() << '\n';
  }
}

void write_sessions(const std::filesystem::path& path,
                    std::span<const KeystrokeSession> sessions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_sessions(out, sessions);
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<KeystrokeSession> read_sessions(std::istream& in) {
  std::vector<KeystrokeSession> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw ParseError("line " + std::to_string(line_no) + ": " + ex.what());
    }
    auto s = session_from_json(j);
    try {
      validate_session(s);
    } catch (const ArgumentError& ex) {
      throw ParseError("line " + std::to_string(line_no) + ": " + ex.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<KeystrokeSession> read_sessions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_sessions(in);
}

namespace {

struct SubjectProfile {
  double hold_mean;
  double hold_noise;
  double digraph_mean;
  double digraph_noise;
  std::vector<double> key_hold_offset;
  std::vector<double> key_digraph_offset;
};

// Letters plus space.
const std::vector<int>& synthetic_alphabet() {
  static const std::vector<int> keys = [] {
    std::vector<int> k;
    for (int c = 65; c <= 90; ++c) k.push_back(c);
    k.push_back(32);
    return k;
  }();
  return keys;
}

}  // namespace

std::vector<KeystrokeSession> generate_synthetic(std::size_t n_subjects,
                                                 std::size_t sessions_per_subject,
                                                 std::size_t keys_per_session,
                                                 std::uint64_t seed) {
  if (n_subjects == 0 || sessions_per_subject == 0 || keys_per_session == 0) {
    throw ArgumentError("synthetic generation needs non-zero subject, session and key counts");
  }
  if (keys_per_session < 2) {
    throw ArgumentError("sessions need at least 2 keys");
  }
  const auto& alphabet = synthetic_alphabet();
  std::vector<KeystrokeSession> out;
  out.reserve(n_subjects * sessions_per_subject);

  for (std::size_t s = 0; s < n_subjects; ++s) {
    Rng rng(mix_seed(seed, s));
    SubjectProfile p;
    p.hold_mean = std::max(25.0, normal(rng, 90.0, 25.0));
    p.digraph_mean = std::max(60.0, normal(rng, 220.0, 60.0));
    p.hold_noise = 10.0 + 10.0 * uniform01(rng);
    p.digraph_noise = 10.0 + 10.0 * uniform01(rng);
    for (std::size_t k = 0; k < alphabet.size(); ++k) {
      p.key_hold_offset.push_back(normal(rng, 0.0, 10.0));
      p.key_digraph_offset.push_back(normal(rng, 0.0, 20.0));
    }

    char subject_id[32];
    std::snprintf(subject_id, sizeof subject_id, "s%04zu", s);
    for (std::size_t t = 0; t < sessions_per_subject; ++t) {
      KeystrokeSession session;
      session.subject_id = subject_id;
      session.session_id = std::string(subject_id) + "-" + std::to_string(t);
      std::int64_t press = 0;
      std::size_t key = uniform_index(rng, alphabet.size());
      for (std::size_t i = 0; i < keys_per_session; ++i) {
        const double hold =
            p.hold_mean + p.key_hold_offset[key] + normal(rng, 0.0, p.hold_noise);
        const auto hold_ms = static_cast<std::int64_t>(std::llround(std::max(5.0, hold)));
        session.events.push_back(KeyEvent{alphabet[key], press, press + hold_ms});
        const std::size_t next = uniform_index(rng, alphabet.size());
        const double gap =
            p.digraph_mean + p.key_digraph_offset[next] + normal(rng, 0.0, p.digraph_noise);
        press += static_cast<std::int64_t>(std::llround(std::max(5.0, gap)));
        key = next;
      }
      out.push_back(std::move(session));
    }
  }
  return out;
}

std::vector<std::string> subject_ids(std::span<const KeystrokeSession> sessions) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& s : sessions) {
    if (seen.insert(s.subject_id).second) ids.push_back(s.subject_id);
  }
  return ids;
}

DatasetSplit split_subjects(std::span<const KeystrokeSession> sessions, std::size_t n_train,
                            std::uint64_t seed) {
  auto ids = subject_ids(sessions);
  if (n_train == 0 || n_train >= ids.size()) {
    throw ArgumentError("n_train must be in [1, " + std::to_string(ids.size()) +
                        ") for " + std::to_string(ids.size()) + " subjects");
  }
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  DatasetSplit split;
  split.train_subjects.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.eval_subjects.insert(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return split;
}

std::vector<KeystrokeSession> select_subjects(std::span<const KeystrokeSession> sessions,
                                              const std::set<std::string>& subjects) {
  std::vector<KeystrokeSession> out;
  for (const auto& s : sessions) {
    if (subjects.count(s.subject_id)) out.push_back(s);
  }
  return out;
}

}  // namespace keydyn
