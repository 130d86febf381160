#include "keydyn/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "keydyn/checkpoint.hpp"
#include "keydyn/errors.hpp"
#include "keydyn/features.hpp"

namespace keydyn {

void ProtocolConfig::validate() const {
  if (enrollment < 1 || enrollment > kEnrollmentPool) {
    throw ConfigError("enrollment count must lie in [1, 10]");
  }
  if (length < 2) throw ConfigError("keystroke length must be at least 2");
  scorer.validate();
  if (enrollment < scorer.min_enrollment()) {
    throw ProtocolError(std::string(to_string(scorer.kind)) + " needs E >= " +
                        std::to_string(scorer.min_enrollment()));
  }
}

nlohmann::json protocol_config_to_json(const ProtocolConfig& c) {
  return {{"enrollment", c.enrollment},
          {"length", c.length},
          {"impostors_per_subject",
           c.impostors_per_subject ? nlohmann::json(c.impostors_per_subject)
                                   : nlohmann::json("one_per_other_subject")},
          {"seed", c.seed},
          {"scorer", scorer_config_to_json(c.scorer)}};
}

ProtocolPlan plan_protocol(std::span<const KeystrokeSession> sessions, const ProtocolConfig& config) {
  config.validate();
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    auto [it, inserted] = by_subject.try_emplace(sessions[i].subject_id);
    if (inserted) order.push_back(sessions[i].subject_id);
    it->second.push_back(i);
  }

  ProtocolPlan plan;
  std::vector<const std::vector<std::size_t>*> pools;
  for (const auto& id : order) {
    const auto& idx = by_subject[id];
    if (idx.size() < kProtocolSessions) {
      plan.warnings.push_back("subject " + id + " skipped: " + std::to_string(idx.size()) +
                              " sessions, protocol needs " + std::to_string(kProtocolSessions));
      continue;
    }
    SubjectPlan sp;
    sp.subject_id = id;
    sp.genuine.assign(idx.end() - kQueryPool, idx.end());
    plan.subjects.push_back(std::move(sp));
    pools.push_back(&idx);
  }
  const std::size_t n = plan.subjects.size();
  if (n < 2) throw ProtocolError("evaluation needs at least 2 subjects with 15 sessions");

  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(mix_seed(config.seed, s));
    const auto& idx = *pools[s];
    std::vector<std::size_t> first(idx.begin(), idx.begin() + kEnrollmentPool);
    std::shuffle(first.begin(), first.end(), rng);
    first.resize(config.enrollment);
    std::sort(first.begin(), first.end());
    plan.subjects[s].enrollment = std::move(first);

    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < n; ++o) {
      if (o != s) others.push_back(o);
    }
    std::shuffle(others.begin(), others.end(), rng);
    const std::size_t count = config.impostors_per_subject ? config.impostors_per_subject : n - 1;
    for (std::size_t r = 0; r < count; ++r) {
      const auto& genuine = plan.subjects[others[r % others.size()]].genuine;
      plan.subjects[s].impostor.push_back(genuine[uniform_index(rng, genuine.size())]);
    }
  }
  return plan;
}

std::vector<ScoreSet> run_protocol_with(std::span<const KeystrokeSession> sessions,
                                        const ProtocolPlan& plan, const ProtocolConfig& config,
                                        const Embedder& embed) {
  std::vector<std::optional<Embedding>> cache(sessions.size());
  auto get = [&](std::size_t i) -> const Embedding& {
    if (!cache[i]) cache[i] = embed(sessions[i]);
    return *cache[i];
  };
  std::vector<ScoreSet> out;
  out.reserve(plan.subjects.size());
  for (const auto& sp : plan.subjects) {
    std::vector<Eigen::VectorXd> enrollment;
    for (auto i : sp.enrollment) enrollment.push_back(get(i));
    const auto scorer = fit(enrollment, config.scorer);
    ScoreSet set{sp.subject_id, {}, {}};
    for (auto i : sp.genuine) set.genuine.push_back(scorer.score(get(i)));
    for (auto i : sp.impostor) set.impostor.push_back(scorer.score(get(i)));
    out.push_back(std::move(set));
  }
  return out;
}

namespace {

std::vector<ScoreSet> run_cross(std::span<const KeystrokeSession> sessions, const ProtocolPlan& plan,
                                const EncoderModel& model, std::size_t length) {
  std::vector<std::optional<FeatureSequence>> cache(sessions.size());
  auto get = [&](std::size_t i) -> const FeatureSequence& {
    if (!cache[i]) cache[i] = vectorize(sessions[i], model.norm, length);
    return *cache[i];
  };
  std::vector<ScoreSet> out;
  for (const auto& sp : plan.subjects) {
    auto score = [&](std::size_t query) {
      double sum = 0.0;
      for (auto e : sp.enrollment) sum += encode_pair(get(e), get(query), model)(0);
      return sum / static_cast<double>(sp.enrollment.size());
    };
    ScoreSet set{sp.subject_id, {}, {}};
    for (auto i : sp.genuine) set.genuine.push_back(score(i));
    for (auto i : sp.impostor) set.impostor.push_back(score(i));
    out.push_back(std::move(set));
  }
  return out;
}

void check_length(const EncoderModel& model, std::size_t length) {
  if (length > model.config.max_len) {
    throw ConfigError("keystroke length " + std::to_string(length) + " exceeds the model's max_len " +
                      std::to_string(model.config.max_len));
  }
}

}  // namespace

std::vector<ScoreSet> run_protocol(std::span<const KeystrokeSession> sessions,
                                   const EncoderModel& model, const ProtocolConfig& config,
                                   std::vector<std::string>* warnings) {
  check_length(model, config.length);
  const auto plan = plan_protocol(sessions, config);
  if (warnings) warnings->insert(warnings->end(), plan.warnings.begin(), plan.warnings.end());
  if (model.config.mode == EncoderMode::Cross) return run_cross(sessions, plan, model, config.length);
  return run_protocol_with(sessions, plan, config, [&](const KeystrokeSession& s) {
    return encode(vectorize(s, model.norm, config.length), model);
  });
}

namespace {

struct Sweep {
  std::vector<double> thresholds, far, frr;
};

Sweep threshold_sweep(std::span<const double> genuine, std::span<const double> impostor) {
  if (genuine.empty() || impostor.empty()) {
    throw ArgumentError("EER needs non-empty genuine and impostor scores");
  }
  std::vector<double> g(genuine.begin(), genuine.end());
  std::vector<double> im(impostor.begin(), impostor.end());
  for (double v : g) {
    if (!std::isfinite(v)) throw NumericError("non-finite genuine score");
  }
  for (double v : im) {
    if (!std::isfinite(v)) throw NumericError("non-finite impostor score");
  }
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  std::vector<double> all = g;
  all.insert(all.end(), im.begin(), im.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  Sweep s;
  s.thresholds.push_back(all.front() - 1.0);
  s.thresholds.insert(s.thresholds.end(), all.begin(), all.end());
  s.thresholds.push_back(all.back() + 1.0);
  const double ng = static_cast<double>(g.size());
  const double ni = static_cast<double>(im.size());
  for (double t : s.thresholds) {
    const auto impostor_below = std::lower_bound(im.begin(), im.end(), t) - im.begin();
    const auto genuine_below = std::lower_bound(g.begin(), g.end(), t) - g.begin();
    s.far.push_back((ni - static_cast<double>(impostor_below)) / ni);
    s.frr.push_back(static_cast<double>(genuine_below) / ng);
  }
  return s;
}

}  // namespace

EerPoint eer_point(std::span<const double> genuine, std::span<const double> impostor) {
  const auto s = threshold_sweep(genuine, impostor);
  // FAR - FRR falls from 1 at the low sentinel to -1 at the high one.
  std::size_t j = 0;
  while (s.far[j] - s.frr[j] > 0.0) ++j;
  const double dj = s.far[j] - s.frr[j];
  if (dj == 0.0 || j == 0) return {s.far[j], s.thresholds[j]};
  const double dp = s.far[j - 1] - s.frr[j - 1];
  const double lambda = dp / (dp - dj);
  return {s.far[j - 1] + lambda * (s.far[j] - s.far[j - 1]),
          s.thresholds[j - 1] + lambda * (s.thresholds[j] - s.thresholds[j - 1])};
}

double eer(std::span<const double> genuine, std::span<const double> impostor) {
  return eer_point(genuine, impostor).eer;
}

std::vector<RocPoint> roc_curve(std::span<const double> genuine, std::span<const double> impostor) {
  const auto s = threshold_sweep(genuine, impostor);
  std::vector<RocPoint> out;
  for (std::size_t i = s.thresholds.size(); i-- > 0;) {
    out.push_back({s.far[i], 1.0 - s.frr[i], s.thresholds[i]});
  }
  return out;
}

double adaptive_eer(std::span<const ScoreSet> sets) {
  if (sets.empty()) throw ArgumentError("no score sets");
  double sum = 0.0;
  for (const auto& s : sets) sum += eer(s.genuine, s.impostor);
  return sum / static_cast<double>(sets.size());
}

GlobalEer global_eer(std::span<const ScoreSet> sets) {
  std::vector<double> g, im;
  for (const auto& s : sets) {
    g.insert(g.end(), s.genuine.begin(), s.genuine.end());
    im.insert(im.end(), s.impostor.begin(), s.impostor.end());
  }
  const auto point = eer_point(g, im);
  return {point.eer, point.threshold, roc_curve(g, im)};
}

EvalReport make_report(std::span<const ScoreSet> sets, nlohmann::json config,
                       std::vector<std::string> warnings) {
  EvalReport r;
  r.config = std::move(config);
  r.warnings = std::move(warnings);
  for (const auto& s : sets) {
    const double e = eer(s.genuine, s.impostor);
    r.per_subject.emplace_back(s.subject_id, e);
    if (e > 0.5) {
      r.warnings.push_back("subject " + s.subject_id + " EER " + std::to_string(e) +
                           " above 0.5; check score polarity");
    }
  }
  r.adaptive = adaptive_eer(sets);
  r.global = global_eer(sets);
  if (r.adaptive > 0.5 || r.global.eer > 0.5) {
    r.warnings.push_back("aggregate EER above 0.5; check score polarity");
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& [id, e] : per_subject) subjects.push_back({{"subject_id", id}, {"eer", e}});
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : global.roc) roc.push_back({p.far, p.tar});
  return {{"adaptive_eer", adaptive},
          {"global_eer", global.eer},
          {"global_threshold", global.threshold},
          {"per_subject", subjects},
          {"roc", roc},
          {"warnings", warnings},
          {"config", config}};
}

std::string EvalReport::roc_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "far,tar,threshold\n";
  for (const auto& p : global.roc) out << p.far << ',' << p.tar << ',' << p.threshold << '\n';
  return out.str();
}

nlohmann::json SweepTable::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"enrollment", r.enrollment},
                      {"length", r.length},
                      {"scorer", r.scorer},
                      {"adaptive_eer", r.adaptive},
                      {"global_eer", r.global}});
  }
  return {{"rows", rows_j}, {"warnings", warnings}, {"config", config}, {"config_hash", config_hash}};
}

std::string SweepTable::to_csv() const {
  std::ostringstream out;
  out << "enrollment,length,scorer,adaptive_eer,global_eer\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.6f,%.6f\n", r.enrollment, r.length, r.scorer.c_str(),
                  r.adaptive, r.global);
    out << buf;
  }
  return out.str();
}

SweepTable sweep(std::span<const KeystrokeSession> sessions, const EncoderModel& model,
                 std::span<const std::size_t> enrollments, std::span<const std::size_t> lengths,
                 std::span<const ScorerConfig> scorers, const ProtocolConfig& base,
                 const std::string& checkpoint_id) {
  SweepTable table;
  nlohmann::json scorer_j = nlohmann::json::array();
  for (const auto& s : scorers) scorer_j.push_back(scorer_config_to_json(s));
  table.config = {{"enrollments", std::vector<std::size_t>(enrollments.begin(), enrollments.end())},
                  {"lengths", std::vector<std::size_t>(lengths.begin(), lengths.end())},
                  {"scorers", scorer_j},
                  {"seed", base.seed},
                  {"impostors_per_subject", base.impostors_per_subject},
                  {"mode", to_string(model.config.mode)},
                  {"checkpoint", checkpoint_id}};
  table.config_hash = hex64(fnv1a64(table.config.dump()));

  const bool cross = model.config.mode == EncoderMode::Cross;
  for (const auto length : lengths) {
    check_length(model, length);
    // Embeddings depend only on L; share them across E and scorers.
    std::unordered_map<const KeystrokeSession*, Embedding> memo;
    const Embedder embed = [&](const KeystrokeSession& s) {
      auto it = memo.find(&s);
      if (it == memo.end()) {
        it = memo.emplace(&s, encode(vectorize(s, model.norm, length), model)).first;
      }
      return it->second;
    };
    for (const auto e : enrollments) {
      if (cross) {
        ProtocolConfig cfg = base;
        cfg.enrollment = e;
        cfg.length = length;
        cfg.scorer = ScorerConfig{};
        const auto plan = plan_protocol(sessions, cfg);
        const auto sets = run_cross(sessions, plan, model, length);
        table.rows.push_back({e, length, "p_similar", adaptive_eer(sets), global_eer(sets).eer});
        continue;
      }
      for (const auto& scorer : scorers) {
        ProtocolConfig cfg = base;
        cfg.enrollment = e;
        cfg.length = length;
        cfg.scorer = scorer;
        if (e < scorer.min_enrollment()) {
          table.warnings.push_back(std::string(to_string(scorer.kind)) + " undefined at E=" +
                                   std::to_string(e));
          table.rows.push_back({e, length, std::string(to_string(scorer.kind)),
                                std::numeric_limits<double>::quiet_NaN(),
                                std::numeric_limits<double>::quiet_NaN()});
          continue;
        }
        const auto plan = plan_protocol(sessions, cfg);
        const auto sets = run_protocol_with(sessions, plan, cfg, embed);
        table.rows.push_back({e, length, std::string(to_string(scorer.kind)), adaptive_eer(sets),
                              global_eer(sets).eer});
      }
    }
  }
  return table;
}

}  // namespace keydyn
