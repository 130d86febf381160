#include "keydyn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>

#include "keydyn/checkpoint.hpp"
#include "keydyn/errors.hpp"

namespace keydyn {

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (decay_every == 0) throw ConfigError("decay_every must be positive");
  if (sequence_length < 2) throw ConfigError("sequence length must be at least 2");
  if (loss.kind == LossKind::BatchAllTriplet &&
      (subjects_per_batch < 2 || samples_per_subject < 2)) {
    throw ConfigError("batch-all needs at least 2 subjects x 2 samples");
  }
  if (loss.kind == LossKind::Wdcl && metric != Metric::Cosine) {
    throw ConfigError("wdcl is defined on cosine similarity; use --metric cosine");
  }
  loss.validate();
}

Profile desk_profile() {
  Profile p;
  p.name = "desk";
  p.encoder.max_len = 100;
  p.encoder.hidden = 64;
  p.encoder.layers = 2;
  p.encoder.heads = 4;
  p.encoder.ffn_dim = 128;
  p.train.steps = 2000;
  p.train.batch_size = 32;
  p.train.subjects_per_batch = 8;
  p.train.samples_per_subject = 4;
  p.train.decay_every = 667;  // 75k/25k schedule shape scaled to 2k steps
  return p;
}

Profile paper_profile() {
  Profile p;
  p.name = "paper";
  p.train.steps = 75000;
  p.train.batch_size = 512;
  p.train.subjects_per_batch = 64;
  p.train.samples_per_subject = 8;
  p.train.decay_every = 25000;
  return p;
}

Profile profile_by_name(std::string_view name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  throw ConfigError("unknown profile '" + std::string(name) + "'");
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const auto drops = static_cast<double>(step / config.decay_every);
  return config.lr * std::pow(config.decay_factor, drops);
}

TrainingSet::TrainingSet(std::span<const KeystrokeSession> sessions) {
  std::map<std::string, std::size_t> ids;
  labels_.reserve(sessions.size());
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    auto [it, inserted] = ids.try_emplace(sessions[i].subject_id, by_subject_.size());
    if (inserted) by_subject_.emplace_back();
    by_subject_[it->second].push_back(i);
    labels_.push_back(static_cast<int>(it->second));
  }
}

std::vector<std::size_t> TrainingSet::eligible(std::size_t min_sessions) const {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < by_subject_.size(); ++s) {
    if (by_subject_[s].size() >= min_sessions) out.push_back(s);
  }
  return out;
}

namespace {

// Two distinct sessions of one subject.
std::pair<std::size_t, std::size_t> draw_pair(const std::vector<std::size_t>& pool, Rng& rng) {
  const auto i = uniform_index(rng, pool.size());
  auto j = uniform_index(rng, pool.size() - 1);
  if (j >= i) ++j;
  return {pool[i], pool[j]};
}

std::size_t draw_other_subject(std::size_t n_subjects, std::size_t exclude, Rng& rng) {
  auto s = uniform_index(rng, n_subjects - 1);
  if (s >= exclude) ++s;
  return s;
}

std::vector<std::size_t> draw_distinct(const std::vector<std::size_t>& pool, std::size_t n,
                                       Rng& rng) {
  auto copy = pool;
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + uniform_index(rng, copy.size() - i);
    std::swap(copy[i], copy[j]);
  }
  copy.resize(n);
  return copy;
}

}  // namespace

BatchSpec sample_batch(const TrainingSet& data, const TrainConfig& config, Rng& rng) {
  const auto eligible = data.eligible(2);
  if (eligible.empty()) throw ArgumentError("no subject has the 2 sessions needed for positives");
  const auto n_subjects = data.subject_count();

  BatchSpec batch;
  batch.kind = config.loss.kind;
  switch (config.loss.kind) {
    case LossKind::Triplet: {
      if (n_subjects < 2) throw ArgumentError("triplets need at least 2 subjects");
      for (std::size_t t = 0; t < config.batch_size; ++t) {
        const auto subject = eligible[uniform_index(rng, eligible.size())];
        const auto [a, p] = draw_pair(data.sessions_of(subject), rng);
        const auto& negatives = data.sessions_of(draw_other_subject(n_subjects, subject, rng));
        batch.items.insert(batch.items.end(), {a, p, negatives[uniform_index(rng, negatives.size())]});
      }
      break;
    }
    case LossKind::BatchAllTriplet: {
      if (eligible.size() < config.subjects_per_batch) {
        throw ArgumentError("batch-all needs " + std::to_string(config.subjects_per_batch) +
                            " subjects with 2+ sessions, have " + std::to_string(eligible.size()));
      }
      for (const auto subject : draw_distinct(eligible, config.subjects_per_batch, rng)) {
        const auto& pool = data.sessions_of(subject);
        std::vector<std::size_t> picks;
        if (pool.size() >= config.samples_per_subject) {
          picks = draw_distinct(pool, config.samples_per_subject, rng);
        } else {
          picks = pool;
          while (picks.size() < config.samples_per_subject) {
            picks.push_back(pool[uniform_index(rng, pool.size())]);
          }
        }
        for (auto s : picks) {
          batch.items.push_back(s);
          batch.labels.push_back(static_cast<int>(subject));
        }
      }
      break;
    }
    case LossKind::Wdcl: {
      const auto pairs = std::min(config.batch_size, eligible.size());
      if (pairs < 2) throw ArgumentError("wdcl needs at least 2 subjects with 2+ sessions");
      for (const auto subject : draw_distinct(eligible, pairs, rng)) {
        const auto [x, y] = draw_pair(data.sessions_of(subject), rng);
        batch.items.insert(batch.items.end(), {x, y});
      }
      break;
    }
    case LossKind::Softmax: {
      if (n_subjects < 2) throw ArgumentError("negative pairs need at least 2 subjects");
      const std::size_t positives = config.batch_size / 2;
      for (std::size_t i = 0; i < config.batch_size; ++i) {
        if (i < positives) {
          const auto subject = eligible[uniform_index(rng, eligible.size())];
          const auto [s, t] = draw_pair(data.sessions_of(subject), rng);
          batch.items.insert(batch.items.end(), {s, t});
          batch.labels.push_back(1);
        } else {
          const auto a = uniform_index(rng, n_subjects);
          const auto b = draw_other_subject(n_subjects, a, rng);
          const auto& pa = data.sessions_of(a);
          const auto& pb = data.sessions_of(b);
          batch.items.insert(batch.items.end(), {pa[uniform_index(rng, pa.size())],
                                                 pb[uniform_index(rng, pb.size())]});
          batch.labels.push_back(0);
        }
      }
      break;
    }
  }
  return batch;
}

Adam::Adam(std::size_t size, double beta1, double beta2, double eps)
    : m_(size, 0.0), v_(size, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ArgumentError("Adam state size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
  }
}

BatchGradients compute_batch_gradients(const EncoderModel& model,
                                       std::span<const FeatureSequence> features,
                                       const BatchSpec& batch, const TrainConfig& config,
                                       std::uint64_t dropout_seed, bool train_mode) {
  BatchGradients out{0.0, zero_weights(model.config)};
  auto item_rng = [&](std::size_t i) { return Rng(mix_seed(dropout_seed, i)); };

  if (batch.kind == LossKind::Softmax) {
    const std::size_t pairs = batch.items.size() / 2;
    const double scale = 1.0 / static_cast<double>(pairs);
    for (std::size_t i = 0; i < pairs; ++i) {
      Rng rng = item_rng(i);
      const auto trace = encode_pair_traced(features[batch.items[2 * i]],
                                            features[batch.items[2 * i + 1]], model, train_mode,
                                            &rng);
      Eigen::Vector2d d_logits;
      out.loss += scale * softmax_cross_entropy(trace.logits, batch.labels[i], d_logits);
      backward_pair(trace, model, d_logits * scale, out.grads);
    }
    if (!std::isfinite(out.loss)) throw NumericError("non-finite softmax loss");
    return out;
  }

  // Traces are kept for moderate batches; larger batches re-run the forward
  // pass (same dropout stream) during backward to bound memory.
  const bool keep_traces = batch.items.size() <= 256;
  std::vector<BiEncoderTrace> traces;
  std::vector<Eigen::VectorXd> embeddings;
  embeddings.reserve(batch.items.size());
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    Rng rng = item_rng(i);
    auto trace = encode_traced(features[batch.items[i]], model, train_mode, &rng);
    embeddings.push_back(trace.embedding);
    if (keep_traces) traces.push_back(std::move(trace));
  }

  LossResult loss;
  switch (batch.kind) {
    case LossKind::Triplet:
      loss = triplet_batch_loss(embeddings, config.metric, config.loss.margin);
      break;
    case LossKind::BatchAllTriplet:
      loss = batch_all_triplet_loss(embeddings, batch.labels, config.metric, config.loss.margin,
                                    config.loss.reduction);
      break;
    case LossKind::Wdcl:
      loss = wdcl_loss(embeddings, config.loss);
      break;
    case LossKind::Softmax:
      break;
  }
  if (!std::isfinite(loss.value)) throw NumericError("non-finite loss");
  out.loss = loss.value;

  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    if (loss.gradients[i].isZero(0.0)) continue;
    if (keep_traces) {
      backward(traces[i], model, loss.gradients[i], out.grads);
    } else {
      Rng rng = item_rng(i);
      backward(encode_traced(features[batch.items[i]], model, train_mode, &rng), model,
               loss.gradients[i], out.grads);
    }
  }
  return out;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"subjects_per_batch", c.subjects_per_batch},
          {"samples_per_subject", c.samples_per_subject},
          {"lr", c.lr},
          {"decay_every", c.decay_every},
          {"decay_factor", c.decay_factor},
          {"seed", c.seed},
          {"loss", to_string(c.loss.kind)},
          {"margin", c.loss.margin},
          {"wdcl_k", c.loss.wdcl_k},
          {"wdcl_negative_variant", c.loss.wdcl_negative_variant},
          {"dcl_literature_form", c.loss.dcl_literature_form},
          {"reduction", to_string(c.loss.reduction)},
          {"metric", to_string(c.metric)},
          {"sequence_length", c.sequence_length},
          {"clip_norm", c.clip_norm}};
}

TrainResult train(std::span<const KeystrokeSession> sessions, const EncoderConfig& encoder,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  encoder.validate();
  if (encoder.mode == EncoderMode::Cross && config.loss.kind != LossKind::Softmax) {
    throw ConfigError("the cross-encoder trains with the softmax loss");
  }
  if (encoder.mode == EncoderMode::Bi && config.loss.kind == LossKind::Softmax) {
    throw ConfigError("the softmax loss requires the cross-encoder");
  }
  if (config.sequence_length > encoder.max_len) {
    throw ConfigError("sequence length exceeds the positional table");
  }
  if (sessions.empty()) throw ArgumentError("no training sessions");

  const auto started = std::chrono::steady_clock::now();
  const auto norm = fit_norm_stats(sessions, config.sequence_length);
  TrainResult result{init_model(encoder, norm, config.sequence_length, mix_seed(config.seed, 1)),
                     {}};
  auto& model = result.model;

  std::vector<FeatureSequence> features;
  features.reserve(sessions.size());
  for (const auto& s : sessions) features.push_back(vectorize(s, norm, config.sequence_length));

  const TrainingSet data(sessions);
  Rng batch_rng(mix_seed(config.seed, 2));
  Adam adam(parameter_count(encoder), config.adam_beta1, config.adam_beta2, config.adam_eps);
  const auto metadata = nlohmann::json{{"train", train_config_to_json(config)}};

  for (std::size_t step = 0; step < config.steps; ++step) {
    const double lr = learning_rate_at(config, step);
    const auto batch = sample_batch(data, config, batch_rng);
    BatchGradients g;
    try {
      g = compute_batch_gradients(model, features, batch, config,
                                  mix_seed(config.seed, 1000 + step), true);
    } catch (const NumericError& ex) {
      throw NumericError("step " + std::to_string(step) + " loss " +
                         std::string(to_string(config.loss.kind)) + " lr " + std::to_string(lr) +
                         ": " + ex.what());
    }

    auto params = flatten(model.weights);
    auto grads = flatten(g.grads);
    if (config.clip_norm > 0.0) {
      double sq = 0.0;
      for (double v : grads) sq += v * v;
      const double norm_g = std::sqrt(sq);
      if (norm_g > config.clip_norm) {
        for (auto& v : grads) v *= config.clip_norm / norm_g;
      }
    }
    adam.step(params, grads, lr);
    unflatten(params, model.weights);
    round_to_storage(model.weights);

    result.report.losses.push_back(g.loss);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
            .count();
    if (options.telemetry) {
      *options.telemetry << nlohmann::json{{"step", step},
                                           {"loss", g.loss},
                                           {"lr", lr},
                                           {"wall_ms", options.deterministic_telemetry ? 0.0 : wall_ms}}
                                .dump()
                         << '\n';
    }
    if (options.on_step) options.on_step(step, g.loss);
    if (!options.out_dir.empty() && config.checkpoint_every > 0 &&
        (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps) {
      save_checkpoint(model, options.out_dir, metadata);
    }
  }

  result.report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  if (!options.out_dir.empty()) {
    save_checkpoint(model, options.out_dir, metadata);
    result.report.checkpoint = options.out_dir;
  }
  return result;
}

}  // namespace keydyn
