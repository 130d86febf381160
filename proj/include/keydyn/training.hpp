#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keydyn/dataset.hpp"
#include "keydyn/encoder.hpp"
#include "keydyn/losses.hpp"

namespace keydyn {

struct TrainConfig {
  std::size_t steps = 2000;
  // Triplet: triples per batch. WDCL: positive pairs (capped at the number of
  // eligible subjects). Softmax: pairs, half positive and half negative.
  std::size_t batch_size = 32;
  // Batch-all: subjects x samples per subject.
  std::size_t subjects_per_batch = 8;
  std::size_t samples_per_subject = 4;
  double lr = 1e-3;
  std::size_t decay_every = 667;
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  LossConfig loss;
  Metric metric = Metric::Cosine;
  std::size_t sequence_length = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables gradient clipping
  std::size_t checkpoint_every = 0;

  void validate() const;
};

struct Profile {
  std::string name;
  EncoderConfig encoder;
  TrainConfig train;
};

/// Small model and short schedule that trains in minutes on one CPU core.
Profile desk_profile();
/// Full-size hyperparameters (6 x 256 transformer, 75k steps, batch 512).
Profile paper_profile();
Profile profile_by_name(std::string_view name);

/// Step decay: lr * factor^(step / decay_every).
double learning_rate_at(const TrainConfig& config, std::size_t step);

/// Training sessions grouped by subject.
class TrainingSet {
 public:
  explicit TrainingSet(std::span<const KeystrokeSession> sessions);

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t subject_count() const noexcept { return by_subject_.size(); }
  int label(std::size_t session) const { return labels_.at(session); }
  const std::vector<std::size_t>& sessions_of(std::size_t subject) const {
    return by_subject_.at(subject);
  }
  /// Subjects with at least `min_sessions` sessions.
  std::vector<std::size_t> eligible(std::size_t min_sessions = 2) const;

 private:
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> by_subject_;
};

/// Session indices to encode for one optimization step.
///   triplet:   [a0, p0, n0, a1, p1, n1, ...]
///   batch_all: subjects_per_batch groups of samples_per_subject, labels = subject
///   wdcl:      [x0, y0, x1, y1, ...], one pair per distinct subject
///   softmax:   [s0, t0, s1, t1, ...], labels = 1 for same-subject pairs
struct BatchSpec {
  LossKind kind = LossKind::BatchAllTriplet;
  std::vector<std::size_t> items;
  std::vector<int> labels;
};

BatchSpec sample_batch(const TrainingSet& data, const TrainConfig& config, Rng& rng);

class Adam {
 public:
  Adam(std::size_t size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::span<double> params, std::span<const double> grads, double lr);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct BatchGradients {
  double loss = 0.0;
  EncoderWeights grads;
};

/// Forward, loss and backward for one batch. Dropout streams are seeded per
/// batch item from dropout_seed, so the result does not depend on evaluation order.
BatchGradients compute_batch_gradients(const EncoderModel& model,
                                       std::span<const FeatureSequence> features,
                                       const BatchSpec& batch, const TrainConfig& config,
                                       std::uint64_t dropout_seed, bool train_mode);

struct TrainReport {
  std::vector<double> losses;
  double wall_ms = 0.0;
  std::filesystem::path checkpoint;
};

struct TrainOptions {
  std::filesystem::path out_dir;          // empty: do not write checkpoints
  std::ostream* telemetry = nullptr;      // JSON lines {step, loss, lr, wall_ms}
  bool deterministic_telemetry = false;   // write wall_ms as 0
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  EncoderModel model;
  TrainReport report;
};

/// Fits normalization on `sessions`, initializes the model and runs Adam with
/// the step-decay schedule. Throws NumericError on a non-finite loss.
TrainResult train(std::span<const KeystrokeSession> sessions, const EncoderConfig& encoder,
                  const TrainConfig& config, const TrainOptions& options = {});

nlohmann::json train_config_to_json(const TrainConfig& config);

}  // namespace keydyn
