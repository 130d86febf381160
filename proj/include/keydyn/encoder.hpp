#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "keydyn/features.hpp"
#include "keydyn/random.hpp"

namespace keydyn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Embedding = Eigen::VectorXd;

enum class EncoderMode { Bi, Cross };
enum class NormPlacement { Post, Pre };

std::string_view to_string(EncoderMode mode) noexcept;
std::string_view to_string(NormPlacement norm) noexcept;
EncoderMode parse_encoder_mode(std::string_view text);
NormPlacement parse_norm_placement(std::string_view text);

/// Architecture hyperparameters. Defaults are the full-size model; the desk
/// profile shrinks hidden size and depth.
struct EncoderConfig {
  std::size_t max_len = 100;  // positional table rows
  std::size_t key_embed_dim = 16;
  std::size_t hidden = 256;
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t ffn_dim = 512;
  double dropout = 0.1;
  std::size_t out_dim = 64;
  EncoderMode mode = EncoderMode::Bi;
  NormPlacement norm = NormPlacement::Post;

  std::size_t head_dim() const noexcept { return hidden / heads; }
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr int kSpatialChannels = 5;
inline constexpr int kInputChannels = kTemporalChannels + kSpatialChannels;
inline constexpr std::size_t kKeyVocabulary = 256;

struct LayerWeights {
  Matrix wq, wk, wv, wo;
  RowVector bq, bk, bv, bo;
  RowVector ln1_gamma, ln1_beta;
  Matrix ffn_w1;
  RowVector ffn_b1;
  Matrix ffn_w2;
  RowVector ffn_b2;
  RowVector ln2_gamma, ln2_beta;
};

/// Every trainable tensor. Gradients and optimizer moments reuse this type.
struct EncoderWeights {
  Matrix key_embedding;   // 256 x key_embed_dim
  Matrix spatial_kernel;  // (2 * key_embed_dim) x 5; rows [0,K) tap i, [K,2K) tap i+1
  RowVector spatial_bias; // 5
  Matrix input_proj;      // 10 x hidden
  RowVector input_bias;
  Matrix position;        // max_len x hidden
  Matrix token_type;      // 2 x hidden, cross mode only
  std::vector<LayerWeights> layers;
  Matrix pool_proj;       // hidden x out_dim
  RowVector pool_bias;
  Matrix classifier;      // (2 * out_dim) x 2, cross mode only
  RowVector classifier_bias;
};

struct TensorView {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const noexcept { return rows * cols; }
};

struct ConstTensorView {
  std::string name;
  const double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const noexcept { return rows * cols; }
};

/// Tensors in canonical order (the checkpoint order).
std::vector<TensorView> tensor_views(EncoderWeights& weights);
std::vector<ConstTensorView> tensor_views(const EncoderWeights& weights);

EncoderWeights zero_weights(const EncoderConfig& config);
std::size_t parameter_count(const EncoderConfig& config);

std::vector<double> flatten(const EncoderWeights& weights);
void unflatten(std::span<const double> flat, EncoderWeights& weights);

/// Rounds every tensor to the nearest float32 so that checkpoints, which store
/// 32-bit floats, reproduce the in-memory model exactly.
void round_to_storage(EncoderWeights& weights);

struct EncoderModel {
  EncoderConfig config;
  EncoderWeights weights;
  NormStats norm;
  std::size_t sequence_length = 50;  // default inference length
};

/// Truncated-normal(0.02) matrices, zero biases, unit layer-norm scales.
EncoderModel init_model(const EncoderConfig& config, const NormStats& norm,
                        std::size_t sequence_length, std::uint64_t seed);

/// Learned spatial channels: width-2 convolution over keycode embeddings.
/// Row i mixes keys i and i+1; rows from the last real key onward are zero.
Matrix spatial_features(std::span<const int> keycodes, const std::vector<bool>& mask,
                        const EncoderModel& model);

/// Dropout is active only when train_mode is set and rng is non-null.
Embedding encode(const FeatureSequence& features, const EncoderModel& model,
                 bool train_mode = false, Rng* rng = nullptr);

/// [P(similar), P(dissimilar)] for a (source, target) pair.
Eigen::Vector2d encode_pair(const FeatureSequence& source, const FeatureSequence& target,
                            const EncoderModel& model, bool train_mode = false,
                            Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// Traced forward passes and reverse-mode gradients.

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

struct AttentionCache {
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, N x N
  Matrix context;             // concatenated heads, N x hidden
};

struct LayerTrace {
  Matrix input;
  Matrix attn_in;  // input to attention (LN1(x) in pre-norm, x in post-norm)
  AttentionCache attention;
  Matrix attn_dropout;
  LayerNormCache ln1;
  Matrix ffn_in;
  Matrix ffn_pre;  // before gelu
  Matrix ffn_act;  // after gelu
  Matrix ffn_dropout;
  LayerNormCache ln2;
};

struct StackTrace {
  std::vector<bool> mask;
  Matrix input_dropout;
  std::vector<LayerTrace> layers;
  Matrix output;
};

struct SegmentTrace {
  std::vector<int> keycodes;
  std::vector<bool> mask;
  std::size_t length = 0;
  Matrix inputs;  // L x 10, temporal | spatial
};

struct BiEncoderTrace {
  SegmentTrace segment;
  StackTrace stack;
  RowVector pooled;
  Embedding embedding;
};

struct PairTrace {
  SegmentTrace source;
  SegmentTrace target;
  StackTrace stack;
  RowVector pooled_source, pooled_target;
  RowVector joint;  // [z_source, z_target]
  Eigen::Vector2d logits;
  Eigen::Vector2d probs;
};

BiEncoderTrace encode_traced(const FeatureSequence& features, const EncoderModel& model,
                             bool train_mode, Rng* rng);

/// Accumulates d(loss)/d(theta) into grads given d(loss)/d(embedding).
void backward(const BiEncoderTrace& trace, const EncoderModel& model,
              const Embedding& d_embedding, EncoderWeights& grads);

PairTrace encode_pair_traced(const FeatureSequence& source, const FeatureSequence& target,
                             const EncoderModel& model, bool train_mode, Rng* rng);

/// Accumulates gradients given d(loss)/d(logits).
void backward_pair(const PairTrace& trace, const EncoderModel& model,
                   const Eigen::Vector2d& d_logits, EncoderWeights& grads);

// ---------------------------------------------------------------------------
// Building blocks, exposed for unit tests.
namespace ops {

inline constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm(const Matrix& x, const RowVector& gamma, const RowVector& beta,
                  LayerNormCache& cache);
Matrix layer_norm_backward(const Matrix& dy, const RowVector& gamma, const LayerNormCache& cache,
                           RowVector& dgamma, RowVector& dbeta);

Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

/// softmax(q k^T / sqrt(d)) with masked keys given exactly zero weight.
Matrix attention_logits(const Matrix& q, const Matrix& k);
Matrix masked_softmax(const Matrix& logits, const std::vector<bool>& key_mask);

Matrix multi_head_attention(const Matrix& x, const LayerWeights& w,
                            const std::vector<bool>& key_mask, std::size_t heads,
                            AttentionCache& cache);
Matrix multi_head_attention_backward(const Matrix& x, const LayerWeights& w,
                                     const AttentionCache& cache, std::size_t heads,
                                     const Matrix& d_out, LayerWeights& grads);

}  // namespace ops

}  // namespace keydyn
