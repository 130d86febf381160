#include "keydyn/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "keydyn/errors.hpp"

namespace keydyn {

std::string_view to_string(EncoderMode mode) noexcept {
  return mode == EncoderMode::Bi ? "bi" : "cross";
}

std::string_view to_string(NormPlacement norm) noexcept {
  return norm == NormPlacement::Post ? "post" : "pre";
}

EncoderMode parse_encoder_mode(std::string_view text) {
  if (text == "bi") return EncoderMode::Bi;
  if (text == "cross") return EncoderMode::Cross;
  throw ConfigError("unknown encoder mode '" + std::string(text) + "'");
}

NormPlacement parse_norm_placement(std::string_view text) {
  if (text == "post") return NormPlacement::Post;
  if (text == "pre") return NormPlacement::Pre;
  throw ConfigError("unknown norm placement '" + std::string(text) + "'");
}

void EncoderConfig::validate() const {
  if (max_len < 2 || key_embed_dim == 0 || hidden == 0 || layers == 0 || heads == 0 ||
      ffn_dim == 0 || out_dim == 0) {
    throw ConfigError("encoder dimensions must be positive (max_len >= 2)");
  }
  if (hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout must be in [0, 1)");
  }
}

namespace {

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

template <class Weights, class View, class Fn>
void visit_tensors(Weights& w, Fn&& fn) {
  fn("key_embedding", w.key_embedding);
  fn("spatial.kernel", w.spatial_kernel);
  fn("spatial.bias", w.spatial_bias);
  fn("input.weight", w.input_proj);
  fn("input.bias", w.input_bias);
  fn("position", w.position);
  if (w.token_type.size() > 0) fn("token_type", w.token_type);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "attn.wq", l.wq);
    fn(p + "attn.bq", l.bq);
    fn(p + "attn.wk", l.wk);
    fn(p + "attn.bk", l.bk);
    fn(p + "attn.wv", l.wv);
    fn(p + "attn.bv", l.bv);
    fn(p + "attn.wo", l.wo);
    fn(p + "attn.bo", l.bo);
    fn(p + "ln1.gamma", l.ln1_gamma);
    fn(p + "ln1.beta", l.ln1_beta);
    fn(p + "ffn.w1", l.ffn_w1);
    fn(p + "ffn.b1", l.ffn_b1);
    fn(p + "ffn.w2", l.ffn_w2);
    fn(p + "ffn.b2", l.ffn_b2);
    fn(p + "ln2.gamma", l.ln2_gamma);
    fn(p + "ln2.beta", l.ln2_beta);
  }
  fn("pool.weight", w.pool_proj);
  fn("pool.bias", w.pool_bias);
  if (w.classifier.size() > 0) {
    fn("classifier.weight", w.classifier);
    fn("classifier.bias", w.classifier_bias);
  }
}

}  // namespace

std::vector<TensorView> tensor_views(EncoderWeights& weights) {
  std::vector<TensorView> out;
  visit_tensors<EncoderWeights, TensorView>(weights, [&](const std::string& name, auto& t) {
    out.push_back(TensorView{name, t.data(), t.rows(), t.cols()});
  });
  return out;
}

std::vector<ConstTensorView> tensor_views(const EncoderWeights& weights) {
  std::vector<ConstTensorView> out;
  visit_tensors<const EncoderWeights, ConstTensorView>(
      weights, [&](const std::string& name, const auto& t) {
        out.push_back(ConstTensorView{name, t.data(), t.rows(), t.cols()});
      });
  return out;
}

EncoderWeights zero_weights(const EncoderConfig& c) {
  c.validate();
  const auto H = idx(c.hidden), F = idx(c.ffn_dim), K = idx(c.key_embed_dim),
             O = idx(c.out_dim);
  EncoderWeights w;
  w.key_embedding = Matrix::Zero(idx(kKeyVocabulary), K);
  w.spatial_kernel = Matrix::Zero(2 * K, kSpatialChannels);
  w.spatial_bias = RowVector::Zero(kSpatialChannels);
  w.input_proj = Matrix::Zero(kInputChannels, H);
  w.input_bias = RowVector::Zero(H);
  w.position = Matrix::Zero(idx(c.max_len), H);
  if (c.mode == EncoderMode::Cross) w.token_type = Matrix::Zero(2, H);
  w.layers.resize(c.layers);
  for (auto& l : w.layers) {
    l.wq = l.wk = l.wv = l.wo = Matrix::Zero(H, H);
    l.bq = l.bk = l.bv = l.bo = RowVector::Zero(H);
    l.ln1_gamma = l.ln1_beta = l.ln2_gamma = l.ln2_beta = RowVector::Zero(H);
    l.ffn_w1 = Matrix::Zero(H, F);
    l.ffn_b1 = RowVector::Zero(F);
    l.ffn_w2 = Matrix::Zero(F, H);
    l.ffn_b2 = RowVector::Zero(H);
  }
  w.pool_proj = Matrix::Zero(H, O);
  w.pool_bias = RowVector::Zero(O);
  if (c.mode == EncoderMode::Cross) {
    w.classifier = Matrix::Zero(2 * O, 2);
    w.classifier_bias = RowVector::Zero(2);
  }
  return w;
}

std::size_t parameter_count(const EncoderConfig& config) {
  const auto w = zero_weights(config);
  std::size_t n = 0;
  for (const auto& t : tensor_views(w)) n += static_cast<std::size_t>(t.size());
  return n;
}

std::vector<double> flatten(const EncoderWeights& weights) {
  std::vector<double> out;
  for (const auto& t : tensor_views(weights)) out.insert(out.end(), t.data, t.data + t.size());
  return out;
}

void unflatten(std::span<const double> flat, EncoderWeights& weights) {
  std::size_t off = 0;
  for (auto& t : tensor_views(weights)) {
    const auto n = static_cast<std::size_t>(t.size());
    if (off + n > flat.size()) throw ArgumentError("flat parameter vector too short");
    std::copy_n(flat.data() + off, n, t.data);
    off += n;
  }
  if (off != flat.size()) throw ArgumentError("flat parameter vector too long");
}

void round_to_storage(EncoderWeights& weights) {
  for (auto& t : tensor_views(weights)) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t.data[i] = static_cast<double>(static_cast<float>(t.data[i]));
    }
  }
}

EncoderModel init_model(const EncoderConfig& config, const NormStats& norm,
                        std::size_t sequence_length, std::uint64_t seed) {
  if (sequence_length < 2 || sequence_length > config.max_len) {
    throw ConfigError("sequence length must be in [2, max_len]");
  }
  EncoderModel model{config, zero_weights(config), norm, sequence_length};
  Rng rng(seed);
  auto trunc_normal = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double v;
      do {
        v = normal(rng, 0.0, 1.0);
      } while (std::abs(v) > 2.0);
      m.data()[i] = 0.02 * v;
    }
  };
  auto& w = model.weights;
  trunc_normal(w.key_embedding);
  trunc_normal(w.spatial_kernel);
  trunc_normal(w.input_proj);
  trunc_normal(w.position);
  if (w.token_type.size() > 0) trunc_normal(w.token_type);
  for (auto& l : w.layers) {
    trunc_normal(l.wq);
    trunc_normal(l.wk);
    trunc_normal(l.wv);
    trunc_normal(l.wo);
    trunc_normal(l.ffn_w1);
    trunc_normal(l.ffn_w2);
    l.ln1_gamma.setOnes();
    l.ln2_gamma.setOnes();
  }
  trunc_normal(w.pool_proj);
  if (w.classifier.size() > 0) trunc_normal(w.classifier);
  round_to_storage(w);
  return model;
}

// ---------------------------------------------------------------------------
namespace ops {

Matrix layer_norm(const Matrix& x, const RowVector& gamma, const RowVector& beta,
                  LayerNormCache& cache) {
  const auto n = x.rows();
  const auto h = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.inv_std.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / h;
    const double var = (x.row(r).array() - mean).square().sum() / h;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
  }
  Matrix y = cache.xhat.array().rowwise() * gamma.array();
  y.rowwise() += beta;
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const RowVector& gamma, const LayerNormCache& cache,
                           RowVector& dgamma, RowVector& dbeta) {
  dbeta += dy.colwise().sum();
  dgamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  const Matrix dxhat = dy.array().rowwise() * gamma.array();
  const auto h = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / h;
    const double mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / h;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return dy.binaryExpr(x, [](double g, double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    return g * (cdf + v * pdf);
  });
}

Matrix attention_logits(const Matrix& q, const Matrix& k) {
  return (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
}

Matrix masked_softmax(const Matrix& logits, const std::vector<bool>& key_mask) {
  Matrix p = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (key_mask[static_cast<std::size_t>(c)]) mx = std::max(mx, logits(r, c));
    }
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (key_mask[static_cast<std::size_t>(c)]) {
        p(r, c) = std::exp(logits(r, c) - mx);
        sum += p(r, c);
      }
    }
    p.row(r) /= sum;
  }
  return p;
}

Matrix multi_head_attention(const Matrix& x, const LayerWeights& w,
                            const std::vector<bool>& key_mask, std::size_t heads,
                            AttentionCache& cache) {
  cache.q = (x * w.wq).rowwise() + w.bq;
  cache.k = (x * w.wk).rowwise() + w.bk;
  cache.v = (x * w.wv).rowwise() + w.bv;
  const auto d = cache.q.cols() / static_cast<Eigen::Index>(heads);
  cache.context.resize(x.rows(), cache.q.cols());
  cache.probs.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * d;
    cache.probs[h] = masked_softmax(
        attention_logits(cache.q.middleCols(off, d), cache.k.middleCols(off, d)), key_mask);
    cache.context.middleCols(off, d).noalias() = cache.probs[h] * cache.v.middleCols(off, d);
  }
  Matrix out = cache.context * w.wo;
  out.rowwise() += w.bo;
  return out;
}

Matrix multi_head_attention_backward(const Matrix& x, const LayerWeights& w,
                                     const AttentionCache& cache, std::size_t heads,
                                     const Matrix& d_out, LayerWeights& g) {
  g.wo.noalias() += cache.context.transpose() * d_out;
  g.bo += d_out.colwise().sum();
  const Matrix d_ctx = d_out * w.wo.transpose();

  const auto d = cache.q.cols() / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix dq(cache.q.rows(), cache.q.cols());
  Matrix dk(cache.k.rows(), cache.k.cols());
  Matrix dv(cache.v.rows(), cache.v.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * d;
    const Matrix& p = cache.probs[h];
    const auto d_head = d_ctx.middleCols(off, d);
    const Matrix dp = d_head * cache.v.middleCols(off, d).transpose();
    dv.middleCols(off, d).noalias() = p.transpose() * d_head;
    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    const Matrix ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scale;
    dq.middleCols(off, d).noalias() = ds * cache.k.middleCols(off, d);
    dk.middleCols(off, d).noalias() = ds.transpose() * cache.q.middleCols(off, d);
  }
  g.wq.noalias() += x.transpose() * dq;
  g.wk.noalias() += x.transpose() * dk;
  g.wv.noalias() += x.transpose() * dv;
  g.bq += dq.colwise().sum();
  g.bk += dk.colwise().sum();
  g.bv += dv.colwise().sum();
  Matrix dx = dq * w.wq.transpose();
  dx.noalias() += dk * w.wk.transpose();
  dx.noalias() += dv * w.wv.transpose();
  return dx;
}

}  // namespace ops

// ---------------------------------------------------------------------------
namespace {

Matrix make_dropout(Eigen::Index rows, Eigen::Index cols, double rate, bool active, Rng* rng) {
  if (!active || rate <= 0.0 || rng == nullptr) return Matrix();
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = uniform01(*rng) < rate ? 0.0 : keep;
  }
  return m;
}

Matrix apply_mask(const Matrix& x, const Matrix& mask) {
  if (mask.size() == 0) return x;
  return x.cwiseProduct(mask);
}

std::size_t check_mask(const std::vector<bool>& mask) {
  std::size_t n = 0;
  for (bool b : mask) n += b ? 1 : 0;
  if (n == 0) throw ArgumentError("input sequence is fully masked");
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) throw ArgumentError("mask must be a prefix of real tokens");
  }
  return n;
}

void check_features(const FeatureSequence& f, const EncoderModel& model) {
  if (f.max_len() > model.config.max_len) {
    throw ArgumentError("sequence length " + std::to_string(f.max_len()) +
                        " exceeds positional table " + std::to_string(model.config.max_len));
  }
  if (f.values.rows() != idx(f.max_len()) || f.keycodes.size() != f.max_len()) {
    throw ArgumentError("feature sequence shape mismatch");
  }
  check_mask(f.mask);
  for (int k : f.keycodes) {
    if (k < 0 || k > 255) throw ArgumentError("keycode outside 0-255");
  }
}

SegmentTrace build_segment(const FeatureSequence& f, const EncoderModel& model) {
  SegmentTrace s;
  s.keycodes = f.keycodes;
  s.mask = f.mask;
  s.length = check_mask(f.mask);
  s.inputs.resize(idx(f.max_len()), kInputChannels);
  s.inputs.leftCols(kTemporalChannels) = f.values;
  s.inputs.rightCols(kSpatialChannels) = spatial_features(f.keycodes, f.mask, model);
  return s;
}

Matrix embed_segment(const SegmentTrace& s, const EncoderModel& model, int token_type) {
  const auto& w = model.weights;
  const auto L = s.inputs.rows();
  Matrix h = s.inputs * w.input_proj;
  h.rowwise() += w.input_bias;
  h += w.position.topRows(L);
  if (token_type >= 0) h.rowwise() += w.token_type.row(token_type);
  return h;
}

void segment_backward(const SegmentTrace& s, const Matrix& dh, const EncoderModel& model,
                      int token_type, EncoderWeights& g) {
  const auto& w = model.weights;
  const auto L = s.inputs.rows();
  g.position.topRows(L) += dh;
  if (token_type >= 0) g.token_type.row(token_type) += dh.colwise().sum();
  g.input_bias += dh.colwise().sum();
  g.input_proj.noalias() += s.inputs.transpose() * dh;
  const Matrix dx = dh * w.input_proj.transpose();
  const Matrix ds = dx.rightCols(kSpatialChannels);

  // Spatial convolution backward.
  const auto K = w.key_embedding.cols();
  const auto tap0 = w.spatial_kernel.topRows(K);
  const auto tap1 = w.spatial_kernel.bottomRows(K);
  for (std::size_t i = 0; i + 1 < s.length; ++i) {
    const auto r = idx(i);
    const auto k0 = s.keycodes[i];
    const auto k1 = s.keycodes[i + 1];
    const auto dsr = ds.row(r);
    g.spatial_bias += dsr;
    g.spatial_kernel.topRows(K).noalias() += w.key_embedding.row(k0).transpose() * dsr;
    g.spatial_kernel.bottomRows(K).noalias() += w.key_embedding.row(k1).transpose() * dsr;
    g.key_embedding.row(k0).noalias() += dsr * tap0.transpose();
    g.key_embedding.row(k1).noalias() += dsr * tap1.transpose();
  }
}

StackTrace run_stack(Matrix h, const std::vector<bool>& mask, const EncoderModel& model,
                     bool train, Rng* rng) {
  const auto& c = model.config;
  StackTrace t;
  t.mask = mask;
  t.input_dropout = make_dropout(h.rows(), h.cols(), c.dropout, train, rng);
  h = apply_mask(h, t.input_dropout);
  t.layers.resize(c.layers);
  for (std::size_t li = 0; li < c.layers; ++li) {
    const auto& w = model.weights.layers[li];
    auto& lt = t.layers[li];
    lt.input = h;
    if (c.norm == NormPlacement::Post) {
      lt.attn_in = h;
      Matrix a = ops::multi_head_attention(h, w, mask, c.heads, lt.attention);
      lt.attn_dropout = make_dropout(a.rows(), a.cols(), c.dropout, train, rng);
      const Matrix h1 = ops::layer_norm(h + apply_mask(a, lt.attn_dropout), w.ln1_gamma,
                                        w.ln1_beta, lt.ln1);
      lt.ffn_in = h1;
      lt.ffn_pre = (h1 * w.ffn_w1).rowwise() + w.ffn_b1;
      lt.ffn_act = ops::gelu(lt.ffn_pre);
      Matrix f = (lt.ffn_act * w.ffn_w2).rowwise() + w.ffn_b2;
      lt.ffn_dropout = make_dropout(f.rows(), f.cols(), c.dropout, train, rng);
      h = ops::layer_norm(h1 + apply_mask(f, lt.ffn_dropout), w.ln2_gamma, w.ln2_beta, lt.ln2);
    } else {
      lt.attn_in = ops::layer_norm(h, w.ln1_gamma, w.ln1_beta, lt.ln1);
      Matrix a = ops::multi_head_attention(lt.attn_in, w, mask, c.heads, lt.attention);
      lt.attn_dropout = make_dropout(a.rows(), a.cols(), c.dropout, train, rng);
      const Matrix s1 = h + apply_mask(a, lt.attn_dropout);
      lt.ffn_in = ops::layer_norm(s1, w.ln2_gamma, w.ln2_beta, lt.ln2);
      lt.ffn_pre = (lt.ffn_in * w.ffn_w1).rowwise() + w.ffn_b1;
      lt.ffn_act = ops::gelu(lt.ffn_pre);
      Matrix f = (lt.ffn_act * w.ffn_w2).rowwise() + w.ffn_b2;
      lt.ffn_dropout = make_dropout(f.rows(), f.cols(), c.dropout, train, rng);
      h = s1 + apply_mask(f, lt.ffn_dropout);
    }
  }
  t.output = std::move(h);
  return t;
}

Matrix ffn_backward(const LayerTrace& lt, const LayerWeights& w, const Matrix& d_f,
                    LayerWeights& g) {
  g.ffn_b2 += d_f.colwise().sum();
  g.ffn_w2.noalias() += lt.ffn_act.transpose() * d_f;
  const Matrix d_act = d_f * w.ffn_w2.transpose();
  const Matrix d_pre = ops::gelu_backward(lt.ffn_pre, d_act);
  g.ffn_b1 += d_pre.colwise().sum();
  g.ffn_w1.noalias() += lt.ffn_in.transpose() * d_pre;
  return d_pre * w.ffn_w1.transpose();
}

Matrix stack_backward(const StackTrace& t, const EncoderModel& model, Matrix dh,
                      EncoderWeights& grads) {
  const auto& c = model.config;
  for (std::size_t li = c.layers; li-- > 0;) {
    const auto& w = model.weights.layers[li];
    auto& g = grads.layers[li];
    const auto& lt = t.layers[li];
    if (c.norm == NormPlacement::Post) {
      const Matrix ds2 = ops::layer_norm_backward(dh, w.ln2_gamma, lt.ln2, g.ln2_gamma, g.ln2_beta);
      Matrix dh1 = ds2 + ffn_backward(lt, w, apply_mask(ds2, lt.ffn_dropout), g);
      const Matrix ds1 = ops::layer_norm_backward(dh1, w.ln1_gamma, lt.ln1, g.ln1_gamma, g.ln1_beta);
      dh = ds1 + ops::multi_head_attention_backward(lt.attn_in, w, lt.attention, c.heads,
                                                    apply_mask(ds1, lt.attn_dropout), g);
    } else {
      const Matrix d_ffn_in = ffn_backward(lt, w, apply_mask(dh, lt.ffn_dropout), g);
      const Matrix ds1 =
          dh + ops::layer_norm_backward(d_ffn_in, w.ln2_gamma, lt.ln2, g.ln2_gamma, g.ln2_beta);
      const Matrix d_attn_in = ops::multi_head_attention_backward(
          lt.attn_in, w, lt.attention, c.heads, apply_mask(ds1, lt.attn_dropout), g);
      dh = ds1 + ops::layer_norm_backward(d_attn_in, w.ln1_gamma, lt.ln1, g.ln1_gamma, g.ln1_beta);
    }
  }
  return apply_mask(dh, t.input_dropout);
}

RowVector mean_pool(const Matrix& h, Eigen::Index offset, std::size_t length) {
  return h.middleRows(offset, idx(length)).colwise().mean();
}

}  // namespace

Matrix spatial_features(std::span<const int> keycodes, const std::vector<bool>& mask,
                        const EncoderModel& model) {
  const auto& w = model.weights;
  const auto L = idx(keycodes.size());
  const auto K = w.key_embedding.cols();
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  Matrix out = Matrix::Zero(L, kSpatialChannels);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    out.row(idx(i)) = w.key_embedding.row(keycodes[i]) * w.spatial_kernel.topRows(K) +
                      w.key_embedding.row(keycodes[i + 1]) * w.spatial_kernel.bottomRows(K) +
                      w.spatial_bias;
  }
  return out;
}

BiEncoderTrace encode_traced(const FeatureSequence& features, const EncoderModel& model,
                             bool train_mode, Rng* rng) {
  if (model.config.mode != EncoderMode::Bi) throw ConfigError("encode requires a bi-encoder");
  check_features(features, model);
  BiEncoderTrace t;
  t.segment = build_segment(features, model);
  t.stack = run_stack(embed_segment(t.segment, model, -1), t.segment.mask, model, train_mode, rng);
  t.pooled = mean_pool(t.stack.output, 0, t.segment.length);
  t.embedding = (t.pooled * model.weights.pool_proj + model.weights.pool_bias).transpose();
  return t;
}

Embedding encode(const FeatureSequence& features, const EncoderModel& model, bool train_mode,
                 Rng* rng) {
  return encode_traced(features, model, train_mode, rng).embedding;
}

void backward(const BiEncoderTrace& t, const EncoderModel& model, const Embedding& d_embedding,
              EncoderWeights& g) {
  if (!d_embedding.allFinite()) throw NumericError("non-finite embedding gradient");
  const RowVector dz = d_embedding.transpose();
  g.pool_bias += dz;
  g.pool_proj.noalias() += t.pooled.transpose() * dz;
  const RowVector d_pooled = dz * model.weights.pool_proj.transpose();
  Matrix dh = Matrix::Zero(t.stack.output.rows(), t.stack.output.cols());
  dh.topRows(idx(t.segment.length)).rowwise() = d_pooled / static_cast<double>(t.segment.length);
  const Matrix d_in = stack_backward(t.stack, model, std::move(dh), g);
  segment_backward(t.segment, d_in, model, -1, g);
}

PairTrace encode_pair_traced(const FeatureSequence& source, const FeatureSequence& target,
                             const EncoderModel& model, bool train_mode, Rng* rng) {
  if (model.config.mode != EncoderMode::Cross) {
    throw ConfigError("encode_pair requires a cross-encoder");
  }
  check_features(source, model);
  check_features(target, model);
  const auto& w = model.weights;
  PairTrace t;
  t.source = build_segment(source, model);
  t.target = build_segment(target, model);
  const auto Ls = t.source.inputs.rows();
  const auto Lt = t.target.inputs.rows();
  Matrix h(Ls + Lt, idx(model.config.hidden));
  h.topRows(Ls) = embed_segment(t.source, model, 0);
  h.bottomRows(Lt) = embed_segment(t.target, model, 1);
  std::vector<bool> mask = t.source.mask;
  mask.insert(mask.end(), t.target.mask.begin(), t.target.mask.end());
  t.stack = run_stack(std::move(h), mask, model, train_mode, rng);

  t.pooled_source = mean_pool(t.stack.output, 0, t.source.length);
  t.pooled_target = mean_pool(t.stack.output, Ls, t.target.length);
  const auto O = idx(model.config.out_dim);
  t.joint.resize(2 * O);
  t.joint.head(O) = t.pooled_source * w.pool_proj + w.pool_bias;
  t.joint.tail(O) = t.pooled_target * w.pool_proj + w.pool_bias;
  t.logits = (t.joint * w.classifier + w.classifier_bias).transpose();
  const double mx = t.logits.maxCoeff();
  const Eigen::Vector2d e = (t.logits.array() - mx).exp();
  t.probs = e / e.sum();
  return t;
}

Eigen::Vector2d encode_pair(const FeatureSequence& source, const FeatureSequence& target,
                            const EncoderModel& model, bool train_mode, Rng* rng) {
  return encode_pair_traced(source, target, model, train_mode, rng).probs;
}

void backward_pair(const PairTrace& t, const EncoderModel& model, const Eigen::Vector2d& d_logits,
                   EncoderWeights& g) {
  if (!d_logits.allFinite()) throw NumericError("non-finite logit gradient");
  const auto& w = model.weights;
  const auto O = idx(model.config.out_dim);
  const RowVector dl = d_logits.transpose();
  g.classifier_bias += dl;
  g.classifier.noalias() += t.joint.transpose() * dl;
  const RowVector d_joint = dl * w.classifier.transpose();
  const RowVector dz_s = d_joint.head(O);
  const RowVector dz_t = d_joint.tail(O);
  g.pool_bias += dz_s + dz_t;
  g.pool_proj.noalias() += t.pooled_source.transpose() * dz_s;
  g.pool_proj.noalias() += t.pooled_target.transpose() * dz_t;

  const auto Ls = t.source.inputs.rows();
  const auto Lt = t.target.inputs.rows();
  Matrix dh = Matrix::Zero(Ls + Lt, idx(model.config.hidden));
  dh.topRows(idx(t.source.length)).rowwise() =
      (dz_s * w.pool_proj.transpose()) / static_cast<double>(t.source.length);
  dh.middleRows(Ls, idx(t.target.length)).rowwise() =
      (dz_t * w.pool_proj.transpose()) / static_cast<double>(t.target.length);
  const Matrix d_in = stack_backward(t.stack, model, std::move(dh), g);
  segment_backward(t.source, d_in.topRows(Ls), model, 0, g);
  segment_backward(t.target, d_in.bottomRows(Lt), model, 1, g);
}

}  // namespace keydyn
