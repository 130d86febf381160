#include "keydyn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "keydyn/errors.hpp"

namespace keydyn {

std::string_view to_string(LossKind kind) noexcept {
  switch (kind) {
    case LossKind::Triplet: return "triplet";
    case LossKind::BatchAllTriplet: return "batch_all";
    case LossKind::Wdcl: return "wdcl";
    case LossKind::Softmax: return "softmax";
  }
  return "unknown";
}

std::string_view to_string(Reduction reduction) noexcept {
  return reduction == Reduction::Sum ? "sum" : "mean_active";
}

LossKind parse_loss_kind(std::string_view text) {
  if (text == "triplet") return LossKind::Triplet;
  if (text == "batch_all" || text == "batch_all_triplet") return LossKind::BatchAllTriplet;
  if (text == "wdcl") return LossKind::Wdcl;
  if (text == "softmax") return LossKind::Softmax;
  throw ConfigError("unknown loss '" + std::string(text) + "'");
}

Reduction parse_reduction(std::string_view text) {
  if (text == "sum") return Reduction::Sum;
  if (text == "mean_active") return Reduction::MeanActive;
  throw ConfigError("unknown reduction '" + std::string(text) + "'");
}

double LossConfig::default_margin(Metric metric) noexcept {
  return metric == Metric::Cosine ? 0.25 : 1.0;
}

void LossConfig::validate() const {
  if ((kind == LossKind::Triplet || kind == LossKind::BatchAllTriplet) && !(margin > 0.0)) {
    throw ConfigError("triplet margin must be positive");
  }
  if (kind == LossKind::Wdcl && !(wdcl_k > 0.0)) {
    throw ConfigError("wdcl_k must be positive");
  }
}

namespace {

std::vector<Eigen::VectorXd> zero_gradients(std::span<const Eigen::VectorXd> e) {
  std::vector<Eigen::VectorXd> g;
  g.reserve(e.size());
  for (const auto& v : e) g.push_back(Eigen::VectorXd::Zero(v.size()));
  return g;
}

}  // namespace

double triplet_loss(const Eigen::VectorXd& anchor, const Eigen::VectorXd& positive,
                    const Eigen::VectorXd& negative, Metric metric, double margin) {
  return std::max(distance(anchor, positive, metric) - distance(anchor, negative, metric) + margin,
                  0.0);
}

LossResult triplet_batch_loss(std::span<const Eigen::VectorXd> e, Metric metric, double margin) {
  if (e.empty() || e.size() % 3 != 0) {
    throw ArgumentError("triplet batch must hold a multiple of 3 embeddings");
  }
  LossResult r;
  r.gradients = zero_gradients(e);
  const std::size_t n = e.size() / 3;
  r.total_terms = n;
  const double scale = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& a = e[3 * t];
    const auto& p = e[3 * t + 1];
    const auto& q = e[3 * t + 2];
    const double l = distance(a, p, metric) - distance(a, q, metric) + margin;
    if (l <= 0.0) continue;
    ++r.active_terms;
    r.value += scale * l;
    distance_gradient(a, p, metric, scale, r.gradients[3 * t], r.gradients[3 * t + 1]);
    distance_gradient(a, q, metric, -scale, r.gradients[3 * t], r.gradients[3 * t + 2]);
  }
  return r;
}

std::size_t count_valid_triplets(std::span<const int> labels) {
  // Closed form per anchor: (same - 1) positives times (B - same) negatives.
  std::size_t total = 0;
  const std::size_t b = labels.size();
  for (std::size_t a = 0; a < b; ++a) {
    const auto same = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), labels[a]));
    total += (same - 1) * (b - same);
  }
  return total;
}

LossResult batch_all_triplet_loss(std::span<const Eigen::VectorXd> e, std::span<const int> labels,
                                  Metric metric, double margin, Reduction reduction) {
  if (e.size() != labels.size()) throw ArgumentError("embedding/label count mismatch");
  const std::size_t b = e.size();
  Eigen::MatrixXd dist(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    dist(i, i) = 0.0;
    for (std::size_t j = i + 1; j < b; ++j) {
      dist(i, j) = dist(j, i) = distance(e[i], e[j], metric);
    }
  }

  LossResult r;
  Eigen::MatrixXd coeff = Eigen::MatrixXd::Zero(b, b);  // d(sum)/d(dist(i,j))
  double sum = 0.0;
  for (std::size_t a = 0; a < b; ++a) {
    for (std::size_t p = 0; p < b; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t n = 0; n < b; ++n) {
        if (labels[n] == labels[a]) continue;
        ++r.total_terms;
        const double l = dist(a, p) - dist(a, n) + margin;
        if (l <= 0.0) continue;
        ++r.active_terms;
        sum += l;
        coeff(a, p) += 1.0;
        coeff(a, n) -= 1.0;
      }
    }
  }
  if (r.total_terms == 0) throw ArgumentError("batch contains no valid triplet");

  double scale = 1.0;
  if (reduction == Reduction::MeanActive) {
    scale = r.active_terms ? 1.0 / static_cast<double>(r.active_terms) : 0.0;
  }
  r.value = sum * scale;
  r.gradients = zero_gradients(e);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (coeff(i, j) != 0.0) {
        distance_gradient(e[i], e[j], metric, coeff(i, j) * scale, r.gradients[i], r.gradients[j]);
      }
    }
  }
  return r;
}

std::vector<double> wdcl_pair_weights(std::span<const Eigen::VectorXd> pairs, double k,
                                      bool negative_variant) {
  const std::size_t n = pairs.size() / 2;
  std::vector<double> w(n);
  double mean = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    w[b] = std::exp(cosine_similarity(pairs[2 * b], pairs[2 * b + 1]) / k);
    mean += w[b];
  }
  mean /= static_cast<double>(n);
  for (auto& v : w) {
    v /= mean;
    if (negative_variant) v = 2.0 - v;
  }
  return w;
}

LossResult wdcl_loss(std::span<const Eigen::VectorXd> e, const LossConfig& config) {
  if (e.size() % 2 != 0) throw ArgumentError("wdcl batch must hold pairs");
  const std::size_t pairs = e.size() / 2;
  if (pairs < 2) throw ArgumentError("wdcl needs at least 2 pairs to form negatives");
  const std::size_t m = e.size();

  Eigen::MatrixXd sim(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) sim(i, j) = sim(j, i) = cosine_similarity(e[i], e[j]);
  }
  const auto weights = wdcl_pair_weights(e, config.wdcl_k, config.wdcl_negative_variant);

  LossResult r;
  r.gradients = zero_gradients(e);
  r.total_terms = m;
  const double inv_m = 1.0 / static_cast<double>(m);
  Eigen::MatrixXd coeff = Eigen::MatrixXd::Zero(m, m);  // d(loss)/d(sim(i,j)), anchor i
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t partner = i ^ 1U;
    const double w = weights[i / 2];
    const double s_pos = sim(i, partner);
    double positive;
    if (config.dcl_literature_form) {
      positive = -w * s_pos;
      coeff(i, partner) += -w * inv_m;
    } else {
      positive = -w * std::exp(s_pos);
      coeff(i, partner) += -w * std::exp(s_pos) * inv_m;
    }
    double mx = -2.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j / 2 != i / 2) mx = std::max(mx, sim(i, j));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j / 2 != i / 2) z += std::exp(sim(i, j) - mx);
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (j / 2 != i / 2) coeff(i, j) += std::exp(sim(i, j) - mx) / z * inv_m;
    }
    r.value += (positive + mx + std::log(z)) * inv_m;
    ++r.active_terms;
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (coeff(i, j) != 0.0) {
        cosine_similarity_gradient(e[i], e[j], coeff(i, j), r.gradients[i], r.gradients[j]);
      }
    }
  }
  return r;
}

double cross_entropy_loss(int y, double p_similar) {
  const double p = std::clamp(p_similar, kProbabilityClamp, 1.0 - kProbabilityClamp);
  const double yd = static_cast<double>(y);
  return -(yd * std::log(p) + (1.0 - yd) * std::log(1.0 - p));
}

double softmax_cross_entropy(const Eigen::Vector2d& logits, int similar, Eigen::Vector2d& d_logits) {
  const double mx = logits.maxCoeff();
  Eigen::Vector2d p = (logits.array() - mx).exp();
  p /= p.sum();
  d_logits = p;
  d_logits(similar ? 0 : 1) -= 1.0;
  return cross_entropy_loss(similar ? 1 : 0, p(0));
}

}  // namespace keydyn
