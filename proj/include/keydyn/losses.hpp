#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "keydyn/metrics.hpp"

namespace keydyn {

enum class LossKind { Triplet, BatchAllTriplet, Wdcl, Softmax };
enum class Reduction { Sum, MeanActive };

std::string_view to_string(LossKind kind) noexcept;
std::string_view to_string(Reduction reduction) noexcept;
LossKind parse_loss_kind(std::string_view text);
Reduction parse_reduction(std::string_view text);

struct LossConfig {
  LossKind kind = LossKind::BatchAllTriplet;
  double margin = 0.25;
  double wdcl_k = 1.0;
  bool wdcl_negative_variant = true;  // w <- 2 - w
  bool dcl_literature_form = false;   // -w * <a,p> instead of -w * exp(<a,p>)
  Reduction reduction = Reduction::MeanActive;

  /// 1.0 for Euclidean/Manhattan, 0.25 for cosine.
  static double default_margin(Metric metric) noexcept;
  void validate() const;
};

/// Loss value plus d(loss)/d(embedding) for every embedding of the batch.
struct LossResult {
  double value = 0.0;
  std::vector<Eigen::VectorXd> gradients;
  std::size_t total_terms = 0;   // triplets / anchors enumerated
  std::size_t active_terms = 0;  // terms with positive hinge
};

/// max(d(a,p) - d(a,n) + margin, 0)
double triplet_loss(const Eigen::VectorXd& anchor, const Eigen::VectorXd& positive,
                    const Eigen::VectorXd& negative, Metric metric, double margin);

/// Mean triplet loss over explicit triples laid out as
/// [a0, p0, n0, a1, p1, n1, ...].
LossResult triplet_batch_loss(std::span<const Eigen::VectorXd> embeddings, Metric metric,
                              double margin);

/// Number of (anchor, positive, negative) index triples with
/// label(a) == label(p), a != p, label(n) != label(a).
std::size_t count_valid_triplets(std::span<const int> labels);

/// Hinge over every valid triplet of the batch, reduced by sum or by the
/// mean over triplets with positive loss.
LossResult batch_all_triplet_loss(std::span<const Eigen::VectorXd> embeddings,
                                  std::span<const int> labels, Metric metric, double margin,
                                  Reduction reduction);

/// Positive-pair weights e^{s/k} / mean(e^{s/k}) over the batch's pairs, with
/// s the cosine similarity of each pair. The negative variant returns 2 - w.
std::vector<double> wdcl_pair_weights(std::span<const Eigen::VectorXd> pairs, double k,
                                      bool negative_variant);

/// Weighted decoupled contrastive loss over B positive pairs laid out as
/// [x0, y0, x1, y1, ...]; both members of each pair act as anchor and every
/// sample of the other pairs is a negative. Weights carry no gradient.
LossResult wdcl_loss(std::span<const Eigen::VectorXd> pairs, const LossConfig& config);

inline constexpr double kProbabilityClamp = 1e-12;

/// -[y log(p) + (1 - y) log(1 - p)] with p clamped away from 0 and 1.
double cross_entropy_loss(int y, double p_similar);

/// Cross-entropy of a two-way softmax (index 0 = similar) and its gradient
/// with respect to the logits.
double softmax_cross_entropy(const Eigen::Vector2d& logits, int similar, Eigen::Vector2d& d_logits);

}  // namespace keydyn
