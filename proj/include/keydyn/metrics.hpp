#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace keydyn {

enum class Metric { Euclidean, Manhattan, Cosine };

std::string_view to_string(Metric metric) noexcept;
Metric parse_metric(std::string_view text);

/// Norms are floored at this value before dividing in the cosine metric.
inline constexpr double kNormFloor = 1e-12;

/// Cosine similarity in [-1, 1].
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Euclidean, Manhattan (L1) or cosine distance (1 - cos) / 2 in [0, 1].
double distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Metric metric);

/// Adds scale * d(distance)/da and scale * d(distance)/db to ga and gb.
/// At coincident points the Euclidean and Manhattan subgradient is zero.
void distance_gradient(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Metric metric,
                       double scale, Eigen::VectorXd& ga, Eigen::VectorXd& gb);

/// Adds scale * d(cosine similarity)/da and /db.
void cosine_similarity_gradient(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double scale,
                                Eigen::VectorXd& ga, Eigen::VectorXd& gb);

}  // namespace keydyn
