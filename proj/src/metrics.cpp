#include "keydyn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "keydyn/errors.hpp"

namespace keydyn {

std::string_view to_string(Metric metric) noexcept {
  switch (metric) {
    case Metric::Euclidean: return "euclidean";
    case Metric::Manhattan: return "manhattan";
    case Metric::Cosine: return "cosine";
  }
  return "unknown";
}

Metric parse_metric(std::string_view text) {
  if (text == "euclidean") return Metric::Euclidean;
  if (text == "manhattan") return Metric::Manhattan;
  if (text == "cosine") return Metric::Cosine;
  throw ConfigError("unknown metric '" + std::string(text) + "'");
}

namespace {

constexpr double kSquaredFloor = kNormFloor * kNormFloor;

// sqrt(max(|a|^2, f^2) * max(|b|^2, f^2)); for a == b this equals |a|^2 exactly,
// which makes the self-distance exactly zero.
double norm_product(double aa, double bb) {
  return std::sqrt(std::max(aa, kSquaredFloor) * std::max(bb, kSquaredFloor));
}

}  // namespace

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double c = a.dot(b) / norm_product(a.squaredNorm(), b.squaredNorm());
  return std::clamp(c, -1.0, 1.0);
}

double distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Metric metric) {
  switch (metric) {
    case Metric::Euclidean: return (a - b).norm();
    case Metric::Manhattan: return (a - b).cwiseAbs().sum();
    case Metric::Cosine: return (1.0 - cosine_similarity(a, b)) / 2.0;
  }
  throw ConfigError("unknown metric");
}

void cosine_similarity_gradient(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double scale,
                                Eigen::VectorXd& ga, Eigen::VectorXd& gb) {
  const double aa = std::max(a.squaredNorm(), kSquaredFloor);
  const double bb = std::max(b.squaredNorm(), kSquaredFloor);
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double cos = a.dot(b) / (na * nb);
  // d cos / da = b / (|a||b|) - cos * a / |a|^2 (the floor branch is treated as constant).
  const double da_norm = a.squaredNorm() >= kSquaredFloor ? 1.0 / aa : 0.0;
  const double db_norm = b.squaredNorm() >= kSquaredFloor ? 1.0 / bb : 0.0;
  ga += scale * (b / (na * nb) - cos * da_norm * a);
  gb += scale * (a / (na * nb) - cos * db_norm * b);
}

void distance_gradient(const Eigen::VectorXd& a, const Eigen::VectorXd& b, Metric metric,
                       double scale, Eigen::VectorXd& ga, Eigen::VectorXd& gb) {
  switch (metric) {
    case Metric::Euclidean: {
      const Eigen::VectorXd diff = a - b;
      const double n = diff.norm();
      if (n == 0.0) return;
      ga += (scale / n) * diff;
      gb -= (scale / n) * diff;
      return;
    }
    case Metric::Manhattan: {
      const Eigen::VectorXd sign = (a - b).unaryExpr([](double v) {
        return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      });
      ga += scale * sign;
      gb -= scale * sign;
      return;
    }
    case Metric::Cosine:
      cosine_similarity_gradient(a, b, -0.5 * scale, ga, gb);
      return;
  }
}

}  // namespace keydyn
