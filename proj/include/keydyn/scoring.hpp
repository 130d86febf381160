#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "keydyn/metrics.hpp"

namespace keydyn {

enum class ScorerKind { AvgDistance, Abod, Lof, Ocsvm };

std::string_view to_string(ScorerKind kind) noexcept;
ScorerKind parse_scorer_kind(std::string_view text);

struct ScorerConfig {
  ScorerKind kind = ScorerKind::AvgDistance;
  Metric metric = Metric::Cosine;  // avg_distance only
  std::size_t lof_k = 3;
  double ocsvm_nu = 0.1;
  double ocsvm_gamma = 0.0;  // <= 0 selects the "scale" heuristic

  std::size_t min_enrollment() const noexcept;
  void validate() const;
};

nlohmann::json scorer_config_to_json(const ScorerConfig& config);

struct OcsvmSolution {
  std::vector<double> alpha;
  double rho = 0.0;
  double gamma = 1.0;
  std::size_t iterations = 0;
};

double rbf_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double gamma);

/// 1 / (dim * variance of all coordinates), or 1 when the points carry no spread.
double scale_gamma(std::span<const Eigen::VectorXd> points);

/// One-class SVM dual: min 1/2 a'Ka  s.t. 0 <= a_i <= 1/(nu*n), sum a = 1.
/// SMO with maximal violating pairs; rho is the mean gradient over free alphas.
OcsvmSolution solve_one_class_svm(std::span<const Eigen::VectorXd> points, double nu, double gamma,
                                  double tolerance = 1e-10, std::size_t max_iterations = 100000);

/// Enrollment-side state; score() is pure once fitted.
class FittedScorer {
 public:
  FittedScorer(std::vector<Eigen::VectorXd> enrollment, ScorerConfig config);

  /// Higher means more likely genuine.
  double score(const Eigen::VectorXd& query) const;

  const ScorerConfig& config() const noexcept { return config_; }
  std::size_t size() const noexcept { return points_.size(); }
  const OcsvmSolution& svm() const noexcept { return svm_; }

 private:
  double lof_score(const Eigen::VectorXd& query) const;
  double abod_score(const Eigen::VectorXd& query) const;

  std::vector<Eigen::VectorXd> points_;
  ScorerConfig config_;
  std::size_t k_ = 0;
  std::vector<double> k_distance_;  // per enrollment point
  std::vector<double> lrd_;         // local reachability density per point
  OcsvmSolution svm_;
};

/// Throws ProtocolError when the enrollment is smaller than the scorer minimum.
FittedScorer fit(std::span<const Eigen::VectorXd> enrollment, const ScorerConfig& config);
double score(const Eigen::VectorXd& query, std::span<const Eigen::VectorXd> enrollment,
             const ScorerConfig& config);

}  // namespace keydyn
