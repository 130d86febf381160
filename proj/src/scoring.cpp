#include "keydyn/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "keydyn/errors.hpp"

namespace keydyn {

namespace {
constexpr double kFloor = 1e-12;
}

std::string_view to_string(ScorerKind kind) noexcept {
  switch (kind) {
    case ScorerKind::AvgDistance: return "avg_distance";
    case ScorerKind::Abod: return "abod";
    case ScorerKind::Lof: return "lof";
    case ScorerKind::Ocsvm: return "ocsvm";
  }
  return "unknown";
}

ScorerKind parse_scorer_kind(std::string_view text) {
  if (text == "avg_distance" || text == "avg") return ScorerKind::AvgDistance;
  if (text == "abod") return ScorerKind::Abod;
  if (text == "lof") return ScorerKind::Lof;
  if (text == "ocsvm") return ScorerKind::Ocsvm;
  throw ConfigError("unknown scorer '" + std::string(text) + "'");
}

std::size_t ScorerConfig::min_enrollment() const noexcept {
  switch (kind) {
    case ScorerKind::AvgDistance: return 1;
    case ScorerKind::Abod: return 3;
    case ScorerKind::Lof: return 2;
    case ScorerKind::Ocsvm: return 2;
  }
  return 1;
}

void ScorerConfig::validate() const {
  if (kind == ScorerKind::Lof && lof_k == 0) throw ConfigError("lof_k must be positive");
  if (kind == ScorerKind::Ocsvm && !(ocsvm_nu > 0.0 && ocsvm_nu <= 1.0)) {
    throw ConfigError("ocsvm nu must lie in (0, 1]");
  }
}

nlohmann::json scorer_config_to_json(const ScorerConfig& c) {
  nlohmann::json j = {{"kind", to_string(c.kind)}};
  switch (c.kind) {
    case ScorerKind::AvgDistance: j["metric"] = to_string(c.metric); break;
    case ScorerKind::Lof: j["lof_k"] = c.lof_k; break;
    case ScorerKind::Ocsvm:
      j["nu"] = c.ocsvm_nu;
      j["gamma"] = c.ocsvm_gamma > 0.0 ? nlohmann::json(c.ocsvm_gamma) : nlohmann::json("scale");
      break;
    case ScorerKind::Abod: break;
  }
  return j;
}

double rbf_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double gamma) {
  return std::exp(-gamma * (a - b).squaredNorm());
}

double scale_gamma(std::span<const Eigen::VectorXd> points) {
  if (points.empty()) return 1.0;
  const auto dim = points.front().size();
  double sum = 0.0, count = 0.0;
  for (const auto& p : points) {
    sum += p.sum();
    count += static_cast<double>(p.size());
  }
  const double mean = sum / count;
  double var = 0.0;
  for (const auto& p : points) var += (p.array() - mean).square().sum();
  var /= count;
  if (!(var > 0.0)) return 1.0;
  return 1.0 / (static_cast<double>(dim) * var);
}

OcsvmSolution solve_one_class_svm(std::span<const Eigen::VectorXd> points, double nu, double gamma,
                                  double tolerance, std::size_t max_iterations) {
  const std::size_t n = points.size();
  if (n == 0) throw ArgumentError("one-class SVM needs points");
  Eigen::MatrixXd k(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) k(i, j) = k(j, i) = rbf_kernel(points[i], points[j], gamma);
  }
  const double c = 1.0 / (nu * static_cast<double>(n));

  OcsvmSolution sol;
  sol.gamma = gamma;
  sol.alpha.assign(n, 0.0);
  double remaining = 1.0;
  for (std::size_t i = 0; i < n && remaining > 0.0; ++i) {
    sol.alpha[i] = std::min(c, remaining);
    remaining -= sol.alpha[i];
  }
  Eigen::VectorXd alpha = Eigen::Map<Eigen::VectorXd>(sol.alpha.data(), static_cast<Eigen::Index>(n));
  Eigen::VectorXd grad = k * alpha;

  auto below_upper = [&](std::size_t i) { return alpha[i] < c - 1e-15; };
  auto above_lower = [&](std::size_t i) { return alpha[i] > 1e-15; };

  for (; sol.iterations < max_iterations; ++sol.iterations) {
    // Raise the alpha with the smallest gradient, lower the one with the largest.
    std::size_t up = n, down = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (below_upper(i) && (up == n || grad[i] < grad[up])) up = i;
      if (above_lower(i) && (down == n || grad[i] > grad[down])) down = i;
    }
    if (up == n || down == n || grad[down] - grad[up] <= tolerance) break;
    const double curvature = std::max(k(up, up) + k(down, down) - 2.0 * k(up, down), 1e-12);
    double delta = (grad[down] - grad[up]) / curvature;
    delta = std::min({delta, c - alpha[up], alpha[down]});
    alpha[up] += delta;
    alpha[down] -= delta;
    grad += delta * (k.col(up) - k.col(down));
  }

  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double free_sum = 0.0;
  std::size_t free_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!below_upper(i)) {
      lb = std::max(lb, grad[i]);
    } else if (!above_lower(i)) {
      ub = std::min(ub, grad[i]);
    } else {
      free_sum += grad[i];
      ++free_count;
    }
  }
  sol.rho = free_count ? free_sum / static_cast<double>(free_count) : (ub + lb) / 2.0;
  for (std::size_t i = 0; i < n; ++i) sol.alpha[i] = alpha[i];
  return sol;
}

FittedScorer::FittedScorer(std::vector<Eigen::VectorXd> enrollment, ScorerConfig config)
    : points_(std::move(enrollment)), config_(config) {
  config_.validate();
  if (points_.size() < config_.min_enrollment()) {
    throw ProtocolError(std::string(to_string(config_.kind)) + " needs at least " +
                        std::to_string(config_.min_enrollment()) + " enrollment samples, got " +
                        std::to_string(points_.size()));
  }
  for (const auto& p : points_) {
    if (!p.allFinite()) throw ArgumentError("non-finite enrollment embedding");
    if (p.size() != points_.front().size()) throw ArgumentError("enrollment dimension mismatch");
  }

  if (config_.kind == ScorerKind::Lof) {
    const std::size_t n = points_.size();
    k_ = std::min(config_.lof_k, n - 1);
    Eigen::MatrixXd d(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) d(i, j) = (points_[i] - points_[j]).norm();
    }
    k_distance_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> others;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) others.push_back(d(i, j));
      }
      std::nth_element(others.begin(), others.begin() + static_cast<long>(k_ - 1), others.end());
      k_distance_[i] = others[k_ - 1];
    }
    lrd_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double reach = 0.0;
      std::size_t count = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i || d(i, j) > k_distance_[i]) continue;
        reach += std::max(k_distance_[j], d(i, j));
        ++count;
      }
      lrd_[i] = 1.0 / std::max(reach / static_cast<double>(count), kFloor);
    }
  } else if (config_.kind == ScorerKind::Ocsvm) {
    const double gamma = config_.ocsvm_gamma > 0.0 ? config_.ocsvm_gamma : scale_gamma(points_);
    svm_ = solve_one_class_svm(points_, config_.ocsvm_nu, gamma);
  }
}

double FittedScorer::lof_score(const Eigen::VectorXd& q) const {
  const std::size_t n = points_.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = (q - points_[i]).norm();
  auto sorted = d;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k_ - 1), sorted.end());
  const double k_dist = sorted[k_ - 1];
  double reach = 0.0, lrd_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > k_dist) continue;
    reach += std::max(k_distance_[i], d[i]);
    lrd_sum += lrd_[i];
    ++count;
  }
  const double cnt = static_cast<double>(count);
  const double lrd_q = 1.0 / std::max(reach / cnt, kFloor);
  return -(lrd_sum / cnt) / lrd_q;
}

double FittedScorer::abod_score(const Eigen::VectorXd& q) const {
  const std::size_t n = points_.size();
  std::vector<Eigen::VectorXd> diff;
  std::vector<double> sq;
  for (const auto& p : points_) {
    diff.push_back(p - q);
    const double norm = std::max(diff.back().norm(), kFloor);
    sq.push_back(norm * norm);
  }
  std::vector<double> values;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      values.push_back(diff[a].dot(diff[b]) / (sq[a] * sq[b]));
    }
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return var / static_cast<double>(values.size());
}

double FittedScorer::score(const Eigen::VectorXd& query) const {
  if (query.size() != points_.front().size()) throw ArgumentError("query dimension mismatch");
  switch (config_.kind) {
    case ScorerKind::AvgDistance: {
      double sum = 0.0;
      for (const auto& p : points_) sum += distance(query, p, config_.metric);
      return 0.0 - sum / static_cast<double>(points_.size());
    }
    case ScorerKind::Abod: return abod_score(query);
    case ScorerKind::Lof: return lof_score(query);
    case ScorerKind::Ocsvm: {
      double s = 0.0;
      for (std::size_t i = 0; i < points_.size(); ++i) {
        s += svm_.alpha[i] * rbf_kernel(query, points_[i], svm_.gamma);
      }
      return s - svm_.rho;
    }
  }
  return 0.0;
}

FittedScorer fit(std::span<const Eigen::VectorXd> enrollment, const ScorerConfig& config) {
  return FittedScorer({enrollment.begin(), enrollment.end()}, config);
}

double score(const Eigen::VectorXd& query, std::span<const Eigen::VectorXd> enrollment,
             const ScorerConfig& config) {
  return fit(enrollment, config).score(query);
}

}  // namespace keydyn
