#include <doctest.h>

#include <random>

#include "keydyn/errors.hpp"
#include "keydyn/scoring.hpp"
#include "oracles.hpp"

using namespace keydyn;
using Vec = Eigen::VectorXd;

namespace {

// Textbook LOF: k-distance neighbourhoods with ties, reachability distances,
// local reachability densities. Written from the definition with plain loops.
double lof_oracle(const Vec& q, const std::vector<Vec>& pts, std::size_t k) {
  const std::size_t n = pts.size();
  auto kdist_of = [&](const std::vector<double>& d) {
    auto s = d;
    std::sort(s.begin(), s.end());
    return s[k - 1];
  };
  std::vector<std::vector<double>> d(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i][j] = oracle::euclid(pts[i], pts[j]);
  std::vector<double> kd(n), lrd(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(d[i][j]);
    kd[i] = kdist_of(others);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0, cnt = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || d[i][j] > kd[i]) continue;
      sum += std::max(kd[j], d[i][j]);
      cnt += 1.0;
    }
    lrd[i] = 1.0 / std::max(sum / cnt, 1e-12);
  }
  std::vector<double> dq(n);
  for (std::size_t i = 0; i < n; ++i) dq[i] = oracle::euclid(q, pts[i]);
  const double kq = kdist_of(dq);
  double reach = 0.0, ratio = 0.0, cnt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (dq[i] > kq) continue;
    reach += std::max(kd[i], dq[i]);
    ratio += lrd[i];
    cnt += 1.0;
  }
  const double lrd_q = 1.0 / std::max(reach / cnt, 1e-12);
  return (ratio / cnt) / lrd_q;
}

double abof_oracle(const Vec& q, const std::vector<Vec>& pts) {
  std::vector<double> vals;
  for (std::size_t a = 0; a < pts.size(); ++a)
    for (std::size_t b = a + 1; b < pts.size(); ++b) {
      const Vec da = pts[a] - q, db = pts[b] - q;
      vals.push_back(da.dot(db) / (da.squaredNorm() * db.squaredNorm()));
    }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  return var / static_cast<double>(vals.size());
}

std::vector<Vec> cluster(std::mt19937_64& rng, const Vec& centre, std::size_t n, double sigma) {
  auto pts = oracle::random_vectors(n, centre.size(), rng, sigma);
  for (auto& p : pts) p += centre;
  return pts;
}

ScorerConfig config_for(ScorerKind kind) {
  ScorerConfig c;
  c.kind = kind;
  return c;
}

constexpr ScorerKind kAll[] = {ScorerKind::AvgDistance, ScorerKind::Abod, ScorerKind::Lof, ScorerKind::Ocsvm};

}  // namespace

TEST_CASE("avg_distance of the single enrollment vector is zero") {
  std::mt19937_64 rng(1);
  const auto e = oracle::random_vectors(1, 6, rng);
  for (auto m : {Metric::Cosine, Metric::Euclidean, Metric::Manhattan}) {
    ScorerConfig c;
    c.metric = m;
    const double s = score(e[0], e, c);
    CHECK(s == 0.0);
    CHECK_FALSE(std::signbit(s));
  }
}

TEST_CASE("avg_distance is the negative mean distance") {
  std::mt19937_64 rng(2);
  const auto e = oracle::random_vectors(5, 4, rng);
  const auto q = oracle::random_vectors(1, 4, rng)[0];
  double sum = 0.0;
  for (const auto& p : e) sum += oracle::cos_dist(q, p);
  CHECK(score(q, e, ScorerConfig{}) == doctest::Approx(-sum / 5.0).epsilon(1e-12));
}

TEST_CASE("minimum enrollment per scorer") {
  CHECK(config_for(ScorerKind::AvgDistance).min_enrollment() == 1);
  CHECK(config_for(ScorerKind::Abod).min_enrollment() == 3);
  CHECK(config_for(ScorerKind::Lof).min_enrollment() == 2);
  CHECK(config_for(ScorerKind::Ocsvm).min_enrollment() == 2);
  std::mt19937_64 rng(3);
  const auto e = oracle::random_vectors(2, 4, rng);
  CHECK_THROWS_AS(fit(std::span(e).first(1), config_for(ScorerKind::Ocsvm)), ProtocolError);
  CHECK_THROWS_AS(fit(std::span(e).first(1), config_for(ScorerKind::Lof)), ProtocolError);
  CHECK_THROWS_AS(fit(e, config_for(ScorerKind::Abod)), ProtocolError);
  CHECK_NOTHROW(fit(std::span(e).first(1), config_for(ScorerKind::AvgDistance)));
  CHECK_THROWS_AS(fit(std::span(e).first(0), config_for(ScorerKind::AvgDistance)), ProtocolError);
}

TEST_CASE("scorer config validation and parsing") {
  auto c = config_for(ScorerKind::Ocsvm);
  c.ocsvm_nu = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.ocsvm_nu = 1.0;
  CHECK_NOTHROW(c.validate());
  c = config_for(ScorerKind::Lof);
  c.lof_k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_scorer_kind("avg") == ScorerKind::AvgDistance);
  CHECK(parse_scorer_kind("ocsvm") == ScorerKind::Ocsvm);
  CHECK_THROWS_AS(parse_scorer_kind("iforest"), ConfigError);
}

TEST_CASE("separated clusters rank perfectly under every scorer") {
  std::mt19937_64 rng(4);
  const Eigen::Index dim = 8;
  for (int trial = 0; trial < 5; ++trial) {
    Vec a = Vec::Zero(dim), b = Vec::Zero(dim);
    b[trial % dim] = 10.0;
    a[(trial + 3) % dim] = 0.5;  // keep the centroid off the origin for the cosine metric
    const auto enroll = cluster(rng, a, 5, 1.0);
    const auto genuine = cluster(rng, a, 20, 1.0);
    const auto impostor = cluster(rng, b, 20, 1.0);
    for (auto kind : kAll) {
      auto c = config_for(kind);
      c.metric = Metric::Euclidean;
      const auto fitted = fit(enroll, c);
      std::vector<double> g, i;
      for (const auto& q : genuine) g.push_back(fitted.score(q));
      for (const auto& q : impostor) i.push_back(fitted.score(q));
      CAPTURE(to_string(kind));
      CHECK(oracle::auc(g, i) == 1.0);
    }
  }
}

TEST_CASE("one-class SVM matches the projected-gradient oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const auto pts = oracle::random_vectors(5, 4, rng);
    for (double nu : {0.1, 0.5, 0.8}) {
      const double gamma = scale_gamma(pts);
      const auto sol = solve_one_class_svm(pts, nu, gamma);
      const auto ref = oracle::ocsvm_projected_gradient(pts, nu, gamma);
      double sum = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(sol.alpha[i] - ref.alpha[i]) < 1e-6);
        sum += sol.alpha[i];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      if (!std::isnan(ref.rho)) CHECK(std::abs(sol.rho - ref.rho) < 1e-6);
    }
  }
}

TEST_CASE("scale gamma") {
  std::vector<Vec> pts{Vec::Constant(2, 1.0), Vec::Constant(2, 3.0)};
  // coordinates {1,1,3,3}: variance 1, dim 2
  CHECK(scale_gamma(pts) == doctest::Approx(0.5));
  std::vector<Vec> same{Vec::Ones(3), Vec::Ones(3)};
  CHECK(scale_gamma(same) == 1.0);
  CHECK(rbf_kernel(Vec::Zero(2), Vec::Ones(2), 0.5) == doctest::Approx(std::exp(-1.0)));
}

TEST_CASE("one-class SVM decision values do not depend on enrollment order") {
  std::mt19937_64 rng(6);
  auto pts = oracle::random_vectors(7, 5, rng);
  const auto queries = oracle::random_vectors(10, 5, rng);
  const auto c = config_for(ScorerKind::Ocsvm);
  const auto a = fit(pts, c);
  std::reverse(pts.begin(), pts.end());
  std::swap(pts[1], pts[4]);
  const auto b = fit(pts, c);
  for (const auto& q : queries) CHECK(a.score(q) == doctest::Approx(b.score(q)).epsilon(1e-9));
}

TEST_CASE("LOF matches the textbook definition") {
  std::mt19937_64 rng(7);
  for (std::size_t e : {2, 3, 5, 10}) {
    const auto pts = oracle::random_vectors(e, 4, rng);
    for (std::size_t k : {1, 3, 5}) {
      auto c = config_for(ScorerKind::Lof);
      c.lof_k = k;
      const auto fitted = fit(pts, c);
      for (const auto& q : oracle::random_vectors(5, 4, rng)) {
        CHECK(fitted.score(q) == doctest::Approx(-lof_oracle(q, pts, std::min(k, e - 1))).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("LOF inside a uniform cluster is close to one") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    // A 3x3 grid with jitter is a uniform cluster of 9 points in the plane.
    std::vector<Vec> pts;
    for (int x = -1; x <= 1; ++x)
      for (int y = -1; y <= 1; ++y) pts.push_back(Vec{{x + 0.05 * u(rng), y + 0.05 * u(rng)}});
    const Vec q{{0.5 + 0.05 * u(rng), 0.5 + 0.05 * u(rng)}};
    const double lof = -score(q, pts, config_for(ScorerKind::Lof));
    CHECK(lof == doctest::Approx(lof_oracle(q, pts, 3)).epsilon(1e-10));
    CHECK(lof >= 0.8);
    CHECK(lof <= 1.2);
  }
}

TEST_CASE("ABOD matches the pairwise angle variance") {
  std::mt19937_64 rng(9);
  for (std::size_t e : {3, 5, 10}) {
    const auto pts = oracle::random_vectors(e, 6, rng);
    const auto fitted = fit(pts, config_for(ScorerKind::Abod));
    for (const auto& q : oracle::random_vectors(4, 6, rng)) {
      CHECK(fitted.score(q) == doctest::Approx(abof_oracle(q, pts)).epsilon(1e-10));
    }
  }
}

TEST_CASE("fit is deterministic and equals one-shot scoring") {
  std::mt19937_64 rng(10);
  const auto pts = oracle::random_vectors(6, 5, rng);
  const auto q = oracle::random_vectors(1, 5, rng)[0];
  for (auto kind : kAll) {
    const auto c = config_for(kind);
    CHECK(fit(pts, c).score(q) == fit(pts, c).score(q));
    CHECK(fit(pts, c).score(q) == score(q, pts, c));
  }
}

TEST_CASE("duplicate enrollment points never produce NaN") {
  std::mt19937_64 rng(11);
  auto pts = oracle::random_vectors(3, 4, rng);
  pts.push_back(pts[0]);
  pts.push_back(pts[0]);
  const std::vector<Vec> identical(4, pts[1]);
  for (auto kind : kAll) {
    CAPTURE(to_string(kind));
    for (const std::vector<Vec>* set : {static_cast<const std::vector<Vec>*>(&pts), &identical}) {
      const auto fitted = fit(*set, config_for(kind));
      CHECK(std::isfinite(fitted.score(pts[0])));
      CHECK(std::isfinite(fitted.score(pts[2])));
      CHECK(std::isfinite(fitted.score(pts[1] + Vec::Constant(4, 0.3))));
    }
  }
}

TEST_CASE("avg_distance never increases along a ray away from the centroid") {
  std::mt19937_64 rng(12);
  const Eigen::Index dim = 6;
  for (auto m : {Metric::Euclidean, Metric::Manhattan}) {
    const auto enroll = cluster(rng, Vec::Constant(dim, 2.0), 5, 0.3);
    Vec centroid = Vec::Zero(dim);
    for (const auto& p : enroll) centroid += p / 5.0;
    ScorerConfig c;
    c.metric = m;
    const auto fitted = fit(enroll, c);
    for (const auto& dir : oracle::random_vectors(5, dim, rng)) {
      double prev = fitted.score(centroid);
      for (double t = 0.5; t <= 20.0; t += 0.5) {
        const double s = fitted.score(centroid + t * dir.normalized() * 5.0);
        CHECK(s <= prev + 1e-12);
        prev = s;
      }
    }
  }
}
