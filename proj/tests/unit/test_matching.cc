#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "helpers.h"
#include "metricmatch/error.h"
#include "metricmatch/matching.h"
#include "metricmatch/simgen.h"

using namespace metricmatch;

namespace {

MatchingSpace space_of(const MatrixXd& z) {
  MatchingSpace s;
  s.z = z;
  s.method = SpaceMethod::kNn;
  for (Index j = 0; j < z.cols(); ++j) s.labels.push_back("z" + std::to_string(j));
  return s;
}

Dataset tiny(std::initializer_list<double> z, std::initializer_list<int> d,
             std::initializer_list<double> y) {
  const Index n = static_cast<Index>(z.size());
  MatrixXd x(n, 1);
  VectorXi dv(n);
  VectorXd yv(n);
  Index i = 0;
  for (double v : z) x(i++, 0) = v;
  i = 0;
  for (int v : d) dv[i++] = v;
  i = 0;
  for (double v : y) yv[i++] = v;
  return make_dataset(x, dv, yv);
}

// Independent exhaustive scan with its own distance arithmetic.
struct Scan {
  std::vector<Index> units, matches;
  double estimate = 0.0;
};

Scan exhaustive(const MatrixXd& z, const Dataset& ds, Estimand e) {
  const int group = e == Estimand::kAtt ? 1 : 0;
  Scan s;
  double total = 0.0;
  for (Index i = 0; i < ds.n(); ++i) {
    if (ds.d[i] != group) continue;
    Index best = -1;
    double best_d = 0.0;
    for (Index j = 0; j < ds.n(); ++j) {
      if (ds.d[j] == group) continue;
      double acc = 0.0;
      for (Index c = 0; c < z.cols(); ++c) acc += (z(i, c) - z(j, c)) * (z(i, c) - z(j, c));
      if (best < 0 || acc < best_d) {
        best = j;
        best_d = acc;
      }
    }
    s.units.push_back(i);
    s.matches.push_back(best);
    total += group == 1 ? ds.y[i] - ds.y[best] : ds.y[best] - ds.y[i];
  }
  s.estimate = total / static_cast<double>(s.units.size());
  return s;
}

}  // namespace

TEST_CASE("forced geometry: three units") {
  const Dataset ds = tiny({0.0, 0.1, 3.0}, {1, 0, 0}, {5, 1, 9});
  const MatchResult r = nearest_neighbor_match(space_of(ds.x), ds, Estimand::kAtt);
  REQUIRE(r.size() == 1);
  CHECK(r.matches[0] == 1);
  CHECK(r.estimate == 4.0);
  CHECK(r.distances[0] == doctest::Approx(0.1));
}

TEST_CASE("ties go to the lowest index") {
  const Dataset ds = tiny({1, 1, 1, 1, 1}, {0, 1, 0, 1, 0}, {2, 7, 3, 10, 4});
  const MatchResult att = nearest_neighbor_match(space_of(ds.x), ds, Estimand::kAtt);
  CHECK(att.matches == std::vector<Index>{0, 0});
  CHECK(att.estimate == 8.5 - 2.0);
  const MatchResult atut = nearest_neighbor_match(space_of(ds.x), ds, Estimand::kAtut);
  CHECK(atut.units == std::vector<Index>{0, 2, 4});
  CHECK(atut.matches == std::vector<Index>{1, 1, 1});
  CHECK(atut.estimate == doctest::Approx(7.0 - 3.0));
}

TEST_CASE("ATUT differences are matched outcome minus own outcome") {
  const Dataset ds = tiny({0.0, 0.2, 5.0}, {0, 1, 1}, {1, 4, 100});
  const MatchResult r = nearest_neighbor_match(space_of(ds.x), ds, Estimand::kAtut);
  CHECK(r.estimate == 3.0);
}

TEST_CASE("kd-tree matching equals an exhaustive scan") {
  for (std::uint64_t seed = 1; seed <= 60; ++seed) {
    Rng rng = make_rng(seed);
    const Index n = 2 + static_cast<Index>(uniform_index(rng, 199));
    const Index z = 1 + static_cast<Index>(uniform_index(rng, seed % 6 == 0 ? 20 : 10));
    const bool lattice = seed % 3 == 0;
    MatrixXd pts(n, z);
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < z; ++c) {
        const double v = standard_normal(rng);
        pts(i, c) = lattice ? std::round(2.0 * v) : v;
      }
    }
    VectorXi d(n);
    VectorXd y(n);
    for (Index i = 0; i < n; ++i) {
      d[i] = uniform01(rng) < 0.4 ? 1 : 0;
      y[i] = standard_normal(rng);
    }
    d[0] = 1;
    d[n - 1] = 0;
    const Dataset ds = make_dataset(pts, d, y);
    for (Estimand e : {Estimand::kAtt, Estimand::kAtut}) {
      CAPTURE(seed);
      const MatchResult fast = nearest_neighbor_match(space_of(pts), ds, e);
      const MatchResult brute = brute_force_match(space_of(pts), ds, e);
      const Scan oracle = exhaustive(pts, ds, e);
      CHECK(fast.units == oracle.units);
      CHECK(fast.matches == oracle.matches);
      CHECK(fast.estimate == oracle.estimate);
      CHECK(brute.matches == oracle.matches);
      CHECK(fast.distances == brute.distances);
      for (std::size_t u = 0; u < fast.size(); ++u) CHECK(d[fast.matches[u]] != d[fast.units[u]]);
    }
  }
}

TEST_CASE("kd-tree knn agrees with sorting all distances") {
  Rng rng = make_rng(77);
  MatrixXd pts(150, 3);
  for (Index i = 0; i < pts.rows(); ++i)
    for (Index c = 0; c < 3; ++c) pts(i, c) = std::round(3.0 * standard_normal(rng));
  std::vector<Index> rows;
  for (Index i = 0; i < pts.rows(); i += 2) rows.push_back(i);
  const KdTree tree(pts, rows);
  for (Index q = 0; q < pts.rows(); ++q) {
    std::vector<std::pair<double, Index>> all;
    for (Index r : rows)
      if (r != q) all.emplace_back(squared_distance(pts, q, r), r);
    std::sort(all.begin(), all.end());
    all.resize(4);
    VectorXd row = pts.row(q).transpose();
    CHECK(tree.knn(row.data(), 4, q) == all);
  }
}

TEST_CASE("matching errors") {
  Dataset ds;
  ds.x = MatrixXd::Zero(2, 1);
  ds.d = VectorXi::Zero(2);
  ds.y = VectorXd::Ones(2);
  ds.names = {"x0"};
  CHECK_THROWS_AS(nearest_neighbor_match(space_of(ds.x), ds, Estimand::kAtt), ValidationError);
  const Dataset ok = tiny({0, 1, 2}, {1, 0, 0}, {1, 2, 3});
  MatrixXd short_z(2, 1);
  short_z << 0, 1;
  CHECK_THROWS_AS(nearest_neighbor_match(space_of(short_z), ok, Estimand::kAtt), ValidationError);
}

TEST_CASE("estimate equivariance and space-scaling invariance") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Dataset ds = testing::random_dataset(120, 3, seed);
    const MatchingSpace s = space_of(ds.x);
    const MatchResult base = nearest_neighbor_match(s, ds, Estimand::kAtt);

    Dataset shifted = ds;
    shifted.y.array() += 13.0;
    CHECK(nearest_neighbor_match(s, shifted, Estimand::kAtt).estimate ==
          doctest::Approx(base.estimate).epsilon(1e-12));

    Dataset scaled = ds;
    scaled.y *= -2.5;
    CHECK(nearest_neighbor_match(s, scaled, Estimand::kAtt).estimate ==
          doctest::Approx(-2.5 * base.estimate).epsilon(1e-12));

    const MatchResult wide = nearest_neighbor_match(space_of(ds.x * 4.0), ds, Estimand::kAtt);
    CHECK(wide.matches == base.matches);
    CHECK(wide.estimate == base.estimate);
  }
}

TEST_CASE("Abadie-Imbens variance: exact cases") {
  Dataset ds = testing::random_dataset(150, 2, 3);
  const MatchingSpace s = space_of(ds.x);

  SUBCASE("identical outcomes give zero") {
    ds.y.setConstant(4.0);
    const MatchResult r = match_and_estimate(s, ds, Estimand::kAtt);
    CHECK(r.variance == 0.0);
    CHECK(r.se == 0.0);
    CHECK(r.ci_low == r.ci_high);
  }
  SUBCASE("doubling outcomes quadruples the variance") {
    const MatchResult r = match_and_estimate(s, ds, Estimand::kAtt);
    Dataset twice = ds;
    twice.y *= 2.0;
    const MatchResult r2 = match_and_estimate(s, twice, Estimand::kAtt);
    CHECK(r.variance > 0.0);
    CHECK(r2.variance == doctest::Approx(4.0 * r.variance).epsilon(1e-12));
    CHECK(r.ci_high - r.ci_low == doctest::Approx(2 * 1.96 * r.se));
  }
  SUBCASE("hand-computed reuse term") {
    // Treated 0 and 1 both match control 2; control 2's J=2 neighbours are 3, 4.
    const Dataset h = tiny({0.0, 0.05, 0.1, 1.0, 2.0}, {1, 1, 0, 0, 0}, {5, 7, 1, 2, 6});
    const MatchResult r = nearest_neighbor_match(space_of(h.x), h, Estimand::kAtt);
    REQUIRE(r.matches == std::vector<Index>{2, 2});
    const double match_term = 1.0 + 1.0;  // taus 4 and 6 around 5
    const double sigma2 = 2.0 / 3.0 * std::pow(1.0 - 4.0, 2);
    const double expected = (match_term + 2.0 * 1.0 * sigma2) / 4.0;
    CHECK(abadie_imbens_variance(r, h, space_of(h.x)) == doctest::Approx(expected));
  }
  SUBCASE("too few matched-group units") {
    const Dataset h = tiny({0.0, 1.0, 2.0}, {1, 0, 0}, {1, 2, 3});
    const MatchResult r = nearest_neighbor_match(space_of(h.x), h, Estimand::kAtt);
    CHECK_THROWS_AS(abadie_imbens_variance(r, h, space_of(h.x), 2), ValidationError);
    CHECK_NOTHROW(abadie_imbens_variance(r, h, space_of(h.x), 1));
    CHECK_THROWS_AS(abadie_imbens_variance(r, h, space_of(h.x), 0), ValidationError);
  }
}

namespace {

struct MonteCarlo {
  double sd, mean_se, mean_variance;
};

// Sampling sd of the estimator with the mean estimated SE and variance.
MonteCarlo ai_monte_carlo(bool informative, int reps) {
  const Index n = 120;
  const double sigma = 1.0;
  std::vector<double> est(reps), se(reps);
  for (int r = 0; r < reps; ++r) {
    Rng rng = make_rng(derive_seed(2024, static_cast<std::uint64_t>(r)));
    MatrixXd x(n, 1);
    VectorXi d(n);
    VectorXd y(n);
    for (Index i = 0; i < n; ++i) {
      d[i] = i < n / 3 ? 1 : 0;
      x(i, 0) = informative ? uniform01(rng) : 0.0;
      y[i] = x(i, 0) + 2.0 * d[i] + sigma * standard_normal(rng);
    }
    const Dataset ds = make_dataset(x, d, y);
    const MatchResult m = match_and_estimate(space_of(x), ds, Estimand::kAtt);
    est[r] = m.estimate;
    se[r] = m.se;
  }
  double mean = 0.0, mean_se = 0.0, mean_var = 0.0;
  for (int r = 0; r < reps; ++r) {
    mean += est[r] / reps;
    mean_se += se[r] / reps;
    mean_var += se[r] * se[r] / reps;
  }
  double var = 0.0;
  for (int r = 0; r < reps; ++r) var += (est[r] - mean) * (est[r] - mean) / (reps - 1);
  return {std::sqrt(var), mean_se, mean_var};
}

}  // namespace

TEST_CASE("Abadie-Imbens SE tracks the Monte-Carlo sampling sd") {
  SUBCASE("constant space, every treated unit reuses the first control") {
    // ATT = mean(y_T) - y_0 has sd sqrt(1/40 + 1). The reuse term rests on a
    // single one-degree-of-freedom variance estimate, so the SE itself is
    // biased low by Jensen; its square is not.
    const MonteCarlo mc = ai_monte_carlo(false, 10000);
    CHECK(mc.sd == doctest::Approx(std::sqrt(1.0 / 40.0 + 1.0)).epsilon(0.03));
    CHECK(std::abs(mc.mean_variance / (mc.sd * mc.sd) - 1.0) < 0.10);
  }
  SUBCASE("informative one-dimensional space") {
    const MonteCarlo mc = ai_monte_carlo(true, 10000);
    CHECK(std::abs(mc.mean_se / mc.sd - 1.0) < 0.10);
  }
}

TEST_CASE("metric condition check examples") {
  SUBCASE("space equal to the score") {
    Dataset ds = testing::random_dataset(30, 1, 4);
    const VectorXd score = ds.x.col(0);
    const MetricCheckReport rep = metric_condition_check(space_of(ds.x), ds, score, 1.0, 10000, 1);
    CHECK(rep.min_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.pairs_evaluated == 435);
    CHECK(rep.satisfied);
  }
  SUBCASE("raw counterexample covariate against m is exactly 2-Lipschitz") {
    const Index n = 17;
    MatrixXd x(n, 1);
    VectorXi d = VectorXi::Zero(n);
    VectorXd m(n);
    for (Index i = 0; i < n; ++i) {
      x(i, 0) = -1.0 + i / 8.0;
      m[i] = counterexample_m(x(i, 0));
    }
    d[0] = 1;
    const Dataset ds = make_dataset(x, d, m);
    const MetricCheckReport rep = metric_condition_check(space_of(x), ds, m, 2.0, 1000, 1);
    CHECK(rep.min_ratio == 2.0);
    CHECK(rep.satisfied);
    CHECK(rep.pairs_violating == 0);
    CHECK_FALSE(metric_condition_check(space_of(x), ds, m, 2.0001, 1000, 1).satisfied);
  }
  SUBCASE("a space that folds x onto -x violates every positive constant") {
    const Dataset ds = tiny({0.5, -0.5, 0.9, -0.2}, {1, 0, 0, 1}, {0, 0, 0, 0});
    MatrixXd folded = ds.x.cwiseAbs();
    VectorXd m(4);
    for (Index i = 0; i < 4; ++i) m[i] = counterexample_m(ds.x(i, 0));
    const MetricCheckReport rep = metric_condition_check(space_of(folded), ds, m, 1e-3, 100, 1);
    CHECK(rep.min_ratio == 0.0);
    CHECK_FALSE(rep.satisfied);
    REQUIRE_FALSE(rep.worst.empty());
    CHECK(rep.worst[0].i == 0);
    CHECK(rep.worst[0].j == 1);
    CHECK(rep.worst[0].score_gap == 0.5);
  }
  SUBCASE("equal scores everywhere is an error") {
    const Dataset ds = tiny({0, 1, 2}, {1, 0, 0}, {1, 2, 3});
    CHECK_THROWS_AS(metric_condition_check(space_of(ds.x), ds, VectorXd::Ones(3), 1.0, 10, 1),
                    ValidationError);
  }
  SUBCASE("sampled pairs are reproducible") {
    Dataset ds = testing::random_dataset(400, 2, 9);
    const VectorXd score = ds.x.col(0) + ds.x.col(1);
    const auto a = metric_condition_check(space_of(ds.x), ds, score, 0.5, 500, 3);
    const auto b = metric_condition_check(space_of(ds.x), ds, score, 0.5, 500, 3);
    CHECK(a.pairs_evaluated == 500);
    CHECK(a.min_ratio == b.min_ratio);
    CHECK(a.min_ratio >= 0.0);
  }
}

TEST_CASE("match CSV and JSON summary") {
  const Dataset ds = tiny({0.0, 0.1, 3.0, 4.0}, {1, 0, 0, 1}, {5, 1, 9, 2});
  const MatchResult r = match_and_estimate(space_of(ds.x), ds, Estimand::kAtt, 1);
  const std::string path = testing::temp_path("matches.csv");
  write_match_csv(r, ds, path);
  std::ifstream in(path);
  std::stringstream body;
  body << in.rdbuf();
  CHECK(body.str() == "i,j,distance,y_i,y_j\n0,1,0.10000000000000001,5,1\n3,2,1,2,9\n");
  const auto j = match_summary_json(r, space_of(ds.x));
  CHECK(j["estimand"] == "ATT");
  CHECK(j["n_matched"] == 2);
}
