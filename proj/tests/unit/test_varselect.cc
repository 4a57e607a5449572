#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.h"
#include "metricmatch/error.h"
#include "metricmatch/simgen.h"
#include "metricmatch/varselect.h"

using namespace metricmatch;

namespace {

LassoFit fit_with_support(Index k, std::initializer_list<Index> support) {
  LassoFit f;
  f.coef = VectorXd::Zero(k);
  for (Index j : support) f.coef[j] = 0.3;
  return f;
}

Dataset lasso_data(Index n, Index k, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  MatrixXd x(n, k);
  VectorXd y(n);
  VectorXi d(n);
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < k; ++c) x(i, c) = standard_normal(rng) + (c == 1 ? 0.5 * x(i, 0) : 0.0);
    y[i] = 1.5 * x(i, 0) - 0.7 * x(i, 2) + 0.2 * x(i, 3) + standard_normal(rng);
    const double eta = 0.8 * x(i, 1) - 0.5 * x(i, 2) + 0.3;
    d[i] = uniform01(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
  }
  return make_dataset(x, d, y);
}

void check_kkt(const VectorXd& scores, const VectorXd& coef, double lambda) {
  for (Index j = 0; j < coef.size(); ++j) {
    CHECK(std::abs(scores[j]) <= lambda + 1e-6);
    if (coef[j] != 0.0) {
      CHECK(std::abs(scores[j] - lambda * (coef[j] > 0 ? 1.0 : -1.0)) <= 1e-6);
    }
  }
}

}  // namespace

TEST_CASE("linear lasso: unpenalized limit equals least squares") {
  const Dataset ds = lasso_data(300, 6, 1);
  const LassoFit fit = lasso_linear_at(ds.x, ds.y, 0.0);
  MatrixXd a(ds.n(), ds.k() + 1);
  a << VectorXd::Ones(ds.n()), ds.x;
  const VectorXd ols = a.colPivHouseholderQr().solve(ds.y);
  CHECK((fit.coef - ols.tail(ds.k())).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(std::abs(fit.intercept - ols[0]) < 1e-6);
}

TEST_CASE("linear lasso: lambda_max threshold") {
  const Dataset ds = lasso_data(200, 8, 2);
  const double lmax = lasso_linear_lambda_max(ds.x, ds.y);
  MatrixXd xc = ds.x.rowwise() - ds.x.colwise().mean();
  const double oracle = (xc.transpose() * (ds.y.array() - ds.y.mean()).matrix()).cwiseAbs().maxCoeff() / ds.n();
  CHECK(lmax == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(lasso_linear_at(ds.x, ds.y, lmax).coef.isZero(0.0));
  CHECK(lasso_linear_at(ds.x, ds.y, 3.0 * lmax).coef.isZero(0.0));
  CHECK(lasso_linear_at(ds.x, ds.y, 3.0 * lmax).intercept == doctest::Approx(ds.y.mean()));
  CHECK_FALSE(lasso_linear_at(ds.x, ds.y, 0.99 * lmax).coef.isZero(0.0));
}

TEST_CASE("linear lasso: KKT conditions on random problems") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng = make_rng(seed + 100);
    const Index k = 4 + static_cast<Index>(uniform_index(rng, 10));
    const Dataset ds = lasso_data(60 + static_cast<Index>(uniform_index(rng, 200)), k, seed);
    const double lmax = lasso_linear_lambda_max(ds.x, ds.y);
    const double lambda = lmax * uniform01(rng);
    const LassoFit fit = lasso_linear_at(ds.x, ds.y, lambda);
    CAPTURE(seed);
    check_kkt(lasso_linear_scores(ds.x, ds.y, fit), fit.coef, lambda);
    CHECK(fit.kkt_violation <= 1e-6);
    CHECK(fit.coef.allFinite());
  }
}

TEST_CASE("logit lasso: KKT conditions and null model") {
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    const Dataset ds = lasso_data(300, 5, seed);
    const double lmax = lasso_logit_lambda_max(ds.x, ds.d);
    const double lambda = lmax * (0.05 + 0.9 * (seed % 5) / 4.0);
    const LassoFit fit = lasso_logit_at(ds.x, ds.d, lambda);
    CAPTURE(seed);
    check_kkt(lasso_logit_scores(ds.x, ds.d, fit), fit.coef, lambda);

    const LassoFit null = lasso_logit_at(ds.x, ds.d, lmax * 1.01);
    CHECK(null.coef.isZero(0.0));
    const double share = ds.d.cast<double>().mean();
    CHECK(null.intercept == doctest::Approx(std::log(share / (1 - share))).epsilon(1e-9));
  }
}

TEST_CASE("logit lasso: separable data at lambda 0 fails to converge") {
  MatrixXd x(40, 2);
  VectorXi d(40);
  Rng rng = make_rng(3);
  for (Index i = 0; i < 40; ++i) {
    x(i, 0) = standard_normal(rng);
    x(i, 1) = standard_normal(rng);
    d[i] = x(i, 0) > 0 ? 1 : 0;
  }
  CHECK_THROWS_AS(lasso_logit_at(x, d, 0.0), NonConvergence);
}

TEST_CASE("cross-validated lasso records the curve and is reproducible") {
  const Dataset ds = lasso_data(250, 10, 5);
  LassoOptions opts;
  opts.seed = 7;
  const LassoFit a = lasso_linear(ds, opts);
  const LassoFit b = lasso_linear(ds, opts);
  CHECK(a.lambda_grid.size() == 50);
  CHECK(a.cv_loss.size() == 50);
  CHECK(a.lambda_grid.front() == doctest::Approx(lasso_linear_lambda_max(ds.x, ds.y)));
  CHECK(a.lambda_grid.back() == doctest::Approx(a.lambda_grid.front() * 1e-3));
  CHECK(a.coef == b.coef);
  const std::size_t best = std::min_element(a.cv_loss.begin(), a.cv_loss.end()) - a.cv_loss.begin();
  CHECK(a.lambda == a.lambda_grid[best]);
  CHECK(a.kkt_violation <= 1e-6);

  opts.penalty_scale = 2.0;
  const LassoFit strong = lasso_linear(ds, opts);
  CHECK(strong.lambda == 2.0 * a.lambda);
  CHECK(strong.support().size() <= a.support().size());

  const LassoFit l = lasso_logit(ds, LassoOptions{});
  CHECK(l.cv_loss.size() == 50);
  CHECK(l.kkt_violation <= 1e-6);
  for (Index j : {Index{1}, Index{2}}) {
    const auto s = l.support();
    CHECK(std::find(s.begin(), s.end(), j) != s.end());
  }
}

TEST_CASE("lasso supports recover the sparse linear design") {
  int outcome_hits = 0, treatment_hits = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    DgpSpec spec;
    spec.seed = seed;
    const Generated g = gen_sparse_linear(spec);
    LassoOptions opts;
    opts.seed = seed;
    const auto sy = lasso_linear(g.data, opts).support();
    const auto sd = lasso_logit(g.data, opts).support();
    outcome_hits += std::includes(sy.begin(), sy.end(), g.oracle->outcome.begin(),
                                  g.oracle->outcome.end());
    treatment_hits += std::includes(sd.begin(), sd.end(), g.oracle->treatment.begin(),
                                    g.oracle->treatment.end());
  }
  CHECK(outcome_hits >= 19);
  CHECK(treatment_hits >= 19);
}

TEST_CASE("L1 space is the support union of raw columns") {
  const Dataset ds = testing::random_dataset(30, 10, 3);
  const MatchingSpace s = l1_matching_space(ds, fit_with_support(10, {0, 2, 4}),
                                            fit_with_support(10, {1, 3, 5, 7}));
  CHECK(s.dim() == 7);
  CHECK(s.method == SpaceMethod::kL1);
  CHECK(s.z.col(6) == ds.x.col(7));
  CHECK(l1_matching_space(ds, fit_with_support(10, {2, 6}), fit_with_support(10, {2, 6})).dim() ==
        2);
  CHECK_THROWS_AS(l1_matching_space(ds, fit_with_support(10, {}), fit_with_support(10, {})),
                  DegenerateSpace);

  DgpSpec spec;
  spec.n = 50;
  const Generated g = gen_sparse_linear(spec);
  LassoFit fy, fd;
  fy.coef = fd.coef = VectorXd::Zero(50);
  for (Index j : g.oracle->outcome) fy.coef[j] = 0.5;
  for (Index j : g.oracle->treatment) fd.coef[j] = 0.5;
  const MatchingSpace o = l1_matching_space(g.data, fy, fd);
  CHECK(o.dim() == 10);
  CHECK(o.z == oracle_matching_space(g.data, *g.oracle, OracleMode::kUnion).z);
}

TEST_CASE("RRF at lambda 1 is the plain forest") {
  const Dataset ds = lasso_data(300, 6, 9);
  RrfOptions opts;
  opts.trees = 15;
  opts.seed = 4;
  for (RrfTarget target : {RrfTarget::kOutcome, RrfTarget::kTreatment}) {
    const RrfFit reg = rrf_train(ds, target, 1.0, opts);
    RrfOptions plain_opts = opts;
    plain_opts.regularize = false;
    const RrfFit plain = rrf_train(ds, target, 0.3, plain_opts);
    REQUIRE(reg.splits.size() == plain.splits.size());
    for (std::size_t s = 0; s < reg.splits.size(); ++s) {
      CHECK(reg.splits[s].feature == plain.splits[s].feature);
      CHECK(reg.splits[s].gain == plain.splits[s].gain);
    }
    CHECK(reg.importance == plain.importance);
    CHECK(reg.predict(ds.x) == plain.predict(ds.x));
  }
}

TEST_CASE("RRF penalizes the gain of features outside F") {
  const Dataset ds = lasso_data(200, 4, 2);
  RrfOptions opts;
  opts.trees = 3;
  const RrfFit fit = rrf_train(ds, RrfTarget::kOutcome, 0.5, opts);
  std::set<int> used;
  for (const RrfSplit& s : fit.splits) {
    const bool fresh = !used.count(s.feature);
    CHECK(s.penalized_gain == (fresh ? 0.5 * s.gain : s.gain));
    CHECK(s.gain > 0.0);
    used.insert(s.feature);
  }
  for (Index j = 0; j < ds.k(); ++j) CHECK((fit.importance[j] > 0.0) == (used.count(j) == 1));
  CHECK(fit.selected == std::vector<Index>(used.begin(), used.end()));
}

TEST_CASE("RRF at lambda 0: trace on two-feature toys") {
  RrfOptions opts;
  opts.trees = 1;
  opts.mtry = 2;
  opts.max_depth = 3;
  opts.min_node_size = 4;
  Rng rng = make_rng(6);
  const Index n = 200;
  MatrixXd x(n, 2);
  VectorXi d(n);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = standard_normal(rng);
    x(i, 1) = standard_normal(rng);
    d[i] = i % 2;
  }

  SUBCASE("the outcome is monotone in x0: only x0 is ever used") {
    const Dataset ds = make_dataset(x, d, x.col(0));
    const RrfFit fit = rrf_train(ds, RrfTarget::kOutcome, 0.0, opts);
    REQUIRE_FALSE(fit.splits.empty());
    CHECK(fit.splits[0].penalized_gain == 0.0);
    for (const RrfSplit& s : fit.splits) CHECK(s.feature == 0);
    CHECK(fit.selected == std::vector<Index>{0});
  }
  SUBCASE("a binary x0 exhausts its gain, after which x1 enters") {
    MatrixXd xb = x;
    for (Index i = 0; i < n; ++i) xb(i, 0) = i < n / 2 ? 0.0 : 1.0;
    VectorXd y = 3.0 * xb.col(0) + 0.3 * xb.col(1);
    const Dataset ds = make_dataset(xb, d, y);
    const RrfFit fit = rrf_train(ds, RrfTarget::kOutcome, 0.0, opts);
    REQUIRE(fit.splits.size() >= 3);
    CHECK(fit.splits[0].feature == 0);
    CHECK(fit.splits[0].node == 0);
    CHECK(fit.splits[1].feature == 1);
    CHECK(fit.splits[1].penalized_gain == 0.0);
    for (std::size_t s = 2; s < fit.splits.size(); ++s) {
      CHECK(fit.splits[s].feature == 1);
      CHECK(fit.splits[s].penalized_gain == fit.splits[s].gain);
    }
    CHECK(fit.selected == std::vector<Index>{0, 1});
  }
}

TEST_CASE("RRF errors") {
  Dataset ds = lasso_data(50, 3, 1);
  ds.y.setConstant(1.0);
  CHECK_THROWS_AS(rrf_train(ds, RrfTarget::kOutcome, 1.0), ComputeError);
  CHECK_THROWS_AS(rrf_train(ds, RrfTarget::kTreatment, 1.5), ValidationError);
}

TEST_CASE("RRF cross-validation picks a grid value deterministically") {
  const Dataset ds = lasso_data(200, 5, 8);
  RrfOptions opts;
  opts.trees = 5;
  opts.lambda_grid = {0.1, 0.5, 1.0};
  opts.folds = 3;
  const RrfFit a = rrf_train(ds, RrfTarget::kTreatment, 1.0, opts);
  const RrfFit b = rrf_train(ds, RrfTarget::kTreatment, 1.0, opts);
  CHECK(a.cv_loss.size() == 3);
  CHECK(a.cv_loss == b.cv_loss);
  CHECK(std::find(opts.lambda_grid.begin(), opts.lambda_grid.end(), a.lambda) !=
        opts.lambda_grid.end());
  const std::size_t best = std::min_element(a.cv_loss.begin(), a.cv_loss.end()) - a.cv_loss.begin();
  CHECK(a.lambda == opts.lambda_grid[best]);
}

TEST_CASE("RRF space scales columns by importance") {
  const Dataset ds = testing::random_dataset(20, 4, 5);
  RrfFit fy, fd;
  fy.importance = VectorXd::Zero(4);
  fd.importance = VectorXd::Zero(4);
  fy.importance[0] = 1.0;
  fy.importance[2] = 0.2;
  fd.importance[2] = 0.5;
  fd.importance[3] = 0.01;
  const MatchingSpace s = rrf_matching_space(ds, fy, fd);
  CHECK(s.method == SpaceMethod::kRrf);
  REQUIRE(s.dim() == 3);
  CHECK(s.z.col(0) == ds.x.col(0));
  CHECK(s.z.col(1) == 0.5 * ds.x.col(2));
  CHECK(s.z.col(2) == 0.01 * ds.x.col(3));
  const double full = (ds.x(0, 3) - ds.x(1, 3)) * (ds.x(0, 3) - ds.x(1, 3));
  const double scaled = (s.z(0, 2) - s.z(1, 2)) * (s.z(0, 2) - s.z(1, 2));
  CHECK(scaled == doctest::Approx(1e-4 * full));
  fy.importance.setZero();
  fd.importance.setZero();
  CHECK_THROWS_AS(rrf_matching_space(ds, fy, fd), DegenerateSpace);
}

TEST_CASE("unpenalized forests select nearly every covariate") {
  DgpSpec spec;
  spec.n = 2000;
  spec.seed = 2;
  const Generated g = gen_sparse_linear(spec);
  RrfOptions opts;
  opts.trees = 50;
  const RrfFit fy = rrf_train(g.data, RrfTarget::kOutcome, 1.0, opts);
  const RrfFit fd = rrf_train(g.data, RrfTarget::kTreatment, 1.0, opts);
  const MatchingSpace s = rrf_matching_space(g.data, fy, fd);
  CHECK(s.dim() > 40);
  for (Index j : fy.selected) CHECK(fy.importance[j] > 0.0);
}

TEST_CASE("fit JSON exports") {
  const Dataset ds = lasso_data(100, 4, 3);
  const LassoFit l = lasso_linear_at(ds.x, ds.y, 0.05);
  const auto jl = lasso_fit_json(l, ds.names);
  CHECK(jl["support"].size() == l.support().size());
  RrfOptions opts;
  opts.trees = 2;
  const auto jr = rrf_fit_json(rrf_train(ds, RrfTarget::kOutcome, 1.0, opts), ds.names);
  CHECK(jr.contains("selected"));
}
