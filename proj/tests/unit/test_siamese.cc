#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.h"
#include "metricmatch/error.h"
#include "metricmatch/siamese.h"
#include "metricmatch/simgen.h"

using namespace metricmatch;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t s = 0; s < idx.size();) {
    std::size_t e = s;
    while (e + 1 < idx.size() && v[idx[e + 1]] == v[idx[s]]) ++e;
    for (std::size_t t = s; t <= e; ++t) r[idx[t]] = 0.5 * (s + e);
    s = e + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("contrastive pairs are half same-class, half cross-class") {
  const Dataset ds = testing::random_dataset(80, 2, 5);
  const SnnConfig cfg = treatment_snn_config();
  const PairBatch batch = sample_pairs(ds, cfg, 1000, 3);
  REQUIRE(batch.size() == 1000);
  int same = 0;
  for (std::size_t p = 0; p < batch.size(); ++p) {
    const auto [i, j] = batch.pairs[p];
    CHECK(i < j);
    CHECK(j < ds.n());
    CHECK((ds.d[i] == ds.d[j]) == (batch.similar[p] == 1));
    same += batch.similar[p];
  }
  CHECK(same == 500);
}

TEST_CASE("pair sampling edge cases") {
  MatrixXd x(2, 1);
  x << 0.0, 1.0;
  VectorXi d(2);
  d << 1, 0;
  const Dataset two = make_dataset(x, d, VectorXd::Zero(2));
  SnnConfig cfg = outcome_snn_config(Estimand::kAtt);
  cfg.subsample = Subsample::kPooled;
  const PairBatch b = sample_pairs(two, cfg, 5, 1);
  for (const auto& p : b.pairs) CHECK(p == std::pair<Index, Index>{0, 1});

  SnnConfig contrast = treatment_snn_config();
  const PairBatch cross = sample_pairs(two, contrast, 4, 1);
  for (int s : cross.similar) CHECK(s == 0);

  Dataset one_class = two;
  one_class.d << 1, 1;
  CHECK_THROWS_AS(sample_pairs(one_class, contrast, 4, 1), ValidationError);

  cfg.subsample = Subsample::kTreatedOnly;
  CHECK_THROWS_AS(sample_pairs(two, cfg, 4, 1), ValidationError);
}

TEST_CASE("pair sampling is deterministic and respects the subsample") {
  const Dataset ds = testing::random_dataset(60, 2, 8);
  SnnConfig cfg = outcome_snn_config(Estimand::kAtt);
  cfg.seed = 44;
  const PairBatch a = sample_pairs(ds, cfg);
  const PairBatch b = sample_pairs(ds, cfg);
  CHECK(a.pairs == b.pairs);
  CHECK(a.size() == static_cast<std::size_t>(20 * ds.n_control()));
  for (std::size_t p = 0; p < a.size(); ++p) {
    CHECK(ds.d[a.pairs[p].first] == 0);
    CHECK(ds.d[a.pairs[p].second] == 0);
    CHECK(a.yi[p] == ds.y[a.pairs[p].first]);
  }
}

TEST_CASE("loss examples") {
  const VectorXd e = vec({0.3, -1.0});
  CHECK(contrastive_loss(e, e, 1, 1.0) == 0.0);
  CHECK(contrastive_loss(vec({0, 0}), vec({3, 4}), 0, 1.0) == 0.0);
  CHECK(contrastive_loss(e, e, 0, 1.0) == 1.0);
  CHECK(contrastive_loss(vec({0, 0}), vec({0.6, 0.8}), 1, 1.0) == doctest::Approx(1.0));
  CHECK(outcome_pair_loss(e, e, 2.0, 2.0) == 0.0);
  CHECK(outcome_pair_loss(vec({0, 0}), vec({0.6, 0.8}), 1.0, 2.0) == doctest::Approx(0.0));
  CHECK(outcome_pair_loss(e, e, 1.0, 3.0) == 4.0);
  CHECK_THROWS_AS(outcome_pair_loss(e, vec({1}), 0, 0), ValidationError);
}

TEST_CASE("losses are symmetric and non-negative") {
  Rng rng = make_rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const Index z = 1 + static_cast<Index>(uniform_index(rng, 5));
    VectorXd a(z), b(z);
    for (Index c = 0; c < z; ++c) {
      a[c] = standard_normal(rng);
      b[c] = standard_normal(rng);
    }
    const double yi = standard_normal(rng), yj = standard_normal(rng);
    const double margin = 0.1 + 2.0 * uniform01(rng);
    for (int s : {0, 1}) {
      const double l = contrastive_loss(a, b, s, margin);
      CHECK(l >= 0.0);
      CHECK(l == contrastive_loss(b, a, s, margin));
    }
    const double o = outcome_pair_loss(a, b, yi, yj);
    CHECK(o >= 0.0);
    CHECK(o == outcome_pair_loss(b, a, yj, yi));
  }
}

TEST_CASE("pairwise gradients match finite differences") {
  Rng rng = make_rng(23);
  const Dataset ds = testing::random_dataset(30, 3, 4);
  for (PairLoss loss : {PairLoss::kContrastive, PairLoss::kOutcomePair}) {
    SnnConfig cfg = loss == PairLoss::kContrastive ? treatment_snn_config()
                                                   : outcome_snn_config(Estimand::kAtt);
    cfg.margin = 3.0;
    const PairBatch batch = sample_pairs(ds, cfg, 24, 7);
    TrainedNet tower = init_net(3, {6, 3}, {Activation::kSigmoid, Activation::kIdentity},
                                Init::kGlorotUniform, rng);
    for (auto& l : tower.layers)
      for (Index r = 0; r < l.b.size(); ++r) l.b[r] = 0.2 * standard_normal(rng);
    CAPTURE(to_string(loss));
    CHECK(snn_grad_check(tower, ds.x, batch, loss, cfg.margin, 1e-5) < 1e-4);
  }
}

TEST_CASE("train_snn collapses the embedding when the outcome is constant") {
  Dataset ds = testing::random_dataset(80, 3, 6);
  ds.y.setConstant(2.5);
  SnnConfig cfg = outcome_snn_config(Estimand::kAtt);
  cfg.epochs = 30;
  cfg.learning_rate = 1e-2;
  const TrainedNet tower = train_snn(ds, cfg);
  CHECK(tower.loss_trace.size() == 30);
  CHECK(tower.loss_trace.back() < 1e-3);
  CHECK(tower.loss_trace.back() < tower.loss_trace.front());
}

TEST_CASE("train_snn is deterministic") {
  const Dataset ds = testing::random_dataset(60, 3, 7);
  SnnConfig cfg = treatment_snn_config();
  cfg.epochs = 3;
  const TrainedNet a = train_snn(ds, cfg);
  const TrainedNet b = train_snn(ds, cfg);
  for (std::size_t l = 0; l < a.layers.size(); ++l) CHECK(a.layers[l].w == b.layers[l].w);
  CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("snn_matching_space concatenates unscaled tower outputs") {
  const Dataset ds = testing::random_dataset(90, 3, 9);
  SnnConfig cy = outcome_snn_config(Estimand::kAtt);
  SnnConfig cd = treatment_snn_config();
  cy.epochs = cd.epochs = 2;
  const MatchingSpace s = snn_matching_space(ds, cy, cd, Estimand::kAtt);
  CHECK(s.method == SpaceMethod::kSnn);
  CHECK(s.dim() <= 8);
  const MatrixXd my = embed(train_snn(ds, cy), ds.x);
  const MatrixXd md = embed(train_snn(ds, cd), ds.x);
  for (Index c = 0; c < s.dim(); ++c) {
    const std::string& label = s.labels[c];
    const Index j = std::stoi(label.substr(1));
    CHECK(s.z.col(c) == (label[0] == 'd' ? md.col(j) : my.col(j)));
  }
  CHECK_THROWS_AS(snn_matching_space(ds, cy, cd, Estimand::kAtut), ValidationError);
  CHECK_THROWS_AS(snn_matching_space(ds, cd, cy, Estimand::kAtt), ValidationError);
}

TEST_CASE("a collapsed tower's columns are pruned") {
  Rng rng = make_rng(1);
  const Dataset ds = testing::random_dataset(40, 3, 2);
  TrainedNet dead = init_net(3, {4, 2}, {Activation::kRelu, Activation::kIdentity},
                             Init::kZeros, rng);
  TrainedNet live = init_net(3, {4, 2}, {Activation::kRelu, Activation::kIdentity},
                             Init::kGlorotUniform, rng);
  MatchingSpace s;
  s.method = SpaceMethod::kSnn;
  s.z.resize(ds.n(), 4);
  s.z << embed(dead, ds.x), embed(live, ds.x);
  s.labels = {"d0", "d1", "y0", "y1"};
  const MatchingSpace p = prune_columns(s);
  CHECK(p.labels == std::vector<std::string>{"y0", "y1"});
}

TEST_CASE("control-trained tower distances track prognostic-score gaps") {
  DgpSpec spec;
  spec.kind = DgpKind::kCounterexample;
  spec.n = 3000;
  spec.seed = 5;
  const Dataset ds = gen_counterexample(spec);
  SnnConfig cfg = outcome_snn_config(Estimand::kAtt);
  cfg.epochs = 15;
  cfg.pairs_per_unit = 10;
  const TrainedNet tower = train_snn(ds, cfg);
  MatrixXd grid(41, 1);
  for (Index g = 0; g < 41; ++g) grid(g, 0) = -1.0 + 0.05 * g;
  const MatrixXd e = embed(tower, grid);
  std::vector<double> dist, gap;
  for (Index a = 0; a < 41; ++a) {
    for (Index b = a + 1; b < 41; ++b) {
      dist.push_back((e.row(a) - e.row(b)).norm());
      gap.push_back(std::abs(counterexample_m(grid(a, 0)) - counterexample_m(grid(b, 0))));
    }
  }
  CHECK(spearman(dist, gap) > 0.5);
}
