#include <doctest.h>

#include <cmath>

#include "helpers.h"
#include "metricmatch/error.h"
#include "metricmatch/neuralnet.h"

using namespace metricmatch;

namespace {

MatrixXd normal_matrix(Index n, Index k, Rng& rng) {
  MatrixXd m(n, k);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) m(i, j) = standard_normal(rng);
  return m;
}

// Finite differences are meaningless across a ReLU kink; keep batches whose
// pre-activations stay clear of zero.
bool clear_of_kinks(const TrainedNet& net, const MatrixXd& x) {
  const ForwardCache c = forward(net, x);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (net.layers[l].act != Activation::kRelu) continue;
    if (c.pre[l].cwiseAbs().minCoeff() < 1e-3) return false;
  }
  return true;
}

TrainedNet random_net(Index in, const std::vector<int>& widths,
                      const std::vector<Activation>& acts, Rng& rng) {
  TrainedNet net = init_net(in, widths, acts, Init::kGlorotUniform, rng);
  for (auto& l : net.layers)
    for (Index r = 0; r < l.b.size(); ++r) l.b[r] = 0.3 * standard_normal(rng);
  return net;
}

}  // namespace

TEST_CASE("grad_check passes for every activation and loss") {
  const Activation hidden_acts[] = {Activation::kIdentity, Activation::kRelu, Activation::kElu,
                                    Activation::kSigmoid};
  Rng rng = make_rng(11);
  for (Activation act : hidden_acts) {
    for (Loss loss : {Loss::kSquaredError, Loss::kLogistic}) {
      const Activation out =
          loss == Loss::kLogistic ? Activation::kSigmoid : Activation::kIdentity;
      TrainedNet net;
      MatrixXd x;
      do {
        net = random_net(3, {5, 2, 1}, {act, act, out}, rng);
        x = normal_matrix(8, 3, rng);
      } while (!clear_of_kinks(net, x));
      VectorXd t(8);
      for (Index i = 0; i < 8; ++i)
        t[i] = loss == Loss::kLogistic ? (i % 2) : standard_normal(rng);
      CAPTURE(to_string(act));
      CAPTURE(to_string(loss));
      CHECK(grad_check(net, x, t, loss, 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("grad_check detects a negated weight gradient") {
  Rng rng = make_rng(4);
  const TrainedNet net = random_net(3, {4, 1}, {Activation::kSigmoid, Activation::kIdentity}, rng);
  const MatrixXd x = normal_matrix(10, 3, rng);
  VectorXd t(10);
  for (Index i = 0; i < 10; ++i) t[i] = standard_normal(rng);
  const double err = grad_check(net, x, t, Loss::kSquaredError, 1e-5, [](Gradients& g) {
    Index r, c;
    g.w[0].cwiseAbs().maxCoeff(&r, &c);
    g.w[0](r, c) = -g.w[0](r, c);
  });
  CHECK(err > 1e-1);
}

TEST_CASE("grad_check edge cases") {
  const TrainedNet empty;
  CHECK(grad_check(empty, MatrixXd(2, 0), VectorXd::Zero(2), Loss::kSquaredError, 1e-5) == 0.0);
  Rng rng = make_rng(1);
  const TrainedNet net = random_net(2, {1}, {Activation::kIdentity}, rng);
  const MatrixXd x = normal_matrix(3, 2, rng);
  CHECK_THROWS_AS(grad_check(net, x, VectorXd::Zero(3), Loss::kSquaredError, 1e-2),
                  ValidationError);
  CHECK_THROWS_AS(grad_check(net, x, VectorXd::Zero(3), Loss::kSquaredError, 1e-9),
                  ValidationError);
}

TEST_CASE("zero-initialised linear net recovers the least-squares slope") {
  Rng rng = make_rng(8);
  const MatrixXd x = normal_matrix(200, 1, rng);
  const VectorXd y = 2.0 * x.col(0);
  NetConfig cfg;
  cfg.hidden = {};
  cfg.activations = {};
  cfg.init = Init::kZeros;
  cfg.standardize_target = false;
  const TrainedNet net = train_arrays(x, y, cfg);
  const double xm = x.col(0).mean(), ym = y.mean();
  const double slope = (x.col(0).array() - xm).matrix().dot((y.array() - ym).matrix()) /
                       (x.col(0).array() - xm).square().sum();
  CHECK(slope == doctest::Approx(2.0));
  CHECK(std::abs(net.layers[0].w(0, 0) - slope) < 1e-2);
}

TEST_CASE("logistic net on label noise ends near ln 2") {
  Rng rng = make_rng(21);
  const Index n = 400;
  const MatrixXd x = normal_matrix(n, 3, rng);
  VectorXd t(n);
  for (Index i = 0; i < n; ++i) t[i] = i % 2;
  NetConfig cfg = treatment_net_config();
  cfg.epochs = 50;
  const TrainedNet net = train_arrays(x, t, cfg);
  CHECK(std::abs(net.loss_trace.back() - std::log(2.0)) < 0.05);
}

TEST_CASE("training is deterministic and the loss trace never increases") {
  const Dataset ds = testing::random_dataset(150, 4, 3);
  NetConfig cfg = outcome_net_config(Estimand::kAtt);
  cfg.epochs = 30;
  cfg.seed = 17;
  const TrainedNet a = train(ds, cfg);
  const TrainedNet b = train(ds, cfg);
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].w == b.layers[l].w);
    CHECK(a.layers[l].b == b.layers[l].b);
  }
  REQUIRE(a.loss_trace.size() == 31);
  for (std::size_t e = 1; e < a.loss_trace.size(); ++e)
    CHECK(a.loss_trace[e] <= a.loss_trace[e - 1]);
  for (const auto& l : a.layers) CHECK(l.w.allFinite());
}

TEST_CASE("a huge learning rate reports divergence") {
  const Dataset ds = testing::random_dataset(100, 3, 2);
  NetConfig cfg = outcome_net_config(Estimand::kAtt);
  cfg.activations = {Activation::kIdentity, Activation::kIdentity};
  cfg.learning_rate = 1e200;
  cfg.epochs = 5;
  CHECK_THROWS_AS(train(ds, cfg), TrainingDiverged);
}

TEST_CASE("predict") {
  Rng rng = make_rng(2);
  SUBCASE("zero weights give the output bias") {
    TrainedNet net = init_net(3, {2, 1}, {Activation::kRelu, Activation::kIdentity},
                              Init::kZeros, rng);
    net.layers[1].b[0] = 1.25;
    const VectorXd p = predict(net, normal_matrix(5, 3, rng));
    CHECK(p == VectorXd::Constant(5, 1.25));
  }
  SUBCASE("sigmoid outputs lie in (0, 1)") {
    TrainedNet net = random_net(2, {3, 1}, {Activation::kRelu, Activation::kSigmoid}, rng);
    net.layers[1].w *= 50.0;
    const VectorXd p = predict(net, 10.0 * normal_matrix(100, 2, rng));
    CHECK(p.minCoeff() > 0.0);
    CHECK(p.maxCoeff() < 1.0);
  }
  SUBCASE("ReLU clamps a negative input") {
    TrainedNet net = init_net(1, {1, 1}, {Activation::kRelu, Activation::kIdentity},
                              Init::kZeros, rng);
    net.layers[0].w(0, 0) = 1.0;
    net.layers[1].w(0, 0) = 1.0;
    MatrixXd x(1, 1);
    x << -3.0;
    CHECK(predict(net, x)[0] == 0.0);
  }
  SUBCASE("width mismatch") {
    const TrainedNet net = random_net(2, {3, 1}, {Activation::kRelu, Activation::kIdentity}, rng);
    CHECK_THROWS_AS(predict(net, normal_matrix(4, 3, rng)), ValidationError);
    CHECK_THROWS_AS(extract_embedding(net, normal_matrix(4, 1, rng)), ValidationError);
  }
}

TEST_CASE("extract_embedding") {
  Rng rng = make_rng(6);
  SUBCASE("identity embedding layer returns the previous layer") {
    TrainedNet net = random_net(3, {4, 4, 1},
                                {Activation::kRelu, Activation::kIdentity, Activation::kIdentity},
                                rng);
    net.layers[1].w = MatrixXd::Identity(4, 4);
    net.layers[1].b.setZero();
    const MatrixXd x = normal_matrix(7, 3, rng);
    const MatrixXd e = extract_embedding(net, x);
    CHECK(e == forward(net, x).post[1]);
  }
  SUBCASE("shape and row independence") {
    const TrainedNet net = random_net(5, {8, 3, 1},
                                      {Activation::kRelu, Activation::kRelu, Activation::kIdentity},
                                      rng);
    const MatrixXd x = normal_matrix(20, 5, rng);
    const MatrixXd e = extract_embedding(net, x);
    CHECK(e.rows() == 20);
    CHECK(e.cols() == 3);
    for (Index i = 0; i < 20; i += 3) {
      const MatrixXd single = extract_embedding(net, x.row(i));
      CHECK((single.row(0) - e.row(i)).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK(extract_embedding(net, x) == e);
  }
}

TEST_CASE("net config validation") {
  NetConfig cfg = outcome_net_config(Estimand::kAtt);
  cfg.activations[0] = Activation::kElu;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.allow_elu = true;
  CHECK_NOTHROW(cfg.validate());
  NetConfig mixed = outcome_net_config(Estimand::kAtt);
  mixed.loss = Loss::kLogistic;
  CHECK_THROWS_AS(mixed.validate(), ValidationError);
  CHECK_NOTHROW(treatment_net_config().validate());
}

TEST_CASE("scaled embedding space") {
  Rng rng = make_rng(9);
  const std::vector<Activation> acts = {Activation::kRelu, Activation::kRelu,
                                        Activation::kIdentity};
  TrainedNet net_d = random_net(4, {6, 4, 1}, acts, rng);
  net_d.layers[2].act = Activation::kSigmoid;
  TrainedNet net_y = random_net(4, {6, 4, 1}, acts, rng);
  const MatrixXd x = normal_matrix(30, 4, rng);

  SUBCASE("z_d = z_y = 4 gives width 8 before pruning") {
    CHECK(scaled_embedding_space(net_d, net_y, x).dim() == 8);
  }
  SUBCASE("a zero output weight zeroes its column, which pruning drops") {
    net_y.layers[2].w(0, 1) = 0.0;
    const MatchingSpace s = scaled_embedding_space(net_d, net_y, x);
    CHECK(s.z.col(5).isZero());
    const MatchingSpace p = prune_columns(s);
    CHECK(std::find(p.labels.begin(), p.labels.end(), "y1") == p.labels.end());
  }
  SUBCASE("a duplicated learned feature survives once") {
    net_y.layers[1].w.row(3) = net_y.layers[1].w.row(2);
    net_y.layers[1].b[3] = net_y.layers[1].b[2];
    const MatchingSpace s = scaled_embedding_space(net_d, net_y, x);
    const MatchingSpace p = prune_columns(s);
    const bool y2 = std::find(p.labels.begin(), p.labels.end(), "y2") != p.labels.end();
    const bool y3 = std::find(p.labels.begin(), p.labels.end(), "y3") != p.labels.end();
    CHECK((y2 != y3 || s.z.col(6).isZero()));
  }
  SUBCASE("reparameterising output weight against incoming weights") {
    const double c = 3.0;
    TrainedNet moved = net_y;
    moved.layers[2].w *= c;
    moved.layers[1].w /= c;
    moved.layers[1].b /= c;
    // ReLU is positively homogeneous, so predictions do not move.
    CHECK((predict(moved, x) - predict(net_y, x)).cwiseAbs().maxCoeff() < 1e-12);
    const MatchingSpace before = scaled_embedding_space(net_d, net_y, x);
    const MatchingSpace after = scaled_embedding_space(net_d, moved, x);
    CHECK((after.z - before.z).cwiseAbs().maxCoeff() < 1e-12);
    // Scaling the output weights alone scales the outcome columns by c.
    TrainedNet scaled = net_y;
    scaled.layers[2].w *= c;
    const MatchingSpace s2 = scaled_embedding_space(net_d, scaled, x);
    CHECK((s2.z.rightCols(4) - c * before.z.rightCols(4)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(s2.z.leftCols(4) == before.z.leftCols(4));
  }
}

TEST_CASE("nn_matching_space") {
  const Dataset ds = testing::random_dataset(120, 3, 12);
  NetConfig cfg_y = outcome_net_config(Estimand::kAtt);
  NetConfig cfg_d = treatment_net_config();
  cfg_y.epochs = cfg_d.epochs = 5;
  const MatchingSpace s = nn_matching_space(ds, cfg_y, cfg_d, Estimand::kAtt);
  CHECK(s.n() == ds.n());
  CHECK(s.dim() >= 1);
  CHECK(s.dim() <= 8);
  CHECK(s.method == SpaceMethod::kNn);
  const MatchingSpace again = nn_matching_space(ds, cfg_y, cfg_d, Estimand::kAtt);
  CHECK(again.z == s.z);

  CHECK_THROWS_AS(nn_matching_space(ds, cfg_y, cfg_d, Estimand::kAtut), ValidationError);
  CHECK_THROWS_AS(nn_matching_space(ds, cfg_d, cfg_y, Estimand::kAtt), ValidationError);
  NetConfig elu = cfg_y;
  elu.activations[0] = Activation::kElu;
  CHECK_THROWS_AS(nn_matching_space(ds, elu, cfg_d, Estimand::kAtt), ValidationError);
}
