#include "metricmatch/siamese.h"

#include <algorithm>
#include <cmath>

#include "metricmatch/error.h"

namespace metricmatch {

const char* to_string(PairLoss l) {
  return l == PairLoss::kContrastive ? "contrastive" : "outcome_pair";
}

void SnnConfig::validate() const {
  if (hidden.empty() || hidden.size() != activations.size()) {
    throw ValidationError("snn config: need one activation per tower layer");
  }
  for (int w : hidden) {
    if (w < 1) throw ValidationError("snn config: layer widths must be >= 1");
  }
  for (Activation a : activations) {
    if (a == Activation::kElu) throw ValidationError("snn config: ELU is not allowed");
  }
  if (!(margin > 0.0)) throw ValidationError("snn config: margin must be > 0");
  if (pairs_per_unit < 1 || epochs < 0 || batch_size < 1) {
    throw ValidationError("snn config: need pairs_per_unit >= 1, epochs >= 0, batch >= 1");
  }
  if (!(learning_rate > 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw ValidationError("snn config: need learning_rate > 0 and momentum in [0, 1)");
  }
}

SnnConfig outcome_snn_config(Estimand estimand) {
  SnnConfig cfg;
  cfg.loss = PairLoss::kOutcomePair;
  cfg.subsample =
      estimand == Estimand::kAtt ? Subsample::kControlOnly : Subsample::kTreatedOnly;
  return cfg;
}

SnnConfig treatment_snn_config() {
  SnnConfig cfg;
  cfg.loss = PairLoss::kContrastive;
  cfg.subsample = Subsample::kPooled;
  cfg.standardize_target = false;
  return cfg;
}

namespace {

std::pair<Index, Index> ordered(Index a, Index b) { return {std::min(a, b), std::max(a, b)}; }

std::pair<Index, Index> distinct_pair(const std::vector<Index>& pool, Rng& rng) {
  const std::size_t a = uniform_index(rng, pool.size());
  std::size_t b = uniform_index(rng, pool.size() - 1);
  if (b >= a) ++b;
  return ordered(pool[a], pool[b]);
}

}  // namespace

PairBatch sample_pairs(const Dataset& ds, const SnnConfig& cfg, std::size_t count,
                       std::uint64_t seed) {
  PairBatch batch;
  Rng rng = make_rng(seed);
  if (cfg.loss == PairLoss::kContrastive) {
    std::vector<Index> control, treated;
    for (Index i = 0; i < ds.n(); ++i) (ds.d[i] ? treated : control).push_back(i);
    if (control.empty() || treated.empty()) {
      throw ValidationError("contrastive pairs need both treatment classes");
    }
    auto pairs_in = [](std::size_t m) { return m * (m - 1) / 2; };
    const double same_c = static_cast<double>(pairs_in(control.size()));
    const double same_t = static_cast<double>(pairs_in(treated.size()));
    const std::size_t n_same = same_c + same_t > 0.0 ? count / 2 : 0;
    for (std::size_t p = 0; p < count; ++p) {
      if (p < n_same) {
        const bool use_t = uniform01(rng) * (same_c + same_t) < same_t;
        batch.pairs.push_back(distinct_pair(use_t ? treated : control, rng));
        batch.similar.push_back(1);
      } else {
        const Index t = treated[uniform_index(rng, treated.size())];
        const Index c = control[uniform_index(rng, control.size())];
        batch.pairs.push_back(ordered(t, c));
        batch.similar.push_back(0);
      }
    }
    // Interleave the two halves so every minibatch sees both kinds.
    std::vector<std::size_t> perm(count);
    for (std::size_t p = 0; p < count; ++p) perm[p] = p;
    shuffle(perm, rng);
    PairBatch mixed;
    for (std::size_t p : perm) {
      mixed.pairs.push_back(batch.pairs[p]);
      mixed.similar.push_back(batch.similar[p]);
    }
    batch = std::move(mixed);
  } else {
    const std::vector<Index> pool = subsample_rows(ds, cfg.subsample);
    if (pool.size() < 2) {
      throw ValidationError("outcome pairs need at least two rows in the subsample");
    }
    for (std::size_t p = 0; p < count; ++p) batch.pairs.push_back(distinct_pair(pool, rng));
  }
  batch.yi.reserve(count);
  batch.yj.reserve(count);
  for (const auto& [i, j] : batch.pairs) {
    batch.yi.push_back(ds.y[i]);
    batch.yj.push_back(ds.y[j]);
  }
  if (batch.similar.empty()) batch.similar.assign(count, 0);
  return batch;
}

PairBatch sample_pairs(const Dataset& ds, const SnnConfig& cfg) {
  const std::size_t eligible =
      cfg.loss == PairLoss::kContrastive ? static_cast<std::size_t>(ds.n())
                                         : subsample_rows(ds, cfg.subsample).size();
  return sample_pairs(ds, cfg, static_cast<std::size_t>(cfg.pairs_per_unit) * eligible,
                      cfg.seed);
}

double contrastive_loss(const VectorXd& e_i, const VectorXd& e_j, int similar,
                        double margin) {
  if (e_i.size() != e_j.size()) throw ValidationError("embedding lengths differ");
  const double dist = (e_i - e_j).norm();
  if (similar) return dist * dist;
  const double gap = std::max(0.0, margin - dist);
  return gap * gap;
}

double outcome_pair_loss(const VectorXd& e_i, const VectorXd& e_j, double y_i, double y_j) {
  if (e_i.size() != e_j.size()) throw ValidationError("embedding lengths differ");
  const double r = (e_i - e_j).norm() - std::abs(y_i - y_j);
  return r * r;
}

namespace {

// Loss and dL/d(e_i - e_j) for one pair given the difference vector.
double pair_term(const VectorXd& diff, PairLoss loss, int similar, double yi, double yj,
                 double margin, VectorXd* grad_diff) {
  const double dist = diff.norm();
  if (loss == PairLoss::kContrastive && similar) {
    if (grad_diff) *grad_diff = 2.0 * diff;
    return dist * dist;
  }
  const double target = loss == PairLoss::kContrastive ? margin : std::abs(yi - yj);
  if (loss == PairLoss::kContrastive && dist >= margin) {
    if (grad_diff) grad_diff->setZero(diff.size());
    return 0.0;
  }
  // Both remaining cases are (dist - target)^2; the gradient direction is
  // undefined at dist = 0 and taken as zero there.
  const double r = dist - target;
  if (grad_diff) {
    if (dist > 0.0) {
      *grad_diff = (2.0 * r / dist) * diff;
    } else {
      grad_diff->setZero(diff.size());
    }
  }
  return r * r;
}

void gather(const MatrixXd& x, const PairBatch& batch, std::size_t begin, std::size_t end,
            MatrixXd& a, MatrixXd& b) {
  const Index m = static_cast<Index>(end - begin);
  a.resize(m, x.cols());
  b.resize(m, x.cols());
  for (Index r = 0; r < m; ++r) {
    a.row(r) = x.row(batch.pairs[begin + r].first);
    b.row(r) = x.row(batch.pairs[begin + r].second);
  }
}

double batch_loss(const TrainedNet& tower, const MatrixXd& x, const PairBatch& batch,
                  std::size_t begin, std::size_t end, PairLoss loss, double margin,
                  Gradients* grad) {
  MatrixXd xa, xb;
  gather(x, batch, begin, end, xa, xb);
  const ForwardCache ca = forward(tower, xa);
  const ForwardCache cb = forward(tower, xb);
  const MatrixXd& ea = ca.post.back();
  const MatrixXd& eb = cb.post.back();
  const Index m = ea.rows();
  const double scale = 1.0 / static_cast<double>(m);
  MatrixXd ga(m, ea.cols());
  double total = 0.0;
  VectorXd diff, gdiff(ea.cols());
  for (Index r = 0; r < m; ++r) {
    const std::size_t p = begin + r;
    diff = (ea.row(r) - eb.row(r)).transpose();
    total += pair_term(diff, loss, batch.similar[p], batch.yi[p], batch.yj[p], margin,
                       grad ? &gdiff : nullptr);
    if (grad) ga.row(r) = scale * gdiff.transpose();
  }
  if (grad) {
    backward(tower, ca, ga, grad);
    backward(tower, cb, -ga, grad);
  }
  return total * scale;
}

}  // namespace

double pair_loss_and_gradient(const TrainedNet& tower, const MatrixXd& x,
                              const PairBatch& batch, PairLoss loss, double margin,
                              Gradients* grad) {
  if (batch.size() == 0) return 0.0;
  if (x.cols() != tower.input_width()) {
    throw ValidationError("pair inputs do not match the tower input width");
  }
  return batch_loss(tower, x, batch, 0, batch.size(), loss, margin, grad);
}

double snn_grad_check(const TrainedNet& tower, const MatrixXd& x, const PairBatch& batch,
                      PairLoss loss, double margin, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ValidationError("grad_check epsilon must lie in [1e-7, 1e-3]");
  }
  if (tower.parameter_count() == 0) return 0.0;
  Gradients g = Gradients::zeros_like(tower);
  pair_loss_and_gradient(tower, x, batch, loss, margin, &g);
  TrainedNet probe = tower;
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = pair_loss_and_gradient(probe, x, batch, loss, margin, nullptr);
    param = saved - epsilon;
    const double down = pair_loss_and_gradient(probe, x, batch, loss, margin, nullptr);
    param = saved;
    worst = std::max(worst, gradient_relative_error(analytic, (up - down) / (2.0 * epsilon)));
  };
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    auto& layer = probe.layers[l];
    for (Index r = 0; r < layer.w.rows(); ++r) {
      for (Index c = 0; c < layer.w.cols(); ++c) check(layer.w(r, c), g.w[l](r, c));
    }
    for (Index r = 0; r < layer.b.size(); ++r) check(layer.b[r], g.b[l][r]);
  }
  return worst;
}

TrainedNet train_snn(const Dataset& ds, const SnnConfig& cfg) {
  cfg.validate();
  Dataset work;
  if (cfg.loss == PairLoss::kContrastive) {
    if (cfg.subsample != Subsample::kPooled) {
      throw ValidationError("contrastive towers train on the pooled sample");
    }
    work = oversample_treated(ds, 0.10, 0.10, derive_seed(cfg.seed, 0x05A));
  } else {
    work = select_rows(ds, subsample_rows(ds, cfg.subsample));
    if (work.n() < 2) throw ValidationError("outcome tower needs at least two training rows");
    if (cfg.standardize_target) {
      const double mean = work.y.mean();
      const double sd = std::sqrt((work.y.array() - mean).square().sum() /
                                  static_cast<double>(work.n() - 1));
      work.y = (work.y.array() - mean) / (sd > 0.0 ? sd : 1.0);
    }
  }

  Rng rng = make_rng(cfg.seed);
  TrainedNet tower = init_net(work.k(), cfg.hidden, cfg.activations, Init::kGlorotUniform, rng);
  Gradients velocity = Gradients::zeros_like(tower);
  const std::size_t eligible =
      cfg.loss == PairLoss::kContrastive ? static_cast<std::size_t>(work.n())
                                         : static_cast<std::size_t>(work.n());
  const std::size_t per_epoch = static_cast<std::size_t>(cfg.pairs_per_unit) * eligible;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  SnnConfig local = cfg;
  if (cfg.loss == PairLoss::kOutcomePair) local.subsample = Subsample::kPooled;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const PairBatch pairs =
        sample_pairs(work, local, per_epoch, derive_seed(cfg.seed, 1000 + epoch));
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < pairs.size(); start += bs) {
      const std::size_t end = std::min(pairs.size(), start + bs);
      Gradients g = Gradients::zeros_like(tower);
      sum += batch_loss(tower, work.x, pairs, start, end, cfg.loss, cfg.margin, &g);
      ++batches;
      for (std::size_t l = 0; l < tower.layers.size(); ++l) {
        velocity.w[l] = cfg.momentum * velocity.w[l] - cfg.learning_rate * g.w[l];
        velocity.b[l] = cfg.momentum * velocity.b[l] - cfg.learning_rate * g.b[l];
        tower.layers[l].w += velocity.w[l];
        tower.layers[l].b += velocity.b[l];
      }
    }
    const double mean_loss = batches ? sum / static_cast<double>(batches) : 0.0;
    if (!std::isfinite(mean_loss)) {
      throw TrainingDiverged("siamese loss became non-finite at epoch " +
                             std::to_string(epoch + 1) + "; try a lower learning rate");
    }
    tower.loss_trace.push_back(mean_loss);
  }
  if (tower.loss_trace.empty()) {
    const PairBatch pairs = sample_pairs(work, local, per_epoch, derive_seed(cfg.seed, 999));
    tower.loss_trace.push_back(
        pair_loss_and_gradient(tower, work.x, pairs, cfg.loss, cfg.margin, nullptr));
  }
  return tower;
}

MatrixXd embed(const TrainedNet& tower, const MatrixXd& x) {
  if (x.cols() != tower.input_width()) {
    throw ValidationError("input does not match the tower input width");
  }
  return forward(tower, x).post.back();
}

MatchingSpace snn_matching_space(const Dataset& ds, const SnnConfig& cfg_y,
                                 const SnnConfig& cfg_d, Estimand estimand,
                                 const SpaceOptions& opts) {
  const Subsample want =
      estimand == Estimand::kAtt ? Subsample::kControlOnly : Subsample::kTreatedOnly;
  if (cfg_y.loss != PairLoss::kOutcomePair || cfg_y.subsample != want) {
    throw ValidationError(std::string("outcome tower must use the outcome-pair loss on the ") +
                          to_string(want) + " subsample for " + to_string(estimand));
  }
  if (cfg_d.loss != PairLoss::kContrastive || cfg_d.subsample != Subsample::kPooled) {
    throw ValidationError("treatment tower must use the contrastive loss on pooled data");
  }
  const TrainedNet tower_y = train_snn(ds, cfg_y);
  const TrainedNet tower_d = train_snn(ds, cfg_d);
  const MatrixXd md = embed(tower_d, ds.x);
  const MatrixXd my = embed(tower_y, ds.x);
  MatchingSpace s;
  s.method = SpaceMethod::kSnn;
  s.z.resize(ds.n(), md.cols() + my.cols());
  s.z << md, my;
  for (Index j = 0; j < md.cols(); ++j) s.labels.push_back("d" + std::to_string(j));
  for (Index j = 0; j < my.cols(); ++j) s.labels.push_back("y" + std::to_string(j));
  return prune_columns(std::move(s), opts.prune);
}

}  // namespace metricmatch
