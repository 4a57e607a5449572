#include "metricmatch/neuralnet.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "metricmatch/error.h"

namespace metricmatch {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kElu: return "elu";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

const char* to_string(Loss l) {
  return l == Loss::kSquaredError ? "squared_error" : "logistic";
}

const char* to_string(Target t) { return t == Target::kOutcome ? "outcome" : "treatment"; }

const char* to_string(Subsample s) {
  switch (s) {
    case Subsample::kControlOnly: return "control";
    case Subsample::kTreatedOnly: return "treated";
    case Subsample::kPooled: return "pooled";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "elu") return Activation::kElu;
  if (s == "sigmoid") return Activation::kSigmoid;
  throw ValidationError("unknown activation '" + s + "'");
}

Subsample parse_subsample(const std::string& s) {
  if (s == "control") return Subsample::kControlOnly;
  if (s == "treated") return Subsample::kTreatedOnly;
  if (s == "pooled") return Subsample::kPooled;
  throw ValidationError("unknown subsample '" + s + "'");
}

void NetConfig::validate() const {
  if (hidden.size() != activations.size()) {
    throw ValidationError("net config: one activation per hidden layer is required");
  }
  for (int w : hidden) {
    if (w < 1) throw ValidationError("net config: hidden widths must be >= 1");
  }
  for (Activation a : activations) {
    if (a == Activation::kElu && !allow_elu) {
      throw ValidationError("net config: ELU is not allowed in embedding nets");
    }
  }
  if ((loss == Loss::kLogistic) != (target == Target::kTreatment)) {
    throw ValidationError("net config: logistic loss pairs with the treatment target");
  }
  if (!(learning_rate > 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw ValidationError("net config: need learning_rate > 0 and momentum in [0, 1)");
  }
  if (batch_size < 1 || epochs < 0) {
    throw ValidationError("net config: need batch_size >= 1 and epochs >= 0");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0) || patience < 1 ||
      !(weight_decay >= 0.0)) {
    throw ValidationError("net config: need validation_fraction in [0, 1), patience >= 1, weight_decay >= 0");
  }
}

NetConfig outcome_net_config(Estimand estimand) {
  NetConfig cfg;
  cfg.subsample =
      estimand == Estimand::kAtt ? Subsample::kControlOnly : Subsample::kTreatedOnly;
  return cfg;
}

NetConfig treatment_net_config() {
  NetConfig cfg;
  cfg.loss = Loss::kLogistic;
  cfg.target = Target::kTreatment;
  cfg.subsample = Subsample::kPooled;
  cfg.standardize_target = false;
  return cfg;
}

Index TrainedNet::input_width() const {
  return layers.empty() ? 0 : layers.front().w.cols();
}

Index TrainedNet::output_width() const {
  return layers.empty() ? 0 : layers.back().w.rows();
}

Index TrainedNet::embedding_width() const {
  if (layers.size() < 2) throw ValidationError("net has no hidden layer to embed with");
  return layers[layers.size() - 2].w.rows();
}

VectorXd TrainedNet::output_weights() const {
  if (layers.size() < 2) throw ValidationError("net has no hidden layer");
  return layers.back().w.row(0).transpose();
}

Index TrainedNet::parameter_count() const {
  Index p = 0;
  for (const auto& l : layers) p += l.w.size() + l.b.size();
  return p;
}

TrainedNet init_net(Index input_width, const std::vector<int>& widths,
                    const std::vector<Activation>& activations, Init init, Rng& rng) {
  TrainedNet net;
  Index fan_in = input_width;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    Layer layer;
    layer.act = activations.at(l);
    layer.w = MatrixXd::Zero(widths[l], fan_in);
    layer.b = VectorXd::Zero(widths[l]);
    if (init == Init::kGlorotUniform) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + widths[l]));
      for (Index r = 0; r < layer.w.rows(); ++r) {
        for (Index c = 0; c < layer.w.cols(); ++c) {
          layer.w(r, c) = limit * (2.0 * uniform01(rng) - 1.0);
        }
      }
    }
    net.layers.push_back(std::move(layer));
    fan_in = widths[l];
  }
  return net;
}

namespace {

void apply_activation(Activation a, MatrixXd& m) {
  switch (a) {
    case Activation::kIdentity: break;
    case Activation::kRelu: m = m.cwiseMax(0.0); break;
    case Activation::kElu:
      m = m.unaryExpr([](double v) { return v > 0.0 ? v : std::expm1(v); });
      break;
    case Activation::kSigmoid:
      // Clamped so saturated units still report a probability strictly inside (0, 1).
      m = m.unaryExpr([](double v) {
        return std::clamp(1.0 / (1.0 + std::exp(-v)), std::numeric_limits<double>::min(),
                          std::nextafter(1.0, 0.0));
      });
      break;
  }
}

// In-place delta *= act'(pre), using post = act(pre) where convenient.
void multiply_derivative(Activation a, const MatrixXd& pre, const MatrixXd& post,
                         MatrixXd& delta) {
  switch (a) {
    case Activation::kIdentity: break;
    case Activation::kRelu:
      delta = delta.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
      break;
    case Activation::kElu:
      delta = delta.cwiseProduct(
          pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); }));
      break;
    case Activation::kSigmoid:
      delta = delta.cwiseProduct((post.array() * (1.0 - post.array())).matrix());
      break;
  }
}

// Backprop from dL/d(pre of last layer).
void backward_from_pre(const TrainedNet& net, const ForwardCache& cache, MatrixXd delta,
                       Gradients* grad) {
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    grad->w[l].noalias() += delta.transpose() * cache.post[l];
    grad->b[l] += delta.colwise().sum().transpose();
    if (l == 0) break;
    MatrixXd next = delta * net.layers[l].w;
    multiply_derivative(net.layers[l - 1].act, cache.pre[l - 1], cache.post[l], next);
    delta = std::move(next);
  }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

void check_width(const TrainedNet& net, const MatrixXd& x) {
  if (x.cols() != net.input_width()) {
    throw ValidationError("input has " + std::to_string(x.cols()) +
                          " columns, net expects " + std::to_string(net.input_width()));
  }
}

}  // namespace

ForwardCache forward(const TrainedNet& net, const MatrixXd& x) {
  ForwardCache cache;
  cache.post.reserve(net.layers.size() + 1);
  cache.pre.reserve(net.layers.size());
  cache.post.push_back(x);
  for (const auto& layer : net.layers) {
    MatrixXd z = cache.post.back() * layer.w.transpose();
    z.rowwise() += layer.b.transpose();
    MatrixXd a = z;
    apply_activation(layer.act, a);
    cache.pre.push_back(std::move(z));
    cache.post.push_back(std::move(a));
  }
  return cache;
}

Gradients Gradients::zeros_like(const TrainedNet& net) {
  Gradients g;
  for (const auto& l : net.layers) {
    g.w.push_back(MatrixXd::Zero(l.w.rows(), l.w.cols()));
    g.b.push_back(VectorXd::Zero(l.b.size()));
  }
  return g;
}

Index Gradients::size() const {
  Index s = 0;
  for (std::size_t l = 0; l < w.size(); ++l) s += w[l].size() + b[l].size();
  return s;
}

void backward(const TrainedNet& net, const ForwardCache& cache, MatrixXd grad_out,
              Gradients* grad) {
  if (net.layers.empty()) return;
  const std::size_t last = net.layers.size() - 1;
  multiply_derivative(net.layers[last].act, cache.pre[last], cache.post[last + 1], grad_out);
  backward_from_pre(net, cache, std::move(grad_out), grad);
}

double loss_and_gradient(const TrainedNet& net, const MatrixXd& x, const VectorXd& t,
                         Loss loss, Gradients* grad) {
  check_width(net, x);
  if (net.output_width() != 1) throw ValidationError("loss needs a single output unit");
  const ForwardCache cache = forward(net, x);
  const double n = static_cast<double>(x.rows());
  const std::size_t last = net.layers.size() - 1;
  if (loss == Loss::kSquaredError) {
    const VectorXd r = cache.post.back().col(0) - t;
    if (grad) backward(net, cache, (2.0 / n) * r, grad);
    return r.squaredNorm() / n;
  }
  if (net.layers[last].act != Activation::kSigmoid) {
    throw ValidationError("logistic loss needs a sigmoid output layer");
  }
  const VectorXd z = cache.pre.back().col(0);
  double total = 0.0;
  for (Index i = 0; i < z.size(); ++i) total += softplus(z[i]) - t[i] * z[i];
  if (grad) {
    MatrixXd delta = (cache.post.back().col(0) - t) / n;
    backward_from_pre(net, cache, std::move(delta), grad);
  }
  return total / n;
}

double gradient_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const TrainedNet& net, const MatrixXd& x, const VectorXd& t, Loss loss,
                  double epsilon, const std::function<void(Gradients&)>& mutate) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ValidationError("grad_check epsilon must lie in [1e-7, 1e-3]");
  }
  if (net.parameter_count() == 0) return 0.0;
  Gradients g = Gradients::zeros_like(net);
  loss_and_gradient(net, x, t, loss, &g);
  if (mutate) mutate(g);

  TrainedNet probe = net;
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = loss_and_gradient(probe, x, t, loss, nullptr);
    param = saved - epsilon;
    const double down = loss_and_gradient(probe, x, t, loss, nullptr);
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

namespace {

struct Holdout {
  MatrixXd x_fit, x_val;
  VectorXd t_fit, t_val;
};

Holdout split_holdout(const MatrixXd& x, const VectorXd& t, double fraction, Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  shuffle(order, rng);
  const Index n_val = std::clamp<Index>(
      static_cast<Index>(std::llround(fraction * static_cast<double>(x.rows()))), 1,
      x.rows() - 1);
  std::sort(order.begin(), order.begin() + n_val);
  std::sort(order.begin() + n_val, order.end());
  Holdout h;
  h.x_val.resize(n_val, x.cols());
  h.t_val.resize(n_val);
  h.x_fit.resize(x.rows() - n_val, x.cols());
  h.t_fit.resize(x.rows() - n_val);
  for (Index r = 0; r < x.rows(); ++r) {
    const Index i = order[r];
    if (r < n_val) {
      h.x_val.row(r) = x.row(i);
      h.t_val[r] = t[i];
    } else {
      h.x_fit.row(r - n_val) = x.row(i);
      h.t_fit[r - n_val] = t[i];
    }
  }
  return h;
}

}  // namespace

TrainedNet train_arrays(const MatrixXd& x_all, const VectorXd& t_all, const NetConfig& cfg) {
  cfg.validate();
  if (x_all.rows() < 1 || x_all.rows() != t_all.size()) {
    throw ValidationError("training data is empty or misaligned");
  }
  const bool early = cfg.validation_fraction > 0.0;
  if (early && x_all.rows() < 2) throw ValidationError("early stopping needs at least 2 rows");
  Rng rng = make_rng(cfg.seed);
  std::vector<int> widths = cfg.hidden;
  widths.push_back(1);
  std::vector<Activation> acts = cfg.activations;
  acts.push_back(cfg.loss == Loss::kLogistic ? Activation::kSigmoid : Activation::kIdentity);
  TrainedNet net = init_net(x_all.cols(), widths, acts, cfg.init, rng);

  Holdout h;
  if (early) {
    Rng split_rng = make_rng(derive_seed(cfg.seed, 0x7A1));
    h = split_holdout(x_all, t_all, cfg.validation_fraction, split_rng);
  }
  const MatrixXd& x = early ? h.x_fit : x_all;
  const VectorXd& t = early ? h.t_fit : t_all;

  Gradients velocity = Gradients::zeros_like(net);
  double lr = cfg.learning_rate;
  double best = loss_and_gradient(net, x, t, cfg.loss, nullptr);
  if (!std::isfinite(best)) throw TrainingDiverged("initial loss is not finite");
  net.loss_trace.push_back(best);
  double best_val = early ? loss_and_gradient(net, h.x_val, h.t_val, cfg.loss, nullptr) : 0.0;
  std::vector<Layer> best_layers = net.layers;
  int stale = 0;

  const Index n = x.rows();
  const Index batch = std::min<Index>(cfg.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  MatrixXd xb;
  VectorXd tb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TrainedNet snapshot = net;
    shuffle(order, rng);
    for (Index start = 0; start < n; start += batch) {
      const Index m = std::min(batch, n - start);
      xb.resize(m, x.cols());
      tb.resize(m);
      for (Index r = 0; r < m; ++r) {
        xb.row(r) = x.row(order[start + r]);
        tb[r] = t[order[start + r]];
      }
      Gradients g = Gradients::zeros_like(net);
      loss_and_gradient(net, xb, tb, cfg.loss, &g);
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (cfg.weight_decay > 0.0) g.w[l] += cfg.weight_decay * net.layers[l].w;
        velocity.w[l] = cfg.momentum * velocity.w[l] - lr * g.w[l];
        velocity.b[l] = cfg.momentum * velocity.b[l] - lr * g.b[l];
        net.layers[l].w += velocity.w[l];
        net.layers[l].b += velocity.b[l];
      }
    }
    const double current = loss_and_gradient(net, x, t, cfg.loss, nullptr);
    if (!std::isfinite(current)) {
      throw TrainingDiverged("training loss became non-finite at epoch " +
                             std::to_string(epoch + 1) + "; try a lower learning rate");
    }
    if (current > best) {
      net.layers = snapshot.layers;
      velocity = Gradients::zeros_like(net);
      lr *= 0.5;
    } else {
      best = current;
    }
    net.loss_trace.push_back(best);
    if (early) {
      const double val = loss_and_gradient(net, h.x_val, h.t_val, cfg.loss, nullptr);
      if (val < best_val) {
        best_val = val;
        best_layers = net.layers;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  if (early) net.layers = best_layers;
  return net;
}

std::vector<Index> subsample_rows(const Dataset& ds, Subsample s) {
  std::vector<Index> rows;
  for (Index i = 0; i < ds.n(); ++i) {
    if (s == Subsample::kPooled || (s == Subsample::kControlOnly && ds.d[i] == 0) ||
        (s == Subsample::kTreatedOnly && ds.d[i] == 1)) {
      rows.push_back(i);
    }
  }
  return rows;
}

TrainedNet train(const Dataset& ds, const NetConfig& cfg) {
  const std::vector<Index> rows = subsample_rows(ds, cfg.subsample);
  if (rows.empty()) {
    throw ValidationError(std::string("no rows in the ") + to_string(cfg.subsample) +
                          " training subsample");
  }
  MatrixXd x(static_cast<Index>(rows.size()), ds.k());
  VectorXd t(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x.row(r) = ds.x.row(rows[r]);
    t[r] = cfg.target == Target::kOutcome ? ds.y[rows[r]] : ds.d[rows[r]];
  }
  double mean = 0.0, scale = 1.0;
  if (cfg.target == Target::kOutcome && cfg.standardize_target) {
    mean = t.mean();
    if (t.size() > 1) {
      const double sd = std::sqrt((t.array() - mean).square().sum() /
                                  static_cast<double>(t.size() - 1));
      if (sd > 0.0) scale = sd;
    }
    t = (t.array() - mean) / scale;
  }
  TrainedNet net = train_arrays(x, t, cfg);
  net.target_mean = mean;
  net.target_scale = scale;
  return net;
}

VectorXd predict(const TrainedNet& net, const MatrixXd& x) {
  check_width(net, x);
  if (net.output_width() != 1) throw ValidationError("predict needs a single output unit");
  const ForwardCache cache = forward(net, x);
  return (cache.post.back().col(0).array() * net.target_scale + net.target_mean).matrix();
}

MatrixXd extract_embedding(const TrainedNet& net, const MatrixXd& x) {
  check_width(net, x);
  if (net.layers.size() < 2) throw ValidationError("net has no hidden layer to embed with");
  MatrixXd a = x;
  for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
    MatrixXd z = a * net.layers[l].w.transpose();
    z.rowwise() += net.layers[l].b.transpose();
    apply_activation(net.layers[l].act, z);
    a = std::move(z);
  }
  return a;
}

MatchingSpace scaled_embedding_space(const TrainedNet& net_d, const TrainedNet& net_y,
                                     const MatrixXd& x) {
  const MatrixXd md = extract_embedding(net_d, x);
  const MatrixXd my = extract_embedding(net_y, x);
  const VectorXd sd = net_d.output_weights();
  const VectorXd sy = net_y.output_weights();
  MatchingSpace s;
  s.method = SpaceMethod::kNn;
  s.z.resize(x.rows(), md.cols() + my.cols());
  s.z.leftCols(md.cols()) = md.array().rowwise() * sd.transpose().array();
  s.z.rightCols(my.cols()) = my.array().rowwise() * sy.transpose().array();
  for (Index j = 0; j < md.cols(); ++j) s.labels.push_back("d" + std::to_string(j));
  for (Index j = 0; j < my.cols(); ++j) s.labels.push_back("y" + std::to_string(j));
  return s;
}

namespace {

void restandardize(MatchingSpace& s) {
  for (Index j = 0; j < s.dim(); ++j) {
    auto col = s.z.col(j);
    const double mean = col.mean();
    const double sd =
        std::sqrt((col.array() - mean).square().sum() / static_cast<double>(s.n() - 1));
    col = (col.array() - mean) / sd;
  }
}

}  // namespace

MatchingSpace nn_matching_space(const Dataset& ds, const NetConfig& cfg_y,
                                const NetConfig& cfg_d, Estimand estimand,
                                const SpaceOptions& opts) {
  const Subsample want =
      estimand == Estimand::kAtt ? Subsample::kControlOnly : Subsample::kTreatedOnly;
  if (cfg_y.target != Target::kOutcome || cfg_y.subsample != want) {
    throw ValidationError(std::string("outcome net must train on the ") + to_string(want) +
                          " subsample for " + to_string(estimand));
  }
  if (cfg_d.target != Target::kTreatment || cfg_d.subsample != Subsample::kPooled) {
    throw ValidationError("treatment net must train on the pooled sample");
  }
  if (cfg_y.hidden.empty() || cfg_d.hidden.empty()) {
    throw ValidationError("embedding nets need at least one hidden layer");
  }
  const TrainedNet net_y = train(ds, cfg_y);
  const Dataset pool = oversample_treated(ds, opts.oversample_threshold,
                                          opts.oversample_target,
                                          derive_seed(cfg_d.seed, 0x05A));
  const TrainedNet net_d = train(pool, cfg_d);
  MatchingSpace s = prune_columns(scaled_embedding_space(net_d, net_y, ds.x), opts.prune);
  if (opts.restandardize) restandardize(s);
  return s;
}

}  // namespace metricmatch
