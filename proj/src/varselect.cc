#include "metricmatch/varselect.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "metricmatch/error.h"
#include "metricmatch/random.h"

namespace metricmatch {

std::vector<Index> LassoFit::support() const {
  std::vector<Index> s;
  for (Index j = 0; j < coef.size(); ++j) {
    if (coef[j] != 0.0) s.push_back(j);
  }
  return s;
}

namespace {

double soft_threshold(double z, double lambda) {
  if (z > lambda) return z - lambda;
  if (z < -lambda) return z + lambda;
  return 0.0;
}

// Coordinate descent on (1/2) b'Qb - c'b + lambda |b|_1, warm-started at b.
int solve_l1_quadratic(const MatrixXd& q, const VectorXd& c, double lambda, VectorXd& b,
                       double tol, int max_sweeps) {
  const Index k = c.size();
  VectorXd g = q * b;
  const double scale = 1.0 + c.cwiseAbs().maxCoeff();
  for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
    double moved = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double qjj = q(j, j);
      if (!(qjj > 0.0)) {
        if (b[j] != 0.0) {
          g -= b[j] * q.col(j);
          b[j] = 0.0;
        }
        continue;
      }
      const double z = c[j] - (g[j] - qjj * b[j]);
      const double next = soft_threshold(z, lambda) / qjj;
      const double delta = next - b[j];
      if (delta != 0.0) {
        g += delta * q.col(j);
        b[j] = next;
        moved = std::max(moved, std::abs(delta) * std::sqrt(qjj));
      }
    }
    if (moved <= tol * scale) return sweep;
    if (sweep % 64 == 0) g = q * b;  // shed accumulated rounding
  }
  throw NonConvergence("lasso coordinate descent did not converge in " +
                       std::to_string(max_sweeps) + " sweeps (lambda " + std::to_string(lambda) +
                       ")");
}

VectorXd logistic(const VectorXd& eta) {
  VectorXd p(eta.size());
  for (Index i = 0; i < eta.size(); ++i) {
    p[i] = eta[i] >= 0 ? 1.0 / (1.0 + std::exp(-eta[i]))
                       : std::exp(eta[i]) / (1.0 + std::exp(eta[i]));
  }
  return p;
}

double mean_log_loss(const VectorXd& eta, const VectorXi& d) {
  double s = 0.0;
  for (Index i = 0; i < eta.size(); ++i) {
    const double e = d[i] ? -eta[i] : eta[i];
    s += e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
  }
  return s / static_cast<double>(eta.size());
}

MatrixXd rows_of(const MatrixXd& m, const std::vector<Index>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(r) = m.row(rows[r]);
  return out;
}

template <typename V>
V entries_of(const V& v, const std::vector<Index>& rows) {
  V out(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = v[rows[r]];
  return out;
}

struct CenteredGram {
  Eigen::RowVectorXd xm;
  double ym = 0.0;
  MatrixXd q;
  VectorXd c;
};

// Weighted Gram of the centred design, X'WX - wsum * xm'xm, built as one symmetric rank update.
MatrixXd centered_gram(const MatrixXd& x, const VectorXd& w, const Eigen::RowVectorXd& xm,
                       double wsum, double n) {
  const MatrixXd xs = w.cwiseSqrt().asDiagonal() * x;
  MatrixXd q = MatrixXd::Zero(x.cols(), x.cols());
  q.selfadjointView<Eigen::Lower>().rankUpdate(xs.transpose());
  q.selfadjointView<Eigen::Lower>().rankUpdate(xm.transpose(), -wsum);
  q = q.selfadjointView<Eigen::Lower>();
  return q / n;
}

CenteredGram linear_gram(const MatrixXd& x, const VectorXd& y) {
  const double n = static_cast<double>(x.rows());
  CenteredGram g;
  g.xm = x.colwise().mean();
  g.ym = y.mean();
  g.q = centered_gram(x, VectorXd::Ones(x.rows()), g.xm, n, n);
  g.c = x.transpose() * (y.array() - g.ym).matrix() / n;
  return g;
}

LassoFit linear_fit(const CenteredGram& g, double lambda, const LassoOptions& opts,
                    const VectorXd* warm) {
  LassoFit fit;
  fit.coef = warm ? *warm : VectorXd::Zero(g.c.size());
  fit.sweeps = solve_l1_quadratic(g.q, g.c, lambda, fit.coef, opts.tolerance, opts.max_sweeps);
  fit.intercept = g.ym - g.xm.dot(fit.coef);
  fit.lambda = lambda;
  return fit;
}

// Solves the weighted quadratic on a working set of columns, growing it until no
// excluded column violates the optimality conditions.
int solve_weighted_l1(const MatrixXd& x, const VectorXd& w, const Eigen::RowVectorXd& xm,
                      double wsum, const VectorXd& c, double lambda, VectorXd& b,
                      const LassoOptions& opts) {
  const Index k = x.cols();
  const double n = static_cast<double>(x.rows());
  const double slack = 1e-10 * (1.0 + c.cwiseAbs().maxCoeff());
  auto gradient = [&] {
    const VectorXd wxb = w.cwiseProduct(x * b);
    return VectorXd(c - (x.transpose() * wxb - wsum * xm.transpose() * xm.dot(b)) / n);
  };
  VectorXd g = gradient();
  std::vector<Index> ws;
  std::vector<bool> in(k, false);
  for (Index j = 0; j < k; ++j) {
    if (b[j] != 0.0 || std::abs(g[j]) > 0.8 * lambda) {
      ws.push_back(j);
      in[j] = true;
    }
  }
  int sweeps = 0;
  for (;;) {
    if (!ws.empty()) {
      const MatrixXd q = centered_gram(x(Eigen::all, ws), w, xm(Eigen::all, ws), wsum, n);
      VectorXd sub = b(ws);
      sweeps += solve_l1_quadratic(q, c(ws), lambda, sub, opts.tolerance, opts.max_sweeps);
      b(ws) = sub;
    }
    if (static_cast<Index>(ws.size()) == k) return sweeps;
    g = gradient();
    bool added = false;
    for (Index j = 0; j < k; ++j) {
      if (!in[j] && std::abs(g[j]) > lambda + slack) {
        ws.push_back(j);
        in[j] = true;
        added = true;
      }
    }
    if (!added) return sweeps;
    std::sort(ws.begin(), ws.end());
  }
}

LassoFit logit_fit(const MatrixXd& x, const VectorXi& d, double lambda, const LassoOptions& opts,
                   const VectorXd* warm, double outer_tol = 1e-10) {
  const Index n = x.rows(), k = x.cols();
  const double nd = static_cast<double>(n);
  const double share = d.cast<double>().mean();
  if (share <= 0.0 || share >= 1.0) throw ValidationError("L1 logit needs both classes");
  LassoFit fit;
  fit.coef = warm ? *warm : VectorXd::Zero(k);
  fit.intercept = std::log(share / (1.0 - share)) - (x * fit.coef).mean();
  fit.lambda = lambda;
  const VectorXd dv = d.cast<double>();
  for (int outer = 0; outer < opts.max_outer; ++outer) {
    const VectorXd eta = (x * fit.coef).array() + fit.intercept;
    const VectorXd p = logistic(eta);
    VectorXd w(n), z(n);
    for (Index i = 0; i < n; ++i) {
      const double pc = std::clamp(p[i], 1e-5, 1.0 - 1e-5);
      w[i] = pc * (1.0 - pc);
      z[i] = eta[i] + (dv[i] - p[i]) / w[i];
    }
    const double wsum = w.sum();
    const Eigen::RowVectorXd xm = (w.transpose() * x) / wsum;
    const double zm = w.dot(z) / wsum;
    const VectorXd c = x.transpose() * (w.array() * (z.array() - zm)).matrix() / nd;
    VectorXd next = fit.coef;
    fit.sweeps += solve_weighted_l1(x, w, xm, wsum, c, lambda, next, opts);
    const double next_b0 = zm - xm.dot(next);
    const double change =
        std::max((next - fit.coef).cwiseAbs().maxCoeff(), std::abs(next_b0 - fit.intercept));
    fit.coef = next;
    fit.intercept = next_b0;

    const VectorXd eta2 = (x * fit.coef).array() + fit.intercept;
    const double margin = (eta2.array() * (2.0 * dv.array() - 1.0)).minCoeff();
    if (margin > 0.0 && eta2.cwiseAbs().maxCoeff() > 30.0) {
      throw NonConvergence("L1 logit coefficients diverge: the classes are separable at lambda " +
                           std::to_string(lambda) + " (max |coef| " +
                           std::to_string(fit.coef.cwiseAbs().maxCoeff()) + ")");
    }
    if (change < outer_tol * (1.0 + fit.coef.cwiseAbs().maxCoeff())) return fit;
  }
  throw NonConvergence("L1 logit IRLS did not converge in " + std::to_string(opts.max_outer) +
                       " iterations at lambda " + std::to_string(lambda) + " (max |coef| " +
                       std::to_string(fit.coef.cwiseAbs().maxCoeff()) + ")");
}

std::vector<double> default_grid(double lambda_max, const LassoOptions& opts) {
  std::vector<double> grid;
  if (!(lambda_max > 0.0)) return {0.0};
  const int m = std::max(1, opts.grid_size);
  for (int t = 0; t < m; ++t) {
    const double frac = m == 1 ? 0.0 : static_cast<double>(t) / (m - 1);
    grid.push_back(lambda_max * std::pow(opts.grid_ratio, frac));
  }
  return grid;
}

std::vector<std::vector<Index>> fold_rows(Index n, int folds, std::uint64_t seed) {
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng = make_rng(seed);
  shuffle(perm, rng);
  std::vector<std::vector<Index>> out(folds);
  for (Index p = 0; p < n; ++p) out[p % folds].push_back(perm[p]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

std::vector<Index> complement(Index n, const std::vector<Index>& rows) {
  std::vector<bool> in(n, false);
  for (Index r : rows) in[r] = true;
  std::vector<Index> out;
  for (Index i = 0; i < n; ++i) {
    if (!in[i]) out.push_back(i);
  }
  return out;
}

void check_lasso_opts(const LassoOptions& opts, Index n) {
  if (opts.folds < 2 || opts.folds > n) throw ValidationError("lasso CV folds must lie in [2, n]");
  if (!(opts.penalty_scale > 0.0)) throw ValidationError("penalty scale must be > 0");
  for (double l : opts.lambda_grid) {
    if (!(l >= 0.0)) throw ValidationError("lambda grid values must be >= 0");
  }
}

std::size_t argmin_first(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t t = 1; t < v.size(); ++t) {
    if (v[t] < v[best]) best = t;
  }
  return best;
}

}  // namespace

double lasso_linear_lambda_max(const MatrixXd& x, const VectorXd& y) {
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  return (xc.transpose() * (y.array() - y.mean()).matrix()).cwiseAbs().maxCoeff() /
         static_cast<double>(x.rows());
}

double lasso_logit_lambda_max(const MatrixXd& x, const VectorXi& d) {
  const VectorXd dv = d.cast<double>();
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  return (xc.transpose() * (dv.array() - dv.mean()).matrix()).cwiseAbs().maxCoeff() /
         static_cast<double>(x.rows());
}

VectorXd lasso_linear_scores(const MatrixXd& x, const VectorXd& y, const LassoFit& fit) {
  const VectorXd r = y - ((x * fit.coef).array() + fit.intercept).matrix();
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  return xc.transpose() * r / static_cast<double>(x.rows());
}

VectorXd lasso_logit_scores(const MatrixXd& x, const VectorXi& d, const LassoFit& fit) {
  const VectorXd p = logistic((x * fit.coef).array() + fit.intercept);
  const VectorXd r = d.cast<double>() - p;
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  return xc.transpose() * r / static_cast<double>(x.rows());
}

namespace {

double kkt_violation(const VectorXd& scores, double lambda) {
  return std::max(0.0, scores.cwiseAbs().maxCoeff() - lambda);
}

}  // namespace

LassoFit lasso_linear_at(const MatrixXd& x, const VectorXd& y, double lambda,
                         const LassoOptions& opts) {
  if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
  LassoFit fit;
  if (x.rows() > 0 && lambda >= lasso_linear_lambda_max(x, y)) {
    // Zero is optimal here; skipping the solver keeps it exact.
    fit.coef = VectorXd::Zero(x.cols());
    fit.intercept = y.mean();
    fit.lambda = lambda;
  } else {
    fit = linear_fit(linear_gram(x, y), lambda, opts, nullptr);
  }
  fit.kkt_violation = kkt_violation(lasso_linear_scores(x, y, fit), lambda);
  return fit;
}

LassoFit lasso_logit_at(const MatrixXd& x, const VectorXi& d, double lambda,
                        const LassoOptions& opts) {
  if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
  LassoFit fit;
  const double share = x.rows() > 0 ? d.cast<double>().mean() : 0.5;
  if (x.rows() > 0 && share > 0.0 && share < 1.0 && lambda >= lasso_logit_lambda_max(x, d)) {
    fit.coef = VectorXd::Zero(x.cols());
    fit.intercept = std::log(share / (1.0 - share));
    fit.lambda = lambda;
  } else {
    fit = logit_fit(x, d, lambda, opts, nullptr);
  }
  fit.kkt_violation = kkt_violation(lasso_logit_scores(x, d, fit), lambda);
  return fit;
}

LassoFit lasso_linear(const Dataset& ds, const LassoOptions& opts) {
  ds.validate();
  check_lasso_opts(opts, ds.n());
  std::vector<double> grid = opts.lambda_grid.empty()
                                 ? default_grid(lasso_linear_lambda_max(ds.x, ds.y), opts)
                                 : opts.lambda_grid;
  std::sort(grid.rbegin(), grid.rend());
  std::vector<double> loss(grid.size(), 0.0);
  for (const auto& test : fold_rows(ds.n(), opts.folds, opts.seed)) {
    const std::vector<Index> train = complement(ds.n(), test);
    const MatrixXd xtr = rows_of(ds.x, train), xte = rows_of(ds.x, test);
    const VectorXd ytr = entries_of(ds.y, train), yte = entries_of(ds.y, test);
    const CenteredGram gram = linear_gram(xtr, ytr);
    VectorXd warm = VectorXd::Zero(ds.k());
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const LassoFit f = linear_fit(gram, grid[g], opts, &warm);
      warm = f.coef;
      const VectorXd pred = (xte * f.coef).array() + f.intercept;
      loss[g] += (yte - pred).squaredNorm() / static_cast<double>(test.size()) / opts.folds;
    }
  }
  const std::size_t best = argmin_first(loss);
  LassoFit fit = lasso_linear_at(ds.x, ds.y, grid[best] * opts.penalty_scale, opts);
  fit.lambda_grid = grid;
  fit.cv_loss = loss;
  return fit;
}

LassoFit lasso_logit(const Dataset& ds, const LassoOptions& opts) {
  ds.validate();
  check_lasso_opts(opts, ds.n());
  std::vector<double> grid = opts.lambda_grid.empty()
                                 ? default_grid(lasso_logit_lambda_max(ds.x, ds.d), opts)
                                 : opts.lambda_grid;
  std::sort(grid.rbegin(), grid.rend());
  std::vector<double> loss(grid.size(), 0.0);
  for (const auto& test : fold_rows(ds.n(), opts.folds, opts.seed)) {
    const std::vector<Index> train = complement(ds.n(), test);
    const MatrixXd xtr = rows_of(ds.x, train), xte = rows_of(ds.x, test);
    const VectorXi dtr = entries_of(ds.d, train), dte = entries_of(ds.d, test);
    if (dtr.sum() == 0 || dtr.sum() == dtr.size()) {
      throw ValidationError("a CV training fold has a single treatment class; use fewer folds");
    }
    VectorXd warm = VectorXd::Zero(ds.k());
    bool failed = false;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      // Once a fold separates, smaller penalties separate too.
      if (failed) {
        loss[g] = std::numeric_limits<double>::infinity();
        continue;
      }
      try {
        // Held-out loss does not need the final fit's precision.
        const LassoFit f = logit_fit(xtr, dtr, grid[g], opts, g ? &warm : nullptr, 1e-6);
        warm = f.coef;
        loss[g] += mean_log_loss((xte * f.coef).array() + f.intercept, dte) / opts.folds;
      } catch (const NonConvergence&) {
        failed = true;
        loss[g] = std::numeric_limits<double>::infinity();
      }
    }
  }
  const std::size_t best = argmin_first(loss);
  if (!std::isfinite(loss[best])) {
    throw NonConvergence("L1 logit failed to converge at every lambda on the grid");
  }
  LassoFit fit = lasso_logit_at(ds.x, ds.d, grid[best] * opts.penalty_scale, opts);
  fit.lambda_grid = grid;
  fit.cv_loss = loss;
  return fit;
}

MatchingSpace l1_matching_space(const Dataset& ds, const LassoFit& fit_y, const LassoFit& fit_d) {
  if (fit_y.coef.size() != ds.k() || fit_d.coef.size() != ds.k()) {
    throw ValidationError("lasso fits do not match the dataset's covariates");
  }
  std::vector<Index> cols;
  for (Index j = 0; j < ds.k(); ++j) {
    if (fit_y.coef[j] != 0.0 || fit_d.coef[j] != 0.0) cols.push_back(j);
  }
  if (cols.empty()) throw DegenerateSpace("both lasso supports are empty");
  return columns_space(ds, cols, SpaceMethod::kL1);
}

// ---------------------------------------------------------------------------
// Regularized random forest

namespace {

struct Candidate {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;       // raw impurity decrease per bootstrap row
  double penalized = 0.0;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.penalized != b.penalized) return a.penalized > b.penalized;
  if (a.gain != b.gain) return a.gain > b.gain;
  return a.feature < b.feature;
}

class TreeBuilder {
 public:
  TreeBuilder(const MatrixXd& x, const VectorXd& t, bool classification, double lambda,
              const RrfOptions& opts, int mtry, std::vector<bool>& in_f, RrfFit& fit, int tree_id,
              Rng& rng)
      : x_(x), t_(t), classification_(classification), lambda_(lambda), opts_(opts),
        mtry_(mtry), in_f_(in_f), fit_(fit), tree_id_(tree_id), rng_(rng) {}

  std::vector<RrfNode> build(std::vector<Index> rows) {
    root_n_ = static_cast<double>(rows.size());
    grow(rows, 0);
    return std::move(nodes_);
  }

 private:
  double impurity(double sum, double sq, double n) const {
    // Regression: sum of squared deviations. Classification: n * Gini.
    if (classification_) return n > 0 ? 2.0 * sum * (n - sum) / n : 0.0;
    return n > 0 ? sq - sum * sum / n : 0.0;
  }

  double leaf_value(const std::vector<Index>& rows) const {
    double s = 0.0;
    for (Index r : rows) s += t_[r];
    return s / static_cast<double>(rows.size());
  }

  Candidate best_for(int j, const std::vector<Index>& rows, double parent) {
    std::vector<std::pair<double, double>> v(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) v[r] = {x_(rows[r], j), t_[rows[r]]};
    std::sort(v.begin(), v.end());
    double total = 0.0, total_sq = 0.0;
    for (const auto& p : v) {
      total += p.second;
      total_sq += p.second * p.second;
    }
    const double n = static_cast<double>(v.size());
    Candidate c;
    c.feature = j;
    double ls = 0.0, lsq = 0.0;
    for (std::size_t r = 0; r + 1 < v.size(); ++r) {
      ls += v[r].second;
      lsq += v[r].second * v[r].second;
      if (v[r].first == v[r + 1].first) continue;
      const double nl = static_cast<double>(r + 1);
      const double child = impurity(ls, lsq, nl) + impurity(total - ls, total_sq - lsq, n - nl);
      const double gain = (parent - child) / root_n_;
      if (gain > c.gain) {
        c.gain = gain;
        double mid = 0.5 * (v[r].first + v[r + 1].first);
        if (!(mid < v[r + 1].first)) mid = v[r].first;
        c.threshold = mid;
      }
    }
    const bool known = !opts_.regularize || in_f_[j];
    c.penalized = known ? c.gain : lambda_ * c.gain;
    return c;
  }

  int grow(const std::vector<Index>& rows, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(RrfNode{});
    nodes_[id].value = leaf_value(rows);
    const double n = static_cast<double>(rows.size());
    if (depth >= opts_.max_depth || n < opts_.min_node_size) return id;

    double sum = 0.0, sq = 0.0;
    for (Index r : rows) {
      sum += t_[r];
      sq += t_[r] * t_[r];
    }
    const double parent = impurity(sum, sq, n);
    std::vector<int> feats(x_.cols());
    std::iota(feats.begin(), feats.end(), 0);
    // Partial Fisher-Yates: the first mtry entries are the candidates.
    for (int s = 0; s < mtry_; ++s) {
      const std::size_t pick = s + uniform_index(rng_, feats.size() - s);
      std::swap(feats[s], feats[pick]);
    }
    Candidate best;
    bool have = false;
    for (int s = 0; s < mtry_; ++s) {
      const Candidate c = best_for(feats[s], rows, parent);
      if (!(c.gain > 0.0)) continue;
      if (!have || better(c, best)) {
        best = c;
        have = true;
      }
    }
    const double floor = 1e-12 * std::max(1.0, parent / root_n_);
    if (!have || !(best.gain > floor)) {
      if (id == 0) {
        throw ComputeError("forest tree " + std::to_string(tree_id_) +
                           " found no valid split at its root (constant target or features)");
      }
      return id;
    }
    std::vector<Index> left, right;
    for (Index r : rows) (x_(r, best.feature) <= best.threshold ? left : right).push_back(r);
    in_f_[best.feature] = true;
    fit_.splits.push_back(RrfSplit{tree_id_, id, best.feature, best.gain, best.penalized});
    nodes_[id].feature = best.feature;
    nodes_[id].threshold = best.threshold;
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  const MatrixXd& x_;
  const VectorXd& t_;
  bool classification_;
  double lambda_;
  const RrfOptions& opts_;
  int mtry_;
  std::vector<bool>& in_f_;
  RrfFit& fit_;
  int tree_id_;
  Rng& rng_;
  double root_n_ = 1.0;
  std::vector<RrfNode> nodes_;
};

RrfFit train_forest(const MatrixXd& x, const VectorXd& t, RrfTarget target, double lambda,
                    const RrfOptions& opts) {
  const Index n = x.rows(), k = x.cols();
  const int mtry = opts.mtry > 0 ? std::min<int>(opts.mtry, static_cast<int>(k))
                                 : std::max(1, static_cast<int>(std::sqrt(static_cast<double>(k))));
  RrfFit fit;
  fit.target = target;
  fit.lambda = lambda;
  std::vector<bool> in_f(k, false);
  for (int tr = 0; tr < opts.trees; ++tr) {
    Rng rng = make_rng(derive_seed(opts.seed, static_cast<std::uint64_t>(tr)));
    std::vector<Index> rows(n);
    for (Index i = 0; i < n; ++i) rows[i] = static_cast<Index>(uniform_index(rng, n));
    TreeBuilder builder(x, t, target == RrfTarget::kTreatment, lambda, opts, mtry, in_f, fit, tr,
                        rng);
    fit.trees.push_back(builder.build(std::move(rows)));
  }
  VectorXd total = VectorXd::Zero(k), count = VectorXd::Zero(k);
  for (const auto& s : fit.splits) {
    total[s.feature] += s.gain;
    count[s.feature] += 1.0;
  }
  fit.importance = VectorXd::Zero(k);
  for (Index j = 0; j < k; ++j) {
    if (count[j] > 0) {
      fit.importance[j] = total[j] / count[j];
      fit.selected.push_back(j);
    }
  }
  return fit;
}

void check_rrf_opts(const RrfOptions& opts, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("RRF lambda must lie in [0, 1]");
  if (opts.trees < 1 || opts.max_depth < 1 || opts.min_node_size < 2 || opts.mtry < 0) {
    throw ValidationError("RRF needs trees >= 1, max_depth >= 1, min_node_size >= 2, mtry >= 0");
  }
  for (double l : opts.lambda_grid) {
    if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("RRF lambda grid values must lie in [0, 1]");
  }
  if (!opts.lambda_grid.empty() && opts.folds < 2) {
    throw ValidationError("RRF cross-validation needs at least two folds");
  }
}

}  // namespace

VectorXd RrfFit::predict(const MatrixXd& x) const {
  VectorXd out = VectorXd::Zero(x.rows());
  for (const auto& tree : trees) {
    for (Index i = 0; i < x.rows(); ++i) {
      int node = 0;
      while (tree[node].feature >= 0) {
        node = x(i, tree[node].feature) <= tree[node].threshold ? tree[node].left
                                                                : tree[node].right;
      }
      out[i] += tree[node].value;
    }
  }
  return out / static_cast<double>(trees.size());
}

RrfFit rrf_train(const Dataset& ds, RrfTarget target, double lambda, const RrfOptions& opts) {
  ds.validate();
  check_rrf_opts(opts, lambda);
  const VectorXd t = target == RrfTarget::kOutcome ? ds.y : ds.d.cast<double>();
  if (opts.lambda_grid.empty()) return train_forest(ds.x, t, target, lambda, opts);

  std::vector<double> loss(opts.lambda_grid.size(), 0.0);
  const auto folds = fold_rows(ds.n(), opts.folds, derive_seed(opts.seed, 0xCF));
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::vector<Index> train = complement(ds.n(), folds[f]);
    const MatrixXd xtr = rows_of(ds.x, train), xte = rows_of(ds.x, folds[f]);
    const VectorXd ttr = entries_of(t, train), tte = entries_of(t, folds[f]);
    RrfOptions fold_opts = opts;
    fold_opts.seed = derive_seed(opts.seed, 0xF00 + f);
    for (std::size_t g = 0; g < opts.lambda_grid.size(); ++g) {
      const RrfFit fit = train_forest(xtr, ttr, target, opts.lambda_grid[g], fold_opts);
      loss[g] += (tte - fit.predict(xte)).squaredNorm() / static_cast<double>(tte.size()) /
                 static_cast<double>(folds.size());
    }
  }
  const std::size_t best = argmin_first(loss);
  RrfFit fit = train_forest(ds.x, t, target, opts.lambda_grid[best], opts);
  fit.lambda_grid = opts.lambda_grid;
  fit.cv_loss = loss;
  return fit;
}

MatchingSpace rrf_matching_space(const Dataset& ds, const RrfFit& fit_y, const RrfFit& fit_d) {
  if (fit_y.importance.size() != ds.k() || fit_d.importance.size() != ds.k()) {
    throw ValidationError("forest fits do not match the dataset's covariates");
  }
  MatchingSpace s;
  s.method = SpaceMethod::kRrf;
  std::vector<Index> cols;
  for (Index j = 0; j < ds.k(); ++j) {
    if (fit_y.importance[j] > 0.0 || fit_d.importance[j] > 0.0) cols.push_back(j);
  }
  if (cols.empty()) throw DegenerateSpace("neither forest selected any feature");
  s.z.resize(ds.n(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const Index j = cols[c];
    s.z.col(c) = std::max(fit_y.importance[j], fit_d.importance[j]) * ds.x.col(j);
    s.labels.push_back(ds.names[j]);
  }
  return s;
}

nlohmann::json lasso_fit_json(const LassoFit& fit, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["lambda"] = fit.lambda;
  j["intercept"] = fit.intercept;
  nlohmann::json support = nlohmann::json::array();
  for (Index c : fit.support()) {
    support.push_back({{"column", names.at(c)}, {"coef", fit.coef[c]}});
  }
  j["support"] = support;
  j["kkt_violation"] = fit.kkt_violation;
  j["lambda_grid"] = fit.lambda_grid;
  j["cv_loss"] = fit.cv_loss;
  return j;
}

nlohmann::json rrf_fit_json(const RrfFit& fit, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["target"] = fit.target == RrfTarget::kOutcome ? "outcome" : "treatment";
  j["lambda"] = fit.lambda;
  j["trees"] = fit.trees.size();
  j["splits"] = fit.splits.size();
  nlohmann::json sel = nlohmann::json::array();
  for (Index c : fit.selected) {
    sel.push_back({{"column", names.at(c)}, {"importance", fit.importance[c]}});
  }
  j["selected"] = sel;
  j["lambda_grid"] = fit.lambda_grid;
  j["cv_loss"] = fit.cv_loss;
  return j;
}

}  // namespace metricmatch
