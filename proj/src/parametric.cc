#include "metricmatch/parametric.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "metricmatch/error.h"

namespace metricmatch {

MatrixXd logit_design(const Dataset& ds, bool quadratic, std::vector<std::string>* labels,
                      std::vector<Index>* source, std::vector<bool>* squared) {
  const Index k = ds.k();
  MatrixXd full(ds.n(), quadratic ? 2 * k : k);
  full.leftCols(k) = ds.x;
  if (quadratic) full.rightCols(k) = ds.x.array().square().matrix();
  std::vector<Index> keep;
  for (Index c = 0; c < k; ++c) keep.push_back(c);
  if (quadratic) {
    // Linear columns always stay; a square is dropped when it is constant or
    // perfectly correlated with an earlier column.
    for (Index c : prunable_keep(full)) {
      if (c >= k) keep.push_back(c);
    }
  }
  MatrixXd design(ds.n(), static_cast<Index>(keep.size()));
  if (labels) labels->clear();
  if (source) source->clear();
  if (squared) squared->clear();
  for (std::size_t t = 0; t < keep.size(); ++t) {
    design.col(t) = full.col(keep[t]);
    const Index src = keep[t] % k;
    const bool sq = keep[t] >= k;
    if (labels) labels->push_back(sq ? ds.names[src] + "^2" : ds.names[src]);
    if (source) source->push_back(src);
    if (squared) squared->push_back(sq);
  }
  return design;
}

namespace {

double log_likelihood(const VectorXd& eta, const VectorXi& d) {
  double ll = 0.0;
  for (Index i = 0; i < eta.size(); ++i) {
    // log p = -softplus(-eta), log(1-p) = -softplus(eta)
    const double e = d[i] ? -eta[i] : eta[i];
    ll -= e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
  }
  return ll;
}

VectorXd sigmoid(const VectorXd& eta) {
  VectorXd p(eta.size());
  for (Index i = 0; i < eta.size(); ++i) {
    p[i] = eta[i] >= 0 ? 1.0 / (1.0 + std::exp(-eta[i]))
                       : std::exp(eta[i]) / (1.0 + std::exp(eta[i]));
  }
  return p;
}

std::string direction_text(const VectorXd& beta, const std::vector<std::string>& labels) {
  std::vector<Index> order(beta.size() - 1);
  for (Index c = 0; c < beta.size() - 1; ++c) order[c] = c;
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    return std::abs(beta[a + 1]) > std::abs(beta[b + 1]);
  });
  std::ostringstream os;
  const double norm = beta.tail(beta.size() - 1).norm();
  for (std::size_t t = 0; t < std::min<std::size_t>(3, order.size()); ++t) {
    if (t) os << ", ";
    os << labels[order[t]] << ' ' << (norm > 0 ? beta[order[t] + 1] / norm : 0.0);
  }
  return os.str();
}

}  // namespace

LogitFit fit_logit(const Dataset& ds, bool quadratic, const LogitOptions& opts) {
  ds.validate();
  LogitFit fit;
  const MatrixXd design =
      logit_design(ds, quadratic, &fit.design_labels, &fit.design_source, &fit.design_squared);
  const Index n = ds.n(), p = design.cols() + 1;
  MatrixXd a(n, p);
  a.col(0).setOnes();
  a.rightCols(p - 1) = design;

  VectorXd beta = VectorXd::Zero(p);
  const double share = static_cast<double>(ds.n_treated()) / static_cast<double>(n);
  beta[0] = std::log(share / (1.0 - share));
  VectorXd eta = a * beta;
  double ll = log_likelihood(eta, ds.d);
  fit.loglik_trace.push_back(ll);
  const VectorXd dvec = ds.d.cast<double>();
  MatrixXd hessian(p, p);

  for (int it = 0; it < opts.max_iterations; ++it) {
    const VectorXd prob = sigmoid(eta);
    const VectorXd score = a.transpose() * (dvec - prob);
    if (score.cwiseAbs().maxCoeff() / static_cast<double>(n) < opts.tolerance) {
      fit.converged = true;
      break;
    }
    const VectorXd w = prob.array() * (1.0 - prob.array());
    hessian = a.transpose() * w.asDiagonal() * a;
    Eigen::LDLT<MatrixXd> ldlt(hessian);
    auto usable = [&](const Eigen::LDLT<MatrixXd>& f) {
      return f.info() == Eigen::Success && f.isPositive() &&
             f.vectorD().minCoeff() > 1e-12 * std::max(1.0, f.vectorD().maxCoeff());
    };
    if (!usable(ldlt)) {
      const double jitter = 1e-8 * std::max(1.0, hessian.trace() / static_cast<double>(p));
      ldlt.compute(hessian + jitter * MatrixXd::Identity(p, p));
      fit.jittered = true;
      if (!usable(ldlt)) {
        throw NonConvergence("logit Hessian is singular even after a ridge jitter; the design "
                             "has collinear columns");
      }
    }
    const VectorXd step = ldlt.solve(score);
    double t = 1.0;
    VectorXd next = beta + step;
    VectorXd next_eta = a * next;
    double next_ll = log_likelihood(next_eta, ds.d);
    // Near the optimum the likelihood gain drops below its rounding noise;
    // the full Newton step is then accepted when it shrinks the score.
    bool accept = next_ll >= ll;
    if (!accept && next_ll >= ll - 1e-12 * std::max(1.0, std::abs(ll))) {
      const VectorXd next_score = a.transpose() * (dvec - sigmoid(next_eta));
      accept = next_score.cwiseAbs().maxCoeff() < score.cwiseAbs().maxCoeff();
    }
    int halvings = 0;
    while (!accept && halvings < opts.max_halvings) {
      t *= 0.5;
      next = beta + t * step;
      next_eta = a * next;
      next_ll = log_likelihood(next_eta, ds.d);
      accept = next_ll >= ll;
      ++halvings;
    }
    if (!accept) break;
    beta = next;
    eta = next_eta;
    ll = next_ll;
    fit.loglik_trace.push_back(ll);
    fit.iterations = it + 1;
    // Separation: the likelihood approaches its supremum of 0 with every unit
    // classified correctly by a diverging index.
    const double margin = (eta.array() * (2.0 * dvec.array() - 1.0)).minCoeff();
    if (margin > 0.0 && eta.cwiseAbs().maxCoeff() > 30.0 && -ll < 1e-6 * n) {
      throw NonConvergence("perfect separation in the logit fit; separating direction: " +
                           direction_text(beta, fit.design_labels));
    }
  }
  if (!fit.converged) {
    const double margin = (eta.array() * (2.0 * dvec.array() - 1.0)).minCoeff();
    if (margin >= 0.0 || eta.cwiseAbs().maxCoeff() > 30.0) {
      throw NonConvergence("logit coefficients diverge (quasi-separation); direction: " +
                           direction_text(beta, fit.design_labels));
    }
    throw NonConvergence("logit Newton iterations did not converge in " +
                         std::to_string(opts.max_iterations) + " steps");
  }
  const VectorXd prob = sigmoid(eta);
  const VectorXd w = prob.array() * (1.0 - prob.array());
  hessian = a.transpose() * w.asDiagonal() * a;
  const VectorXd var = hessian.ldlt().solve(MatrixXd::Identity(p, p)).diagonal();
  fit.intercept = beta[0];
  fit.coef = beta.tail(p - 1);
  fit.intercept_se = std::sqrt(std::max(0.0, var[0]));
  fit.coef_se = var.tail(p - 1).cwiseMax(0.0).cwiseSqrt();
  fit.propensity = prob;
  return fit;
}

MatchingSpace psm_matching_space(const Dataset& ds, const LogitFit& fit) {
  if (!fit.converged) throw ValidationError("propensity space needs a converged logit fit");
  if (fit.propensity.size() != ds.n()) {
    throw ValidationError("logit fit was estimated on a different dataset");
  }
  MatchingSpace s;
  s.method = std::any_of(fit.design_squared.begin(), fit.design_squared.end(),
                         [](bool b) { return b; })
                 ? SpaceMethod::kPsmSq
                 : SpaceMethod::kPsm;
  s.z = fit.propensity;
  s.labels = {"propensity"};
  return s;
}

OlsAtt ols_att(const Dataset& ds) {
  ds.validate();
  const Index n = ds.n(), p = ds.k() + 2;
  if (n <= p) throw ValidationError("OLS needs more rows than design columns");
  MatrixXd a(n, p);
  a.col(0).setOnes();
  a.col(1) = ds.d.cast<double>();
  a.rightCols(ds.k()) = ds.x;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    std::vector<std::string> names = {"intercept", "d"};
    names.insert(names.end(), ds.names.begin(), ds.names.end());
    std::string dropped;
    const auto perm = qr.colsPermutation().indices();
    for (Index r = qr.rank(); r < p; ++r) {
      if (!dropped.empty()) dropped += ", ";
      dropped += names[perm[r]];
    }
    throw ValidationError("OLS design is rank deficient; collinear columns: " + dropped);
  }
  OlsAtt out;
  out.coefficients = qr.solve(ds.y);
  const VectorXd resid = ds.y - a * out.coefficients;
  const MatrixXd bread = (a.transpose() * a).ldlt().solve(MatrixXd::Identity(p, p));
  const MatrixXd meat = a.transpose() * resid.array().square().matrix().asDiagonal() * a;
  const MatrixXd cov = bread * meat * bread * (static_cast<double>(n) / static_cast<double>(n - p));
  out.estimate = out.coefficients[1];
  out.se = std::sqrt(std::max(0.0, cov(1, 1)));
  return out;
}

nlohmann::json logit_fit_json(const LogitFit& fit) {
  nlohmann::json j;
  j["intercept"] = fit.intercept;
  j["intercept_se"] = fit.intercept_se;
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t c = 0; c < fit.design_labels.size(); ++c) {
    cols.push_back({{"column", fit.design_labels[c]},
                    {"coef", fit.coef[static_cast<Index>(c)]},
                    {"se", fit.coef_se[static_cast<Index>(c)]}});
  }
  j["coefficients"] = cols;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  j["loglik"] = fit.loglik_trace.empty() ? 0.0 : fit.loglik_trace.back();
  return j;
}

}  // namespace metricmatch
