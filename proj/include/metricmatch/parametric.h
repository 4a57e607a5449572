#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "metricmatch/dataset.h"
#include "metricmatch/space.h"

namespace metricmatch {

struct LogitOptions {
  double tolerance = 1e-10;  // on the max-norm of the mean score
  int max_iterations = 100;
  int max_halvings = 40;
};

struct LogitFit {
  double intercept = 0.0;
  VectorXd coef;             // one per design column
  double intercept_se = 0.0;
  VectorXd coef_se;
  std::vector<std::string> design_labels;
  std::vector<Index> design_source;  // covariate index behind each column
  std::vector<bool> design_squared;
  VectorXd propensity;       // fitted rho for every row of the training data
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  bool jittered = false;     // a ridge jitter was needed to invert the Hessian

  VectorXd index(const MatrixXd& design) const { return (design * coef).array() + intercept; }
};

// Design used by fit_logit: X, or [X, X^2] with squares of the (already
// standardized) columns. Squares collinear with an earlier column, as for
// binary dummies, are dropped by the pruning rule.
MatrixXd logit_design(const Dataset& ds, bool quadratic, std::vector<std::string>* labels,
                      std::vector<Index>* source, std::vector<bool>* squared);

// Maximum likelihood by Newton-Raphson with step-halving.
LogitFit fit_logit(const Dataset& ds, bool quadratic, const LogitOptions& opts = {});

// One column of fitted propensities.
MatchingSpace psm_matching_space(const Dataset& ds, const LogitFit& fit);

struct OlsAtt {
  double estimate = 0.0;
  double se = 0.0;           // HC1
  VectorXd coefficients;     // intercept, d, covariates
};

// Least squares of y on [1, d, X]; the coefficient on d with an HC1 standard
// error. Throws when the design is rank deficient.
OlsAtt ols_att(const Dataset& ds);

nlohmann::json logit_fit_json(const LogitFit& fit);

}  // namespace metricmatch
