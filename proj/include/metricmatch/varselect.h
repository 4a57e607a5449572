#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "metricmatch/dataset.h"
#include "metricmatch/space.h"

namespace metricmatch {

struct LassoOptions {
  std::vector<double> lambda_grid;  // empty: 50 log-spaced points, lambda_max to lambda_max/1000
  int grid_size = 50;
  double grid_ratio = 1e-3;
  int folds = 5;
  std::uint64_t seed = 1;
  double penalty_scale = 1.0;  // multiplies the CV-selected lambda
  double tolerance = 1e-12;
  int max_sweeps = 100000;
  int max_outer = 100;         // IRLS iterations for the logit
};

struct LassoFit {
  VectorXd coef;
  double intercept = 0.0;
  double lambda = 0.0;
  std::vector<double> lambda_grid;
  std::vector<double> cv_loss;  // mean held-out loss per grid point
  double kkt_violation = 0.0;   // max_j max(0, |X_j'r/n| - lambda)
  int sweeps = 0;

  std::vector<Index> support() const;
};

// (1/2n)|y - b0 - X b|^2 + lambda |b|_1 at a fixed lambda.
LassoFit lasso_linear_at(const MatrixXd& x, const VectorXd& y, double lambda,
                         const LassoOptions& opts = {});
// -(1/n) loglik(b0, b) + lambda |b|_1 at a fixed lambda.
LassoFit lasso_logit_at(const MatrixXd& x, const VectorXi& d, double lambda,
                        const LassoOptions& opts = {});

double lasso_linear_lambda_max(const MatrixXd& x, const VectorXd& y);
double lasso_logit_lambda_max(const MatrixXd& x, const VectorXi& d);

// Max over j of |X_j'r/n| with centered columns: the linear KKT residual.
VectorXd lasso_linear_scores(const MatrixXd& x, const VectorXd& y, const LassoFit& fit);
VectorXd lasso_logit_scores(const MatrixXd& x, const VectorXi& d, const LassoFit& fit);

// K-fold CV over the grid, then a refit on all rows at the selected lambda
// times penalty_scale.
LassoFit lasso_linear(const Dataset& ds, const LassoOptions& opts = {});
LassoFit lasso_logit(const Dataset& ds, const LassoOptions& opts = {});

// Standardized raw columns at the union of the two supports.
MatchingSpace l1_matching_space(const Dataset& ds, const LassoFit& fit_y, const LassoFit& fit_d);

enum class RrfTarget { kOutcome, kTreatment };

struct RrfOptions {
  int trees = 100;
  int mtry = 0;            // 0: floor(sqrt(k))
  int max_depth = 8;
  int min_node_size = 10;  // nodes smaller than this are not split
  std::vector<double> lambda_grid;  // when non-empty, lambda is chosen by CV
  int folds = 5;
  bool regularize = true;  // false: plain forest, lambda ignored
  std::uint64_t seed = 1;
};

struct RrfNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  double value = 0.0;  // leaf mean (regression) or treated share
};

struct RrfSplit {
  int tree, node, feature;
  double gain, penalized_gain;
};

struct RrfFit {
  std::vector<std::vector<RrfNode>> trees;
  std::vector<RrfSplit> splits;   // in the order accepted
  std::vector<Index> selected;    // F, ascending
  VectorXd importance;            // c_j: mean gain of splits on j, 0 outside F
  double lambda = 1.0;
  std::vector<double> lambda_grid;
  std::vector<double> cv_loss;
  RrfTarget target = RrfTarget::kOutcome;

  VectorXd predict(const MatrixXd& x) const;
};

// Forest with gain multiplied by lambda for features not yet used anywhere
// in the forest. Ties on penalized gain go to the larger raw gain, then to
// the lower feature index.
RrfFit rrf_train(const Dataset& ds, RrfTarget target, double lambda, const RrfOptions& opts = {});

// Union of the selected sets, each column multiplied by its importance (the
// larger one when both fits selected it).
MatchingSpace rrf_matching_space(const Dataset& ds, const RrfFit& fit_y, const RrfFit& fit_d);

nlohmann::json lasso_fit_json(const LassoFit& fit, const std::vector<std::string>& names);
nlohmann::json rrf_fit_json(const RrfFit& fit, const std::vector<std::string>& names);

}  // namespace metricmatch
