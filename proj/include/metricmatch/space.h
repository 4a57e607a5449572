#pragma once

#include <string>
#include <vector>

#include "metricmatch/dataset.h"

namespace metricmatch {

enum class SpaceMethod {
  kRaw,
  kNn,
  kSnn,
  kL1,
  kRrf,
  kPsm,
  kPsmSq,
  kOracleUnion,
  kOracleIntersection,
};

const char* to_string(SpaceMethod m);

// Feature matrix on which Euclidean nearest-neighbor matching runs.
// Row i corresponds to row i of the dataset it was built from.
struct MatchingSpace {
  MatrixXd z;
  SpaceMethod method = SpaceMethod::kRaw;
  std::vector<std::string> labels;  // one per column

  Index n() const { return z.rows(); }
  Index dim() const { return z.cols(); }
};

struct PruneOptions {
  double min_variance = 1e-8;
  double max_abs_correlation = 1.0 - 1e-10;
};

// Drops near-constant columns, then any column perfectly correlated with an
// earlier kept column. Throws DegenerateSpace if nothing survives.
MatchingSpace prune_columns(MatchingSpace space, const PruneOptions& opts = {});

// Indices of columns of `m` kept by the pruning rule.
std::vector<Index> prunable_keep(const MatrixXd& m, const PruneOptions& opts = {});

// Standardized columns of the dataset at `cols`.
MatchingSpace columns_space(const Dataset& ds, const std::vector<Index>& cols,
                            SpaceMethod method);

}  // namespace metricmatch
