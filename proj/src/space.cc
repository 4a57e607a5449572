#include "metricmatch/space.h"

#include <cmath>

#include "metricmatch/error.h"

namespace metricmatch {

const char* to_string(SpaceMethod m) {
  switch (m) {
    case SpaceMethod::kRaw: return "raw";
    case SpaceMethod::kNn: return "nn";
    case SpaceMethod::kSnn: return "snn";
    case SpaceMethod::kL1: return "l1";
    case SpaceMethod::kRrf: return "rrf";
    case SpaceMethod::kPsm: return "psm";
    case SpaceMethod::kPsmSq: return "psmsq";
    case SpaceMethod::kOracleUnion: return "oracle-union";
    case SpaceMethod::kOracleIntersection: return "oracle-intersection";
  }
  return "?";
}

std::vector<Index> prunable_keep(const MatrixXd& m, const PruneOptions& opts) {
  const Index n = m.rows();
  std::vector<Index> keep;
  if (n < 2) return keep;
  MatrixXd centered = m.rowwise() - m.colwise().mean();
  VectorXd var = centered.colwise().squaredNorm().transpose() / static_cast<double>(n - 1);
  for (Index j = 0; j < m.cols(); ++j) {
    if (!(var[j] >= opts.min_variance)) continue;
    bool duplicate = false;
    for (Index kept : keep) {
      const double cov = centered.col(j).dot(centered.col(kept)) / static_cast<double>(n - 1);
      const double r = cov / std::sqrt(var[j] * var[kept]);
      if (std::abs(r) > opts.max_abs_correlation) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) keep.push_back(j);
  }
  return keep;
}

MatchingSpace prune_columns(MatchingSpace space, const PruneOptions& opts) {
  const std::vector<Index> keep = prunable_keep(space.z, opts);
  if (keep.empty()) {
    throw DegenerateSpace(std::string("every column of the ") + to_string(space.method) +
                          " matching space was pruned (constant or duplicate features)");
  }
  if (static_cast<Index>(keep.size()) == space.dim()) return space;
  MatchingSpace out;
  out.method = space.method;
  out.z.resize(space.n(), static_cast<Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    out.z.col(c) = space.z.col(keep[c]);
    out.labels.push_back(space.labels.at(keep[c]));
  }
  return out;
}

MatchingSpace columns_space(const Dataset& ds, const std::vector<Index>& cols,
                            SpaceMethod method) {
  MatchingSpace s;
  s.method = method;
  s.z.resize(ds.n(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    s.z.col(c) = ds.x.col(cols[c]);
    s.labels.push_back(ds.names.at(cols[c]));
  }
  return s;
}

}  // namespace metricmatch
