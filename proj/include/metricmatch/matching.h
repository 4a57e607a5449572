#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metricmatch/dataset.h"
#include "metricmatch/space.h"

namespace metricmatch {

// Exact Euclidean nearest-neighbour index over a subset of the rows of a
// point matrix. Distances are squared sums accumulated in column order, so
// results agree bit-for-bit with a linear scan; ties go to the lowest row.
class KdTree {
 public:
  KdTree(const MatrixXd& points, std::vector<Index> rows, int leaf_size = 8);

  // Nearest indexed row to `query` and its squared distance.
  std::pair<Index, double> nearest(const double* query) const;
  // The k nearest rows other than `exclude`, ordered by (distance, row).
  std::vector<std::pair<double, Index>> knn(const double* query, std::size_t k,
                                            Index exclude = -1) const;
  std::size_t size() const { return rows_.size(); }

 private:
  struct Node {
    int dim = -1;  // -1 for leaves
    double split = 0.0;
    std::size_t begin = 0, end = 0;
    int left = -1, right = -1;
  };

  int build(std::size_t begin, std::size_t end);
  double sq_dist(const double* q, std::size_t slot) const;
  void search_nearest(int node, const double* q, Index& best, double& best_d) const;
  void search_knn(int node, const double* q, std::size_t k, Index exclude,
                  std::vector<std::pair<double, Index>>& heap) const;

  Index dim_;
  int leaf_size_;
  std::vector<Index> rows_;     // original row ids, permuted into tree order
  std::vector<double> coords_;  // row-major copy in tree order
  std::vector<Node> nodes_;
};

// Squared Euclidean distance between rows a and b of z, accumulated in
// column order (the reference arithmetic for every search here).
double squared_distance(const MatrixXd& z, Index a, Index b);

struct MatchResult {
  Estimand estimand = Estimand::kAtt;
  std::vector<Index> units;     // members of the estimand group, ascending
  std::vector<Index> matches;   // opposite-group nearest neighbour of each unit
  std::vector<double> distances;
  double estimate = 0.0;
  double variance = 0.0;
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  bool has_variance = false;

  std::size_t size() const { return units.size(); }
};

// 1-NN matching with replacement. ATT averages Y_i - Y_j* over treated i,
// ATUT averages Y_j* - Y_i over control i.
MatchResult nearest_neighbor_match(const MatchingSpace& space, const Dataset& ds,
                                   Estimand estimand);

// Same result by an O(n^2) scan; kept as the reference implementation.
MatchResult brute_force_match(const MatchingSpace& space, const Dataset& ds,
                              Estimand estimand);

// Abadie-Imbens variance for 1-NN matching with replacement, conditional
// variances from J same-group neighbours in the same space.
double abadie_imbens_variance(const MatchResult& result, const Dataset& ds,
                              const MatchingSpace& space, int J = 2);

// Fills variance, se and the normal 95% interval.
void attach_variance(MatchResult& result, const Dataset& ds, const MatchingSpace& space,
                     int J = 2);

MatchResult match_and_estimate(const MatchingSpace& space, const Dataset& ds,
                               Estimand estimand, int J = 2);

enum class MetricCondition { kPsm, kPgmC, kPgmT };
const char* to_string(MetricCondition c);

struct MetricCheckReport {
  MetricCondition condition = MetricCondition::kPgmC;
  double constant = 0.0;
  double min_ratio = 0.0;
  bool satisfied = false;
  std::size_t pairs_evaluated = 0;
  std::size_t pairs_violating = 0;
  struct Pair {
    Index i, j;
    double distance, score_gap, ratio;
  };
  std::vector<Pair> worst;  // smallest ratios first
};

// Ratio d(i, j) / |score_i - score_j| over all pairs when n(n-1)/2 <=
// max_pairs, otherwise over max_pairs random pairs.
MetricCheckReport metric_condition_check(const MatchingSpace& space, const Dataset& ds,
                                         const VectorXd& score, double C,
                                         std::size_t max_pairs, std::uint64_t seed,
                                         MetricCondition condition = MetricCondition::kPgmC);

void write_match_csv(const MatchResult& result, const Dataset& ds, const std::string& path);
nlohmann::json match_summary_json(const MatchResult& result, const MatchingSpace& space);
nlohmann::json metric_report_json(const MetricCheckReport& report);

}  // namespace metricmatch
