#include "metricmatch/matching.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "metricmatch/error.h"
#include "metricmatch/random.h"

namespace metricmatch {

double squared_distance(const MatrixXd& z, Index a, Index b) {
  double s = 0.0;
  for (Index c = 0; c < z.cols(); ++c) {
    const double diff = z(a, c) - z(b, c);
    s += diff * diff;
  }
  return s;
}

KdTree::KdTree(const MatrixXd& points, std::vector<Index> rows, int leaf_size)
    : dim_(points.cols()), leaf_size_(std::max(1, leaf_size)), rows_(std::move(rows)) {
  std::sort(rows_.begin(), rows_.end());
  coords_.resize(rows_.size() * static_cast<std::size_t>(dim_));
  for (std::size_t s = 0; s < rows_.size(); ++s) {
    for (Index c = 0; c < dim_; ++c) coords_[s * dim_ + c] = points(rows_[s], c);
  }
  if (!rows_.empty()) build(0, rows_.size());
}

int KdTree::build(std::size_t begin, std::size_t end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{-1, 0.0, begin, end, -1, -1});
  if (end - begin <= static_cast<std::size_t>(leaf_size_) || dim_ == 0) return id;

  int best_dim = 0;
  double best_spread = -1.0;
  for (Index c = 0; c < dim_; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t s = begin; s < end; ++s) {
      lo = std::min(lo, coords_[s * dim_ + c]);
      hi = std::max(hi, coords_[s * dim_ + c]);
    }
    if (hi - lo > best_spread) {
      best_spread = hi - lo;
      best_dim = static_cast<int>(c);
    }
  }
  if (!(best_spread > 0.0)) return id;  // all points coincide

  std::vector<std::size_t> order(end - begin);
  for (std::size_t s = begin; s < end; ++s) order[s - begin] = s;
  const std::size_t mid = order.size() / 2;
  auto key = [&](std::size_t s) { return coords_[s * dim_ + best_dim]; };
  std::nth_element(order.begin(), order.begin() + mid, order.end(),
                   [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  const double split = key(order[mid]);

  std::vector<Index> rows(order.size());
  std::vector<double> coords(order.size() * dim_);
  for (std::size_t t = 0; t < order.size(); ++t) {
    rows[t] = rows_[order[t]];
    std::copy_n(&coords_[order[t] * dim_], dim_, &coords[t * dim_]);
  }
  std::copy(rows.begin(), rows.end(), rows_.begin() + begin);
  std::copy(coords.begin(), coords.end(), coords_.begin() + begin * dim_);

  // Left holds keys <= split, right holds keys >= split.
  const int left = build(begin, begin + mid);
  const int right = build(begin + mid, end);
  nodes_[id].dim = best_dim;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double KdTree::sq_dist(const double* q, std::size_t slot) const {
  const double* p = &coords_[slot * dim_];
  double s = 0.0;
  for (Index c = 0; c < dim_; ++c) {
    const double diff = q[c] - p[c];
    s += diff * diff;
  }
  return s;
}

// Pruning compares the single-axis gap against the running best with a
// strict inequality: a sum of non-negative terms never rounds below one of
// its terms, so no point at a tying distance is skipped.
void KdTree::search_nearest(int node, const double* q, Index& best, double& best_d) const {
  const Node& nd = nodes_[node];
  if (nd.dim < 0) {
    for (std::size_t s = nd.begin; s < nd.end; ++s) {
      const double d = sq_dist(q, s);
      if (d < best_d || (d == best_d && rows_[s] < best)) {
        best_d = d;
        best = rows_[s];
      }
    }
    return;
  }
  const double gap = q[nd.dim] - nd.split;
  const double bound = gap * gap;
  const int near = gap <= 0.0 ? nd.left : nd.right;
  const int far = gap <= 0.0 ? nd.right : nd.left;
  search_nearest(near, q, best, best_d);
  if (!(bound > best_d)) search_nearest(far, q, best, best_d);
}

std::pair<Index, double> KdTree::nearest(const double* query) const {
  if (rows_.empty()) throw ValidationError("nearest-neighbour query on an empty index");
  Index best = std::numeric_limits<Index>::max();
  double best_d = std::numeric_limits<double>::infinity();
  search_nearest(0, query, best, best_d);
  return {best, best_d};
}

void KdTree::search_knn(int node, const double* q, std::size_t k, Index exclude,
                        std::vector<std::pair<double, Index>>& heap) const {
  const Node& nd = nodes_[node];
  if (nd.dim < 0) {
    for (std::size_t s = nd.begin; s < nd.end; ++s) {
      if (rows_[s] == exclude) continue;
      const std::pair<double, Index> cand{sq_dist(q, s), rows_[s]};
      if (heap.size() < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end());
      } else if (cand < heap.front()) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  const double gap = q[nd.dim] - nd.split;
  const double bound = gap * gap;
  const int near = gap <= 0.0 ? nd.left : nd.right;
  const int far = gap <= 0.0 ? nd.right : nd.left;
  search_knn(near, q, k, exclude, heap);
  if (heap.size() < k || !(bound > heap.front().first)) search_knn(far, q, k, exclude, heap);
}

std::vector<std::pair<double, Index>> KdTree::knn(const double* query, std::size_t k,
                                                  Index exclude) const {
  std::vector<std::pair<double, Index>> heap;
  if (k == 0 || rows_.empty()) return heap;
  heap.reserve(k);
  search_knn(0, query, k, exclude, heap);
  std::sort_heap(heap.begin(), heap.end());
  return heap;
}

namespace {

void check_alignment(const MatchingSpace& space, const Dataset& ds) {
  if (space.n() != ds.n()) {
    throw ValidationError("matching space has " + std::to_string(space.n()) +
                          " rows but the dataset has " + std::to_string(ds.n()));
  }
  if (space.dim() < 1) throw ValidationError("matching space has no columns");
  if (!space.z.allFinite()) throw ValidationError("matching space has non-finite entries");
}

void group_rows(const Dataset& ds, Estimand estimand, std::vector<Index>& group,
                std::vector<Index>& other) {
  const int want = estimand == Estimand::kAtt ? 1 : 0;
  for (Index i = 0; i < ds.n(); ++i) (ds.d[i] == want ? group : other).push_back(i);
  if (group.empty()) {
    throw ValidationError(std::string("no units in the ") + to_string(estimand) + " group");
  }
  if (other.empty()) throw ValidationError("no units of the opposite treatment status");
}

void finish_estimate(MatchResult& r, const Dataset& ds) {
  double sum = 0.0;
  for (std::size_t u = 0; u < r.units.size(); ++u) {
    const double diff = ds.y[r.units[u]] - ds.y[r.matches[u]];
    sum += r.estimand == Estimand::kAtt ? diff : -diff;
  }
  r.estimate = sum / static_cast<double>(r.units.size());
}

// Dimension above which a linear scan beats the tree.
constexpr Index kTreeMaxDim = 16;

}  // namespace

MatchResult brute_force_match(const MatchingSpace& space, const Dataset& ds,
                              Estimand estimand) {
  check_alignment(space, ds);
  MatchResult r;
  r.estimand = estimand;
  std::vector<Index> other;
  group_rows(ds, estimand, r.units, other);
  for (Index i : r.units) {
    Index best = other.front();
    double best_d = squared_distance(space.z, i, best);
    for (std::size_t o = 1; o < other.size(); ++o) {
      const double dd = squared_distance(space.z, i, other[o]);
      if (dd < best_d) {
        best_d = dd;
        best = other[o];
      }
    }
    r.matches.push_back(best);
    r.distances.push_back(std::sqrt(best_d));
  }
  finish_estimate(r, ds);
  return r;
}

MatchResult nearest_neighbor_match(const MatchingSpace& space, const Dataset& ds,
                                   Estimand estimand) {
  check_alignment(space, ds);
  if (space.dim() > kTreeMaxDim) return brute_force_match(space, ds, estimand);
  MatchResult r;
  r.estimand = estimand;
  std::vector<Index> other;
  group_rows(ds, estimand, r.units, other);
  const KdTree tree(space.z, other);
  std::vector<double> q(space.dim());
  for (Index i : r.units) {
    for (Index c = 0; c < space.dim(); ++c) q[c] = space.z(i, c);
    const auto [j, d2] = tree.nearest(q.data());
    r.matches.push_back(j);
    r.distances.push_back(std::sqrt(d2));
  }
  finish_estimate(r, ds);
  return r;
}

double abadie_imbens_variance(const MatchResult& result, const Dataset& ds,
                              const MatchingSpace& space, int J) {
  check_alignment(space, ds);
  if (J < 1) throw ValidationError("J must be >= 1");
  if (result.units.empty()) throw ValidationError("empty match result");
  std::vector<Index> group, other;
  group_rows(ds, result.estimand, group, other);
  if (group.size() != result.units.size()) {
    throw ValidationError("match result does not belong to this dataset");
  }
  if (other.size() < static_cast<std::size_t>(J) + 1) {
    throw ValidationError("need at least J + 1 = " + std::to_string(J + 1) +
                          " matched-group units to estimate conditional variances");
  }
  const double n_group = static_cast<double>(result.units.size());

  double match_term = 0.0;
  const double sign = result.estimand == Estimand::kAtt ? 1.0 : -1.0;
  for (std::size_t u = 0; u < result.units.size(); ++u) {
    const double tau_i = sign * (ds.y[result.units[u]] - ds.y[result.matches[u]]);
    const double dev = tau_i - result.estimate;
    match_term += dev * dev;
  }

  std::vector<int> uses(ds.n(), 0);
  for (Index j : result.matches) ++uses[j];

  const bool use_tree = space.dim() <= kTreeMaxDim;
  std::optional<KdTree> tree;
  if (use_tree) tree.emplace(space.z, other);
  std::vector<double> q(space.dim());
  const double jj = static_cast<double>(J);
  double reuse_term = 0.0;
  for (Index l : other) {
    const int k = uses[l];
    if (k < 2) continue;
    std::vector<std::pair<double, Index>> nbrs;
    if (use_tree) {
      for (Index c = 0; c < space.dim(); ++c) q[c] = space.z(l, c);
      nbrs = tree->knn(q.data(), static_cast<std::size_t>(J), l);
    } else {
      for (Index m : other) {
        if (m != l) nbrs.emplace_back(squared_distance(space.z, l, m), m);
      }
      std::partial_sort(nbrs.begin(), nbrs.begin() + J, nbrs.end());
      nbrs.resize(static_cast<std::size_t>(J));
    }
    double mean = 0.0;
    for (const auto& nb : nbrs) mean += ds.y[nb.second];
    mean /= jj;
    const double gap = ds.y[l] - mean;
    const double sigma2 = jj / (jj + 1.0) * gap * gap;
    reuse_term += static_cast<double>(k) * static_cast<double>(k - 1) * sigma2;
  }
  return (match_term + reuse_term) / (n_group * n_group);
}

void attach_variance(MatchResult& result, const Dataset& ds, const MatchingSpace& space,
                     int J) {
  result.variance = abadie_imbens_variance(result, ds, space, J);
  result.se = std::sqrt(result.variance);
  result.ci_low = result.estimate - 1.96 * result.se;
  result.ci_high = result.estimate + 1.96 * result.se;
  result.has_variance = true;
}

MatchResult match_and_estimate(const MatchingSpace& space, const Dataset& ds,
                               Estimand estimand, int J) {
  MatchResult r = nearest_neighbor_match(space, ds, estimand);
  attach_variance(r, ds, space, J);
  return r;
}

const char* to_string(MetricCondition c) {
  switch (c) {
    case MetricCondition::kPsm: return "PSM";
    case MetricCondition::kPgmC: return "PGM_C";
    case MetricCondition::kPgmT: return "PGM_T";
  }
  return "?";
}

MetricCheckReport metric_condition_check(const MatchingSpace& space, const Dataset& ds,
                                         const VectorXd& score, double C,
                                         std::size_t max_pairs, std::uint64_t seed,
                                         MetricCondition condition) {
  check_alignment(space, ds);
  if (score.size() != ds.n()) throw ValidationError("score length does not match the dataset");
  if (!score.allFinite()) throw ValidationError("score has non-finite entries");
  if (!(C >= 0.0)) throw ValidationError("C must be non-negative");
  const std::size_t n = static_cast<std::size_t>(ds.n());
  const std::size_t all = n * (n - 1) / 2;

  MetricCheckReport rep;
  rep.condition = condition;
  rep.constant = C;
  std::vector<MetricCheckReport::Pair> seen;
  auto visit = [&](Index i, Index j) {
    const double gap = std::abs(score[i] - score[j]);
    ++rep.pairs_evaluated;
    if (gap == 0.0) return;
    const double dist = std::sqrt(squared_distance(space.z, i, j));
    seen.push_back({i, j, dist, gap, dist / gap});
  };
  if (all <= max_pairs) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) visit(static_cast<Index>(i), static_cast<Index>(j));
    }
  } else {
    Rng rng = make_rng(seed);
    for (std::size_t p = 0; p < max_pairs; ++p) {
      const std::size_t i = uniform_index(rng, n);
      std::size_t j = uniform_index(rng, n - 1);
      if (j >= i) ++j;
      visit(static_cast<Index>(std::min(i, j)), static_cast<Index>(std::max(i, j)));
    }
  }
  if (seen.empty()) {
    throw ValidationError("every evaluated pair has equal scores; the ratio is undefined");
  }
  auto by_ratio = [](const auto& a, const auto& b) {
    return a.ratio < b.ratio || (a.ratio == b.ratio && std::tie(a.i, a.j) < std::tie(b.i, b.j));
  };
  const std::size_t keep = std::min<std::size_t>(10, seen.size());
  std::partial_sort(seen.begin(), seen.begin() + keep, seen.end(), by_ratio);
  rep.min_ratio = seen.front().ratio;
  rep.satisfied = rep.min_ratio >= C;
  for (const auto& p : seen) rep.pairs_violating += p.ratio < C ? 1 : 0;
  for (std::size_t t = 0; t < keep && seen[t].ratio < C; ++t) rep.worst.push_back(seen[t]);
  return rep;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Index external_id(const Dataset& ds, Index i) {
  return static_cast<Index>(ds.row_ids.size()) == ds.n() ? ds.row_ids[i] : i;
}

}  // namespace

void write_match_csv(const MatchResult& result, const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  out << "i,j,distance,y_i,y_j\n";
  for (std::size_t u = 0; u < result.units.size(); ++u) {
    const Index i = result.units[u], j = result.matches[u];
    out << external_id(ds, i) << ',' << external_id(ds, j) << ',' << num(result.distances[u])
        << ',' << num(ds.y[i]) << ',' << num(ds.y[j]) << '\n';
  }
  if (!out) throw ComputeError("write to " + path + " failed");
}

nlohmann::json match_summary_json(const MatchResult& result, const MatchingSpace& space) {
  nlohmann::json j;
  j["estimand"] = to_string(result.estimand);
  j["method"] = to_string(space.method);
  j["space_dim"] = space.dim();
  j["space_labels"] = space.labels;
  j["n_matched"] = result.units.size();
  std::vector<Index> distinct = result.matches;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  j["distinct_matches"] = distinct.size();
  j["estimate"] = result.estimate;
  if (result.has_variance) {
    j["variance"] = result.variance;
    j["se"] = result.se;
    j["ci95"] = {result.ci_low, result.ci_high};
  }
  return j;
}

nlohmann::json metric_report_json(const MetricCheckReport& report) {
  nlohmann::json j;
  j["condition"] = to_string(report.condition);
  j["C"] = report.constant;
  j["min_ratio"] = report.min_ratio;
  j["satisfied"] = report.satisfied;
  j["pairs_evaluated"] = report.pairs_evaluated;
  j["pairs_violating"] = report.pairs_violating;
  nlohmann::json worst = nlohmann::json::array();
  for (const auto& p : report.worst) {
    worst.push_back({{"i", p.i}, {"j", p.j}, {"distance", p.distance},
                     {"score_gap", p.score_gap}, {"ratio", p.ratio}});
  }
  j["violations"] = worst;
  return j;
}

}  // namespace metricmatch
