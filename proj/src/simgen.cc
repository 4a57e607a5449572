#include "metricmatch/simgen.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "metricmatch/error.h"
#include "metricmatch/neuralnet.h"
#include "metricmatch/random.h"

namespace metricmatch {

namespace {

// Fixed stream ids so each ingredient has its own generator.
enum Stream : std::uint64_t {
  kSupportStream = 1,
  kCovariateStream = 2,
  kTreatmentStream = 3,
  kNoiseStream = 4,
  kSquareSupportStream = 5,
  kWeightStream = 6,
  kCalibrationStream = 7,
  kNoise1Stream = 8,
};

const struct {
  DgpKind kind;
  const char* name;
} kKindNames[] = {
    {DgpKind::kSparseLinear, "sparse-linear"},
    {DgpKind::kSparseLinearSq, "sparse-linear-sq"},
    {DgpKind::kRandomNn, "random-nn"},
    {DgpKind::kCounterexample, "counterexample"},
    {DgpKind::kIhdpSurface, "ihdp-surface"},
};

double logistic(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

MatrixXd normal_matrix(Index rows, Index cols, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = standard_normal(rng);
  }
  return m;
}

VectorXd normal_vector(Index n, double sd, Rng& rng) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = sd * standard_normal(rng);
  return v;
}

VectorXi bernoulli_logit(const VectorXd& index, Rng& rng) {
  VectorXi d(index.size());
  for (Index i = 0; i < index.size(); ++i) d[i] = uniform01(rng) < logistic(index[i]) ? 1 : 0;
  return d;
}

Truth make_truth(const VectorXd& y0, const VectorXd& y1) {
  return Truth{y0, y1, y1 - y0};
}

Truth constant_effect_truth(const VectorXd& y0, double beta0) {
  return Truth{y0, y0.array() + beta0, VectorXd::Constant(y0.size(), beta0)};
}

VectorXd observed(const VectorXi& d, const VectorXd& y0, const VectorXd& y1) {
  VectorXd y(d.size());
  for (Index i = 0; i < d.size(); ++i) y[i] = d[i] ? y1[i] : y0[i];
  return y;
}

std::vector<Index> distinct_indices(Index k, int count, Rng& rng) {
  std::vector<Index> all(k);
  for (Index j = 0; j < k; ++j) all[j] = j;
  shuffle(all, rng);
  all.resize(static_cast<std::size_t>(count));
  return all;
}

std::vector<Index> sorted(std::vector<Index> v) {
  std::sort(v.begin(), v.end());
  return v;
}

Generated sparse_design(const DgpSpec& spec, bool squares) {
  spec.validate();
  const Index n = spec.n, k = spec.k;
  Rng support_rng = make_rng(derive_seed(spec.seed, kSupportStream));
  const int exclusive = spec.support - spec.overlap;
  const std::vector<Index> placed =
      distinct_indices(k, spec.overlap + 2 * exclusive, support_rng);
  VectorXd gamma = VectorXd::Zero(k), omega = VectorXd::Zero(k);
  for (int t = 0; t < spec.overlap + exclusive; ++t) gamma[placed[t]] = spec.coef;
  for (int t = 0; t < spec.overlap; ++t) omega[placed[t]] = spec.coef;
  for (int t = spec.overlap + exclusive; t < spec.overlap + 2 * exclusive; ++t) {
    omega[placed[t]] = spec.coef;
  }

  Rng x_rng = make_rng(derive_seed(spec.seed, kCovariateStream));
  const MatrixXd x = normal_matrix(n, k, x_rng);
  VectorXd index = x * omega;
  VectorXd y0 = x * gamma;

  OracleInfo info;
  for (Index j = 0; j < k; ++j) {
    if (gamma[j] != 0.0) info.outcome.push_back(j);
    if (omega[j] != 0.0) info.treatment.push_back(j);
  }
  if (squares) {
    Rng sq_rng = make_rng(derive_seed(spec.seed, kSquareSupportStream));
    const std::vector<Index> g1 = sorted(distinct_indices(k, spec.sq_support, sq_rng));
    const std::vector<Index> w1 = sorted(distinct_indices(k, spec.sq_support, sq_rng));
    const MatrixXd x2 = x.array().square().matrix();
    for (Index j : g1) y0 += spec.sq_coef * x2.col(j);
    for (Index j : w1) index += spec.sq_coef * x2.col(j);
    if (spec.sq_coef != 0.0) {
      std::set<Index> out(info.outcome.begin(), info.outcome.end());
      std::set<Index> trt(info.treatment.begin(), info.treatment.end());
      out.insert(g1.begin(), g1.end());
      trt.insert(w1.begin(), w1.end());
      info.outcome.assign(out.begin(), out.end());
      info.treatment.assign(trt.begin(), trt.end());
    }
  }

  Rng d_rng = make_rng(derive_seed(spec.seed, kTreatmentStream));
  const VectorXi d = bernoulli_logit(index, d_rng);
  Rng e_rng = make_rng(derive_seed(spec.seed, kNoiseStream));
  y0 += normal_vector(n, 1.0, e_rng);
  const VectorXd y1 = y0.array() + spec.beta0;
  Generated g{make_dataset(x, d, observed(d, y0, y1), {}, constant_effect_truth(y0, spec.beta0)),
              info};
  return g;
}

// Correlated weight pair: a shared core for both nets plus independent
// noise. Each entry position is zeroed independently with probability p, in
// both nets at once.
std::pair<MatrixXd, MatrixXd> correlated_weights(Index rows, Index cols, double rho, double p,
                                                 double scale, Rng& rng) {
  MatrixXd a(rows, cols), b(rows, cols);
  const double rest = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      const double core = standard_normal(rng);
      const double own = standard_normal(rng);
      const bool keep = uniform01(rng) >= p;
      a(i, j) = keep ? scale * core : 0.0;
      b(i, j) = keep ? scale * (rho * core + rest * own) : 0.0;
    }
  }
  return {a, b};
}

struct NetPair {
  TrainedNet f_y, f_d;
};

NetPair random_nets(const DgpSpec& spec) {
  Rng rng = make_rng(derive_seed(spec.seed, kWeightStream));
  const double rho = spec.weight_correlation, p = spec.dropout;
  const std::vector<Index> widths = {spec.k, spec.width1, spec.width2, 1};
  const std::vector<Activation> acts = {Activation::kElu, Activation::kRelu,
                                        Activation::kIdentity};
  NetPair nets;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double keep = std::max(1e-12, 1.0 - p);
    const double scale = (l == 0 ? spec.input_gain : 1.0) /
                         std::sqrt(keep * static_cast<double>(widths[l]));
    // Only the first layer differs between the nets; deeper layers are shared.
    auto [wy, wd] = correlated_weights(widths[l + 1], widths[l], l == 0 ? rho : 1.0, p, scale, rng);
    nets.f_y.layers.push_back(Layer{wy, VectorXd::Zero(widths[l + 1]), acts[l]});
    nets.f_d.layers.push_back(Layer{wd, VectorXd::Zero(widths[l + 1]), acts[l]});
  }
  return nets;
}

// Affine map placing raw net output at mean 0 and sd `scale` over the
// calibration sample; constant outputs map to 0.
struct Calibration {
  double mean = 0.0, factor = 0.0;
  VectorXd apply(const VectorXd& raw) const { return (raw.array() - mean) * factor; }
};

Calibration calibrate(const VectorXd& raw, double scale) {
  Calibration c;
  c.mean = raw.mean();
  const double sd = std::sqrt((raw.array() - c.mean).square().sum() /
                              static_cast<double>(raw.size() - 1));
  c.factor = sd > 1e-12 ? scale / sd : 0.0;
  return c;
}

double simpson(double (*f)(double), double a, double b, int intervals) {
  if (intervals % 2) ++intervals;
  const double h = (b - a) / intervals;
  double s = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

double tau_times_rho(double x) { return counterexample_tau(x) * counterexample_rho(x); }

}  // namespace

const char* to_string(DgpKind k) {
  for (const auto& e : kKindNames) {
    if (e.kind == k) return e.name;
  }
  return "?";
}

DgpKind parse_dgp_kind(const std::string& s) {
  for (const auto& e : kKindNames) {
    if (s == e.name) return e.kind;
  }
  throw ValidationError("unknown DGP '" + s +
                        "' (expected sparse-linear, sparse-linear-sq, random-nn, "
                        "counterexample or ihdp-surface)");
}

void DgpSpec::validate() const {
  if (n < 2) throw ValidationError("DGP n must be >= 2");
  switch (kind) {
    case DgpKind::kSparseLinear:
    case DgpKind::kSparseLinearSq:
      if (support < 1 || overlap < 0 || overlap > support) {
        throw ValidationError("DGP supports need 0 <= overlap <= support, support >= 1");
      }
      if (k < 2 * support - overlap || k < 10) {
        throw ValidationError("DGP k = " + std::to_string(k) +
                              " is too small to place the coefficient supports (need k >= 10)");
      }
      if (kind == DgpKind::kSparseLinearSq && (sq_support < 0 || sq_support > k)) {
        throw ValidationError("DGP squared support must lie in [0, k]");
      }
      break;
    case DgpKind::kRandomNn:
      if (k < 1 || width1 < 1 || width2 < 1) {
        throw ValidationError("random-nn DGP needs k, width1 and width2 >= 1");
      }
      if (!(dropout >= 0.0 && dropout <= 1.0)) {
        throw ValidationError("random-nn dropout must lie in [0, 1]");
      }
      if (!(weight_correlation >= -1.0 && weight_correlation <= 1.0)) {
        throw ValidationError("random-nn weight correlation must lie in [-1, 1]");
      }
      if (!(input_gain > 0.0)) throw ValidationError("random-nn input_gain must be > 0");
      if (!(outcome_scale >= 0.0) || !(index_scale >= 0.0)) {
        throw ValidationError("random-nn scales must be non-negative");
      }
      break;
    case DgpKind::kCounterexample:
      if (!(noise_sd >= 0.0)) throw ValidationError("counterexample noise_sd must be >= 0");
      break;
    case DgpKind::kIhdpSurface: {
      if (ihdp_values.empty() || ihdp_values.size() != ihdp_probs.size()) {
        throw ValidationError("IHDP coefficient values and probabilities must pair up");
      }
      double total = 0.0;
      for (double p : ihdp_probs) {
        if (!(p >= 0.0)) throw ValidationError("IHDP probabilities must be non-negative");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw ValidationError("IHDP probabilities must sum to 1");
      }
      break;
    }
  }
}

void to_json(nlohmann::json& j, const DgpSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"n", s.n},
                     {"k", s.k},
                     {"beta0", s.beta0},
                     {"seed", s.seed},
                     {"coef", s.coef},
                     {"support", s.support},
                     {"overlap", s.overlap},
                     {"sq_coef", s.sq_coef},
                     {"sq_support", s.sq_support},
                     {"width1", s.width1},
                     {"width2", s.width2},
                     {"weight_correlation", s.weight_correlation},
                     {"dropout", s.dropout},
                     {"input_gain", s.input_gain},
                     {"outcome_scale", s.outcome_scale},
                     {"index_scale", s.index_scale},
                     {"noise_sd", s.noise_sd},
                     {"ihdp_offset", s.ihdp_offset},
                     {"ihdp_values", s.ihdp_values},
                     {"ihdp_probs", s.ihdp_probs},
                     {"ihdp_att", s.ihdp_att}};
}

void from_json(const nlohmann::json& j, DgpSpec& s) {
  if (!j.is_object()) throw ValidationError("DGP spec must be a JSON object");
  nlohmann::json defaults;
  to_json(defaults, DgpSpec{});
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ValidationError("unknown DGP spec key '" + key + "'");
  }
  try {
    DgpSpec out;
    if (j.contains("kind")) out.kind = parse_dgp_kind(j.at("kind").get<std::string>());
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("n", out.n);
    read("k", out.k);
    read("beta0", out.beta0);
    read("seed", out.seed);
    read("coef", out.coef);
    read("support", out.support);
    read("overlap", out.overlap);
    read("sq_coef", out.sq_coef);
    read("sq_support", out.sq_support);
    read("width1", out.width1);
    read("width2", out.width2);
    read("weight_correlation", out.weight_correlation);
    read("dropout", out.dropout);
    read("input_gain", out.input_gain);
    read("outcome_scale", out.outcome_scale);
    read("index_scale", out.index_scale);
    read("noise_sd", out.noise_sd);
    read("ihdp_offset", out.ihdp_offset);
    read("ihdp_values", out.ihdp_values);
    read("ihdp_probs", out.ihdp_probs);
    read("ihdp_att", out.ihdp_att);
    s = out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed DGP spec: ") + e.what());
  }
}

Generated gen_sparse_linear(const DgpSpec& spec) {
  if (spec.kind != DgpKind::kSparseLinear) throw ValidationError("spec kind is not sparse-linear");
  return sparse_design(spec, false);
}

Generated gen_sparse_linear_sq(const DgpSpec& spec) {
  if (spec.kind != DgpKind::kSparseLinearSq) {
    throw ValidationError("spec kind is not sparse-linear-sq");
  }
  return sparse_design(spec, true);
}

Dataset gen_random_nn(const DgpSpec& spec) {
  if (spec.kind != DgpKind::kRandomNn) throw ValidationError("spec kind is not random-nn");
  spec.validate();
  const NetPair nets = random_nets(spec);

  Rng cal_rng = make_rng(derive_seed(spec.seed, kCalibrationStream));
  const MatrixXd x_cal = normal_matrix(4096, spec.k, cal_rng);
  const VectorXd fy_cal = forward(nets.f_y, x_cal).post.back().col(0);
  const VectorXd fd_cal = forward(nets.f_d, x_cal).post.back().col(0);
  Calibration cy = calibrate(fy_cal, spec.outcome_scale);
  const Calibration cd = calibrate(fd_cal, spec.index_scale);
  // Orient F_Y so it co-moves with the treatment index: the confounding bias
  // of the naive contrast is then upward.
  if (cy.apply(fy_cal).dot(cd.apply(fd_cal)) < 0.0) cy.factor = -cy.factor;

  Rng x_rng = make_rng(derive_seed(spec.seed, kCovariateStream));
  const MatrixXd x = normal_matrix(spec.n, spec.k, x_rng);
  const VectorXd f_y = cy.apply(forward(nets.f_y, x).post.back().col(0));
  const VectorXd f_d = cd.apply(forward(nets.f_d, x).post.back().col(0));

  Rng d_rng = make_rng(derive_seed(spec.seed, kTreatmentStream));
  const VectorXi d = bernoulli_logit(f_d, d_rng);
  Rng e_rng = make_rng(derive_seed(spec.seed, kNoiseStream));
  const VectorXd y0 = f_y + normal_vector(spec.n, 1.0, e_rng);
  const VectorXd y1 = y0.array() + spec.beta0;
  return make_dataset(x, d, observed(d, y0, y1), {}, constant_effect_truth(y0, spec.beta0));
}

double counterexample_m(double x) { return x / 2.0; }

double counterexample_tau(double x) { return (4.0 - x) / 2.0; }

double counterexample_rho(double x) {
  return x >= 0.0 ? x / (4.0 - x) : -3.0 * x / (4.0 - x);
}

double counterexample_true_att(int intervals) {
  const double num = simpson(tau_times_rho, -1.0, 0.0, intervals) +
                     simpson(tau_times_rho, 0.0, 1.0, intervals);
  const double den = simpson(counterexample_rho, -1.0, 0.0, intervals) +
                     simpson(counterexample_rho, 0.0, 1.0, intervals);
  return num / den;
}

Dataset gen_counterexample(const DgpSpec& spec) {
  if (spec.kind != DgpKind::kCounterexample) {
    throw ValidationError("spec kind is not counterexample");
  }
  spec.validate();
  const Index n = spec.n;
  Rng x_rng = make_rng(derive_seed(spec.seed, kCovariateStream));
  MatrixXd x(n, 1);
  for (Index i = 0; i < n; ++i) x(i, 0) = 2.0 * uniform01(x_rng) - 1.0;
  Rng d_rng = make_rng(derive_seed(spec.seed, kTreatmentStream));
  VectorXi d(n);
  for (Index i = 0; i < n; ++i) d[i] = uniform01(d_rng) < counterexample_rho(x(i, 0)) ? 1 : 0;
  Rng e0 = make_rng(derive_seed(spec.seed, kNoiseStream));
  Rng e1 = make_rng(derive_seed(spec.seed, kNoise1Stream));
  VectorXd y0(n), y1(n), tau(n);
  for (Index i = 0; i < n; ++i) {
    const double xi = x(i, 0);
    y0[i] = counterexample_m(xi) + spec.noise_sd * standard_normal(e0);
    y1[i] = counterexample_m(xi) + counterexample_tau(xi) + spec.noise_sd * standard_normal(e1);
    tau[i] = counterexample_tau(xi);
  }
  return make_dataset(x, d, observed(d, y0, y1), {"x"}, Truth{y0, y1, tau});
}

Dataset gen_ihdp_surface(const MatrixXd& x, const VectorXi& d,
                         const std::vector<std::string>& names, const DgpSpec& spec) {
  if (spec.kind != DgpKind::kIhdpSurface) throw ValidationError("spec kind is not ihdp-surface");
  spec.validate();
  if (x.rows() != d.size()) throw ValidationError("IHDP covariates and treatment differ in length");
  for (Index i = 0; i < d.size(); ++i) {
    if (d[i] != 0 && d[i] != 1) throw ValidationError("IHDP treatment column must be binary");
  }
  const Index n = x.rows(), k = x.cols();
  Rng b_rng = make_rng(derive_seed(spec.seed, kSupportStream));
  VectorXd beta(k);
  for (Index j = 0; j < k; ++j) {
    const double u = uniform01(b_rng);
    double acc = 0.0;
    std::size_t pick = spec.ihdp_values.size() - 1;
    for (std::size_t t = 0; t < spec.ihdp_probs.size(); ++t) {
      acc += spec.ihdp_probs[t];
      if (u < acc) {
        pick = t;
        break;
      }
    }
    beta[j] = spec.ihdp_values[pick];
  }
  Rng e0 = make_rng(derive_seed(spec.seed, kNoiseStream));
  Rng e1 = make_rng(derive_seed(spec.seed, kNoise1Stream));
  const VectorXd lin = x * beta;
  const VectorXd shifted = (x.array() + spec.ihdp_offset).matrix() * beta;
  VectorXd y0(n), y1(n);
  for (Index i = 0; i < n; ++i) {
    y0[i] = std::exp(shifted[i]) + standard_normal(e0);
    y1[i] = lin[i] + standard_normal(e1);
  }
  // alpha moves Y(1) so the treated-sample mean of Y(1) - Y(0) is ihdp_att.
  double gap = 0.0;
  Index treated = 0;
  for (Index i = 0; i < n; ++i) {
    if (d[i]) {
      gap += y1[i] - y0[i];
      ++treated;
    }
  }
  if (treated == 0) throw ValidationError("IHDP covariates contain no treated rows");
  const double alpha = gap / static_cast<double>(treated) - spec.ihdp_att;
  y1.array() -= alpha;
  return make_dataset(x, d, observed(d, y0, y1), names, make_truth(y0, y1));
}

Generated generate(const DgpSpec& spec, const Dataset* ihdp) {
  switch (spec.kind) {
    case DgpKind::kSparseLinear: return gen_sparse_linear(spec);
    case DgpKind::kSparseLinearSq: return gen_sparse_linear_sq(spec);
    case DgpKind::kRandomNn: return {gen_random_nn(spec), std::nullopt};
    case DgpKind::kCounterexample: return {gen_counterexample(spec), std::nullopt};
    case DgpKind::kIhdpSurface:
      if (!ihdp) throw ValidationError("the IHDP surface needs a covariate file");
      return {gen_ihdp_surface(ihdp->x, ihdp->d, ihdp->names, spec), std::nullopt};
  }
  throw ValidationError("unknown DGP kind");
}

double dgp_true_att(const DgpSpec& spec) {
  switch (spec.kind) {
    case DgpKind::kCounterexample: return counterexample_true_att();
    case DgpKind::kIhdpSurface: return spec.ihdp_att;
    default: return spec.beta0;
  }
}

MatchingSpace oracle_matching_space(const Dataset& ds, const OracleInfo& info,
                                    OracleMode mode) {
  std::set<Index> a(info.outcome.begin(), info.outcome.end());
  std::set<Index> b(info.treatment.begin(), info.treatment.end());
  std::vector<Index> cols;
  if (mode == OracleMode::kUnion) {
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(cols));
  } else {
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(cols));
  }
  if (cols.empty()) {
    throw ValidationError(mode == OracleMode::kUnion ? "oracle union is empty"
                                                     : "oracle intersection is empty");
  }
  for (Index c : cols) {
    if (c < 0 || c >= ds.k()) throw ValidationError("oracle index outside the covariate range");
  }
  return columns_space(ds, cols,
                       mode == OracleMode::kUnion ? SpaceMethod::kOracleUnion
                                                  : SpaceMethod::kOracleIntersection);
}

}  // namespace metricmatch
