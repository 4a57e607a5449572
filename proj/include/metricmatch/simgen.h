#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metricmatch/dataset.h"
#include "metricmatch/space.h"

namespace metricmatch {

enum class DgpKind { kSparseLinear, kSparseLinearSq, kRandomNn, kCounterexample, kIhdpSurface };

const char* to_string(DgpKind k);
DgpKind parse_dgp_kind(const std::string& s);  // "sparse-linear", ...

struct DgpSpec {
  DgpKind kind = DgpKind::kSparseLinear;
  Index n = 8000;
  Index k = 50;
  double beta0 = 1.0;
  std::uint64_t seed = 1;

  // Sparse linear designs.
  double coef = 0.5;
  int support = 8;   // nonzero entries in each of gamma and omega
  int overlap = 6;   // indices shared by both
  double sq_coef = 0.5;
  int sq_support = 2;

  // Random nets.
  int width1 = 100;  // ELU layer
  int width2 = 10;   // ReLU layer
  double weight_correlation = 0.7;
  double dropout = 0.5;
  double input_gain = 1.0;       // multiplies the first-layer weights
  double outcome_scale = 1.8;    // sd of F_Y over the calibration sample
  double index_scale = 1.4142;   // sd of F_D, as for the sparse linear index

  // Counterexample.
  double noise_sd = 0.1;

  // IHDP surface.
  double ihdp_offset = 0.5;
  std::vector<double> ihdp_values = {0.0, 0.1, 0.2, 0.3, 0.4};
  std::vector<double> ihdp_probs = {0.6, 0.1, 0.1, 0.1, 0.1};
  double ihdp_att = 4.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DgpSpec& s);
void from_json(const nlohmann::json& j, DgpSpec& s);  // rejects unknown keys

// Covariates entering the outcome and the treatment equations (0-based).
struct OracleInfo {
  std::vector<Index> outcome;
  std::vector<Index> treatment;
};

struct Generated {
  Dataset data;
  std::optional<OracleInfo> oracle;
};

Generated gen_sparse_linear(const DgpSpec& spec);
Generated gen_sparse_linear_sq(const DgpSpec& spec);
Dataset gen_random_nn(const DgpSpec& spec);
Dataset gen_counterexample(const DgpSpec& spec);

// `x` holds the covariates the surface is built on, `d` the observed
// treatment. Non-white-mother treated rows are expected to be removed already.
Dataset gen_ihdp_surface(const MatrixXd& x, const VectorXi& d,
                         const std::vector<std::string>& names, const DgpSpec& spec);

// Dispatches on spec.kind. IhdpSurface needs `ihdp` (covariates + treatment).
Generated generate(const DgpSpec& spec, const Dataset* ihdp = nullptr);

// The estimand each generator is scored against: beta0 for the Supplement-A
// designs, the population ATT for the counterexample, ihdp_att for IHDP.
double dgp_true_att(const DgpSpec& spec);

enum class OracleMode { kUnion, kIntersection };

MatchingSpace oracle_matching_space(const Dataset& ds, const OracleInfo& info,
                                    OracleMode mode);

// Counterexample ingredients.
double counterexample_m(double x);    // E[Y(0) | x]
double counterexample_tau(double x);  // E[Y(1) - Y(0) | x]
double counterexample_rho(double x);  // P(T = 1 | x)
// Population ATT by composite Simpson quadrature on each half of [-1, 1].
double counterexample_true_att(int intervals = 4000);

}  // namespace metricmatch
