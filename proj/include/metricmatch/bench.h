#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metricmatch/dataset.h"
#include "metricmatch/neuralnet.h"
#include "metricmatch/parametric.h"
#include "metricmatch/siamese.h"
#include "metricmatch/simgen.h"
#include "metricmatch/varselect.h"

namespace metricmatch {

enum class MethodTag { kNn, kSnn, kL1, kRrf, kPsm, kPsmSq, kOracleUnion, kOracleIntersection, kRaw, kOls };

const char* to_string(MethodTag m);      // "nn", "snn", "l1", "rrf", "psm", "psmsq", ...
const char* display_name(MethodTag m);   // "NN", "SNN", "L1", "RRF", "PSM", ...
MethodTag parse_method(const std::string& s);
std::vector<MethodTag> parse_method_list(const std::string& csv);

bool is_oracle(MethodTag m);

// Desk runs at n = 2000 with lighter training budgets; full runs use the
// module defaults at n = 8000.
enum class Profile { kDesk, kFull };

struct MethodSpec {
  MethodTag tag = MethodTag::kNn;
  Estimand estimand = Estimand::kAtt;
  NetConfig net_y;
  NetConfig net_d;
  SnnConfig snn_y;
  SnnConfig snn_d;
  SpaceOptions space;
  LassoOptions lasso;
  RrfOptions rrf;
  double rrf_lambda = 0.5;  // used when rrf.lambda_grid is empty
  LogitOptions logit;
  int ai_neighbors = 2;     // J in the Abadie-Imbens variance

  void validate() const;
};

MethodSpec default_method(MethodTag tag, Estimand estimand = Estimand::kAtt,
                          Profile profile = Profile::kDesk);

void to_json(nlohmann::json& j, const MethodSpec& m);
// Starts from default_method(tag, estimand, profile) and overrides the keys
// present. Unknown keys are rejected.
MethodSpec method_from_json(const nlohmann::json& j, Profile profile = Profile::kDesk);

struct MethodOutcome {
  double estimate = 0.0;
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  Index dim = 0;  // matching-space width; 0 for OLS
};

// Builds the method's matching space on `ds` (already standardized) and
// matches. Seeds inside the method configs are replaced by streams of `seed`.
// The matching space alone; OLS has none and is rejected.
MatchingSpace build_method_space(const MethodSpec& spec, const Dataset& ds,
                                 const std::optional<OracleInfo>& oracle, std::uint64_t seed);

MethodOutcome run_method(const MethodSpec& spec, const Dataset& ds,
                         const std::optional<OracleInfo>& oracle, std::uint64_t seed);

struct ReplicationRecord {
  int replication = 0;
  std::uint64_t seed = 0;
  std::string method;
  bool ok = false;
  double estimate = 0.0, se = 0.0, ci_low = 0.0, ci_high = 0.0;
  Index dim = 0;
  double truth = 0.0;
  std::string error;
};

// Mean and SD (divisor R - 1) of the estimates, RMSE from the raw errors.
// With the sample SD these satisfy RMSE^2 = (Mean - truth)^2 + SD^2 (R - 1) / R.
struct MethodSummary {
  std::string method;
  int replications = 0;  // successful
  int failures = 0;
  double mean = 0.0, sd = 0.0, rmse = 0.0;
  double mean_se = 0.0;
  double coverage = 0.0;  // share of 95% intervals containing the truth
};

MethodSummary summarize(const std::string& method, const std::vector<double>& estimates,
                        const std::vector<double>& truths, const std::vector<double>& ses,
                        const std::vector<double>& lows, const std::vector<double>& highs,
                        int failures);

struct BenchReport {
  std::string experiment;          // "simulate", "ihdp", ...
  nlohmann::json config;           // everything needed to replay the run
  std::uint64_t master_seed = 0;
  int replications = 0;
  double truth = 0.0;
  std::vector<MethodSummary> methods;
  std::vector<ReplicationRecord> records;
  double wall_seconds = 0.0;       // reported on stderr only, never written to files

  const MethodSummary& method(const std::string& name) const;
};

struct RunOptions {
  int jobs = 0;                    // 0: hardware concurrency
  double max_failure_share = 0.05;
  std::function<void(int done, int total)> progress;
};

// One replication: seed_r = derive_seed(master, r); data from
// derive_seed(seed_r, 0); each method from derive_seed(seed_r, 1 + tag).
BenchReport run_simulation(const DgpSpec& dgp, const std::vector<MethodSpec>& methods, int reps,
                           std::uint64_t master_seed, const RunOptions& opts = {});

struct LalondeConfig {
  std::string experimental_path;
  std::string composite_path;
  std::string treatment = "treat";
  std::string outcome = "re78";
  std::vector<std::string> covariates;      // matching covariates on the composite file
  std::vector<std::string> ols_covariates;  // covariates of the OLS row
  int runs = 100;                           // seeded runs averaged for NN and SNN

  void validate() const;
};

void to_json(nlohmann::json& j, const LalondeConfig& c);
void from_json(const nlohmann::json& j, LalondeConfig& c);  // rejects unknown keys
// Paths in the file are resolved relative to the file's directory.
LalondeConfig load_lalonde_config(const std::string& path);

struct LalondeRow {
  std::string method;
  double estimate = 0.0;
  double difference = 0.0;  // estimate - experimental
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
  int runs = 1;
  int runs_in_experimental_ci = 0;  // runs whose estimate lies in the experimental CI
  std::vector<double> run_estimates;
};

struct LalondeReport {
  nlohmann::json config;
  std::uint64_t master_seed = 0;
  LalondeRow experimental;
  std::vector<LalondeRow> rows;
};

// Difference in means with the unpooled two-sample standard error.
LalondeRow experimental_benchmark(const Dataset& experimental);

// Averaged rows report mean estimate +- 1.96 x mean AI standard error.
LalondeReport run_lalonde(const LalondeConfig& cfg, const std::vector<MethodSpec>& methods,
                          std::uint64_t master_seed, const RunOptions& opts = {});

struct IhdpData {
  MatrixXd x;  // covariates the surfaces are built on
  VectorXi d;
  std::vector<std::string> names;
};

// Drops the treated rows with a non-white mother, keeps the 25 covariates
// other than race and site8, and standardizes the six continuous ones.
IhdpData load_ihdp(const std::string& path);

BenchReport run_ihdp(const IhdpData& data, const DgpSpec& surface,
                     const std::vector<MethodSpec>& methods, int surfaces,
                     std::uint64_t master_seed, const RunOptions& opts = {});

struct ConsistencyRow {
  std::string label;  // "pooled" or "control"
  double estimate = 0.0;
  double truth = 0.0;
  double bias = 0.0;
};

struct ConsistencyReport {
  nlohmann::json config;
  std::uint64_t master_seed = 0;
  std::vector<ConsistencyRow> rows;
};

// Outcome nets with a one-unit embedding, trained once on pooled outcomes
// and once on controls only, then used to match the treated.
NetConfig consistency_net_config(Subsample subsample);
ConsistencyReport consistency_demo(Index n, std::uint64_t seed, const NetConfig* pooled = nullptr,
                                   const NetConfig* control = nullptr);

// Plain-text tables and machine-readable artifacts.
std::string format_report(const BenchReport& r);
std::string format_lalonde(const LalondeReport& r);
std::string format_consistency(const ConsistencyReport& r);

std::string summary_csv(const BenchReport& r);
std::string records_csv(const BenchReport& r);
std::string lalonde_csv(const LalondeReport& r);
std::string consistency_csv(const ConsistencyReport& r);

nlohmann::json report_json(const BenchReport& r);
nlohmann::json lalonde_json(const LalondeReport& r);
nlohmann::json consistency_json(const ConsistencyReport& r);

// Shortest round-trip decimal form, so outputs are byte-stable.
std::string format_double(double v);

}  // namespace metricmatch
