#include "metricmatch/bench.h"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "metricmatch/error.h"
#include "metricmatch/matching.h"
#include "metricmatch/random.h"

namespace metricmatch {

using nlohmann::json;

namespace {

struct MethodName {
  MethodTag tag;
  const char* key;
  const char* display;
};

constexpr MethodName kMethodNames[] = {
    {MethodTag::kNn, "nn", "NN"},
    {MethodTag::kSnn, "snn", "SNN"},
    {MethodTag::kL1, "l1", "L1"},
    {MethodTag::kRrf, "rrf", "RRF"},
    {MethodTag::kPsm, "psm", "PSM"},
    {MethodTag::kPsmSq, "psmsq", "PSMSQ"},
    {MethodTag::kOracleUnion, "u-oracle", "U. Oracle"},
    {MethodTag::kOracleIntersection, "int-oracle", "Int. Oracle"},
    {MethodTag::kRaw, "raw", "Raw"},
    {MethodTag::kOls, "ols", "OLS"},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------- JSON helpers

// Reads keys of a JSON object into fields, rejecting keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ValidationError(where_ + " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      j_.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ValidationError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename F>
  void read_with(const char* key, F&& parse) {
    seen_.insert(key);
    if (j_.contains(key)) parse(j_.at(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ValidationError("unknown key '" + key + "' in " + where_);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json activations_json(const std::vector<Activation>& acts) {
  json a = json::array();
  for (Activation x : acts) a.push_back(to_string(x));
  return a;
}

std::vector<Activation> parse_activations(const json& j) {
  std::vector<Activation> out;
  for (const auto& v : j) out.push_back(parse_activation(v.get<std::string>()));
  return out;
}

json net_json(const NetConfig& c) {
  return json{{"hidden", c.hidden},
              {"activations", activations_json(c.activations)},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"standardize_target", c.standardize_target},
              {"validation_fraction", c.validation_fraction},
              {"patience", c.patience},
              {"weight_decay", c.weight_decay}};
}

void read_net(const json& j, NetConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.read("hidden", c.hidden);
  o.read_with("activations", [&](const json& v) { c.activations = parse_activations(v); });
  o.read("learning_rate", c.learning_rate);
  o.read("momentum", c.momentum);
  o.read("batch_size", c.batch_size);
  o.read("epochs", c.epochs);
  o.read("standardize_target", c.standardize_target);
  o.read("validation_fraction", c.validation_fraction);
  o.read("patience", c.patience);
  o.read("weight_decay", c.weight_decay);
  o.finish();
}

json snn_json(const SnnConfig& c) {
  return json{{"hidden", c.hidden},
              {"activations", activations_json(c.activations)},
              {"margin", c.margin},
              {"pairs_per_unit", c.pairs_per_unit},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"standardize_target", c.standardize_target}};
}

void read_snn(const json& j, SnnConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.read("hidden", c.hidden);
  o.read_with("activations", [&](const json& v) { c.activations = parse_activations(v); });
  o.read("margin", c.margin);
  o.read("pairs_per_unit", c.pairs_per_unit);
  o.read("epochs", c.epochs);
  o.read("batch_size", c.batch_size);
  o.read("learning_rate", c.learning_rate);
  o.read("momentum", c.momentum);
  o.read("standardize_target", c.standardize_target);
  o.finish();
}

json lasso_json(const LassoOptions& c) {
  return json{{"lambda_grid", c.lambda_grid}, {"grid_size", c.grid_size},
              {"grid_ratio", c.grid_ratio},   {"folds", c.folds},
              {"penalty_scale", c.penalty_scale}, {"tolerance", c.tolerance},
              {"max_sweeps", c.max_sweeps},   {"max_outer", c.max_outer}};
}

void read_lasso(const json& j, LassoOptions& c) {
  StrictObject o(j, "lasso");
  o.read("lambda_grid", c.lambda_grid);
  o.read("grid_size", c.grid_size);
  o.read("grid_ratio", c.grid_ratio);
  o.read("folds", c.folds);
  o.read("penalty_scale", c.penalty_scale);
  o.read("tolerance", c.tolerance);
  o.read("max_sweeps", c.max_sweeps);
  o.read("max_outer", c.max_outer);
  o.finish();
}

json rrf_json(const RrfOptions& c) {
  return json{{"trees", c.trees},         {"mtry", c.mtry},
              {"max_depth", c.max_depth}, {"min_node_size", c.min_node_size},
              {"lambda_grid", c.lambda_grid}, {"folds", c.folds},
              {"regularize", c.regularize}};
}

void read_rrf(const json& j, RrfOptions& c) {
  StrictObject o(j, "rrf");
  o.read("trees", c.trees);
  o.read("mtry", c.mtry);
  o.read("max_depth", c.max_depth);
  o.read("min_node_size", c.min_node_size);
  o.read("lambda_grid", c.lambda_grid);
  o.read("folds", c.folds);
  o.read("regularize", c.regularize);
  o.finish();
}

// ---------------------------------------------------------------- parallelism

// Runs body(i) for i in [0, count) on up to `jobs` threads. Work is claimed
// from a shared counter; results must be stored by index.
void parallel_for(int count, int jobs, const std::function<void(int)>& body,
                  const std::function<void(int, int)>& progress) {
  if (count <= 0) return;
  int workers = jobs > 0 ? jobs : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, count);
  std::atomic<int> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mutex;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(count);
        return;
      }
      const int finished = done.fetch_add(1) + 1;
      if (progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        progress(finished, count);
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Dataset standardized(const Dataset& ds) { return standardize(ds).first; }

std::uint64_t method_stream(MethodTag tag) { return 1 + static_cast<std::uint64_t>(tag); }

std::vector<std::string> method_keys(const std::vector<MethodSpec>& methods) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& m : methods) {
    const std::string key = to_string(m.tag);
    if (!seen.insert(key).second) throw ValidationError("method '" + key + "' listed twice");
    out.push_back(key);
  }
  return out;
}

json methods_json(const std::vector<MethodSpec>& methods) {
  json out = json::array();
  for (const auto& m : methods) {
    json j;
    to_json(j, m);
    out.push_back(j);
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Aligned table: first column left, the rest right-aligned.
std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return "";
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c == 0) {
        os << std::left << std::setw(static_cast<int>(width[c])) << r[c];
      } else {
        os << "  " << std::right << std::setw(static_cast<int>(width[c])) << r[c];
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- method tags

const char* to_string(MethodTag m) {
  for (const auto& e : kMethodNames) {
    if (e.tag == m) return e.key;
  }
  return "?";
}

const char* display_name(MethodTag m) {
  for (const auto& e : kMethodNames) {
    if (e.tag == m) return e.display;
  }
  return "?";
}

MethodTag parse_method(const std::string& s) {
  std::string lower;
  for (char c : trim(s)) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const auto& e : kMethodNames) {
    if (lower == e.key) return e.tag;
  }
  throw ValidationError("unknown method '" + s +
                        "' (expected nn, snn, l1, rrf, psm, psmsq, u-oracle, int-oracle, raw "
                        "or ols)");
}

std::vector<MethodTag> parse_method_list(const std::string& csv) {
  std::vector<MethodTag> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_method(item));
  }
  if (out.empty()) throw ValidationError("the method list is empty");
  return out;
}

bool is_oracle(MethodTag m) {
  return m == MethodTag::kOracleUnion || m == MethodTag::kOracleIntersection;
}

// ---------------------------------------------------------------- method specs

void MethodSpec::validate() const {
  net_y.validate();
  net_d.validate();
  snn_y.validate();
  snn_d.validate();
  if (!(rrf_lambda >= 0.0 && rrf_lambda <= 1.0)) {
    throw ValidationError("rrf_lambda must lie in [0, 1]");
  }
  if (ai_neighbors < 1) throw ValidationError("ai_neighbors must be >= 1");
}

MethodSpec default_method(MethodTag tag, Estimand estimand, Profile profile) {
  MethodSpec m;
  m.tag = tag;
  m.estimand = estimand;
  m.net_y = outcome_net_config(estimand);
  m.net_d = treatment_net_config();
  m.net_y.weight_decay = 0.05;
  m.net_y.epochs = 400;
  m.net_d.weight_decay = 0.01;
  m.snn_y = outcome_snn_config(estimand);
  m.snn_d = treatment_snn_config();
  if (profile == Profile::kDesk) {
    m.snn_y.epochs = m.snn_d.epochs = 20;
    m.snn_y.pairs_per_unit = m.snn_d.pairs_per_unit = 10;
    m.rrf.trees = 50;
    m.rrf.folds = 3;
    m.rrf.lambda_grid = {0.1, 0.5, 0.9};
  } else {
    m.rrf.trees = 100;
    m.rrf.folds = 5;
    m.rrf.lambda_grid = {0.1, 0.3, 0.5, 0.7, 0.9};
  }
  return m;
}

void to_json(json& j, const MethodSpec& m) {
  j = json{{"method", to_string(m.tag)},
           {"estimand", to_string(m.estimand)},
           {"net_y", net_json(m.net_y)},
           {"net_d", net_json(m.net_d)},
           {"snn_y", snn_json(m.snn_y)},
           {"snn_d", snn_json(m.snn_d)},
           {"restandardize", m.space.restandardize},
           {"prune_min_variance", m.space.prune.min_variance},
           {"prune_max_abs_correlation", m.space.prune.max_abs_correlation},
           {"oversample_threshold", m.space.oversample_threshold},
           {"oversample_target", m.space.oversample_target},
           {"lasso", lasso_json(m.lasso)},
           {"rrf", rrf_json(m.rrf)},
           {"rrf_lambda", m.rrf_lambda},
           {"logit_tolerance", m.logit.tolerance},
           {"logit_max_iterations", m.logit.max_iterations},
           {"ai_neighbors", m.ai_neighbors}};
}

MethodSpec method_from_json(const json& j, Profile profile) {
  if (!j.is_object() || !j.contains("method")) {
    throw ValidationError("a method entry must be an object with a \"method\" key");
  }
  const MethodTag tag = parse_method(j.at("method").get<std::string>());
  const Estimand est =
      j.contains("estimand") ? parse_estimand(j.at("estimand").get<std::string>()) : Estimand::kAtt;
  MethodSpec m = default_method(tag, est, profile);
  StrictObject o(j, std::string("method ") + to_string(tag));
  o.read_with("method", [](const json&) {});
  o.read_with("estimand", [](const json&) {});
  o.read_with("net_y", [&](const json& v) { read_net(v, m.net_y, "net_y"); });
  o.read_with("net_d", [&](const json& v) { read_net(v, m.net_d, "net_d"); });
  o.read_with("snn_y", [&](const json& v) { read_snn(v, m.snn_y, "snn_y"); });
  o.read_with("snn_d", [&](const json& v) { read_snn(v, m.snn_d, "snn_d"); });
  o.read("restandardize", m.space.restandardize);
  o.read("prune_min_variance", m.space.prune.min_variance);
  o.read("prune_max_abs_correlation", m.space.prune.max_abs_correlation);
  o.read("oversample_threshold", m.space.oversample_threshold);
  o.read("oversample_target", m.space.oversample_target);
  o.read_with("lasso", [&](const json& v) { read_lasso(v, m.lasso); });
  o.read_with("rrf", [&](const json& v) { read_rrf(v, m.rrf); });
  o.read("rrf_lambda", m.rrf_lambda);
  o.read("logit_tolerance", m.logit.tolerance);
  o.read("logit_max_iterations", m.logit.max_iterations);
  o.read("ai_neighbors", m.ai_neighbors);
  o.finish();
  m.validate();
  return m;
}

MatchingSpace build_method_space(const MethodSpec& spec, const Dataset& ds,
                                 const std::optional<OracleInfo>& oracle, std::uint64_t seed) {
  MatchingSpace space;
  switch (spec.tag) {
    case MethodTag::kNn: {
      NetConfig cy = spec.net_y, cd = spec.net_d;
      cy.seed = derive_seed(seed, 1);
      cd.seed = derive_seed(seed, 2);
      space = nn_matching_space(ds, cy, cd, spec.estimand, spec.space);
      break;
    }
    case MethodTag::kSnn: {
      SnnConfig cy = spec.snn_y, cd = spec.snn_d;
      cy.seed = derive_seed(seed, 3);
      cd.seed = derive_seed(seed, 4);
      space = snn_matching_space(ds, cy, cd, spec.estimand, spec.space);
      break;
    }
    case MethodTag::kL1: {
      LassoOptions lo = spec.lasso;
      lo.seed = derive_seed(seed, 5);
      space = l1_matching_space(ds, lasso_linear(ds, lo), lasso_logit(ds, lo));
      break;
    }
    case MethodTag::kRrf: {
      RrfOptions ro = spec.rrf;
      ro.seed = derive_seed(seed, 6);
      const RrfFit fy = rrf_train(ds, RrfTarget::kOutcome, spec.rrf_lambda, ro);
      ro.seed = derive_seed(seed, 7);
      const RrfFit fd = rrf_train(ds, RrfTarget::kTreatment, spec.rrf_lambda, ro);
      space = rrf_matching_space(ds, fy, fd);
      break;
    }
    case MethodTag::kPsm:
    case MethodTag::kPsmSq:
      space = psm_matching_space(ds, fit_logit(ds, spec.tag == MethodTag::kPsmSq, spec.logit));
      if (spec.tag == MethodTag::kPsmSq) space.method = SpaceMethod::kPsmSq;
      break;
    case MethodTag::kOracleUnion:
    case MethodTag::kOracleIntersection:
      if (!oracle) {
        throw ValidationError(std::string(display_name(spec.tag)) +
                              " needs a DGP with known covariate supports");
      }
      space = oracle_matching_space(ds, *oracle,
                                    spec.tag == MethodTag::kOracleUnion ? OracleMode::kUnion
                                                                        : OracleMode::kIntersection);
      break;
    case MethodTag::kRaw: {
      std::vector<Index> cols(static_cast<std::size_t>(ds.k()));
      for (Index j = 0; j < ds.k(); ++j) cols[j] = j;
      space = columns_space(ds, cols, SpaceMethod::kRaw);
      break;
    }
    case MethodTag::kOls:
      throw ValidationError("OLS does not build a matching space");
  }
  return space;
}

MethodOutcome run_method(const MethodSpec& spec, const Dataset& ds,
                         const std::optional<OracleInfo>& oracle, std::uint64_t seed) {
  MethodOutcome out;
  if (spec.tag == MethodTag::kOls) {
    const OlsAtt o = ols_att(ds);
    out.estimate = o.estimate;
    out.se = o.se;
    out.ci_low = o.estimate - 1.959963984540054 * o.se;
    out.ci_high = o.estimate + 1.959963984540054 * o.se;
    return out;
  }
  const MatchingSpace space = build_method_space(spec, ds, oracle, seed);
  const MatchResult r = match_and_estimate(space, ds, spec.estimand, spec.ai_neighbors);
  out.estimate = r.estimate;
  out.se = r.se;
  out.ci_low = r.ci_low;
  out.ci_high = r.ci_high;
  out.dim = space.dim();
  return out;
}

// ---------------------------------------------------------------- aggregation

MethodSummary summarize(const std::string& method, const std::vector<double>& estimates,
                        const std::vector<double>& truths, const std::vector<double>& ses,
                        const std::vector<double>& lows, const std::vector<double>& highs,
                        int failures) {
  MethodSummary s;
  s.method = method;
  s.failures = failures;
  const std::size_t r = estimates.size();
  s.replications = static_cast<int>(r);
  if (r == 0) {
    s.mean = s.sd = s.rmse = s.mean_se = s.coverage = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double sum = 0.0, sq_err = 0.0, se_sum = 0.0;
  int covered = 0;
  for (std::size_t i = 0; i < r; ++i) {
    sum += estimates[i];
    sq_err += (estimates[i] - truths[i]) * (estimates[i] - truths[i]);
    se_sum += ses[i];
    covered += lows[i] <= truths[i] && truths[i] <= highs[i];
  }
  s.mean = sum / static_cast<double>(r);
  double ss = 0.0;
  for (double e : estimates) ss += (e - s.mean) * (e - s.mean);
  s.sd = r > 1 ? std::sqrt(ss / static_cast<double>(r - 1)) : 0.0;
  s.rmse = std::sqrt(sq_err / static_cast<double>(r));
  s.mean_se = se_sum / static_cast<double>(r);
  s.coverage = static_cast<double>(covered) / static_cast<double>(r);
  return s;
}

const MethodSummary& BenchReport::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.method == name) return m;
  }
  throw ValidationError("report has no method '" + name + "'");
}

namespace {

BenchReport run_replications(const std::string& experiment, const DgpSpec& dgp,
                             const Dataset* ihdp, const std::vector<MethodSpec>& methods,
                             int reps, std::uint64_t master_seed, const RunOptions& opts) {
  dgp.validate();
  if (reps < 1) throw ValidationError("reps must be >= 1");
  if (methods.empty()) throw ValidationError("no methods to run");
  const std::vector<std::string> keys = method_keys(methods);
  const bool has_oracle =
      dgp.kind == DgpKind::kSparseLinear || dgp.kind == DgpKind::kSparseLinearSq;
  for (const auto& m : methods) {
    m.validate();
    if (is_oracle(m.tag) && !has_oracle) {
      throw ValidationError(std::string(display_name(m.tag)) + " is not available for the " +
                            to_string(dgp.kind) + " DGP (no known covariate supports)");
    }
    if (m.estimand == Estimand::kAtut && (dgp.kind == DgpKind::kCounterexample ||
                                          dgp.kind == DgpKind::kIhdpSurface)) {
      throw ValidationError("the " + std::string(to_string(dgp.kind)) +
                            " DGP is scored against the ATT only");
    }
  }
  const double truth = dgp_true_att(dgp);
  const auto t0 = std::chrono::steady_clock::now();

  const std::size_t m_count = methods.size();
  std::vector<ReplicationRecord> records(static_cast<std::size_t>(reps) * m_count);
  parallel_for(
      reps, opts.jobs,
      [&](int r) {
        const std::uint64_t rep_seed = derive_seed(master_seed, static_cast<std::uint64_t>(r));
        DgpSpec spec = dgp;
        spec.seed = derive_seed(rep_seed, 0);
        const Generated g = generate(spec, ihdp);
        const Dataset ds = standardized(g.data);
        for (std::size_t m = 0; m < m_count; ++m) {
          ReplicationRecord& rec = records[static_cast<std::size_t>(r) * m_count + m];
          rec.replication = r;
          rec.seed = rep_seed;
          rec.method = keys[m];
          rec.truth = truth;
          try {
            const MethodOutcome o = run_method(methods[m], ds, g.oracle,
                                               derive_seed(rep_seed, method_stream(methods[m].tag)));
            rec.ok = std::isfinite(o.estimate);
            rec.estimate = o.estimate;
            rec.se = o.se;
            rec.ci_low = o.ci_low;
            rec.ci_high = o.ci_high;
            rec.dim = o.dim;
            if (!rec.ok) rec.error = "non-finite estimate";
          } catch (const ComputeError& e) {
            rec.ok = false;
            rec.error = e.what();
          }
        }
      },
      opts.progress);

  BenchReport rep;
  rep.experiment = experiment;
  rep.master_seed = master_seed;
  rep.replications = reps;
  rep.truth = truth;
  rep.records = std::move(records);
  for (std::size_t m = 0; m < m_count; ++m) {
    std::vector<double> est, tr, se, lo, hi;
    int failures = 0;
    for (int r = 0; r < reps; ++r) {
      const auto& rec = rep.records[static_cast<std::size_t>(r) * m_count + m];
      if (!rec.ok) {
        ++failures;
        continue;
      }
      est.push_back(rec.estimate);
      tr.push_back(rec.truth);
      se.push_back(rec.se);
      lo.push_back(rec.ci_low);
      hi.push_back(rec.ci_high);
    }
    if (static_cast<double>(failures) > opts.max_failure_share * reps) {
      std::string first;
      for (const auto& rec : rep.records) {
        if (rec.method == keys[m] && !rec.ok) {
          first = rec.error;
          break;
        }
      }
      throw ComputeError(std::string(display_name(methods[m].tag)) + " failed in " +
                         std::to_string(failures) + " of " + std::to_string(reps) +
                         " replications (first error: " + first + ")");
    }
    rep.methods.push_back(summarize(keys[m], est, tr, se, lo, hi, failures));
  }
  json dgp_json;
  to_json(dgp_json, dgp);
  rep.config = json{{"experiment", experiment},
                    {"dgp", dgp_json},
                    {"reps", reps},
                    {"master_seed", master_seed},
                    {"methods", methods_json(methods)}};
  rep.wall_seconds = elapsed_since(t0);
  return rep;
}

}  // namespace

BenchReport run_simulation(const DgpSpec& dgp, const std::vector<MethodSpec>& methods, int reps,
                           std::uint64_t master_seed, const RunOptions& opts) {
  if (dgp.kind == DgpKind::kIhdpSurface) {
    throw ValidationError("IHDP surfaces run through run_ihdp with a covariate file");
  }
  return run_replications("simulate", dgp, nullptr, methods, reps, master_seed, opts);
}

// ---------------------------------------------------------------- LaLonde

void LalondeConfig::validate() const {
  if (experimental_path.empty() || composite_path.empty()) {
    throw ValidationError("LaLonde config needs experimental and composite file paths");
  }
  if (covariates.empty()) throw ValidationError("LaLonde config lists no matching covariates");
  if (ols_covariates.empty()) throw ValidationError("LaLonde config lists no OLS covariates");
  if (runs < 1) throw ValidationError("LaLonde runs must be >= 1");
}

void to_json(json& j, const LalondeConfig& c) {
  j = json{{"experimental", c.experimental_path}, {"composite", c.composite_path},
           {"treatment", c.treatment},            {"outcome", c.outcome},
           {"covariates", c.covariates},          {"ols_covariates", c.ols_covariates},
           {"runs", c.runs}};
}

void from_json(const json& j, LalondeConfig& c) {
  LalondeConfig out;
  StrictObject o(j, "LaLonde config");
  o.read("experimental", out.experimental_path);
  o.read("composite", out.composite_path);
  o.read("treatment", out.treatment);
  o.read("outcome", out.outcome);
  o.read("covariates", out.covariates);
  o.read("ols_covariates", out.ols_covariates);
  o.read("runs", out.runs);
  o.finish();
  c = out;
}

LalondeConfig load_lalonde_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open LaLonde config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("LaLonde config '" + path + "' is not valid JSON: " + e.what());
  }
  LalondeConfig c = j.get<LalondeConfig>();
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (dir / p).string();
  };
  resolve(c.experimental_path);
  resolve(c.composite_path);
  c.validate();
  return c;
}

LalondeRow experimental_benchmark(const Dataset& ex) {
  double s1 = 0.0, s0 = 0.0;
  const Index n1 = ex.n_treated(), n0 = ex.n_control();
  if (n1 < 2 || n0 < 2) throw ValidationError("experimental data needs two units per arm");
  for (Index i = 0; i < ex.n(); ++i) (ex.d[i] ? s1 : s0) += ex.y[i];
  const double m1 = s1 / static_cast<double>(n1), m0 = s0 / static_cast<double>(n0);
  double v1 = 0.0, v0 = 0.0;
  for (Index i = 0; i < ex.n(); ++i) {
    if (ex.d[i]) {
      v1 += (ex.y[i] - m1) * (ex.y[i] - m1);
    } else {
      v0 += (ex.y[i] - m0) * (ex.y[i] - m0);
    }
  }
  v1 /= static_cast<double>(n1 - 1);
  v0 /= static_cast<double>(n0 - 1);
  LalondeRow row;
  row.method = "experimental";
  row.estimate = m1 - m0;
  row.se = std::sqrt(v1 / static_cast<double>(n1) + v0 / static_cast<double>(n0));
  row.ci_low = row.estimate - 1.959963984540054 * row.se;
  row.ci_high = row.estimate + 1.959963984540054 * row.se;
  return row;
}

LalondeReport run_lalonde(const LalondeConfig& cfg, const std::vector<MethodSpec>& methods,
                          std::uint64_t master_seed, const RunOptions& opts) {
  cfg.validate();
  const std::vector<std::string> keys = method_keys(methods);
  for (const auto& m : methods) {
    m.validate();
    if (is_oracle(m.tag)) {
      throw ValidationError(std::string(display_name(m.tag)) +
                            " is not available on observational data");
    }
  }
  CsvSchema ex_schema;
  ex_schema.treatment = cfg.treatment;
  ex_schema.outcome = cfg.outcome;
  const Dataset experimental = load_csv(cfg.experimental_path, ex_schema);

  CsvSchema comp_schema = ex_schema;
  comp_schema.covariates = cfg.covariates;
  const Dataset composite = standardized(load_csv(cfg.composite_path, comp_schema));
  CsvSchema ols_schema = ex_schema;
  ols_schema.covariates = cfg.ols_covariates;
  const Dataset ols_data = load_csv(cfg.composite_path, ols_schema);

  LalondeReport rep;
  rep.master_seed = master_seed;
  rep.experimental = experimental_benchmark(experimental);
  const double exp_att = rep.experimental.estimate;

  // One task per (method, run); stochastic methods get cfg.runs runs.
  struct Task {
    std::size_t method;
    int run;
  };
  std::vector<Task> tasks;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const bool stochastic = methods[m].tag == MethodTag::kNn || methods[m].tag == MethodTag::kSnn;
    const int runs = stochastic ? cfg.runs : 1;
    for (int r = 0; r < runs; ++r) tasks.push_back({m, r});
  }
  std::vector<MethodOutcome> outcomes(tasks.size());
  parallel_for(
      static_cast<int>(tasks.size()), opts.jobs,
      [&](int t) {
        const MethodSpec& spec = methods[tasks[t].method];
        const std::uint64_t seed = derive_seed(derive_seed(master_seed, method_stream(spec.tag)),
                                               static_cast<std::uint64_t>(tasks[t].run));
        outcomes[t] = run_method(spec, spec.tag == MethodTag::kOls ? ols_data : composite,
                                 std::nullopt, seed);
      },
      opts.progress);

  for (std::size_t m = 0; m < methods.size(); ++m) {
    LalondeRow row;
    row.method = keys[m];
    double est = 0.0, se = 0.0;
    int runs = 0;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (tasks[t].method != m) continue;
      est += outcomes[t].estimate;
      se += outcomes[t].se;
      row.run_estimates.push_back(outcomes[t].estimate);
      row.runs_in_experimental_ci += outcomes[t].estimate > rep.experimental.ci_low &&
                                     outcomes[t].estimate < rep.experimental.ci_high;
      ++runs;
    }
    row.runs = runs;
    row.estimate = est / runs;
    row.se = se / runs;
    row.difference = row.estimate - exp_att;
    if (runs == 1) {
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].method == m) {
          row.ci_low = outcomes[t].ci_low;
          row.ci_high = outcomes[t].ci_high;
        }
      }
    } else {
      row.ci_low = row.estimate - 1.959963984540054 * row.se;
      row.ci_high = row.estimate + 1.959963984540054 * row.se;
    }
    rep.rows.push_back(std::move(row));
  }
  json cfg_json;
  to_json(cfg_json, cfg);
  rep.config = json{{"experiment", "lalonde"},
                    {"lalonde", cfg_json},
                    {"master_seed", master_seed},
                    {"methods", methods_json(methods)}};
  return rep;
}

// ---------------------------------------------------------------- IHDP

IhdpData load_ihdp(const std::string& path) {
  const CsvTable t = read_csv_table(path);
  const Index treat = t.column("treat");
  const Index momwhite = t.column("momwhite");
  static const char* kContinuous[] = {"bw", "b_head", "preterm", "birth_o", "nnhealth", "momage"};
  static const char* kBinary[] = {"sex",       "twin",   "b_marr", "mom_lths", "mom_hs",
                                  "mom_scoll", "cig",    "first",  "booze",    "drugs",
                                  "work_dur",  "prenatal", "site1", "site2",    "site3",
                                  "site4",     "site5",  "site6",  "site7"};
  std::vector<Index> cols;
  IhdpData out;
  for (const char* c : kContinuous) {
    cols.push_back(t.column(c));
    out.names.push_back(c);
  }
  for (const char* c : kBinary) {
    cols.push_back(t.column(c));
    out.names.push_back(c);
  }
  std::vector<Index> rows;
  for (Index i = 0; i < t.values.rows(); ++i) {
    const double d = t.values(i, treat);
    if (d != 0.0 && d != 1.0) {
      throw ValidationError("IHDP treatment must be 0/1 (row " + std::to_string(i + 2) + ")");
    }
    if (d == 1.0 && t.values(i, momwhite) == 0.0) continue;
    rows.push_back(i);
  }
  const Index n = static_cast<Index>(rows.size());
  out.x.resize(n, static_cast<Index>(cols.size()));
  out.d.resize(n);
  for (Index r = 0; r < n; ++r) {
    out.d[r] = static_cast<int>(t.values(rows[r], treat));
    for (std::size_t c = 0; c < cols.size(); ++c) out.x(r, static_cast<Index>(c)) = t.values(rows[r], cols[c]);
  }
  for (Index c = 0; c < 6; ++c) {
    auto col = out.x.col(c);
    const double mean = col.mean();
    const double sd =
        std::sqrt((col.array() - mean).square().sum() / static_cast<double>(n - 1));
    if (sd > 0.0) col = (col.array() - mean) / sd;
  }
  return out;
}

BenchReport run_ihdp(const IhdpData& data, const DgpSpec& surface,
                     const std::vector<MethodSpec>& methods, int surfaces,
                     std::uint64_t master_seed, const RunOptions& opts) {
  if (surface.kind != DgpKind::kIhdpSurface) {
    throw ValidationError("run_ihdp needs an ihdp-surface spec");
  }
  Dataset base;
  base.x = data.x;
  base.d = data.d;
  base.names = data.names;
  DgpSpec spec = surface;
  spec.n = data.x.rows();
  spec.k = data.x.cols();
  return run_replications("ihdp", spec, &base, methods, surfaces, master_seed, opts);
}

// ---------------------------------------------------------------- consistency

NetConfig consistency_net_config(Subsample subsample) {
  NetConfig cfg = outcome_net_config(Estimand::kAtt);
  cfg.subsample = subsample;
  cfg.hidden = {16, 1};
  cfg.activations = {Activation::kRelu, Activation::kIdentity};
  cfg.epochs = 40;
  return cfg;
}

ConsistencyReport consistency_demo(Index n, std::uint64_t seed, const NetConfig* pooled,
                                   const NetConfig* control) {
  DgpSpec spec;
  spec.kind = DgpKind::kCounterexample;
  spec.n = n;
  spec.k = 1;
  spec.seed = derive_seed(seed, 0);
  const Dataset ds = standardized(gen_counterexample(spec));
  const double truth = counterexample_true_att();

  ConsistencyReport rep;
  rep.master_seed = seed;
  json nets = json::object();
  const std::pair<const char*, Subsample> arms[] = {{"pooled", Subsample::kPooled},
                                                    {"control", Subsample::kControlOnly}};
  for (std::size_t a = 0; a < 2; ++a) {
    NetConfig cfg = consistency_net_config(arms[a].second);
    const NetConfig* given = a == 0 ? pooled : control;
    if (given) {
      cfg = *given;
      cfg.subsample = arms[a].second;
    }
    cfg.seed = derive_seed(seed, 1 + a);
    const TrainedNet net = train(ds, cfg);
    MatchingSpace space;
    space.method = SpaceMethod::kNn;
    space.z = extract_embedding(net, ds.x);
    for (Index j = 0; j < space.dim(); ++j) space.labels.push_back("e" + std::to_string(j));
    const MatchResult r = nearest_neighbor_match(space, ds, Estimand::kAtt);
    rep.rows.push_back({arms[a].first, r.estimate, truth, r.estimate - truth});
    nets[arms[a].first] = net_json(cfg);
  }
  rep.config = json{{"experiment", "demo-consistency"},
                    {"n", n},
                    {"master_seed", seed},
                    {"noise_sd", spec.noise_sd},
                    {"nets", nets}};
  return rep;
}

// ---------------------------------------------------------------- output

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_report(const BenchReport& r) {
  std::vector<std::vector<std::string>> rows(1, std::vector<std::string>{""});
  for (const auto& m : r.methods) rows[0].push_back(display_name(parse_method(m.method)));
  auto add = [&](const char* label, auto get) {
    std::vector<std::string> row{label};
    for (const auto& m : r.methods) row.push_back(get(m));
    rows.push_back(row);
  };
  add("Mean", [](const MethodSummary& m) { return fixed(m.mean, 3); });
  add("SD", [](const MethodSummary& m) { return fixed(m.sd, 3); });
  add("RMSE", [](const MethodSummary& m) { return fixed(m.rmse, 3); });
  add("Mean SE", [](const MethodSummary& m) { return fixed(m.mean_se, 3); });
  add("Coverage", [](const MethodSummary& m) { return fixed(m.coverage, 2); });
  add("Failures", [](const MethodSummary& m) { return std::to_string(m.failures); });
  std::ostringstream os;
  os << r.experiment << ": " << r.replications << " replications, truth "
     << format_double(r.truth) << ", master seed " << r.master_seed << "\n";
  os << render_table(rows);
  return os.str();
}

std::string format_lalonde(const LalondeReport& r) {
  std::vector<std::vector<std::string>> rows{{"", "Est.", "Difference", "SE", "95% CI", "Runs"}};
  auto add = [&](const std::string& label, const LalondeRow& row) {
    rows.push_back({label, fixed(row.estimate, 2), fixed(row.difference, 2), fixed(row.se, 2),
                    "(" + fixed(row.ci_low, 0) + ", " + fixed(row.ci_high, 0) + ")",
                    std::to_string(row.runs)});
  };
  add("Experimental", r.experimental);
  for (const auto& row : r.rows) add(display_name(parse_method(row.method)), row);
  std::ostringstream os;
  os << "lalonde: master seed " << r.master_seed << "\n" << render_table(rows);
  for (const auto& row : r.rows) {
    if (row.runs > 1) {
      os << display_name(parse_method(row.method)) << ": " << row.runs_in_experimental_ci << " of "
         << row.runs << " runs inside the experimental 95% CI\n";
    }
  }
  return os.str();
}

std::string format_consistency(const ConsistencyReport& r) {
  std::vector<std::vector<std::string>> rows{{"", "ATT estimate", "True ATT", "Bias"}};
  for (const auto& row : r.rows) {
    rows.push_back({row.label, fixed(row.estimate, 4), fixed(row.truth, 4), fixed(row.bias, 4)});
  }
  std::ostringstream os;
  os << "demo-consistency: master seed " << r.master_seed << "\n" << render_table(rows);
  return os.str();
}

std::string summary_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "method,replications,failures,truth,mean,sd,rmse,mean_se,coverage\n";
  for (const auto& m : r.methods) {
    os << m.method << ',' << m.replications << ',' << m.failures << ','
       << format_double(r.truth) << ',' << format_double(m.mean) << ','
       << format_double(m.sd) << ',' << format_double(m.rmse) << ','
       << format_double(m.mean_se) << ',' << format_double(m.coverage) << '\n';
  }
  return os.str();
}

std::string records_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "replication,seed,method,ok,estimate,se,ci_low,ci_high,dim,truth,error\n";
  for (const auto& rec : r.records) {
    os << rec.replication << ',' << rec.seed << ',' << rec.method << ',' << (rec.ok ? 1 : 0)
       << ',' << format_double(rec.estimate) << ',' << format_double(rec.se) << ','
       << format_double(rec.ci_low) << ',' << format_double(rec.ci_high) << ',' << rec.dim
       << ',' << format_double(rec.truth) << ',' << csv_field(rec.error) << '\n';
  }
  return os.str();
}

std::string lalonde_csv(const LalondeReport& r) {
  std::ostringstream os;
  os << "method,estimate,difference,se,ci_low,ci_high,runs,runs_in_experimental_ci\n";
  auto add = [&](const LalondeRow& row) {
    os << row.method << ',' << format_double(row.estimate) << ','
       << format_double(row.difference) << ',' << format_double(row.se) << ','
       << format_double(row.ci_low) << ',' << format_double(row.ci_high) << ',' << row.runs
       << ',' << row.runs_in_experimental_ci << '\n';
  };
  add(r.experimental);
  for (const auto& row : r.rows) add(row);
  return os.str();
}

std::string consistency_csv(const ConsistencyReport& r) {
  std::ostringstream os;
  os << "embedding,estimate,truth,bias\n";
  for (const auto& row : r.rows) {
    os << row.label << ',' << format_double(row.estimate) << ',' << format_double(row.truth)
       << ',' << format_double(row.bias) << '\n';
  }
  return os.str();
}

json report_json(const BenchReport& r) {
  json methods = json::array();
  for (const auto& m : r.methods) {
    methods.push_back(json{{"method", m.method},
                           {"replications", m.replications},
                           {"failures", m.failures},
                           {"mean", m.mean},
                           {"sd", m.sd},
                           {"rmse", m.rmse},
                           {"mean_se", m.mean_se},
                           {"coverage", m.coverage}});
  }
  json records = json::array();
  for (const auto& rec : r.records) {
    json j{{"replication", rec.replication}, {"seed", rec.seed},     {"method", rec.method},
           {"ok", rec.ok},                   {"estimate", rec.estimate}, {"se", rec.se},
           {"ci_low", rec.ci_low},           {"ci_high", rec.ci_high}, {"dim", rec.dim},
           {"truth", rec.truth}};
    if (!rec.error.empty()) j["error"] = rec.error;
    records.push_back(j);
  }
  return json{{"experiment", r.experiment}, {"config", r.config},
              {"master_seed", r.master_seed}, {"replications", r.replications},
              {"truth", r.truth},           {"methods", methods},
              {"records", records}};
}

json lalonde_json(const LalondeReport& r) {
  auto row_json = [](const LalondeRow& row) {
    return json{{"method", row.method},
                {"estimate", row.estimate},
                {"difference", row.difference},
                {"se", row.se},
                {"ci_low", row.ci_low},
                {"ci_high", row.ci_high},
                {"runs", row.runs},
                {"runs_in_experimental_ci", row.runs_in_experimental_ci},
                {"run_estimates", row.run_estimates}};
  };
  json rows = json::array();
  for (const auto& row : r.rows) rows.push_back(row_json(row));
  return json{{"config", r.config},
              {"master_seed", r.master_seed},
              {"experimental", row_json(r.experimental)},
              {"rows", rows}};
}

json consistency_json(const ConsistencyReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back(json{{"embedding", row.label},
                        {"estimate", row.estimate},
                        {"truth", row.truth},
                        {"bias", row.bias}});
  }
  return json{{"config", r.config}, {"master_seed", r.master_seed}, {"rows", rows}};
}

}  // namespace metricmatch
