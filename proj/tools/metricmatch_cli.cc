#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metricmatch/bench.h"
#include "metricmatch/error.h"
#include "metricmatch/matching.h"
#include "metricmatch/parametric.h"
#include "metricmatch/simgen.h"

#ifndef METRICMATCH_DATA_DIR
#define METRICMATCH_DATA_DIR "data"
#endif

using namespace metricmatch;
using nlohmann::json;

namespace {

// Runs `f`, prefixing validation errors with the flag they came from.
template <typename F>
auto for_flag(const std::string& flag, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(flag + ": " + e.what());
  }
}

json json_from_arg(const std::string& flag, const std::string& arg) {
  const auto start = arg.find_first_not_of(" \t\r\n");
  const bool inline_json = start != std::string::npos && (arg[start] == '{' || arg[start] == '[');
  try {
    if (inline_json) return json::parse(arg);
    std::ifstream in(arg);
    if (!in) throw ValidationError(flag + ": cannot open '" + arg + "'");
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(flag + ": invalid JSON: " + e.what());
  }
}

// Turns `<sub> ... --config file.json ...` into `<sub> <flags from file> ...`.
// Keys are long flag names; lists become comma-separated values and nested
// objects are passed as JSON text. Later (explicit) flags win.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  std::size_t sub_at = args.size();
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    for (const CLI::App* s : app.get_subcommands({})) {
      if (s->get_name() == args[i]) {
        sub_at = i;
        sub = s;
        break;
      }
    }
    if (sub) break;
  }
  if (!sub) return args;
  std::string path;
  for (std::size_t i = sub_at + 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  const json j = json_from_arg("--config", path);
  if (!j.is_object()) throw ValidationError("--config: expected a JSON object");
  std::vector<std::string> extra;
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt || key == "config" || key == "help") {
      throw ValidationError("--config: unknown key '" + key + "' for " + sub->get_name());
    }
    if (opt->get_expected_min() == 0) {
      if (!value.is_boolean()) throw ValidationError("--config: '" + key + "' must be true or false");
      if (value.get<bool>()) extra.push_back(flag);
      continue;
    }
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array() && std::all_of(value.begin(), value.end(), [](const json& e) {
                 return e.is_primitive();
               })) {
      for (const auto& e : value) {
        if (!text.empty()) text += ",";
        text += e.is_string() ? e.get<std::string>() : e.dump();
      }
    } else {
      text = value.dump();
    }
    extra.push_back(flag);
    extra.push_back(text);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_at) + 1, extra.begin(), extra.end());
  return args;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw ComputeError("write to '" + path + "' failed");
}

// report.csv -> report.records.csv, report.json
std::string sibling(const std::string& path, const std::string& suffix) {
  std::filesystem::path p(path);
  p.replace_extension();
  return p.string() + suffix;
}

std::string data_path(const std::string& file) {
  return (std::filesystem::path(METRICMATCH_DATA_DIR) / file).string();
}

struct Common {
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  bool full = false;
  bool quiet = false;
  std::string out;
  std::string methods;
  std::string method_config;
  std::string config;

  std::uint64_t master_seed() const {
    if (seed) return *seed;
    if (const char* env = std::getenv("MATCH_SEED")) {
      return for_flag("MATCH_SEED", [&] {
        try {
          std::size_t used = 0;
          const unsigned long long v = std::stoull(env, &used);
          if (used != std::string(env).size()) throw std::invalid_argument("trailing text");
          return static_cast<std::uint64_t>(v);
        } catch (const std::exception&) {
          throw ValidationError(std::string("not an unsigned integer: '") + env + "'");
        }
      });
    }
    return 1;
  }

  Profile profile() const { return full ? Profile::kFull : Profile::kDesk; }

  RunOptions run_options() const {
    RunOptions o;
    o.jobs = jobs;
    if (!quiet) {
      o.progress = [](int done, int total) {
        std::cerr << "\r" << done << "/" << total << std::flush;
        if (done == total) std::cerr << "\n";
      };
    }
    return o;
  }

  // Method list from --methods, each entry overridden by --method-config.
  std::vector<MethodSpec> method_specs(const std::string& fallback, Estimand estimand) const {
    const std::vector<MethodTag> tags =
        for_flag("--methods", [&] { return parse_method_list(methods.empty() ? fallback : methods); });
    std::vector<MethodSpec> specs;
    for (MethodTag t : tags) specs.push_back(default_method(t, estimand, profile()));
    if (!method_config.empty()) {
      for_flag("--method-config", [&] {
        json j = json_from_arg("--method-config", method_config);
        if (j.is_object()) j = json::array({j});
        if (!j.is_array()) throw ValidationError("expected an object or an array of objects");
        for (json entry : j) {
          if (!entry.is_object() || !entry.contains("method")) {
            throw ValidationError("each entry needs a \"method\" key");
          }
          if (!entry.contains("estimand")) entry["estimand"] = to_string(estimand);
          MethodSpec m = method_from_json(entry, profile());
          bool placed = false;
          for (auto& s : specs) {
            if (s.tag == m.tag) {
              s = m;
              placed = true;
            }
          }
          if (!placed) {
            throw ValidationError(std::string("method '") + to_string(m.tag) +
                                  "' is configured but not listed in --methods");
          }
        }
        return 0;
      });
    }
    return specs;
  }
};

void add_common(CLI::App* sub, Common& c, bool with_methods) {
  sub->add_option("--seed", c.seed, "Master seed (falls back to $MATCH_SEED, then 1)");
  sub->add_option("--jobs", c.jobs, "Worker threads; 0 uses the available parallelism")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--out", c.out, "Summary CSV path; JSON and per-run files are written beside it");
  sub->add_flag("--quiet", c.quiet, "Suppress progress output on stderr");
  if (with_methods) {
    sub->add_flag("--full", c.full, "Large profile: n 8000, 1000 replications, full training budgets");
    sub->add_option("--methods", c.methods, "Comma-separated methods");
    sub->add_option("--method-config", c.method_config,
                    "JSON file or inline JSON overriding method settings");
  }
  sub->add_option("--config", c.config, "JSON file supplying any flag; explicit flags win");
}

std::string default_methods(DgpKind kind) {
  switch (kind) {
    case DgpKind::kSparseLinear:
    case DgpKind::kSparseLinearSq:
      return "nn,snn,l1,rrf,psm,psmsq,u-oracle,int-oracle";
    case DgpKind::kRandomNn:
      return "nn,snn,l1,rrf,psm,psmsq";
    default:
      return "nn,snn,psm,psmsq";
  }
}

CsvSchema schema_from(const std::string& treatment, const std::string& outcome,
                      const std::string& covariates) {
  CsvSchema s;
  s.treatment = treatment;
  s.outcome = outcome;
  std::stringstream ss(covariates);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) s.covariates.push_back(item);
  }
  return s;
}

MetricCondition parse_condition(const std::string& s) {
  if (s == "psm") return MetricCondition::kPsm;
  if (s == "pgm-c") return MetricCondition::kPgmC;
  if (s == "pgm-t") return MetricCondition::kPgmT;
  throw ValidationError("unknown condition '" + s + "' (expected psm, pgm-c or pgm-t)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nearest-neighbour matching on learned feature spaces"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  // simulate
  Common sim;
  std::string dgp_name = "sparse-linear", dgp_config, estimand_name = "att";
  std::optional<int> reps;
  std::optional<Index> n;
  Index k = 50;
  double beta0 = 1.0;
  CLI::App* simulate = app.add_subcommand("simulate", "Monte-Carlo table for one DGP");
  add_common(simulate, sim, true);
  simulate->add_option("--dgp", dgp_name,
                       "sparse-linear, sparse-linear-sq, random-nn or counterexample")
      ->capture_default_str();
  simulate->add_option("--reps", reps, "Replications (desk 100, full 1000)");
  simulate->add_option("--n", n, "Units per replication (desk 2000, full 8000)");
  simulate->add_option("--k", k, "Covariates")->capture_default_str();
  simulate->add_option("--beta0", beta0, "True treatment effect")->capture_default_str();
  simulate->add_option("--estimand", estimand_name, "att or atut")->capture_default_str();
  simulate->add_option("--dgp-config", dgp_config,
                       "JSON file or inline JSON with further DGP parameters");

  // lalonde
  Common lal;
  std::string lalonde_config = data_path("lalonde.json");
  std::optional<int> lalonde_runs;
  CLI::App* lalonde = app.add_subcommand("lalonde", "LaLonde experimental and composite analysis");
  add_common(lalonde, lal, true);
  lalonde->add_option("--data-config", lalonde_config, "Column mapping and file paths (JSON)")
      ->capture_default_str();
  lalonde->add_option("--runs", lalonde_runs, "Seeded runs averaged for NN and SNN (default 100)");

  // ihdp
  Common ih;
  std::string ihdp_path = data_path("ihdp_covariates.csv");
  int surfaces = 50;
  CLI::App* ihdp = app.add_subcommand("ihdp", "IHDP simulated response surfaces");
  add_common(ihdp, ih, true);
  ihdp->add_option("--covariates", ihdp_path, "IHDP covariate CSV")->capture_default_str();
  ihdp->add_option("--surfaces", surfaces, "Response surfaces")->capture_default_str();

  // demo-consistency
  Common demo;
  Index demo_n = 20000;
  std::string pooled_net, control_net;
  CLI::App* consistency =
      app.add_subcommand("demo-consistency", "Pooled versus control-only outcome embeddings");
  add_common(consistency, demo, false);
  consistency->add_option("--n", demo_n, "Units")->capture_default_str();
  consistency->add_option("--pooled-net", pooled_net, "JSON net settings for the pooled net");
  consistency->add_option("--control-net", control_net, "JSON net settings for the control net");

  // match
  Common mt;
  std::string data_file, treatment = "treat", outcome = "y", covariates, method_name = "psm",
                         match_estimand = "att", summary_json;
  bool raw_scale = false;
  CLI::App* match = app.add_subcommand("match", "Match one dataset and write the pairs");
  add_common(match, mt, false);
  match->add_option("--data", data_file, "Input CSV")->required();
  match->add_option("--treatment", treatment, "Treatment column")->capture_default_str();
  match->add_option("--outcome", outcome, "Outcome column")->capture_default_str();
  match->add_option("--covariates", covariates, "Comma-separated covariates (default: all others)");
  match->add_option("--method", method_name, "Method building the matching space")
      ->capture_default_str();
  match->add_option("--estimand", match_estimand, "att or atut")->capture_default_str();
  match->add_option("--method-config", mt.method_config, "JSON method settings");
  match->add_flag("--no-standardize", raw_scale, "Use covariates as given");
  match->add_option("--json", summary_json, "Summary JSON path");

  // check-metric
  Common cm;
  std::string cm_data, cm_treatment = "treat", cm_outcome = "y", cm_covariates, score_column,
                       condition_name = "pgm-c", cm_json;
  double constant = 1.0;
  std::size_t max_pairs = 200000;
  CLI::App* check = app.add_subcommand("check-metric", "Empirical metric-condition check");
  add_common(check, cm, false);
  check->add_option("--data", cm_data, "Input CSV")->required();
  check->add_option("--treatment", cm_treatment, "Treatment column")->capture_default_str();
  check->add_option("--outcome", cm_outcome, "Outcome column")->capture_default_str();
  check->add_option("--covariates", cm_covariates,
                    "Comma-separated columns spanning the space (default: all others)");
  check->add_option("--score-column", score_column, "Column holding the score")->required();
  check->add_option("--C", constant, "Constant in d(x, y) >= C |s(x) - s(y)|")
      ->capture_default_str();
  check->add_option("--max-pairs", max_pairs, "Pairs evaluated before sampling kicks in")
      ->capture_default_str();
  check->add_option("--condition", condition_name, "psm, pgm-c or pgm-t")->capture_default_str();
  check->add_option("--json", cm_json, "Report JSON path");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
      args = expand_config(app, args);
    } catch (const ValidationError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (simulate->parsed()) {
      DgpSpec spec;
      if (!dgp_config.empty()) {
        spec = for_flag("--dgp-config", [&] {
          return json_from_arg("--dgp-config", dgp_config).get<DgpSpec>();
        });
      }
      if (simulate->count("--dgp") || dgp_config.empty()) {
        spec.kind = for_flag("--dgp", [&] { return parse_dgp_kind(dgp_name); });
      }
      if (spec.kind == DgpKind::kIhdpSurface) {
        throw ValidationError("--dgp: use the ihdp subcommand for IHDP surfaces");
      }
      spec.n = n.value_or(sim.full ? 8000 : 2000);
      if (simulate->count("--k") || dgp_config.empty()) spec.k = k;
      if (simulate->count("--beta0") || dgp_config.empty()) spec.beta0 = beta0;
      if (spec.kind == DgpKind::kCounterexample) spec.k = 1;
      for_flag("--dgp", [&] { spec.validate(); return 0; });
      const Estimand est = for_flag("--estimand", [&] { return parse_estimand(estimand_name); });
      const auto methods = sim.method_specs(default_methods(spec.kind), est);
      const int r = reps.value_or(sim.full ? 1000 : 100);
      if (r < 1) throw ValidationError("--reps: must be >= 1");
      const BenchReport rep =
          run_simulation(spec, methods, r, sim.master_seed(), sim.run_options());
      std::cout << format_report(rep);
      for (const auto& m : rep.methods) {
        if (m.failures > 0) {
          std::cerr << "warning: " << m.method << " failed in " << m.failures
                    << " replications (excluded)\n";
        }
      }
      if (!sim.quiet) std::cerr << "wall clock " << rep.wall_seconds << " s\n";
      if (!sim.out.empty()) {
        write_text(sim.out, summary_csv(rep));
        write_text(sibling(sim.out, ".records.csv"), records_csv(rep));
        write_text(sibling(sim.out, ".json"), report_json(rep).dump(2) + "\n");
      }
    } else if (lalonde->parsed()) {
      LalondeConfig cfg =
          for_flag("--data-config", [&] { return load_lalonde_config(lalonde_config); });
      if (lalonde_runs) cfg.runs = *lalonde_runs;
      const auto methods = lal.method_specs("nn,snn,psm,psmsq,ols", Estimand::kAtt);
      const LalondeReport rep = run_lalonde(cfg, methods, lal.master_seed(), lal.run_options());
      std::cout << format_lalonde(rep);
      if (!lal.out.empty()) {
        write_text(lal.out, lalonde_csv(rep));
        write_text(sibling(lal.out, ".json"), lalonde_json(rep).dump(2) + "\n");
      }
    } else if (ihdp->parsed()) {
      const IhdpData data = for_flag("--covariates", [&] { return load_ihdp(ihdp_path); });
      DgpSpec spec;
      spec.kind = DgpKind::kIhdpSurface;
      if (surfaces < 1) throw ValidationError("--surfaces: must be >= 1");
      const auto methods = ih.method_specs("nn,snn,psm,psmsq,ols", Estimand::kAtt);
      const BenchReport rep =
          run_ihdp(data, spec, methods, surfaces, ih.master_seed(), ih.run_options());
      std::cout << format_report(rep);
      if (!ih.out.empty()) {
        write_text(ih.out, summary_csv(rep));
        write_text(sibling(ih.out, ".records.csv"), records_csv(rep));
        write_text(sibling(ih.out, ".json"), report_json(rep).dump(2) + "\n");
      }
    } else if (consistency->parsed()) {
      if (demo_n < 2) throw ValidationError("--n: must be >= 2");
      std::optional<NetConfig> pooled, control;
      auto net_from = [](const std::string& flag, const std::string& arg, Subsample s) {
        return for_flag(flag, [&] {
          json entry{{"method", "nn"}, {"net_y", json_from_arg(flag, arg)}};
          NetConfig cfg = consistency_net_config(s);
          MethodSpec m = method_from_json(entry);
          cfg.hidden = m.net_y.hidden;
          cfg.activations = m.net_y.activations;
          cfg.learning_rate = m.net_y.learning_rate;
          cfg.momentum = m.net_y.momentum;
          cfg.batch_size = m.net_y.batch_size;
          cfg.epochs = m.net_y.epochs;
          cfg.weight_decay = m.net_y.weight_decay;
          cfg.validation_fraction = m.net_y.validation_fraction;
          cfg.patience = m.net_y.patience;
          return cfg;
        });
      };
      if (!pooled_net.empty()) pooled = net_from("--pooled-net", pooled_net, Subsample::kPooled);
      if (!control_net.empty()) {
        control = net_from("--control-net", control_net, Subsample::kControlOnly);
      }
      const ConsistencyReport rep =
          consistency_demo(demo_n, demo.master_seed(), pooled ? &*pooled : nullptr,
                           control ? &*control : nullptr);
      std::cout << format_consistency(rep);
      if (!demo.out.empty()) {
        write_text(demo.out, consistency_csv(rep));
        write_text(sibling(demo.out, ".json"), consistency_json(rep).dump(2) + "\n");
      }
    } else if (match->parsed()) {
      const CsvSchema schema = schema_from(treatment, outcome, covariates);
      const Dataset raw = for_flag("--data", [&] { return load_csv(data_file, schema); });
      const Dataset ds = raw_scale ? raw : standardize(raw).first;
      const Estimand est = for_flag("--estimand", [&] { return parse_estimand(match_estimand); });
      mt.methods = method_name;
      const auto specs = mt.method_specs(method_name, est);
      if (specs.size() != 1) throw ValidationError("--method: give exactly one method");
      if (is_oracle(specs[0].tag) || specs[0].tag == MethodTag::kOls) {
        throw ValidationError("--method: " + method_name + " does not build a matching space");
      }
      const MatchingSpace space =
          build_method_space(specs[0], ds, std::nullopt, mt.master_seed());
      const MatchResult r = match_and_estimate(space, ds, est, specs[0].ai_neighbors);
      std::cout << to_string(est) << " " << format_double(r.estimate) << "  se "
                << format_double(r.se) << "  95% CI (" << format_double(r.ci_low) << ", "
                << format_double(r.ci_high) << ")  dim " << space.dim() << "  pairs " << r.size()
                << "\n";
      if (!mt.out.empty()) write_match_csv(r, ds, mt.out);
      if (!summary_json.empty()) {
        write_text(summary_json, match_summary_json(r, space).dump(2) + "\n");
      }
    } else if (check->parsed()) {
      const CsvTable table = for_flag("--data", [&] { return read_csv_table(cm_data); });
      const Index score_col = for_flag("--score-column", [&] { return table.column(score_column); });
      CsvSchema space_schema = schema_from(cm_treatment, cm_outcome, cm_covariates);
      if (space_schema.covariates.empty()) {
        for (const auto& h : table.header) {
          if (h != cm_treatment && h != cm_outcome && h != score_column) {
            space_schema.covariates.push_back(h);
          }
        }
      }
      const Dataset ds = for_flag("--data", [&] { return load_csv(cm_data, space_schema); });
      const MetricCondition cond =
          for_flag("--condition", [&] { return parse_condition(condition_name); });
      if (!(constant > 0.0)) throw ValidationError("--C: must be > 0");
      MatchingSpace space;
      space.method = SpaceMethod::kRaw;
      space.z = ds.x;
      space.labels = ds.names;
      const VectorXd score = table.values.col(score_col);
      const MetricCheckReport rep = metric_condition_check(space, ds, score, constant, max_pairs,
                                                           cm.master_seed(), cond);
      std::cout << to_string(rep.condition) << " C " << format_double(rep.constant)
                << ": min ratio " << format_double(rep.min_ratio) << ", "
                << rep.pairs_violating << " of " << rep.pairs_evaluated << " pairs violate, "
                << (rep.satisfied ? "satisfied" : "not satisfied") << "\n";
      if (!cm.out.empty()) {
        std::ostringstream os;
        os << "i,j,distance,score_gap,ratio\n";
        for (const auto& p : rep.worst) {
          os << p.i << ',' << p.j << ',' << format_double(p.distance) << ','
             << format_double(p.score_gap) << ',' << format_double(p.ratio) << '\n';
        }
        write_text(cm.out, os.str());
      }
      if (!cm_json.empty()) write_text(cm_json, metric_report_json(rep).dump(2) + "\n");
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ComputeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
