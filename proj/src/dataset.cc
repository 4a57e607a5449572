#include "metricmatch/dataset.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "metricmatch/error.h"
#include "metricmatch/random.h"

namespace metricmatch {

const char* to_string(Estimand e) { return e == Estimand::kAtt ? "ATT" : "ATUT"; }

Estimand parse_estimand(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), ::tolower);
  if (l == "att") return Estimand::kAtt;
  if (l == "atut" || l == "atc") return Estimand::kAtut;
  throw ValidationError("unknown estimand '" + s + "' (expected att or atut)");
}

void Dataset::validate() const {
  const Index rows = x.rows();
  if (rows < 2) throw ValidationError("dataset needs at least 2 rows");
  if (x.cols() < 1) throw ValidationError("dataset needs at least 1 covariate");
  if (d.size() != rows || y.size() != rows) {
    throw ValidationError("treatment/outcome length does not match covariate rows");
  }
  if (static_cast<Index>(names.size()) != x.cols()) {
    throw ValidationError("covariate names do not match column count");
  }
  if (static_cast<Index>(row_ids.size()) != rows) {
    throw ValidationError("row id metadata does not match row count");
  }
  if (!x.allFinite() || !y.allFinite()) {
    throw ValidationError("dataset contains NaN or Inf");
  }
  for (Index i = 0; i < rows; ++i) {
    if (d[i] != 0 && d[i] != 1) {
      throw ValidationError("treatment value outside {0,1} at row " +
                            std::to_string(i));
    }
  }
  const Index t = d.sum();
  if (t == 0 || t == rows) {
    throw ValidationError("both treated and control units are required");
  }
  if (truth) {
    if (truth->y0.size() != rows || truth->y1.size() != rows ||
        truth->tau.size() != rows) {
      throw ValidationError("truth vectors do not match row count");
    }
    for (Index i = 0; i < rows; ++i) {
      const double sel = d[i] == 1 ? truth->y1[i] : truth->y0[i];
      if (sel != y[i]) {
        throw ValidationError("observed outcome differs from the selected "
                              "potential outcome at row " + std::to_string(i));
      }
    }
  }
}

Dataset make_dataset(MatrixXd x, VectorXi d, VectorXd y,
                     std::vector<std::string> names,
                     std::optional<Truth> truth) {
  Dataset ds;
  if (names.empty()) {
    for (Index j = 0; j < x.cols(); ++j) names.push_back("x" + std::to_string(j));
  }
  ds.row_ids.resize(x.rows());
  std::iota(ds.row_ids.begin(), ds.row_ids.end(), Index{0});
  ds.x = std::move(x);
  ds.d = std::move(d);
  ds.y = std::move(y);
  ds.names = std::move(names);
  ds.truth = std::move(truth);
  ds.validate();
  return ds;
}

Index CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw SchemaError("missing column '" + name + "'");
  return it - header.begin();
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

}  // namespace

CsvTable read_csv_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'", 0, 0);
  for (auto& h : split_line(line)) table.header.push_back(trim(h));

  std::vector<std::vector<double>> rows;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != table.header.size()) {
      throw ParseError(path + ": row " + std::to_string(row) + " has " +
                           std::to_string(cells.size()) + " cells, header has " +
                           std::to_string(table.header.size()),
                       row, static_cast<long>(cells.size()));
    }
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw ParseError(path + ": non-numeric or missing value '" + cell +
                             "' at row " + std::to_string(row) + ", column " +
                             std::to_string(c + 1) + " (" + table.header[c] + ")",
                         row, static_cast<long>(c + 1));
      }
      values[c] = v;
    }
    rows.push_back(std::move(values));
  }
  table.values.resize(static_cast<Index>(rows.size()),
                      static_cast<Index>(table.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) table.values(r, c) = rows[r][c];
  }
  return table;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  CsvTable table = read_csv_table(path);
  const Index tcol = table.column(schema.treatment);
  const Index ycol = table.column(schema.outcome);
  std::vector<std::string> covs = schema.covariates;
  if (covs.empty()) {
    for (const auto& h : table.header) {
      if (h != schema.treatment && h != schema.outcome) covs.push_back(h);
    }
  }
  std::vector<Index> ccols;
  for (const auto& c : covs) ccols.push_back(table.column(c));

  const Index n = table.values.rows();
  MatrixXd x(n, static_cast<Index>(ccols.size()));
  VectorXi d(n);
  for (Index i = 0; i < n; ++i) {
    const double t = table.values(i, tcol);
    if (t != 0.0 && t != 1.0) {
      throw ValidationError(path + ": treatment column '" + schema.treatment +
                            "' has value " + std::to_string(t) + " at row " +
                            std::to_string(i + 2) + "; expected 0 or 1");
    }
    d[i] = static_cast<int>(t);
    for (std::size_t j = 0; j < ccols.size(); ++j) x(i, j) = table.values(i, ccols[j]);
  }
  return make_dataset(std::move(x), std::move(d), table.values.col(ycol), covs);
}

MatrixXd StandardizationParams::apply(const MatrixXd& x) const {
  return (x.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();
}

MatrixXd StandardizationParams::invert(const MatrixXd& z) const {
  return (z.array().rowwise() * sd.transpose().array()).matrix().rowwise() +
         mean.transpose();
}

std::pair<Dataset, StandardizationParams> standardize(const Dataset& ds) {
  StandardizationParams p;
  const Index n = ds.n();
  p.mean = ds.x.colwise().mean().transpose();
  p.sd.resize(ds.k());
  p.constant.assign(ds.k(), false);
  for (Index j = 0; j < ds.k(); ++j) {
    const double ss = (ds.x.col(j).array() - p.mean[j]).square().sum();
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    // Relative test so large-valued constant columns are still caught.
    const double scale = std::max(1.0, std::abs(p.mean[j]));
    if (!(sd > 1e-12 * scale)) {
      p.sd[j] = 1.0;
      p.constant[j] = true;
    } else {
      p.sd[j] = sd;
    }
  }
  Dataset out = ds;
  out.x = p.apply(ds.x);
  return {std::move(out), std::move(p)};
}

Dataset select_rows(const Dataset& ds, const std::vector<Index>& rows) {
  Dataset out;
  const Index m = static_cast<Index>(rows.size());
  out.x.resize(m, ds.k());
  out.d.resize(m);
  out.y.resize(m);
  out.names = ds.names;
  out.row_ids.resize(rows.size());
  if (ds.truth) {
    out.truth = Truth{VectorXd(m), VectorXd(m), VectorXd(m)};
  }
  for (Index r = 0; r < m; ++r) {
    const Index i = rows[r];
    out.x.row(r) = ds.x.row(i);
    out.d[r] = ds.d[i];
    out.y[r] = ds.y[i];
    out.row_ids[r] = ds.row_ids[i];
    if (ds.truth) {
      out.truth->y0[r] = ds.truth->y0[i];
      out.truth->y1[r] = ds.truth->y1[i];
      out.truth->tau[r] = ds.truth->tau[i];
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_by_treatment(const Dataset& ds) {
  std::vector<Index> control, treated;
  for (Index i = 0; i < ds.n(); ++i) (ds.d[i] ? treated : control).push_back(i);
  if (control.empty() || treated.empty()) {
    throw ValidationError("split_by_treatment needs both treatment classes");
  }
  return {select_rows(ds, control), select_rows(ds, treated)};
}

Dataset merge_by_row_id(const Dataset& a, const Dataset& b) {
  if (a.k() != b.k()) throw ValidationError("cannot merge datasets of different width");
  std::vector<std::pair<Index, std::pair<int, Index>>> order;
  for (Index i = 0; i < a.n(); ++i) order.push_back({a.row_ids[i], {0, i}});
  for (Index i = 0; i < b.n(); ++i) order.push_back({b.row_ids[i], {1, i}});
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& l, const auto& r) { return l.first < r.first; });
  const Index m = static_cast<Index>(order.size());
  Dataset out;
  out.x.resize(m, a.k());
  out.d.resize(m);
  out.y.resize(m);
  out.names = a.names;
  out.row_ids.resize(order.size());
  const bool truth = a.truth && b.truth;
  if (truth) out.truth = Truth{VectorXd(m), VectorXd(m), VectorXd(m)};
  for (Index r = 0; r < m; ++r) {
    const Dataset& src = order[r].second.first == 0 ? a : b;
    const Index i = order[r].second.second;
    out.x.row(r) = src.x.row(i);
    out.d[r] = src.d[i];
    out.y[r] = src.y[i];
    out.row_ids[r] = src.row_ids[i];
    if (truth) {
      out.truth->y0[r] = src.truth->y0[i];
      out.truth->y1[r] = src.truth->y1[i];
      out.truth->tau[r] = src.truth->tau[i];
    }
  }
  return out;
}

Dataset oversample_treated(const Dataset& ds, double threshold, double target,
                           std::uint64_t seed) {
  ds.validate();
  const Index n = ds.n();
  const Index t = ds.n_treated();
  if (static_cast<double>(t) / static_cast<double>(n) >= threshold) return ds;
  if (!(target > 0.0 && target < 1.0)) {
    throw ValidationError("oversampling target must lie in (0, 1)");
  }
  // Smallest t' with t' / (n_control + t') >= target.
  const Index c = n - t;
  Index want = static_cast<Index>(std::ceil(target * static_cast<double>(c) / (1.0 - target)));
  while (static_cast<double>(want) / static_cast<double>(c + want) < target) ++want;
  std::vector<Index> treated;
  for (Index i = 0; i < n; ++i) if (ds.d[i]) treated.push_back(i);

  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  Rng rng = make_rng(seed);
  for (Index extra = t; extra < want; ++extra) {
    rows.push_back(treated[uniform_index(rng, treated.size())]);
  }
  return select_rows(ds, rows);
}

}  // namespace metricmatch
