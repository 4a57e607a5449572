#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace metricmatch {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

enum class Estimand { kAtt, kAtut };

const char* to_string(Estimand e);
Estimand parse_estimand(const std::string& s);

// Potential outcomes for simulated data. `tau` is the conditional treatment
// effect at each unit's covariates (noise free where the generator knows it).
struct Truth {
  VectorXd y0;
  VectorXd y1;
  VectorXd tau;
};

// Covariates, binary treatment and observed outcome for n units.
struct Dataset {
  MatrixXd x;                      // n x k
  VectorXi d;                      // n, values in {0, 1}
  VectorXd y;                      // n
  std::vector<std::string> names;  // k covariate labels
  std::optional<Truth> truth;
  // Row index in the dataset this one was derived from (split, oversample).
  std::vector<Index> row_ids;

  Index n() const { return x.rows(); }
  Index k() const { return x.cols(); }
  Index n_treated() const { return d.sum(); }
  Index n_control() const { return n() - n_treated(); }

  // Throws ValidationError when any invariant fails.
  void validate() const;
};

// Builds a dataset with row_ids = 0..n-1 and default names x0..x{k-1} when
// `names` is empty, then validates it.
Dataset make_dataset(MatrixXd x, VectorXi d, VectorXd y,
                     std::vector<std::string> names = {},
                     std::optional<Truth> truth = std::nullopt);

struct CsvSchema {
  std::string treatment = "treat";
  std::string outcome;
  // Empty means every column other than treatment and outcome.
  std::vector<std::string> covariates;
};

// Header row plus numeric cells.
struct CsvTable {
  std::vector<std::string> header;
  MatrixXd values;

  Index column(const std::string& name) const;  // throws SchemaError
};

CsvTable read_csv_table(const std::string& path);
Dataset load_csv(const std::string& path, const CsvSchema& schema);

struct StandardizationParams {
  VectorXd mean;
  VectorXd sd;                    // strictly positive; 1 for constant columns
  std::vector<bool> constant;     // columns passed through with divisor 1

  MatrixXd apply(const MatrixXd& x) const;
  MatrixXd invert(const MatrixXd& z) const;
};

// Column-wise (x - mean) / sd with the n-1 divisor. Constant columns are
// centered and flagged.
std::pair<Dataset, StandardizationParams> standardize(const Dataset& ds);

// Rows in `rows`, in that order. row_ids carry over from `ds`.
Dataset select_rows(const Dataset& ds, const std::vector<Index>& rows);

// (control, treated); each keeps the originating row ids.
std::pair<Dataset, Dataset> split_by_treatment(const Dataset& ds);

// Concatenates parts and sorts rows by row id.
Dataset merge_by_row_id(const Dataset& a, const Dataset& b);

// Appends uniformly resampled treated rows until the treated share reaches
// `target`, but only when it starts below `threshold`. Training-only helper.
Dataset oversample_treated(const Dataset& ds, double threshold, double target,
                           std::uint64_t seed);

}  // namespace metricmatch
