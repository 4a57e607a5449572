#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>

#include "metricmatch/dataset.h"
#include "metricmatch/random.h"

namespace testing {

using namespace metricmatch;

// Gaussian covariates, Bernoulli(1/2) treatment forced to contain both
// classes, outcome y = x0 + d + noise.
inline Dataset random_dataset(Index n, Index k, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  MatrixXd x(n, k);
  VectorXi d(n);
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) x(i, j) = standard_normal(rng);
    d[i] = uniform01(rng) < 0.5 ? 1 : 0;
  }
  d[0] = 1;
  d[n - 1] = 0;
  for (Index i = 0; i < n; ++i) y[i] = x(i, 0) + d[i] + standard_normal(rng);
  return make_dataset(x, d, y);
}

inline std::string temp_path(const std::string& name) {
  return std::string(P_tmpdir) + "/metricmatch_test_" + name;
}

inline std::string write_file(const std::string& name, const std::string& body) {
  const std::string path = temp_path(name);
  std::ofstream(path) << body;
  return path;
}

inline std::string data_file(const std::string& name) {
  return std::string(METRICMATCH_DATA_DIR) + "/" + name;
}

}  // namespace testing
