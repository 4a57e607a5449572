#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "metricmatch/neuralnet.h"

namespace metricmatch {

enum class PairLoss {
  kContrastive,  // treatment labels: same class similar, cross class dissimilar
  kOutcomePair,  // embedding distance regressed on |y_i - y_j|
};

const char* to_string(PairLoss l);

// A single tower; both inputs of a pair go through the same weights. The
// tower ends at the embedding layer, there is no output unit.
struct SnnConfig {
  std::vector<int> hidden = {32, 4};
  std::vector<Activation> activations = {Activation::kRelu, Activation::kIdentity};
  PairLoss loss = PairLoss::kOutcomePair;
  Subsample subsample = Subsample::kControlOnly;
  double margin = 1.0;
  int pairs_per_unit = 20;  // pairs per epoch = pairs_per_unit * training rows
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  bool standardize_target = true;

  void validate() const;
};

SnnConfig outcome_snn_config(Estimand estimand);
SnnConfig treatment_snn_config();

struct PairBatch {
  std::vector<std::pair<Index, Index>> pairs;  // i < j, row indices of the dataset
  std::vector<int> similar;                     // contrastive labels
  std::vector<double> yi, yj;                   // outcome-pair targets

  std::size_t size() const { return pairs.size(); }
};

// `count` pairs drawn with a generator seeded by `seed`. Contrastive batches
// are half same-class, half cross-class over all rows; outcome-pair batches
// are uniform over the cfg.subsample rows.
PairBatch sample_pairs(const Dataset& ds, const SnnConfig& cfg, std::size_t count,
                       std::uint64_t seed);
// One epoch's worth: cfg.pairs_per_unit * (eligible rows), seeded by cfg.seed.
PairBatch sample_pairs(const Dataset& ds, const SnnConfig& cfg);

// D = |e_i - e_j|; similar -> D^2, dissimilar -> max(0, margin - D)^2.
double contrastive_loss(const VectorXd& e_i, const VectorXd& e_j, int similar, double margin);
// (|e_i - e_j| - |y_i - y_j|)^2.
double outcome_pair_loss(const VectorXd& e_i, const VectorXd& e_j, double y_i, double y_j);

// Mean pair loss of the tower over `batch` (rows of x) and, when `grad` is
// non-null, the gradient summed over both towers.
double pair_loss_and_gradient(const TrainedNet& tower, const MatrixXd& x,
                              const PairBatch& batch, PairLoss loss, double margin,
                              Gradients* grad);

double snn_grad_check(const TrainedNet& tower, const MatrixXd& x, const PairBatch& batch,
                      PairLoss loss, double margin, double epsilon);

TrainedNet train_snn(const Dataset& ds, const SnnConfig& cfg);

// Final-layer activations of the tower for every row of x.
MatrixXd embed(const TrainedNet& tower, const MatrixXd& x);

// [M_d  M_y] over all rows of ds, unscaled, pruned.
MatchingSpace snn_matching_space(const Dataset& ds, const SnnConfig& cfg_y,
                                 const SnnConfig& cfg_d, Estimand estimand,
                                 const SpaceOptions& opts = {});

}  // namespace metricmatch
