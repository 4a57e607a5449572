#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "metricmatch/dataset.h"
#include "metricmatch/random.h"
#include "metricmatch/space.h"

namespace metricmatch {

enum class Activation { kIdentity, kRelu, kElu, kSigmoid };
enum class Loss { kSquaredError, kLogistic };
enum class Target { kOutcome, kTreatment };
enum class Subsample { kControlOnly, kTreatedOnly, kPooled };
enum class Init { kGlorotUniform, kZeros };

const char* to_string(Activation a);
const char* to_string(Loss l);
const char* to_string(Target t);
const char* to_string(Subsample s);
Activation parse_activation(const std::string& s);
Subsample parse_subsample(const std::string& s);

// Dense net: input -> hidden[0] -> ... -> hidden.back() (= embedding, width z)
// -> 1 output. Output activation follows the loss: identity for squared error,
// sigmoid for logistic.
struct NetConfig {
  std::vector<int> hidden = {32, 4};
  std::vector<Activation> activations = {Activation::kRelu, Activation::kRelu};
  Loss loss = Loss::kSquaredError;
  Target target = Target::kOutcome;
  Subsample subsample = Subsample::kControlOnly;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 200;
  std::uint64_t seed = 1;
  Init init = Init::kGlorotUniform;
  // Outcome targets are centered and scaled to unit sd before training;
  // predictions are mapped back. Output weights stay on the training scale.
  bool standardize_target = true;
  // ELU is reserved for simulation nets and rejected here unless set.
  bool allow_elu = false;
  // Early stopping: when > 0, this share of the rows is held out and the
  // weights with the lowest held-out loss are kept. Training stops after
  // `patience` epochs without improvement.
  double validation_fraction = 0.0;
  int patience = 20;
  // L2 penalty on weights (not biases) added to the minibatch gradient.
  double weight_decay = 0.0;

  void validate() const;
};

NetConfig outcome_net_config(Estimand estimand);
NetConfig treatment_net_config();

struct Layer {
  MatrixXd w;  // out x in
  VectorXd b;  // out
  Activation act = Activation::kIdentity;
};

struct TrainedNet {
  std::vector<Layer> layers;
  std::vector<double> loss_trace;
  double target_mean = 0.0;
  double target_scale = 1.0;

  Index input_width() const;
  Index output_width() const;
  // Width of the last hidden layer; throws if there is none.
  Index embedding_width() const;
  // Weights connecting the embedding layer to the (single) output unit.
  VectorXd output_weights() const;
  Index parameter_count() const;
};

TrainedNet init_net(Index input_width, const std::vector<int>& widths,
                    const std::vector<Activation>& activations, Init init, Rng& rng);

// Activations of every layer for a batch (rows are samples).
struct ForwardCache {
  std::vector<MatrixXd> pre;   // pre[l]: input to activation of layer l
  std::vector<MatrixXd> post;  // post[0] = x, post[l + 1] = act(pre[l])
};

ForwardCache forward(const TrainedNet& net, const MatrixXd& x);

struct Gradients {
  std::vector<MatrixXd> w;
  std::vector<VectorXd> b;

  static Gradients zeros_like(const TrainedNet& net);
  Index size() const;
};

// Accumulates parameter gradients given dL/d(output of the last layer).
void backward(const TrainedNet& net, const ForwardCache& cache, MatrixXd grad_out,
              Gradients* grad);

// Mean loss over the batch and, when `grad` is non-null, its gradient.
// Logistic loss requires a sigmoid output layer and is computed from logits.
double loss_and_gradient(const TrainedNet& net, const MatrixXd& x, const VectorXd& t,
                         Loss loss, Gradients* grad);

// Max relative error between analytic and central-difference gradients over
// all parameters. `mutate` may alter the analytic gradient before comparison.
double grad_check(const TrainedNet& net, const MatrixXd& x, const VectorXd& t,
                  Loss loss, double epsilon,
                  const std::function<void(Gradients&)>& mutate = {});

// Relative error used by the gradient checks.
double gradient_relative_error(double analytic, double numeric);

// Momentum SGD on the given rows. After every epoch the full-sample loss is
// evaluated; an increase rolls the epoch back and halves the learning rate,
// so loss_trace (initial loss first) is non-increasing. With early stopping
// the trace covers the fitting rows only.
TrainedNet train_arrays(const MatrixXd& x, const VectorXd& t, const NetConfig& cfg);

// Applies cfg.subsample and cfg.target to `ds`, then trains.
TrainedNet train(const Dataset& ds, const NetConfig& cfg);

VectorXd predict(const TrainedNet& net, const MatrixXd& x);
MatrixXd extract_embedding(const TrainedNet& net, const MatrixXd& x);

// Rows of ds selected by a subsample rule.
std::vector<Index> subsample_rows(const Dataset& ds, Subsample s);

struct SpaceOptions {
  PruneOptions prune;
  // Re-standardize kept columns before matching. Off: the output-weight
  // scaling is what carries feature importance.
  bool restandardize = false;
  double oversample_threshold = 0.10;
  double oversample_target = 0.10;
};

// [M_d * sigma_d, M_y * sigma_y] for already trained nets, before pruning.
MatchingSpace scaled_embedding_space(const TrainedNet& net_d, const TrainedNet& net_y,
                                     const MatrixXd& x);

// Trains the outcome net (control-only for ATT, treated-only for ATUT) and the
// pooled treatment net, then returns the pruned scaled-feature space for all
// rows of ds.
MatchingSpace nn_matching_space(const Dataset& ds, const NetConfig& cfg_y,
                                const NetConfig& cfg_d, Estimand estimand,
                                const SpaceOptions& opts = {});

}  // namespace metricmatch
