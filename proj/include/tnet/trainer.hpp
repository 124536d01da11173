#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tnet/data_io.hpp"
#include "tnet/network.hpp"

namespace tnet {

enum class LossKind { softmax_cross_entropy, mean_squared_error };

const char* loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& name);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 1;
  uint64_t seed = 42;
  LossKind loss = LossKind::softmax_cross_entropy;

  void validate() const;  // lr > 0, 0 <= momentum < 1, batch >= 1, epochs >= 1
};

struct TrainReport {
  std::vector<double> train_loss;     // one entry per epoch
  std::vector<double> test_accuracy;  // one entry per epoch
  std::vector<double> wall_time_s;    // one entry per epoch
  uint64_t final_param_hash = 0;
};

// JSON lines: one record per epoch plus a final summary record.
std::string report_to_jsonl(const TrainReport& report);

struct LossGrad {
  double loss = 0.0;
  Tensor d_logits;
};

// Mean negative log-likelihood with max-subtracted log-sum-exp;
// gradient is (softmax - onehot) / B.
LossGrad softmax_xent(const Tensor& logits, const std::vector<int>& labels);

// Mean squared error over all elements; gradient 2*(y - t)/numel.
LossGrad mse_loss(const Tensor& logits, const Tensor& targets);

// Momentum buffers mirroring the model's parameter tensors.
struct Velocity {
  struct PerLayer {
    Tensor v_weights, v_bias, v_proj_weights, v_proj_bias;
  };
  std::vector<PerLayer> layers;

  static Velocity zeros_like(const Model& m);
};

// v <- momentum * v + g;  w <- w - lr * v. Polarity masks are not parameters
// and are never touched.
void sgd_step(Model& m, const ModelGrads& grads, const TrainConfig& cfg, Velocity& vel);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

// Argmax accuracy (ties resolve to the lowest class index) plus mean
// cross-entropy loss. Throws on an empty dataset.
EvalResult evaluate(const Model& m, const Dataset& ds);

// Deterministic SGD loop: given (seed, dataset order) the loss sequence and
// final parameters are bit-identical across runs. Per-epoch test accuracy is
// measured on `test` when given, else on the training set.
TrainReport train(Model& m, const Dataset& train_set, const Dataset* test, const TrainConfig& cfg);

}  // namespace tnet
