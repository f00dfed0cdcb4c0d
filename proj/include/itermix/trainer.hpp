#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "itermix/data.hpp"
#include "itermix/model.hpp"

namespace itermix {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 5;
  std::uint64_t seed = 0;
  std::string log_path;  // when set, appends "epoch train_loss val_loss" lines
  int eval_batch_size = 64;

  void validate() const;
};

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = -1;  // index into the loss vectors
  double best_val_loss = std::numeric_limits<double>::infinity();
  double wall_seconds = 0.0;

  int epochs_run() const { return static_cast<int>(val_loss.size()); }
};

// Mean over every entry of the squared error; differentiable.
Tensor mse_loss(const Tensor& pred, const Tensor& target, Tape* tape = nullptr);

// Bias-corrected Adam. Moment buffers are keyed by position in the span,
// lazily initialized on the first step.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Tensor* const> params, double learning_rate);
  long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Full validation-set MSE in inference mode.
double evaluate_mse(ModelParams& params, const ModelConfig& cfg, const WindowedDataset& set,
                    int batch_size = 64);

// Seeded mini-batch training with early stopping on validation MSE. The
// returned parameters are those of the best validation epoch, not the last
// one. Deterministic given (params, datasets, config).
TrainReport train(ModelParams& params, const ModelConfig& cfg, const WindowedDataset& train_set,
                  const WindowedDataset& val_set, const TrainConfig& tc);

}  // namespace itermix
