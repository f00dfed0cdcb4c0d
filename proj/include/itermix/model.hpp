#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "itermix/tensor.hpp"

namespace itermix {

// Structural hyperparameters of one model instance.
struct ModelConfig {
  int lookback = 0;  // L, input window length
  int horizon = 0;   // T, forecast length
  int channels = 0;  // C, input variates
  std::vector<int> target_channels;  // predicted variates, size C_out
  int rounds = 2;    // N, outer refinement rounds (weight-tied)
  int depth = 2;     // M, residual mixer blocks per round
  int slots = 8;     // S, external attention memory size
  int hidden = 32;   // d_h, feature-mixing hidden width
  NormKind norm_kind = NormKind::kLayer;
  Activation act = Activation::kRelu;
  double dropout_rate = 0.0;

  int out_channels() const { return static_cast<int>(target_channels.size()); }
  void validate() const;  // throws ConfigError on any bad field
};

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kBlockNormEps = 1e-5;
inline constexpr double kRunningStatMomentum = 0.1;

// Affine parameters of one normalization operator, plus running statistics
// maintained when the model uses batch normalization.
struct NormParams {
  Tensor gamma, beta;                // {1,C} learnable
  Tensor running_mean, running_var;  // {1,C} buffers (batch kind only)
};

// theta_m: one residual mixer block. Exactly `depth` of these exist per
// model no matter how many refinement rounds run.
struct MixerBlockParams {
  Tensor time_weight;   // {L,L}, shared across variates
  Tensor time_bias;     // {L,1}
  Tensor feat_weight1;  // {C,d_h}
  Tensor feat_bias1;    // {1,d_h}
  Tensor feat_weight2;  // {d_h,C}
  Tensor feat_bias2;    // {1,C}
  NormParams norm1, norm2;
};

// Every learnable tensor of one model. The parameter count is independent
// of `rounds`: refinement reuses the same blocks.
struct ModelParams {
  Tensor in_gamma, in_beta;  // instance normalization affine, {1,C}
  std::vector<MixerBlockParams> blocks;
  Tensor slot_keys, slot_values;  // {S,C} external attention slots
  Tensor proj_weight;             // {T,L} temporal readout
  Tensor proj_bias;               // {T,1}

  // Weight init: linear maps U[-1/sqrt(fan_in), +1/sqrt(fan_in)], slots
  // N(0, 0.02), norm affines gamma=1 beta=0. Draw order is fixed.
  static ModelParams init(const ModelConfig& cfg, Rng& rng);

  std::vector<Tensor*> learnables();  // stable order, used by the optimizer
  std::vector<std::pair<std::string, Tensor*>> named();  // learnables + buffers
  void zero_grad();
  void set_requires_grad(bool on);
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& snap);
  ModelParams clone() const;
};

// Exact learnable-scalar count:
//   2C + M*(L^2 + L + 2*C*d_h + d_h + 5C) + 2*S*C + T*L + T
// where the 5C per block is feat_bias2 (C) plus the two norm affine pairs
// (4C). Running statistics are buffers, not learnables, so layer and batch
// normalization have identical counts. Independent of `rounds`.
long long count_parameters(const ModelConfig& cfg);
long long count_parameters(const ModelParams& params);

// Per-window, per-channel statistics of the instance map: mean {B,C} and
// eps-guarded std {B,C} (std = max(population std, eps)); rank-2 inputs use
// B = 1. Constants with respect to the tape.
struct InstanceNormStats {
  Tensor mean;
  Tensor std;
};

InstanceNormStats compute_instance_stats(const Tensor& x, double eps = kInstanceNormEps);

// H0[:,c] = gamma_c * (X[:,c] - mean_c) / std_c + beta_c per window.
Tensor instance_normalize(const Tensor& x, const InstanceNormStats& st, const Tensor& gamma,
                          const Tensor& beta, Tape* tape = nullptr);

// Exact inverse of instance_normalize restricted to the target channels;
// requires nonzero gamma entries.
Tensor instance_denormalize(const Tensor& y, const InstanceNormStats& st, const Tensor& gamma,
                            const Tensor& beta, const std::vector<int>& target_channels,
                            Tape* tape = nullptr);

// Block normalization dispatch: layer kind standardizes per time step,
// batch kind per channel over the pooled batch x time axis with running
// statistics (momentum 0.1) for inference.
Tensor apply_norm(const Tensor& x, NormKind kind, NormParams& np, bool training,
                  Tape* tape = nullptr);

// One residual mixer block: time mixing then feature mixing, each preceded
// by normalization and closed by a residual add. Dropout sits after the
// activation in the time branch and after the second linear map in the
// feature branch.
Tensor residual_mixer_block(const Tensor& h, MixerBlockParams& blk, const ModelConfig& cfg,
                            bool training, Rng& rng, Tape* tape = nullptr);

// One refinement round: the depth-M stack applied once.
Tensor apply_stack(const Tensor& h, ModelParams& params, const ModelConfig& cfg, bool training,
                   Rng& rng, Tape* tape = nullptr);

// N rounds of the same stack with shared parameters; fresh dropout masks
// are drawn at every application and gradients accumulate on the shared
// tensors across rounds.
Tensor iterative_refine(const Tensor& h0, ModelParams& params, const ModelConfig& cfg,
                        bool training, Rng& rng, Tape* tape = nullptr);

// Slot attention: affinities H*E^T, row softmax over slots, correction A*V
// added residually. Cost is linear in the sequence length.
Tensor external_attention(const Tensor& h, const Tensor& slot_keys, const Tensor& slot_values,
                          Tape* tape = nullptr);

// Full forward pass: {B,L,C} or {L,C} input to {B,T,C_out} or {T,C_out}
// forecast, instance-normalized on the way in and denormalized on the way
// out using the stored per-window statistics of the target channels.
Tensor forward(const Tensor& x, ModelParams& params, const ModelConfig& cfg, bool training,
               Rng& rng, Tape* tape = nullptr);

}  // namespace itermix
