#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "itermix/errors.hpp"
#include "itermix/rng.hpp"

namespace itermix {

enum class Activation { kRelu, kGelu };
enum class NormKind { kLayer, kBatch };

std::string to_string(Activation a);
std::string to_string(NormKind k);
Activation activation_from_string(const std::string& s);
NormKind norm_kind_from_string(const std::string& s);

// Dense row-major array of doubles, rank 2 (rows x cols) or rank 3
// (batch x rows x cols); scalars are stored as 1x1. Copies share storage,
// so a Tensor works as a handle: gradients written through one copy are
// visible through all of them. The gradient buffer exists iff
// requires_grad() and always matches the value buffer in shape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor normal(std::vector<int> shape, double mean, double stddev, Rng& rng,
                       bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int>& shape() const;
  int rank() const;
  int size() const;

  // Rank-2/3 accessors: batch() is 1 for rank-2 tensors.
  int batch() const;
  int rows() const;
  int cols() const;

  std::span<double> values();
  std::span<const double> values() const;
  std::span<double> grad();
  std::span<const double> grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  void zero_grad();

  double& at(int i, int j);
  double at(int i, int j) const;
  double& at(int b, int i, int j);
  double at(int b, int i, int j) const;
  double item() const;  // scalar value; throws unless size() == 1

  // Deep copy with no storage or gradient linkage to the original.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  std::string shape_str() const;

 private:
  struct Data {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Data> d) : d_(std::move(d)) {}
  std::shared_ptr<Data> d_;
};

// Ordered record of the backward steps of one forward pass. Execution order
// is a topological order of the data flow, so replaying the steps in
// reverse visits every node exactly once in reverse topological order.
// A tape is confined to one thread for the duration of a forward/backward
// episode; independent episodes on independent tapes may run in parallel.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Replays all recorded steps in reverse order. Prefer backward(loss, tape).
  void replay_backward() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape. Every tensor with a
// gradient slot that participated in the recorded computation ends up with
// grad = d(loss)/d(tensor); gradients of tensors used several times
// accumulate additively across uses.
void backward(const Tensor& loss, Tape& tape);

// ---------------------------------------------------------------------------
// Differentiable primitives. All of them run eagerly; when `tape` is given
// and any input carries a gradient, the matching backward step is recorded.
// Pass tape = nullptr for inference.
// ---------------------------------------------------------------------------

// Matrix product. Either operand may carry a leading batch axis; a rank-2
// operand is shared across the batch of the other.
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Swaps the trailing two axes.
Tensor transpose(const Tensor& x, Tape* tape = nullptr);

// Elementwise sum; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Elementwise sum with broadcasting. b may be: the same shape as a, a row
// vector {1,n}, a column vector {m,1}, or (for rank-3 a) a full {m,n} slice
// shared across the batch. Backward sums gradients over broadcast axes.
Tensor add_broadcast(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Elementwise difference; shapes must match exactly.
Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Hadamard product; shapes must match exactly.
Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Scales every column j by v[j] (v is {1,n}).
Tensor mul_rowvec(const Tensor& a, const Tensor& v, Tape* tape = nullptr);

// Divides every column j by v[j] (v is {1,n}); caller guarantees v[j] != 0.
Tensor div_rowvec(const Tensor& a, const Tensor& v, Tape* tape = nullptr);

// Multiplication by a compile-time-known constant.
Tensor scale(const Tensor& x, double c, Tape* tape = nullptr);

// Pointwise nonlinearity.
Tensor activation(const Tensor& x, Activation kind, Tape* tape = nullptr);

// Softmax over the trailing axis of each row, stabilized by per-row max
// subtraction. Backward is the exact Jacobian-vector product.
Tensor row_softmax(const Tensor& x, Tape* tape = nullptr);

// Normalizes x and applies the affine map gamma, beta (both {1,C} where C
// is the trailing extent). kLayer standardizes each row over the trailing
// axis; kBatch standardizes each trailing-axis column over all leading
// rows (batch x rows pooled). Variance uses the population convention.
// When batch_mean/batch_var are non-null they receive the {1,C} statistics
// (kBatch only) so callers can maintain running averages.
Tensor normalize(const Tensor& x, NormKind kind, const Tensor& gamma, const Tensor& beta,
                 double eps, Tape* tape = nullptr, Tensor* batch_mean = nullptr,
                 Tensor* batch_var = nullptr);

// Affine normalization against externally supplied per-column statistics
// ({1,C} mean and variance, treated as constants). Used for batch-kind
// inference with running statistics.
Tensor normalize_fixed(const Tensor& x, const Tensor& mean, const Tensor& var,
                       const Tensor& gamma, const Tensor& beta, double eps,
                       Tape* tape = nullptr);

// Inverted dropout: in training, zeroes each entry independently with
// probability p and scales survivors by 1/(1-p); outside training it is the
// identity. Backward reuses the sampled mask. Requires 0 <= p < 1.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng, Tape* tape = nullptr);

// Sum / mean over all entries; result is a 1x1 scalar tensor.
Tensor sum_all(const Tensor& x, Tape* tape = nullptr);
Tensor mean_all(const Tensor& x, Tape* tape = nullptr);

// Column gather over the trailing axis: out[..., j] = x[..., idx[j]].
Tensor select_cols(const Tensor& x, const std::vector<int>& idx, Tape* tape = nullptr);

// Thread-local forward-pass flop accounting; used by tests to assert cost
// scaling properties.
namespace opcount {
void reset();
std::uint64_t flops();
void bump(std::uint64_t n);
}  // namespace opcount

}  // namespace itermix
