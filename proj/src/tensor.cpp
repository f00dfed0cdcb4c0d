#include "itermix/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

namespace itermix {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RMat>;
using CMap = Eigen::Map<const RMat>;

std::string shape_to_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << '}';
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                   b.shape_str());
}

void require_rank23(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() < 2 || t.rank() > 3)
    throw ContractError(std::string(op) + ": expected a rank-2 or rank-3 tensor, got " +
                        (t.defined() ? t.shape_str() : std::string("<empty>")));
}

bool want_grad(const Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Per-batch-slice pointers. A rank-2 tensor is a batch of one.
const double* slice(const Tensor& t, int b) {
  return t.values().data() + static_cast<std::size_t>(b) * t.rows() * t.cols();
}
double* gslice(Tensor& t, int b) {
  return t.grad().data() + static_cast<std::size_t>(b) * t.rows() * t.cols();
}
const double* gslice_c(const Tensor& t, int b) {
  return t.grad().data() + static_cast<std::size_t>(b) * t.rows() * t.cols();
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

namespace opcount {
namespace {
thread_local std::uint64_t counter = 0;
}
void reset() { counter = 0; }
std::uint64_t flops() { return counter; }
void bump(std::uint64_t n) { counter += n; }
}  // namespace opcount

std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }
std::string to_string(NormKind k) { return k == NormKind::kLayer ? "layer" : "batch"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + s + "' (expected relu or gelu)");
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "layer") return NormKind::kLayer;
  if (s == "batch") return NormKind::kBatch;
  throw ConfigError("unknown norm kind '" + s + "' (expected layer or batch)");
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  if (shape.empty()) throw ContractError("Tensor: empty shape");
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ContractError("Tensor: non-positive extent in shape " + shape_to_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  auto d = std::make_shared<Data>();
  d->shape = std::move(shape);
  d->values.assign(n, value);
  if (requires_grad) {
    d->requires_grad = true;
    d->grad.assign(n, 0.0);
  }
  return Tensor(std::move(d));
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  if (values.size() != t.d_->values.size())
    throw ContractError("Tensor: value count " + std::to_string(values.size()) +
                        " does not match shape " + t.shape_str());
  t.d_->values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1, 1}, value, requires_grad);
}

Tensor Tensor::uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.d_->values) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(std::vector<int> shape, double mean, double stddev, Rng& rng,
                      bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.d_->values) v = rng.normal(mean, stddev);
  return t;
}

const std::vector<int>& Tensor::shape() const {
  if (!d_) throw ContractError("Tensor: use of an empty tensor");
  return d_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }
int Tensor::size() const { return static_cast<int>(d_ ? d_->values.size() : 0); }
int Tensor::batch() const { return rank() == 3 ? shape()[0] : 1; }
int Tensor::rows() const { return shape()[rank() - 2]; }
int Tensor::cols() const { return shape()[rank() - 1]; }

std::span<double> Tensor::values() { return {d_->values.data(), d_->values.size()}; }
std::span<const double> Tensor::values() const { return {d_->values.data(), d_->values.size()}; }

std::span<double> Tensor::grad() {
  if (!requires_grad()) throw ContractError("Tensor: grad() on a tensor without gradients");
  return {d_->grad.data(), d_->grad.size()};
}
std::span<const double> Tensor::grad() const {
  if (!requires_grad()) throw ContractError("Tensor: grad() on a tensor without gradients");
  return {d_->grad.data(), d_->grad.size()};
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!d_) throw ContractError("Tensor: set_requires_grad on an empty tensor");
  d_->requires_grad = on;
  if (on)
    d_->grad.assign(d_->values.size(), 0.0);
  else
    d_->grad.clear();
}

void Tensor::zero_grad() {
  if (requires_grad()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

double& Tensor::at(int i, int j) {
  if (rank() != 2) throw ContractError("Tensor: 2-index access on " + shape_str());
  return d_->values[static_cast<std::size_t>(i) * cols() + j];
}
double Tensor::at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

double& Tensor::at(int b, int i, int j) {
  if (rank() != 3) throw ContractError("Tensor: 3-index access on " + shape_str());
  return d_->values[(static_cast<std::size_t>(b) * rows() + i) * cols() + j];
}
double Tensor::at(int b, int i, int j) const { return const_cast<Tensor*>(this)->at(b, i, j); }

double Tensor::item() const {
  if (size() != 1) throw ContractError("Tensor: item() on non-scalar " + shape_str());
  return d_->values[0];
}

Tensor Tensor::clone() const {
  if (!d_) return Tensor();
  Tensor t = from_values(d_->shape, d_->values, d_->requires_grad);
  if (d_->requires_grad) t.d_->grad = d_->grad;
  return t;
}

std::string Tensor::shape_str() const {
  return d_ ? shape_to_str(d_->shape) : std::string("<empty>");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got " + loss.shape_str());
  if (!loss.requires_grad())
    throw ContractError("backward: loss is not connected to any differentiable input");
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  tape.replay_backward();
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_rank23(a, "matmul");
  require_rank23(b, "matmul");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) shape_fail("matmul", a, b);
  const int ba = a.batch(), bb = b.batch();
  if (a.rank() == 3 && b.rank() == 3 && ba != bb) shape_fail("matmul", a, b);
  const int bo = std::max(ba, bb);

  std::vector<int> out_shape =
      (a.rank() == 3 || b.rank() == 3) ? std::vector<int>{bo, m, n} : std::vector<int>{m, n};
  Tensor out = Tensor::zeros(std::move(out_shape));
  opcount::bump(2ULL * bo * m * k * n);
  for (int i = 0; i < bo; ++i) {
    CMap A(slice(a, a.rank() == 3 ? i : 0), m, k);
    CMap B(slice(b, b.rank() == 3 ? i : 0), k, n);
    Map C(out.values().data() + static_cast<std::size_t>(i) * m * n, m, n);
    C.noalias() = A * B;
  }

  if (want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, m, k, n, bo]() mutable {
      for (int i = 0; i < bo; ++i) {
        CMap dC(gslice_c(to, i), m, n);
        if (ta.requires_grad()) {
          CMap B(slice(tb, tb.rank() == 3 ? i : 0), k, n);
          Map dA(gslice(ta, ta.rank() == 3 ? i : 0), m, k);
          dA.noalias() += dC * B.transpose();
        }
        if (tb.requires_grad()) {
          CMap A(slice(ta, ta.rank() == 3 ? i : 0), m, k);
          Map dB(gslice(tb, tb.rank() == 3 ? i : 0), k, n);
          dB.noalias() += A.transpose() * dC;
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x, Tape* tape) {
  require_rank23(x, "transpose");
  const int m = x.rows(), n = x.cols(), nb = x.batch();
  std::vector<int> out_shape =
      x.rank() == 3 ? std::vector<int>{nb, n, m} : std::vector<int>{n, m};
  Tensor out = Tensor::zeros(std::move(out_shape));
  for (int b = 0; b < nb; ++b) {
    CMap X(slice(x, b), m, n);
    Map Y(out.values().data() + static_cast<std::size_t>(b) * m * n, n, m);
    Y = X.transpose();
  }
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, m, n, nb]() mutable {
      for (int b = 0; b < nb; ++b) {
        CMap dY(gslice_c(to, b), n, m);
        Map dX(gslice(tx, b), m, n);
        dX.noalias() += dY.transpose();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

namespace {

enum class Bcast { kSame, kRow, kCol, kSlice };

Bcast classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.rank() == 2 && b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  if (a.rank() == 3 && b.rank() == 2 && b.rows() == a.rows() && b.cols() == a.cols())
    return Bcast::kSlice;
  shape_fail(op, a, b);
}

}  // namespace

Tensor add_broadcast(const Tensor& a, const Tensor& b, Tape* tape) {
  require_rank23(a, "add_broadcast");
  require_rank23(b, "add_broadcast");
  const Bcast mode = classify_broadcast(a, b, "add_broadcast");
  const int nb = a.batch(), m = a.rows(), n = a.cols();

  Tensor out = Tensor::zeros(a.shape());
  opcount::bump(static_cast<std::uint64_t>(a.size()));
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  if (mode == Bcast::kSame) {
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
  } else {
    for (int k = 0; k < nb; ++k) {
      std::size_t base = static_cast<std::size_t>(k) * m * n;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          std::size_t p = base + static_cast<std::size_t>(i) * n + j;
          double bval = mode == Bcast::kRow   ? bv[j]
                        : mode == Bcast::kCol ? bv[i]
                                              : bv[static_cast<std::size_t>(i) * n + j];
          ov[p] = av[p] + bval;
        }
    }
  }

  if (want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, mode, nb, m, n]() mutable {
      auto og = to.grad();
      if (ta.requires_grad()) {
        auto ag = ta.grad();
        for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
      }
      if (tb.requires_grad()) {
        auto bg = tb.grad();
        if (mode == Bcast::kSame) {
          for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
        } else {
          for (int k = 0; k < nb; ++k) {
            std::size_t base = static_cast<std::size_t>(k) * m * n;
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                double g = og[base + static_cast<std::size_t>(i) * n + j];
                if (mode == Bcast::kRow)
                  bg[j] += g;
                else if (mode == Bcast::kCol)
                  bg[i] += g;
                else
                  bg[static_cast<std::size_t>(i) * n + j] += g;
              }
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) shape_fail("add", a, b);
  return add_broadcast(a, b, tape);
}

namespace {

// Shared body for same-shape elementwise ops with constant per-entry
// partials: out = f(a, b); da += dOut * dfa; db += dOut * dfb.
Tensor elementwise2(const Tensor& a, const Tensor& b, const char* op, bool is_mul, Tape* tape) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) shape_fail(op, a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  if (is_mul)
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  else
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];

  if (want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, is_mul]() mutable {
      auto og = to.grad();
      if (is_mul) {
        auto av = ta.values();
        auto bv = tb.values();
        if (ta.requires_grad()) {
          auto ag = ta.grad();
          for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bv[i];
        }
        if (tb.requires_grad()) {
          auto bg = tb.grad();
          for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * av[i];
        }
      } else {
        if (ta.requires_grad()) {
          auto ag = ta.grad();
          for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        }
        if (tb.requires_grad()) {
          auto bg = tb.grad();
          for (std::size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape) {
  return elementwise2(a, b, "subtract", false, tape);
}

Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape) {
  return elementwise2(a, b, "multiply", true, tape);
}

namespace {

Tensor rowvec_op(const Tensor& a, const Tensor& v, bool divide, const char* op, Tape* tape) {
  require_rank23(a, op);
  if (!v.defined() || v.rank() != 2 || v.rows() != 1 || v.cols() != a.cols())
    shape_fail(op, a, v);
  const int n = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto vv = v.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    double f = vv[i % n];
    ov[i] = divide ? av[i] / f : av[i] * f;
  }
  if (want_grad(tape, {&a, &v})) {
    out.set_requires_grad(true);
    Tensor ta = a, tv = v, to = out;
    tape->record([ta, tv, to, divide, n]() mutable {
      auto og = to.grad();
      auto av = ta.values();
      auto vv = tv.values();
      if (ta.requires_grad()) {
        auto ag = ta.grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          double f = vv[i % n];
          ag[i] += divide ? og[i] / f : og[i] * f;
        }
      }
      if (tv.requires_grad()) {
        auto vg = tv.grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          double f = vv[i % n];
          vg[i % n] += divide ? -og[i] * av[i] / (f * f) : og[i] * av[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor mul_rowvec(const Tensor& a, const Tensor& v, Tape* tape) {
  return rowvec_op(a, v, false, "mul_rowvec", tape);
}

Tensor div_rowvec(const Tensor& a, const Tensor& v, Tape* tape) {
  return rowvec_op(a, v, true, "div_rowvec", tape);
}

Tensor scale(const Tensor& x, double c, Tape* tape) {
  require_rank23(x, "scale");
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = c * xv[i];
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, c]() mutable {
      auto og = to.grad();
      auto xg = tx.grad();
      for (std::size_t i = 0; i < og.size(); ++i) xg[i] += c * og[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

Tensor activation(const Tensor& x, Activation kind, Tape* tape) {
  require_rank23(x, "activation");
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  if (kind == Activation::kRelu) {
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i)
      ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, kind]() mutable {
      auto og = to.grad();
      auto xv = tx.values();
      auto xg = tx.grad();
      if (kind == Activation::kRelu) {
        for (std::size_t i = 0; i < og.size(); ++i)
          if (xv[i] > 0.0) xg[i] += og[i];
      } else {
        for (std::size_t i = 0; i < og.size(); ++i) {
          double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv[i] * xv[i]);
          xg[i] += og[i] * (cdf + xv[i] * pdf);
        }
      }
    });
  }
  return out;
}

Tensor row_softmax(const Tensor& x, Tape* tape) {
  require_rank23(x, "row_softmax");
  const int n = x.cols();
  const int nrows = x.size() / n;
  Tensor out = Tensor::zeros(x.shape());
  opcount::bump(4ULL * x.size());
  auto xv = x.values();
  auto ov = out.values();
  for (int r = 0; r < nrows; ++r) {
    const double* xi = xv.data() + static_cast<std::size_t>(r) * n;
    double* yi = ov.data() + static_cast<std::size_t>(r) * n;
    double mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (int j = 0; j < n; ++j) yi[j] /= sum;
  }
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, n, nrows]() mutable {
      auto yv = to.values();
      auto og = to.grad();
      auto xg = tx.grad();
      for (int r = 0; r < nrows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += og[base + j] * yv[base + j];
        for (int j = 0; j < n; ++j) xg[base + j] += yv[base + j] * (og[base + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace {

void check_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  if (!gamma.defined() || gamma.rank() != 2 || gamma.rows() != 1 || gamma.cols() != x.cols())
    shape_fail(op, x, gamma);
  if (!beta.defined() || beta.shape() != gamma.shape()) shape_fail(op, x, beta);
}

}  // namespace

Tensor normalize(const Tensor& x, NormKind kind, const Tensor& gamma, const Tensor& beta,
                 double eps, Tape* tape, Tensor* batch_mean, Tensor* batch_var) {
  require_rank23(x, "normalize");
  check_affine(x, gamma, beta, "normalize");
  if (!(eps > 0.0)) throw ConfigError("normalize: eps must be > 0");
  const int n = x.cols();
  const int nrows = x.size() / n;

  Tensor out = Tensor::zeros(x.shape());
  // Standardized values and inverse stddevs are needed by the backward pass.
  std::vector<double> xhat(static_cast<std::size_t>(x.size()));
  std::vector<double> inv_std;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto ov = out.values();

  if (kind == NormKind::kLayer) {
    inv_std.resize(nrows);
    for (int r = 0; r < nrows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * n;
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += xv[base + j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        double d = xv[base + j] - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[r] = inv;
      for (int j = 0; j < n; ++j) {
        xhat[base + j] = (xv[base + j] - mean) * inv;
        ov[base + j] = gv[j] * xhat[base + j] + bv[j];
      }
    }
  } else {
    inv_std.resize(n);
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (int r = 0; r < nrows; ++r)
      for (int j = 0; j < n; ++j) mean[j] += xv[static_cast<std::size_t>(r) * n + j];
    for (int j = 0; j < n; ++j) mean[j] /= nrows;
    for (int r = 0; r < nrows; ++r)
      for (int j = 0; j < n; ++j) {
        double d = xv[static_cast<std::size_t>(r) * n + j] - mean[j];
        var[j] += d * d;
      }
    for (int j = 0; j < n; ++j) {
      var[j] /= nrows;
      inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    }
    for (int r = 0; r < nrows; ++r)
      for (int j = 0; j < n; ++j) {
        const std::size_t p = static_cast<std::size_t>(r) * n + j;
        xhat[p] = (xv[p] - mean[j]) * inv_std[j];
        ov[p] = gv[j] * xhat[p] + bv[j];
      }
    if (batch_mean) *batch_mean = Tensor::from_values({1, n}, mean);
    if (batch_var) *batch_var = Tensor::from_values({1, n}, var);
  }

  if (want_grad(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, to = out;
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv = std::make_shared<std::vector<double>>(std::move(inv_std));
    tape->record([tx, tg, tb, to, xh, inv, kind, n, nrows]() mutable {
      auto og = to.grad();
      auto gv = tg.values();
      if (tg.requires_grad()) {
        auto gg = tg.grad();
        for (int r = 0; r < nrows; ++r)
          for (int j = 0; j < n; ++j) {
            const std::size_t p = static_cast<std::size_t>(r) * n + j;
            gg[j] += og[p] * (*xh)[p];
          }
      }
      if (tb.requires_grad()) {
        auto bg = tb.grad();
        for (int r = 0; r < nrows; ++r)
          for (int j = 0; j < n; ++j) bg[j] += og[static_cast<std::size_t>(r) * n + j];
      }
      if (tx.requires_grad()) {
        auto xg = tx.grad();
        if (kind == NormKind::kLayer) {
          for (int r = 0; r < nrows; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * n;
            double mg = 0.0, mgx = 0.0;
            for (int j = 0; j < n; ++j) {
              double g = og[base + j] * gv[j];
              mg += g;
              mgx += g * (*xh)[base + j];
            }
            mg /= n;
            mgx /= n;
            for (int j = 0; j < n; ++j) {
              double g = og[base + j] * gv[j];
              xg[base + j] += (*inv)[r] * (g - mg - (*xh)[base + j] * mgx);
            }
          }
        } else {
          std::vector<double> mg(n, 0.0), mgx(n, 0.0);
          for (int r = 0; r < nrows; ++r)
            for (int j = 0; j < n; ++j) {
              const std::size_t p = static_cast<std::size_t>(r) * n + j;
              double g = og[p] * gv[j];
              mg[j] += g;
              mgx[j] += g * (*xh)[p];
            }
          for (int j = 0; j < n; ++j) {
            mg[j] /= nrows;
            mgx[j] /= nrows;
          }
          for (int r = 0; r < nrows; ++r)
            for (int j = 0; j < n; ++j) {
              const std::size_t p = static_cast<std::size_t>(r) * n + j;
              double g = og[p] * gv[j];
              xg[p] += (*inv)[j] * (g - mg[j] - (*xh)[p] * mgx[j]);
            }
        }
      }
    });
  }
  return out;
}

Tensor normalize_fixed(const Tensor& x, const Tensor& mean, const Tensor& var,
                       const Tensor& gamma, const Tensor& beta, double eps, Tape* tape) {
  require_rank23(x, "normalize_fixed");
  check_affine(x, gamma, beta, "normalize_fixed");
  if (!mean.defined() || mean.shape() != gamma.shape()) shape_fail("normalize_fixed", x, mean);
  if (!var.defined() || var.shape() != gamma.shape()) shape_fail("normalize_fixed", x, var);
  const int n = x.cols();
  const int nrows = x.size() / n;

  std::vector<double> inv(n);
  for (int j = 0; j < n; ++j) inv[j] = 1.0 / std::sqrt(var.values()[j] + eps);

  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto mv = mean.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto ov = out.values();
  for (int r = 0; r < nrows; ++r)
    for (int j = 0; j < n; ++j) {
      const std::size_t p = static_cast<std::size_t>(r) * n + j;
      ov[p] = gv[j] * (xv[p] - mv[j]) * inv[j] + bv[j];
    }

  if (want_grad(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor tx = x, tm = mean, tg = gamma, tb = beta, to = out;
    auto pinv = std::make_shared<std::vector<double>>(std::move(inv));
    tape->record([tx, tm, tg, tb, to, pinv, n, nrows]() mutable {
      auto og = to.grad();
      auto xv = tx.values();
      auto mv = tm.values();
      auto gv = tg.values();
      for (int r = 0; r < nrows; ++r)
        for (int j = 0; j < n; ++j) {
          const std::size_t p = static_cast<std::size_t>(r) * n + j;
          const double xhat = (xv[p] - mv[j]) * (*pinv)[j];
          if (tx.requires_grad()) tx.grad()[p] += og[p] * gv[j] * (*pinv)[j];
          if (tg.requires_grad()) tg.grad()[j] += og[p] * xhat;
          if (tb.requires_grad()) tb.grad()[j] += og[p];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng, Tape* tape) {
  require_rank23(x, "dropout");
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: rate must satisfy 0 <= p < 1, got " + std::to_string(p));
  if (!training || p == 0.0) {
    // Identity, but still a distinct node so downstream mutation semantics
    // match the training path.
    return scale(x, 1.0, tape);
  }
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double m = rng.uniform() < p ? 0.0 : keep_scale;
    (*mask)[i] = m;
    ov[i] = xv[i] * m;
  }
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, mask]() mutable {
      auto og = to.grad();
      auto xg = tx.grad();
      for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions and gathers
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_all(const Tensor& x, bool mean, Tape* tape) {
  require_rank23(x, mean ? "mean_all" : "sum_all");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double denom = mean ? static_cast<double>(x.size()) : 1.0;
  Tensor out = Tensor::scalar(s / denom);
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    tape->record([tx, to, denom]() mutable {
      const double g = to.grad()[0] / denom;
      auto xg = tx.grad();
      for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
    });
  }
  return out;
}

}  // namespace

Tensor sum_all(const Tensor& x, Tape* tape) { return reduce_all(x, false, tape); }
Tensor mean_all(const Tensor& x, Tape* tape) { return reduce_all(x, true, tape); }

Tensor select_cols(const Tensor& x, const std::vector<int>& idx, Tape* tape) {
  require_rank23(x, "select_cols");
  if (idx.empty()) throw ContractError("select_cols: empty index list");
  for (int j : idx)
    if (j < 0 || j >= x.cols())
      throw ContractError("select_cols: index " + std::to_string(j) + " out of range for " +
                          x.shape_str());
  const int n = x.cols(), k = static_cast<int>(idx.size());
  const int nrows = x.size() / n;
  std::vector<int> out_shape = x.shape();
  out_shape.back() = k;
  Tensor out = Tensor::zeros(std::move(out_shape));
  auto xv = x.values();
  auto ov = out.values();
  for (int r = 0; r < nrows; ++r)
    for (int j = 0; j < k; ++j)
      ov[static_cast<std::size_t>(r) * k + j] = xv[static_cast<std::size_t>(r) * n + idx[j]];
  if (want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    auto pidx = std::make_shared<std::vector<int>>(idx);
    tape->record([tx, to, pidx, n, k, nrows]() mutable {
      auto og = to.grad();
      auto xg = tx.grad();
      for (int r = 0; r < nrows; ++r)
        for (int j = 0; j < k; ++j)
          xg[static_cast<std::size_t>(r) * n + (*pidx)[j]] +=
              og[static_cast<std::size_t>(r) * k + j];
    });
  }
  return out;
}

}  // namespace itermix
