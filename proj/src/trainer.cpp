#include "itermix/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "itermix/manifest.hpp"

namespace itermix {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be at least 1");
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, Tape* tape) {
  if (!pred.defined() || !target.defined() || pred.shape() != target.shape())
    throw ShapeError("mse_loss: prediction " + (pred.defined() ? pred.shape_str() : "<empty>") +
                     " and target " + (target.defined() ? target.shape_str() : "<empty>") +
                     " differ");
  Tensor diff = subtract(pred, target, tape);
  return mean_all(multiply(diff, diff, tape), tape);
}

void Adam::step(std::span<Tensor* const> params, double learning_rate) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  if (m_.size() != params.size())
    throw ContractError("Adam: parameter list changed size between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    if (static_cast<std::size_t>(p->size()) != m_[i].size())
      throw ContractError("Adam: parameter " + std::to_string(i) + " changed shape");
    auto vals = p->values();
    auto grads = p->grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double g = grads[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      vals[k] -= learning_rate * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double evaluate_mse(ModelParams& params, const ModelConfig& cfg, const WindowedDataset& set,
                    int batch_size) {
  if (set.size() == 0) throw ConfigError("evaluate_mse: empty dataset");
  Rng unused(0);
  double sq_sum = 0.0;
  std::size_t entries = 0;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < set.size(); at += batch_size) {
    idx.clear();
    for (std::size_t k = at; k < std::min(set.size(), at + batch_size); ++k) idx.push_back(k);
    auto [x, y] = set.gather(idx);
    Tensor pred = forward(x, params, cfg, false, unused);
    auto pv = pred.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double d = pv[i] - yv[i];
      sq_sum += d * d;
    }
    entries += pv.size();
  }
  return sq_sum / static_cast<double>(entries);
}

TrainReport train(ModelParams& params, const ModelConfig& cfg, const WindowedDataset& train_set,
                  const WindowedDataset& val_set, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  if (train_set.size() == 0) throw ConfigError("train: train split has no windows");
  if (val_set.size() == 0) throw ConfigError("train: val split has no windows");

  const auto t0 = std::chrono::steady_clock::now();
  Rng root(tc.seed);
  Rng shuffle_rng = root.fork("shuffle");
  Rng dropout_rng = root.fork("dropout");

  std::ofstream log;
  if (!tc.log_path.empty()) {
    log.open(tc.log_path);
    if (!log) throw ConfigError("train: cannot open log file " + tc.log_path);
  }

  Adam adam;
  auto learnables = params.learnables();
  TrainReport report;
  std::vector<std::vector<double>> best_snapshot;
  int bad_streak = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
    // seeded Fisher-Yates; the stream continues across epochs
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < order.size(); at += tc.batch_size) {
      const std::size_t hi = std::min(order.size(), at + tc.batch_size);
      std::span<const std::size_t> batch(order.data() + at, hi - at);
      auto [x, y] = train_set.gather(batch);

      Tape tape;
      params.zero_grad();
      Tensor pred = forward(x, params, cfg, true, dropout_rng, &tape);
      Tensor loss = mse_loss(pred, y, &tape);
      backward(loss, tape);
      adam.step(learnables, tc.learning_rate);

      epoch_loss += loss.item() * static_cast<double>(batch.size());
      seen += batch.size();
    }
    epoch_loss /= static_cast<double>(seen);

    const double val = evaluate_mse(params, cfg, val_set, tc.eval_batch_size);
    report.train_loss.push_back(epoch_loss);
    report.val_loss.push_back(val);
    if (log)
      log << (epoch + 1) << ' ' << format_double(epoch_loss) << ' ' << format_double(val) << '\n';

    if (val < report.best_val_loss) {
      report.best_val_loss = val;
      report.best_epoch = epoch;
      best_snapshot = params.snapshot();
      bad_streak = 0;
    } else {
      ++bad_streak;
      if (bad_streak >= tc.patience) break;
    }
  }

  if (!best_snapshot.empty()) params.restore(best_snapshot);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace itermix
