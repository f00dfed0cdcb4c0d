#include "itermix/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace itermix {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive(lookback, "lookback");
  positive(horizon, "horizon");
  positive(channels, "channels");
  positive(rounds, "rounds");
  positive(depth, "depth");
  positive(slots, "slots");
  positive(hidden, "hidden");
  if (target_channels.empty()) throw ConfigError("target_channels must not be empty");
  std::set<int> seen;
  for (int c : target_channels) {
    if (c < 0 || c >= channels)
      throw ConfigError("target channel " + std::to_string(c) + " out of range for " +
                        std::to_string(channels) + " channels");
    if (!seen.insert(c).second)
      throw ConfigError("duplicate target channel " + std::to_string(c));
  }
  if (dropout_rate < 0.0 || dropout_rate > 0.5)
    throw ConfigError("dropout_rate must lie in [0, 0.5], got " + std::to_string(dropout_rate));
}

namespace {

Tensor linear_init(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

NormParams norm_init(int c, NormKind kind) {
  NormParams np;
  np.gamma = Tensor::full({1, c}, 1.0, true);
  np.beta = Tensor::zeros({1, c}, true);
  if (kind == NormKind::kBatch) {
    np.running_mean = Tensor::zeros({1, c});
    np.running_var = Tensor::full({1, c}, 1.0);
  }
  return np;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int l = cfg.lookback, c = cfg.channels, dh = cfg.hidden;
  ModelParams p;
  p.in_gamma = Tensor::full({1, c}, 1.0, true);
  p.in_beta = Tensor::zeros({1, c}, true);
  p.blocks.reserve(cfg.depth);
  for (int m = 0; m < cfg.depth; ++m) {
    MixerBlockParams blk;
    blk.time_weight = linear_init({l, l}, l, rng);
    blk.time_bias = linear_init({l, 1}, l, rng);
    blk.feat_weight1 = linear_init({c, dh}, c, rng);
    blk.feat_bias1 = linear_init({1, dh}, c, rng);
    blk.feat_weight2 = linear_init({dh, c}, dh, rng);
    blk.feat_bias2 = linear_init({1, c}, dh, rng);
    blk.norm1 = norm_init(c, cfg.norm_kind);
    blk.norm2 = norm_init(c, cfg.norm_kind);
    p.blocks.push_back(std::move(blk));
  }
  p.slot_keys = Tensor::normal({cfg.slots, c}, 0.0, 0.02, rng, true);
  p.slot_values = Tensor::normal({cfg.slots, c}, 0.0, 0.02, rng, true);
  p.proj_weight = linear_init({cfg.horizon, l}, l, rng);
  p.proj_bias = linear_init({cfg.horizon, 1}, l, rng);
  return p;
}

std::vector<Tensor*> ModelParams::learnables() {
  std::vector<Tensor*> out{&in_gamma, &in_beta};
  for (auto& b : blocks) {
    out.push_back(&b.time_weight);
    out.push_back(&b.time_bias);
    out.push_back(&b.feat_weight1);
    out.push_back(&b.feat_bias1);
    out.push_back(&b.feat_weight2);
    out.push_back(&b.feat_bias2);
    out.push_back(&b.norm1.gamma);
    out.push_back(&b.norm1.beta);
    out.push_back(&b.norm2.gamma);
    out.push_back(&b.norm2.beta);
  }
  out.push_back(&slot_keys);
  out.push_back(&slot_values);
  out.push_back(&proj_weight);
  out.push_back(&proj_bias);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("instance.gamma", &in_gamma);
  out.emplace_back("instance.beta", &in_beta);
  for (std::size_t m = 0; m < blocks.size(); ++m) {
    auto& b = blocks[m];
    const std::string pre = "block" + std::to_string(m) + ".";
    out.emplace_back(pre + "time_weight", &b.time_weight);
    out.emplace_back(pre + "time_bias", &b.time_bias);
    out.emplace_back(pre + "feat_weight1", &b.feat_weight1);
    out.emplace_back(pre + "feat_bias1", &b.feat_bias1);
    out.emplace_back(pre + "feat_weight2", &b.feat_weight2);
    out.emplace_back(pre + "feat_bias2", &b.feat_bias2);
    out.emplace_back(pre + "norm1.gamma", &b.norm1.gamma);
    out.emplace_back(pre + "norm1.beta", &b.norm1.beta);
    out.emplace_back(pre + "norm2.gamma", &b.norm2.gamma);
    out.emplace_back(pre + "norm2.beta", &b.norm2.beta);
    if (b.norm1.running_mean.defined()) {
      out.emplace_back(pre + "norm1.running_mean", &b.norm1.running_mean);
      out.emplace_back(pre + "norm1.running_var", &b.norm1.running_var);
      out.emplace_back(pre + "norm2.running_mean", &b.norm2.running_mean);
      out.emplace_back(pre + "norm2.running_var", &b.norm2.running_var);
    }
  }
  out.emplace_back("slots.keys", &slot_keys);
  out.emplace_back("slots.values", &slot_values);
  out.emplace_back("head.weight", &proj_weight);
  out.emplace_back("head.bias", &proj_bias);
  return out;
}

void ModelParams::zero_grad() {
  for (Tensor* t : learnables()) t->zero_grad();
}

void ModelParams::set_requires_grad(bool on) {
  for (Tensor* t : learnables()) t->set_requires_grad(on);
}

std::vector<std::vector<double>> ModelParams::snapshot() const {
  std::vector<std::vector<double>> snap;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named())
    snap.emplace_back(t->values().begin(), t->values().end());
  return snap;
}

void ModelParams::restore(const std::vector<std::vector<double>>& snap) {
  auto entries = named();
  require(snap.size() == entries.size(), "restore: snapshot layout mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto vals = entries[i].second->values();
    require(snap[i].size() == vals.size(), "restore: tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), vals.begin());
  }
}

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.in_gamma = in_gamma.clone();
  c.in_beta = in_beta.clone();
  for (const auto& b : blocks) {
    MixerBlockParams nb;
    nb.time_weight = b.time_weight.clone();
    nb.time_bias = b.time_bias.clone();
    nb.feat_weight1 = b.feat_weight1.clone();
    nb.feat_bias1 = b.feat_bias1.clone();
    nb.feat_weight2 = b.feat_weight2.clone();
    nb.feat_bias2 = b.feat_bias2.clone();
    nb.norm1.gamma = b.norm1.gamma.clone();
    nb.norm1.beta = b.norm1.beta.clone();
    nb.norm2.gamma = b.norm2.gamma.clone();
    nb.norm2.beta = b.norm2.beta.clone();
    if (b.norm1.running_mean.defined()) {
      nb.norm1.running_mean = b.norm1.running_mean.clone();
      nb.norm1.running_var = b.norm1.running_var.clone();
      nb.norm2.running_mean = b.norm2.running_mean.clone();
      nb.norm2.running_var = b.norm2.running_var.clone();
    }
    c.blocks.push_back(std::move(nb));
  }
  c.slot_keys = slot_keys.clone();
  c.slot_values = slot_values.clone();
  c.proj_weight = proj_weight.clone();
  c.proj_bias = proj_bias.clone();
  return c;
}

long long count_parameters(const ModelConfig& cfg) {
  const long long l = cfg.lookback, c = cfg.channels, dh = cfg.hidden, t = cfg.horizon,
                  s = cfg.slots, m = cfg.depth;
  return 2 * c + m * (l * l + l + 2 * c * dh + dh + 5 * c) + 2 * s * c + t * l + t;
}

long long count_parameters(const ModelParams& params) {
  long long n = 0;
  for (Tensor* t : const_cast<ModelParams&>(params).learnables()) n += t->size();
  return n;
}

// ---------------------------------------------------------------------------
// instance normalization
// ---------------------------------------------------------------------------

InstanceNormStats compute_instance_stats(const Tensor& x, double eps) {
  const int b = x.batch(), l = x.rows(), c = x.cols();
  InstanceNormStats st;
  st.mean = Tensor::zeros({b, c});
  st.std = Tensor::zeros({b, c});
  auto xv = x.values();
  for (int k = 0; k < b; ++k) {
    const double* base = xv.data() + static_cast<std::size_t>(k) * l * c;
    for (int j = 0; j < c; ++j) {
      double mean = 0.0;
      for (int i = 0; i < l; ++i) mean += base[static_cast<std::size_t>(i) * c + j];
      mean /= l;
      double var = 0.0;
      for (int i = 0; i < l; ++i) {
        double d = base[static_cast<std::size_t>(i) * c + j] - mean;
        var += d * d;
      }
      var /= l;
      st.mean.at(k, j) = mean;
      st.std.at(k, j) = std::max(std::sqrt(var), eps);
    }
  }
  return st;
}

namespace {

// Materializes per-window stats as a full tensor matching y's layout,
// optionally restricted to a channel subset.
Tensor expand_stats(const Tensor& stat, const std::vector<int>& cols_subset, int out_rows,
                    bool rank3) {
  const int b = stat.rows();  // stats are {B,C}
  const int k = static_cast<int>(cols_subset.size());
  Tensor out = rank3 ? Tensor::zeros({b, out_rows, k}) : Tensor::zeros({out_rows, k});
  auto ov = out.values();
  for (int i = 0; i < b; ++i)
    for (int r = 0; r < out_rows; ++r)
      for (int j = 0; j < k; ++j)
        ov[(static_cast<std::size_t>(i) * out_rows + r) * k + j] = stat.at(i, cols_subset[j]);
  return out;
}

std::vector<int> all_channels(int c) {
  std::vector<int> idx(c);
  for (int j = 0; j < c; ++j) idx[j] = j;
  return idx;
}

}  // namespace

Tensor instance_normalize(const Tensor& x, const InstanceNormStats& st, const Tensor& gamma,
                          const Tensor& beta, Tape* tape) {
  const bool rank3 = x.rank() == 3;
  require(st.mean.rows() == x.batch() && st.mean.cols() == x.cols(),
          "instance_normalize: stats do not match input");
  auto all = all_channels(x.cols());
  Tensor mean_full = expand_stats(st.mean, all, x.rows(), rank3);
  Tensor std_full = expand_stats(st.std, all, x.rows(), rank3);
  Tensor centered = subtract(x, mean_full, tape);
  // elementwise divide by the per-window std (constant wrt the tape)
  for (std::size_t i = 0; i < std_full.values().size(); ++i)
    std_full.values()[i] = 1.0 / std_full.values()[i];
  Tensor standardized = multiply(centered, std_full, tape);
  return add_broadcast(mul_rowvec(standardized, gamma, tape), beta, tape);
}

Tensor instance_denormalize(const Tensor& y, const InstanceNormStats& st, const Tensor& gamma,
                            const Tensor& beta, const std::vector<int>& target_channels,
                            Tape* tape) {
  const bool rank3 = y.rank() == 3;
  require(static_cast<int>(target_channels.size()) == y.cols(),
          "instance_denormalize: target channel count does not match input");
  Tensor gamma_sel = select_cols(gamma, target_channels, tape);
  Tensor beta_sel = select_cols(beta, target_channels, tape);
  Tensor mean_full = expand_stats(st.mean, target_channels, y.rows(), rank3);
  Tensor std_full = expand_stats(st.std, target_channels, y.rows(), rank3);
  Tensor centered = add_broadcast(y, scale(beta_sel, -1.0, tape), tape);
  Tensor unscaled = div_rowvec(centered, gamma_sel, tape);
  return add(multiply(unscaled, std_full, tape), mean_full, tape);
}

// ---------------------------------------------------------------------------
// mixer stack
// ---------------------------------------------------------------------------

Tensor apply_norm(const Tensor& x, NormKind kind, NormParams& np, bool training, Tape* tape) {
  if (kind == NormKind::kLayer)
    return normalize(x, NormKind::kLayer, np.gamma, np.beta, kBlockNormEps, tape);
  if (!training)
    return normalize_fixed(x, np.running_mean, np.running_var, np.gamma, np.beta, kBlockNormEps,
                           tape);
  Tensor batch_mean, batch_var;
  Tensor out = normalize(x, NormKind::kBatch, np.gamma, np.beta, kBlockNormEps, tape, &batch_mean,
                         &batch_var);
  for (int j = 0; j < np.running_mean.cols(); ++j) {
    np.running_mean.values()[j] = (1.0 - kRunningStatMomentum) * np.running_mean.values()[j] +
                                  kRunningStatMomentum * batch_mean.values()[j];
    np.running_var.values()[j] = (1.0 - kRunningStatMomentum) * np.running_var.values()[j] +
                                 kRunningStatMomentum * batch_var.values()[j];
  }
  return out;
}

Tensor residual_mixer_block(const Tensor& h, MixerBlockParams& blk, const ModelConfig& cfg,
                            bool training, Rng& rng, Tape* tape) {
  require(h.rows() == cfg.lookback && h.cols() == cfg.channels,
          "residual_mixer_block: input " + h.shape_str() + " does not match config L=" +
              std::to_string(cfg.lookback) + " C=" + std::to_string(cfg.channels));
  require(blk.time_weight.rows() == cfg.lookback && blk.feat_weight1.rows() == cfg.channels &&
              blk.feat_weight1.cols() == cfg.hidden,
          "residual_mixer_block: block parameters do not match config");

  // time mixing, shared across variates
  Tensor s = apply_norm(h, cfg.norm_kind, blk.norm1, training, tape);
  Tensor r = add_broadcast(matmul(blk.time_weight, s, tape), blk.time_bias, tape);
  r = dropout(activation(r, cfg.act, tape), cfg.dropout_rate, training, rng, tape);
  Tensor t = add(h, r, tape);

  // feature mixing, per time step
  Tensor q = apply_norm(t, cfg.norm_kind, blk.norm2, training, tape);
  Tensor f = activation(add_broadcast(matmul(q, blk.feat_weight1, tape), blk.feat_bias1, tape),
                        cfg.act, tape);
  f = add_broadcast(matmul(f, blk.feat_weight2, tape), blk.feat_bias2, tape);
  f = dropout(f, cfg.dropout_rate, training, rng, tape);
  return add(t, f, tape);
}

Tensor apply_stack(const Tensor& h, ModelParams& params, const ModelConfig& cfg, bool training,
                   Rng& rng, Tape* tape) {
  require(static_cast<int>(params.blocks.size()) == cfg.depth,
          "apply_stack: params hold " + std::to_string(params.blocks.size()) +
              " blocks, config wants " + std::to_string(cfg.depth));
  Tensor cur = h;
  for (auto& blk : params.blocks)
    cur = residual_mixer_block(cur, blk, cfg, training, rng, tape);
  return cur;
}

Tensor iterative_refine(const Tensor& h0, ModelParams& params, const ModelConfig& cfg,
                        bool training, Rng& rng, Tape* tape) {
  if (cfg.rounds <= 0)
    throw ConfigError("iterative_refine: rounds must be positive, got " +
                      std::to_string(cfg.rounds));
  Tensor cur = h0;
  for (int n = 0; n < cfg.rounds; ++n) cur = apply_stack(cur, params, cfg, training, rng, tape);
  return cur;
}

Tensor external_attention(const Tensor& h, const Tensor& slot_keys, const Tensor& slot_values,
                          Tape* tape) {
  require(slot_keys.rank() == 2 && slot_keys.cols() == h.cols(),
          "external_attention: slot keys " + slot_keys.shape_str() + " do not match input " +
              h.shape_str());
  require(slot_values.shape() == slot_keys.shape(),
          "external_attention: slot values " + slot_values.shape_str() + " do not match keys " +
              slot_keys.shape_str());
  Tensor affinity = matmul(h, transpose(slot_keys, tape), tape);  // {.., L, S}
  Tensor attn = row_softmax(affinity, tape);
  Tensor correction = matmul(attn, slot_values, tape);            // {.., L, C}
  return add(h, correction, tape);
}

Tensor forward(const Tensor& x, ModelParams& params, const ModelConfig& cfg, bool training,
               Rng& rng, Tape* tape) {
  require(x.rows() == cfg.lookback && x.cols() == cfg.channels,
          "forward: input " + x.shape_str() + " does not match config L=" +
              std::to_string(cfg.lookback) + " C=" + std::to_string(cfg.channels));
  require(params.proj_weight.rows() == cfg.horizon && params.proj_weight.cols() == cfg.lookback,
          "forward: params do not match config horizon/lookback");
  require(params.slot_keys.rows() == cfg.slots, "forward: params do not match config slots");

  InstanceNormStats stats = compute_instance_stats(x);
  Tensor h = instance_normalize(x, stats, params.in_gamma, params.in_beta, tape);
  h = iterative_refine(h, params, cfg, training, rng, tape);
  h = external_attention(h, params.slot_keys, params.slot_values, tape);
  if (cfg.out_channels() < cfg.channels) h = select_cols(h, cfg.target_channels, tape);
  Tensor y = add_broadcast(matmul(params.proj_weight, h, tape), params.proj_bias, tape);
  return instance_denormalize(y, stats, params.in_gamma, params.in_beta, cfg.target_channels,
                              tape);
}

}  // namespace itermix
