#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "itermix/checkpoint.hpp"
#include "itermix/model.hpp"
#include "testutil.hpp"

using namespace itermix;
using testutil::max_abs_diff;

namespace {

ModelConfig tiny_config(NormKind kind = NormKind::kLayer) {
  ModelConfig cfg;
  cfg.lookback = 8;
  cfg.horizon = 4;
  cfg.channels = 3;
  cfg.target_channels = {0, 1, 2};
  cfg.rounds = 2;
  cfg.depth = 2;
  cfg.slots = 4;
  cfg.hidden = 5;
  cfg.norm_kind = kind;
  cfg.act = Activation::kRelu;
  cfg.dropout_rate = 0.0;
  return cfg;
}

void zero_block(MixerBlockParams& b) {
  for (Tensor* t : {&b.time_weight, &b.time_bias, &b.feat_weight1, &b.feat_bias1,
                    &b.feat_weight2, &b.feat_bias2, &b.norm1.gamma, &b.norm1.beta,
                    &b.norm2.gamma, &b.norm2.beta})
    std::fill(t->values().begin(), t->values().end(), 0.0);
}

// Straight-line scalar reimplementation of one mixer block (layer norm,
// relu, no dropout), kept deliberately free of the library's tensor ops.
std::vector<std::vector<double>> oracle_block(const std::vector<std::vector<double>>& h,
                                              const MixerBlockParams& blk, double eps) {
  const int L = static_cast<int>(h.size());
  const int C = static_cast<int>(h[0].size());
  auto layer_norm = [&](const std::vector<std::vector<double>>& x, const Tensor& gamma,
                        const Tensor& beta) {
    std::vector<std::vector<double>> out(L, std::vector<double>(C));
    for (int i = 0; i < L; ++i) {
      double mu = 0.0;
      for (int j = 0; j < C; ++j) mu += x[i][j];
      mu /= C;
      double var = 0.0;
      for (int j = 0; j < C; ++j) var += (x[i][j] - mu) * (x[i][j] - mu);
      var /= C;
      for (int j = 0; j < C; ++j)
        out[i][j] =
            gamma.values()[j] * (x[i][j] - mu) / std::sqrt(var + eps) + beta.values()[j];
    }
    return out;
  };
  auto relu = [](double v) { return v > 0.0 ? v : 0.0; };

  auto s = layer_norm(h, blk.norm1.gamma, blk.norm1.beta);
  std::vector<std::vector<double>> t(L, std::vector<double>(C));
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < C; ++j) {
      double acc = blk.time_bias.values()[i];
      for (int k = 0; k < L; ++k) acc += blk.time_weight.at(i, k) * s[k][j];
      t[i][j] = h[i][j] + relu(acc);
    }
  auto q = layer_norm(t, blk.norm2.gamma, blk.norm2.beta);
  const int dh = blk.feat_weight1.cols();
  std::vector<std::vector<double>> g(L, std::vector<double>(C));
  for (int i = 0; i < L; ++i) {
    std::vector<double> hidden(dh);
    for (int u = 0; u < dh; ++u) {
      double acc = blk.feat_bias1.values()[u];
      for (int j = 0; j < C; ++j) acc += q[i][j] * blk.feat_weight1.at(j, u);
      hidden[u] = relu(acc);
    }
    for (int j = 0; j < C; ++j) {
      double acc = blk.feat_bias2.values()[j];
      for (int u = 0; u < dh; ++u) acc += hidden[u] * blk.feat_weight2.at(u, j);
      g[i][j] = t[i][j] + acc;
    }
  }
  return g;
}

}  // namespace

TEST_CASE("instance normalization is definitional and invertible") {
  Tensor gamma = Tensor::full({1, 1}, 1.0);
  Tensor beta = Tensor::zeros({1, 1});
  Tensor x = Tensor::from_values({3, 1}, {1, 2, 3});
  auto st = compute_instance_stats(x);
  Tensor h = instance_normalize(x, st, gamma, beta);
  double mean = (h.at(0, 0) + h.at(1, 0) + h.at(2, 0)) / 3.0;
  double var = 0.0;
  for (int i = 0; i < 3; ++i) var += (h.at(i, 0) - mean) * (h.at(i, 0) - mean);
  var /= 3.0;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::abs(var - 1.0) < 1e-12);

  // constant column collapses to beta
  Tensor beta2 = Tensor::from_values({1, 1}, {0.7});
  Tensor xc = Tensor::full({5, 1}, 3.3);
  auto stc = compute_instance_stats(xc);
  Tensor hc = instance_normalize(xc, stc, gamma, beta2);
  for (double v : hc.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  // inverse recovers the input for nonzero gamma
  Rng rng(2);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor g = Tensor::uniform({1, 3}, 0.2, 2.0, rng);
    Tensor b = Tensor::uniform({1, 3}, -1.0, 1.0, rng);
    Tensor xr = Tensor::uniform({16, 3}, -3.0, 3.0, rng);
    auto str = compute_instance_stats(xr);
    Tensor fwd = instance_normalize(xr, str, g, b);
    Tensor back = instance_denormalize(fwd, str, g, b, {0, 1, 2});
    CHECK(max_abs_diff(back.values(), xr.values()) < 1e-10);
  }
}

TEST_CASE("residual mixer block reduces to identity with zero weights") {
  ModelConfig cfg = tiny_config();
  Rng rng(3);
  ModelParams p = ModelParams::init(cfg, rng);
  zero_block(p.blocks[0]);
  Tensor h = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);
  Rng drop(0);
  Tensor out = residual_mixer_block(h, p.blocks[0], cfg, true, drop);
  CHECK(max_abs_diff(out.values(), h.values()) == 0.0);
}

TEST_CASE("residual mixer block: dropout rate 0 makes training mode irrelevant") {
  ModelConfig cfg = tiny_config();
  Rng rng(4);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor h = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);
  Rng d1(1), d2(2);
  Tensor a = residual_mixer_block(h, p.blocks[0], cfg, true, d1);
  Tensor b = residual_mixer_block(h, p.blocks[0], cfg, false, d2);
  CHECK(max_abs_diff(a.values(), b.values()) == 0.0);
}

TEST_CASE("residual mixer block matches the scalar-loop oracle") {
  ModelConfig cfg = tiny_config();
  cfg.lookback = 4;
  Rng rng(5);
  ModelParams p = ModelParams::init(cfg, rng);
  // non-trivial affine values
  for (Tensor* t : {&p.blocks[0].norm1.gamma, &p.blocks[0].norm2.gamma})
    for (double& v : t->values()) v = 0.5 + 0.3 * rng.uniform();
  for (Tensor* t : {&p.blocks[0].norm1.beta, &p.blocks[0].norm2.beta})
    for (double& v : t->values()) v = rng.uniform(-0.2, 0.2);

  Tensor h = Tensor::uniform({4, 3}, -2.0, 2.0, rng);
  std::vector<std::vector<double>> hv(4, std::vector<double>(3));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) hv[i][j] = h.at(i, j);

  Rng drop(0);
  Tensor out = residual_mixer_block(h, p.blocks[0], cfg, false, drop);
  auto expect = oracle_block(hv, p.blocks[0], kBlockNormEps);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(out.at(i, j) - expect[i][j]) < 1e-12);
}

TEST_CASE("apply_stack composes blocks in order") {
  ModelConfig cfg = tiny_config();
  Rng rng(6);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor h = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);

  // singleton composition
  ModelConfig cfg1 = cfg;
  cfg1.depth = 1;
  ModelParams p1 = ModelParams::init(cfg1, rng);
  Rng d1(9), d2(9);
  Tensor via_stack = apply_stack(h, p1, cfg1, false, d1);
  Tensor via_block = residual_mixer_block(h, p1.blocks[0], cfg1, false, d2);
  CHECK(max_abs_diff(via_stack.values(), via_block.values()) == 0.0);

  // an identity tail block changes nothing
  ModelParams p2 = p1.clone();
  ModelParams ptail = ModelParams::init(cfg, rng);
  ptail.blocks[0] = p1.blocks[0];
  zero_block(ptail.blocks[1]);
  Rng d3(9);
  Tensor with_tail = apply_stack(h, ptail, cfg, false, d3);
  CHECK(max_abs_diff(with_tail.values(), via_stack.values()) == 0.0);

  // manual sequential calls agree bitwise
  Rng d4(9), d5(9);
  Tensor manual = h;
  for (auto& blk : p.blocks) manual = residual_mixer_block(manual, blk, cfg, false, d4);
  Tensor stacked = apply_stack(h, p, cfg, false, d5);
  CHECK(max_abs_diff(stacked.values(), manual.values()) == 0.0);
}

TEST_CASE("iterative refinement: base case and parameter-count invariance") {
  ModelConfig cfg = tiny_config();
  Rng rng(7);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor h = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);

  ModelConfig cfg1 = cfg;
  cfg1.rounds = 1;
  Rng d1(3), d2(3);
  Tensor once = iterative_refine(h, p, cfg1, false, d1);
  Tensor stack = apply_stack(h, p, cfg1, false, d2);
  CHECK(max_abs_diff(once.values(), stack.values()) == 0.0);

  long long base = 0;
  for (int n : {1, 2, 4, 8}) {
    ModelConfig c = cfg;
    c.rounds = n;
    Rng r2(11);
    ModelParams pn = ModelParams::init(c, r2);
    long long counted = count_parameters(pn);
    CHECK(counted == count_parameters(c));
    if (base == 0)
      base = counted;
    else
      CHECK(counted == base);
  }

  ModelConfig bad = cfg;
  bad.rounds = 0;
  CHECK_THROWS_AS(iterative_refine(h, p, bad, false, d1), ConfigError);
}

TEST_CASE("tied gradients equal the summed gradients of untied copies") {
  ModelConfig cfg = tiny_config();
  cfg.rounds = 2;
  cfg.dropout_rate = 0.2;  // exercised with live masks
  Rng rng(8);
  ModelParams tied = ModelParams::init(cfg, rng);
  ModelParams copy_a = tied.clone();
  ModelParams copy_b = tied.clone();
  Tensor h = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);
  Tensor u = Tensor::uniform({cfg.lookback, cfg.channels}, -1.0, 1.0, rng);

  // tied: the same stack applied twice
  {
    Tape tape;
    Rng drop(77);
    Tensor out = iterative_refine(h, tied, cfg, true, drop, &tape);
    backward(sum_all(multiply(out, u, &tape), &tape), tape);
  }
  // untied: two copies applied in sequence; same seed draws the same masks
  {
    ModelConfig cfg1 = cfg;
    cfg1.rounds = 1;
    Tape tape;
    Rng drop(77);
    Tensor mid = apply_stack(h, copy_a, cfg1, true, drop, &tape);
    Tensor out = apply_stack(mid, copy_b, cfg1, true, drop, &tape);
    backward(sum_all(multiply(out, u, &tape), &tape), tape);
  }

  auto tied_params = tied.learnables();
  auto a_params = copy_a.learnables();
  auto b_params = copy_b.learnables();
  for (std::size_t i = 2; i < tied_params.size() - 4; ++i) {  // the block tensors
    auto tg = tied_params[i]->grad();
    auto ag = a_params[i]->grad();
    auto bg = b_params[i]->grad();
    for (std::size_t k = 0; k < tg.size(); ++k)
      CHECK(std::abs(tg[k] - (ag[k] + bg[k])) < 1e-10);
  }
}

TEST_CASE("external attention: symmetry, zero correction, saturation") {
  Rng rng(9);
  const int L = 6, C = 3, S = 4;
  Tensor e = Tensor::uniform({S, C}, -0.5, 0.5, rng);
  Tensor v = Tensor::uniform({S, C}, -0.5, 0.5, rng);

  // zero input: uniform attention, correction is the column mean of V
  Tensor z = external_attention(Tensor::zeros({L, C}), e, v);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < C; ++j) {
      double colmean = 0.0;
      for (int s = 0; s < S; ++s) colmean += v.at(s, j);
      colmean /= S;
      CHECK(z.at(i, j) == doctest::Approx(colmean).epsilon(1e-12));
    }

  // zero values: exact identity
  Tensor h = Tensor::uniform({L, C}, -1.0, 1.0, rng);
  Tensor zi = external_attention(h, e, Tensor::zeros({S, C}));
  CHECK(max_abs_diff(zi.values(), h.values()) == 0.0);

  // saturated slot dominates: Z ~= H + V[s*,:]
  Tensor hp = Tensor::uniform({L, C}, 0.5, 1.5, rng);
  Tensor esat = e.clone();
  const int star = 2;
  for (int j = 0; j < C; ++j) esat.at(star, j) = 100.0;
  Tensor zs = external_attention(hp, esat, v);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < C; ++j) CHECK(std::abs(zs.at(i, j) - (hp.at(i, j) + v.at(star, j))) < 1e-6);
}

TEST_CASE("attention rows are a probability vector") {
  Rng rng(10);
  Tensor h = Tensor::uniform({12, 3}, -3.0, 3.0, rng);
  Tensor e = Tensor::uniform({5, 3}, -2.0, 2.0, rng);
  Tensor aff = matmul(h, transpose(e));
  Tensor a = row_softmax(aff);
  for (int i = 0; i < 12; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 5; ++j) {
      double p = a.at(i, j);
      CHECK(p > 0.0);
      CHECK(p < 1.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("attention cost grows linearly with the lookback") {
  Rng rng(11);
  const int C = 4, S = 8;
  Tensor e = Tensor::uniform({S, C}, -1.0, 1.0, rng);
  Tensor v = Tensor::uniform({S, C}, -1.0, 1.0, rng);
  Tensor h1 = Tensor::uniform({64, C}, -1.0, 1.0, rng);
  Tensor h2 = Tensor::uniform({128, C}, -1.0, 1.0, rng);
  opcount::reset();
  external_attention(h1, e, v);
  const auto f1 = opcount::flops();
  opcount::reset();
  external_attention(h2, e, v);
  const auto f2 = opcount::flops();
  CHECK(f2 <= 2 * f1);
}

TEST_CASE("forward: shape contract across config grid corners") {
  Rng rng(12);
  for (int rounds : {1, 4}) {
    for (int depth : {1, 3}) {
      for (NormKind kind : {NormKind::kLayer, NormKind::kBatch}) {
        ModelConfig cfg = tiny_config(kind);
        cfg.rounds = rounds;
        cfg.depth = depth;
        cfg.target_channels = {2};
        ModelParams p = ModelParams::init(cfg, rng);
        Rng drop(0);
        Tensor y = forward(Tensor::uniform({cfg.lookback, cfg.channels}, -1.0, 1.0, rng), p, cfg,
                           false, drop);
        CHECK(y.shape() == std::vector<int>{cfg.horizon, 1});
        Tensor yb = forward(Tensor::uniform({2, cfg.lookback, cfg.channels}, -1.0, 1.0, rng), p,
                            cfg, false, drop);
        CHECK(yb.shape() == std::vector<int>{2, cfg.horizon, 1});
      }
    }
  }
}

TEST_CASE("forward reduces to a closed-form affine readout with zero mixers and slots") {
  ModelConfig cfg = tiny_config();
  Rng rng(13);
  ModelParams p = ModelParams::init(cfg, rng);
  for (auto& blk : p.blocks) zero_block(blk);
  std::fill(p.slot_keys.values().begin(), p.slot_keys.values().end(), 0.0);
  std::fill(p.slot_values.values().begin(), p.slot_values.values().end(), 0.0);
  // random instance affine and head
  for (double& g : p.in_gamma.values()) g = 0.5 + rng.uniform();
  for (double& b : p.in_beta.values()) b = rng.uniform(-0.3, 0.3);

  Tensor x = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);
  Rng drop(0);
  Tensor got = forward(x, p, cfg, false, drop);

  // closed form: y = ((Wp * phi(x) + bp) - beta)/gamma * s + mu
  auto st = compute_instance_stats(x);
  const int L = cfg.lookback, C = cfg.channels, T = cfg.horizon;
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < C; ++j) {
      double acc = p.proj_bias.values()[t];
      for (int k = 0; k < L; ++k) {
        double h0 = p.in_gamma.values()[j] * (x.at(k, j) - st.mean.at(0, j)) / st.std.at(0, j) +
                    p.in_beta.values()[j];
        acc += p.proj_weight.at(t, k) * h0;
      }
      double expect = (acc - p.in_beta.values()[j]) / p.in_gamma.values()[j] * st.std.at(0, j) +
                      st.mean.at(0, j);
      CHECK(std::abs(got.at(t, j) - expect) < 1e-10);
    }
}

TEST_CASE("forward with dropout disabled at inference matches dropout-free config") {
  ModelConfig cfg = tiny_config();
  Rng rng(14);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor x = Tensor::uniform({cfg.lookback, cfg.channels}, -1.0, 1.0, rng);
  ModelConfig with_drop = cfg;
  with_drop.dropout_rate = 0.3;
  Rng d1(5), d2(6);
  Tensor a = forward(x, p, with_drop, false, d1);
  Tensor b = forward(x, p, cfg, false, d2);
  CHECK(max_abs_diff(a.values(), b.values()) == 0.0);
}

TEST_CASE("forward is deterministic when the dropout rate is zero") {
  ModelConfig cfg = tiny_config();
  Rng rng(15);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor x = Tensor::uniform({cfg.lookback, cfg.channels}, -1.0, 1.0, rng);
  Rng d1(111), d2(999);  // different seeds on purpose
  Tensor a = forward(x, p, cfg, true, d1);
  Tensor b = forward(x, p, cfg, true, d2);
  CHECK(a.values().size() == b.values().size());
  for (std::size_t i = 0; i < a.values().size(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("count_parameters closed form") {
  ModelConfig cfg = tiny_config();
  // head alone: T*L + T
  CHECK(cfg.horizon * cfg.lookback + cfg.horizon == 4 * 8 + 4);
  // slots alone: 2*S*C
  CHECK(2 * cfg.slots * cfg.channels == 24);
  // full tiny config: 2C + M(L^2+L+2*C*dh+dh+5C) + 2SC + TL + T
  const long long expected = 2 * 3 + 2 * (64 + 8 + 2 * 3 * 5 + 5 + 15) + 24 + 36;
  CHECK(count_parameters(cfg) == expected);
  Rng rng(16);
  ModelParams p = ModelParams::init(cfg, rng);
  CHECK(count_parameters(p) == expected);
}

TEST_CASE("end-to-end gradient check on the tiny config") {
  for (NormKind kind : {NormKind::kLayer, NormKind::kBatch}) {
    CAPTURE(to_string(kind));
    ModelConfig cfg = tiny_config(kind);
    Rng rng(17);
    ModelParams p = ModelParams::init(cfg, rng);
    // nudge affines off their init so their gradients are informative
    for (double& v : p.in_gamma.values()) v += rng.uniform(-0.2, 0.2);
    for (double& v : p.in_beta.values()) v += rng.uniform(-0.2, 0.2);

    Tensor x = Tensor::uniform({cfg.lookback, cfg.channels}, -2.0, 2.0, rng);
    Tensor u = Tensor::uniform({cfg.horizon, cfg.out_channels()}, -1.0, 1.0, rng);

    p.zero_grad();
    Tape tape;
    Rng drop(0);
    Tensor y = forward(x, p, cfg, true, drop, &tape);
    backward(sum_all(multiply(y, u, &tape), &tape), tape);

    auto objective = [&]() {
      Rng d(0);
      Tensor yy = forward(x, p, cfg, true, d);
      double s = 0.0;
      for (int i = 0; i < yy.size(); ++i) s += yy.values()[i] * u.values()[i];
      return s;
    };

    const double h = 1e-5;
    double worst = 0.0;
    for (auto& [name, t] : p.named()) {
      if (!t->requires_grad()) continue;
      auto vals = t->values();
      auto grads = t->grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + h;
        const double fp = objective();
        vals[i] = keep - h;
        const double fm = objective();
        vals[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, testutil::rel_err(grads[i], fd, 1e-4));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ModelConfig cfg = tiny_config(NormKind::kBatch);
  cfg.dropout_rate = 0.17;
  Rng rng(18);
  Checkpoint ck;
  ck.config = cfg;
  ck.params = ModelParams::init(cfg, rng);
  // perturb running stats so buffers round-trip too
  for (double& v : ck.params.blocks[0].norm1.running_mean.values()) v = rng.uniform(-1.0, 1.0);
  ck.data_stats.mean = {0.5, -1.25, 3.75};
  ck.data_stats.std = {1.5, 0.25, 2.0};
  ck.feature_names = {"a", "b", "c"};

  auto path = (std::filesystem::temp_directory_path() / "roundtrip.ckpt").string();
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.config.lookback == cfg.lookback);
  CHECK(back.config.dropout_rate == cfg.dropout_rate);
  CHECK(back.config.norm_kind == cfg.norm_kind);
  CHECK(back.feature_names == ck.feature_names);
  CHECK(back.data_stats.mean == ck.data_stats.mean);
  CHECK(back.data_stats.std == ck.data_stats.std);
  auto orig = ck.params.named();
  auto loaded = back.params.named();
  REQUIRE(orig.size() == loaded.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    auto a = orig[i].second->values();
    auto b = loaded[i].second->values();
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
  }

  // inference outputs agree bitwise
  Rng drop(0);
  Tensor x = Tensor::uniform({cfg.lookback, cfg.channels}, -1.0, 1.0, rng);
  Tensor y1 = forward(x, ck.params, cfg, false, drop);
  Tensor y2 = forward(x, back.params, back.config, false, drop);
  for (int i = 0; i < y1.size(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}

TEST_CASE("config validation rejects bad fields") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_rate = 0.6;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.target_channels = {3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.target_channels = {1, 1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.rounds = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
