// Tests for the global forecaster: patch embedding, encoder-range
// composition, residual head over predicted channels, identity at
// initialization, gradient spot checks against finite differences, and the
// parameter audit at published scale (counting shapes only, never allocating).

#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "scalemix/config.hpp"
#include "scalemix/global_model.hpp"

using namespace scalemix;

namespace {

Tensor random_field(const ModelConfig& mc, uint64_t seed) {
  Rng rng = named_rng(seed, "test/global_field");
  std::vector<double> v(static_cast<size_t>(mc.H * mc.W * mc.channels()));
  for (auto& x : v) x = rng.normal();
  return Tensor({mc.H, mc.W, mc.channels()}, std::move(v));
}

// Small non-degenerate configuration so whole-model finite differences stay
// cheap: 8x16 grid, 4 channels (2 predicted), 8 tokens of width 8.
ModelConfig tiny_config(bool zero_residual) {
  RunConfig cfg = preset("desk");
  ModelConfig mc = cfg.model;
  mc.H = 8;
  mc.W = 16;
  mc.V_A = 1;
  mc.P_levels = 1;
  mc.V_S = 1;
  mc.P = 4;
  mc.d = 8;
  mc.M = 2;
  mc.k = 1;
  mc.heads = 2;
  mc.m = 4;
  mc.p = 20;
  mc.region_h = 20;
  mc.region_w = 20;
  mc.region_off_y = 0;
  mc.region_off_x = 0;
  mc.d_pi = 4;
  mc.d_f = 4;
  mc.ffn_mult = 2;
  mc.zero_residual_init = zero_residual;
  cfg.model = mc;
  validate(cfg);
  return mc;
}

ParamStore make_store(const ModelConfig& mc, uint64_t seed) {
  std::vector<ParamSpec> specs;
  spec_global_model(specs, mc);
  ParamStore store;
  store.define_all(specs);
  store.init_all(seed);
  return store;
}

}  // namespace

// ----- patch embedding ---------------------------------------------------------

TEST(GlobalModel, PatchifyYieldsTokenGridPlusPositionEmbedding) {
  ModelConfig mc = preset("desk").model;
  ParamStore store = make_store(mc, 7);
  Tensor field = random_field(mc, 7);

  Graph g;
  Binder B(g, store, false);
  Tensor tokens = global_patchify(B, mc, field);
  ASSERT_EQ(tokens.shape(), (Shape{128, 96}));

  // Same arithmetic spelled out by hand: conv patchify then add the learned
  // position embedding.
  Graph h;
  Tensor conv = h.conv_patchify(h.constant(field),
                                h.constant(store.value("global.patch.kernel")),
                                h.constant(store.value("global.patch.bias")), mc.P);
  Tensor expect = h.add(conv, h.constant(store.value("global.pos")));
  EXPECT_TRUE(tokens.bit_equal(expect));
}

TEST(GlobalModel, PatchifyRejectsWrongFieldShape) {
  ModelConfig mc = preset("desk").model;
  ParamStore store = make_store(mc, 7);
  Graph g;
  Binder B(g, store, false);
  Tensor bad = Tensor::zeros({mc.H, mc.W, mc.channels() + 1});
  EXPECT_THROW(global_patchify(B, mc, bad), ShapeError);
}

// ----- encoder range composition -------------------------------------------------

TEST(GlobalModel, EncodeRangeComposesBitExactly) {
  ModelConfig mc = tiny_config(false);  // random residual projections
  ParamStore store = make_store(mc, 11);
  Rng rng = named_rng(11, "test/tokens");
  std::vector<double> tv(static_cast<size_t>(mc.global_tokens() * mc.d));
  for (auto& x : tv) x = rng.normal();
  Tensor tokens0({mc.global_tokens(), mc.d}, std::move(tv));

  Graph g1;
  Binder B1(g1, store, false);
  Tensor full = global_encode_range(B1, mc, g1.constant(tokens0), 0, mc.M);

  Graph g2;
  Binder B2(g2, store, false);
  Tensor part = global_encode_range(B2, mc, g2.constant(tokens0), 0, 1);
  part = global_encode_range(B2, mc, part, 1, mc.M);

  EXPECT_TRUE(full.bit_equal(part));
}

TEST(GlobalModel, EncodeRangeEmptyAndInvalidRanges) {
  ModelConfig mc = tiny_config(false);
  ParamStore store = make_store(mc, 3);
  Graph g;
  Binder B(g, store, false);
  Tensor tokens = g.constant(Tensor::full({mc.global_tokens(), mc.d}, 0.25));
  Tensor same = global_encode_range(B, mc, tokens, 1, 1);
  EXPECT_TRUE(same.bit_equal(tokens));
  EXPECT_THROW(global_encode_range(B, mc, tokens, 2, 1), ContractError);
  EXPECT_THROW(global_encode_range(B, mc, tokens, 0, mc.M + 1), ContractError);
  EXPECT_THROW(global_encode_range(B, mc, tokens, -1, 1), ContractError);
}

TEST(GlobalModel, AttentionProbeCoversEveryLayerAndHead) {
  ModelConfig mc = tiny_config(false);
  ParamStore store = make_store(mc, 5);
  Graph g;
  Binder B(g, store, false);
  AttnProbe probe;
  Tensor field = random_field(mc, 5);
  global_forward(B, mc, field, &probe);
  ASSERT_EQ(probe.entries.size(), static_cast<size_t>(mc.M * mc.heads));
  EXPECT_EQ(probe.entries[0].site, "global.enc0/h0");
  for (const auto& e : probe.entries) {
    ASSERT_EQ(e.weights.shape(), (Shape{mc.global_tokens(), mc.global_tokens()}));
    for (int64_t q = 0; q < e.weights.dim(0); ++q) {
      double s = 0.0;
      for (int64_t kk = 0; kk < e.weights.dim(1); ++kk) s += e.weights.at({q, kk});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

// ----- head and identity at initialization ---------------------------------------

TEST(GlobalModel, ForwardShapeExcludesStaticChannels) {
  ModelConfig mc = tiny_config(false);
  ParamStore store = make_store(mc, 13);
  Graph g;
  Binder B(g, store, false);
  Tensor out = global_forward(B, mc, random_field(mc, 13));
  EXPECT_EQ(out.shape(), (Shape{mc.H, mc.W, mc.pred_channels()}));
}

TEST(GlobalModel, ZeroInitializedForwardIsBitExactIdentity) {
  ModelConfig mc = preset("desk").model;  // zero_residual_init = true
  ParamStore store = make_store(mc, 21);
  Tensor field = random_field(mc, 21);
  Graph g;
  Binder B(g, store, false);
  Tensor out = global_forward(B, mc, field);
  ASSERT_EQ(out.shape(), (Shape{mc.H, mc.W, mc.pred_channels()}));
  for (int64_t i = 0; i < mc.H; ++i)
    for (int64_t j = 0; j < mc.W; ++j)
      for (int64_t c = 0; c < mc.pred_channels(); ++c)
        ASSERT_EQ(out.at({i, j, c}), field.at({i, j, c}))
            << "(" << i << "," << j << "," << c << ")";
}

TEST(GlobalModel, ResidualBaseIsThePredictedChannelSlice) {
  // Random everywhere except a zeroed head deconv: the output must equal the
  // predicted-channel slice of the input exactly, proving the residual path
  // never reads static channels.
  ModelConfig mc = tiny_config(false);
  ParamStore store = make_store(mc, 31);
  store.set_value("global.head.kernel",
                  Tensor::zeros({mc.P, mc.P, mc.pred_channels(), mc.d}));
  store.set_value("global.head.bias", Tensor::zeros({mc.pred_channels()}));
  Tensor field = random_field(mc, 31);
  Graph g;
  Binder B(g, store, false);
  Tensor out = global_forward(B, mc, field);
  for (int64_t i = 0; i < mc.H; ++i)
    for (int64_t j = 0; j < mc.W; ++j)
      for (int64_t c = 0; c < mc.pred_channels(); ++c)
        ASSERT_EQ(out.at({i, j, c}), field.at({i, j, c}));
}

// ----- gradients through the whole model ------------------------------------------

TEST(GlobalModel, GradientsMatchFiniteDifferencesThroughWholeModel) {
  ModelConfig mc = tiny_config(false);
  ParamStore store = make_store(mc, 41);
  Tensor field = random_field(mc, 41);
  Rng rng = named_rng(41, "test/proj");
  std::vector<double> pv(static_cast<size_t>(mc.H * mc.W * mc.pred_channels()));
  for (auto& x : pv) x = rng.normal();
  Tensor proj({mc.H, mc.W, mc.pred_channels()}, std::move(pv));

  auto loss_with = [&](const ParamStore& s, const Tensor& f) {
    Graph g;
    Binder B(g, s, false);
    Tensor out = global_forward(B, mc, f);
    return g.sum_all(g.mul(out, g.constant(proj)))[0];
  };

  // Analytic gradients for every parameter and the input field.
  Graph g;
  Binder B(g, store, true);
  Tensor fin = g.param(field);
  Tensor loss = g.sum_all(g.mul(global_forward(B, mc, fin), g.constant(proj)));
  g.backward(loss);

  const double eps = 1e-5, tol = 1e-4;
  // Input field: full finite-difference sweep.
  {
    Tensor fd = finite_diff_grad(
        [&](const Tensor& f) { return loss_with(store, f); }, field, eps);
    Tensor ad = g.grad(fin);
    for (int64_t i = 0; i < fd.numel(); ++i) {
      const double denom = std::max({std::abs(ad[i]), std::abs(fd[i]), 1.0});
      ASSERT_LT(std::abs(ad[i] - fd[i]) / denom, tol) << "field[" << i << "]";
    }
  }
  // Parameters: strided entries of every tensor bound in the graph.
  for (const auto& [name, node] : B.bound()) {
    Tensor base = store.value(name);
    Tensor ad = g.grad_or_zero(node);
    const int64_t n = base.numel();
    const int64_t stride = std::max<int64_t>(1, n / 5);
    for (int64_t i = 0; i < n; i += stride) {
      std::vector<double> plus(base.data()), minus(base.data());
      plus[static_cast<size_t>(i)] += eps;
      minus[static_cast<size_t>(i)] -= eps;
      ParamStore sp = store, sm = store;
      sp.set_value(name, Tensor(base.shape(), std::move(plus)));
      sm.set_value(name, Tensor(base.shape(), std::move(minus)));
      const double fd = (loss_with(sp, field) - loss_with(sm, field)) / (2 * eps);
      const double denom = std::max({std::abs(ad[i]), std::abs(fd), 1.0});
      ASSERT_LT(std::abs(ad[i] - fd) / denom, tol) << name << "[" << i << "]";
    }
  }
}

// ----- parameter audit at published scale -----------------------------------------

TEST(GlobalModel, DeskParameterCountMatchesClosedForm) {
  ModelConfig mc = preset("desk").model;
  std::vector<ParamSpec> specs;
  spec_global_model(specs, mc);
  ParamStore store;
  store.define_all(specs);
  // Closed-form count, written out independently of the registry:
  const int64_t d = 96, P = 4, C = 8, Cp = 6, N = 128, M = 8, mult = 4;
  const int64_t patch = P * P * C * d + d;
  const int64_t pos = N * d;
  const int64_t block = 2 * d            // ln1
                        + 4 * (d * d + d)  // q, k, v, o
                        + 2 * d            // ln2
                        + (d * mult * d + mult * d) + (mult * d * d + d);
  const int64_t head = 2 * d + (d * d + d) + P * P * Cp * d + Cp;
  EXPECT_EQ(store.count(), patch + pos + M * block + head);
}

TEST(GlobalModel, PublishedScaleAuditCountsWithoutAllocating) {
  ModelConfig mc = preset("paper").model;
  EXPECT_EQ(mc.global_tokens(), 28800);
  std::vector<ParamSpec> specs;
  spec_global_model(specs, mc);
  ParamStore store;
  store.define_all(specs);  // shapes only; values are never initialized
  const int64_t count = store.count();
  EXPECT_EQ(count, 734632008);
  const double target = 736e6;
  EXPECT_LE(std::abs(static_cast<double>(count) - target) / target, 0.05);
}
