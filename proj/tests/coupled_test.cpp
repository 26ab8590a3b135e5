// Oracle tests for the coupled forecaster: deterministic construction and the
// published-scale parameter audit, bundle shapes, bit-exact identity at zero
// initialization for one step and an eight-step rollout, rollout/step
// equivalence, the unidirectional variant against the pure global model, the
// frozen-global contract, loss-formula oracles, and end-to-end finite
// differences on a toy configuration.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "scalemix/coupled.hpp"

using namespace scalemix;

namespace {

ModelConfig mix_config(bool zero_residual) {
  RunConfig cfg = preset("desk");
  ModelConfig mc = cfg.model;
  mc.H = 20;
  mc.W = 68;
  mc.V_A = 1;
  mc.P_levels = 1;
  mc.V_S = 1;
  mc.P = 4;
  mc.d = 8;
  mc.M = 4;
  mc.k = 2;
  mc.heads = 2;
  mc.m = 4;
  mc.region_h = 40;
  mc.region_w = 60;
  mc.p = 20;
  mc.region_off_y = 20;
  mc.region_off_x = 40;
  mc.d_pi = 4;
  mc.d_f = 4;
  mc.ffn_mult = 2;
  mc.zero_residual_init = zero_residual;
  cfg.model = mc;
  validate(cfg);
  return mc;
}

ModelConfig toy_config() {
  RunConfig cfg = preset("desk");
  ModelConfig mc = cfg.model;
  mc.H = 8;
  mc.W = 8;
  mc.V_A = 1;
  mc.P_levels = 1;
  mc.V_S = 1;
  mc.P = 4;
  mc.d = 8;
  mc.M = 1;
  mc.k = 1;
  mc.heads = 2;
  mc.m = 2;
  mc.region_h = 20;
  mc.region_w = 20;
  mc.p = 20;
  mc.region_off_y = 0;
  mc.region_off_x = 0;
  mc.d_pi = 4;
  mc.d_f = 4;
  mc.ffn_mult = 2;
  mc.zero_residual_init = false;
  cfg.model = mc;
  validate(cfg);
  return mc;
}

Tensor random_tensor(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

Tensor random_field(const ModelConfig& mc, uint64_t seed) {
  Rng rng = named_rng(seed, "test/coupled_field");
  return random_tensor({mc.H, mc.W, mc.channels()}, rng);
}

RegionalState make_state(const ModelConfig& mc, uint64_t seed) {
  Rng rng = named_rng(seed, "test/coupled_state");
  RegionalState st;
  for (int f = 0; f < 6; ++f)
    st.history.push_back(random_tensor({mc.region_h, mc.region_w, mc.V_reg}, rng));
  st.topography = random_tensor({mc.region_h, mc.region_w, 1}, rng);
  st.land_sea_mask = random_tensor({mc.region_h, mc.region_w, 1}, rng);
  st.hour_of_day = 13.0;
  st.day_of_year = 87.0;
  return st;
}

}  // namespace

// ----- construction ----------------------------------------------------------------

TEST(BuildModel, SameSeedIsBitIdenticalAndDeskBuildsFast) {
  ModelConfig mc = preset("desk").model;
  const auto t0 = std::chrono::steady_clock::now();
  ParamStore a = build_model(mc, 11);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  EXPECT_LT(secs, 1.0);
  ParamStore b = build_model(mc, 11);
  ASSERT_EQ(a.specs().size(), b.specs().size());
  for (const auto& spec : a.specs())
    EXPECT_TRUE(a.value(spec.name).bit_equal(b.value(spec.name))) << spec.name;
  ParamStore c = build_model(mc, 12);
  EXPECT_FALSE(a.value("global.enc0.attn.q.w")
                   .bit_equal(c.value("global.enc0.attn.q.w")));
}

TEST(BuildModel, PublishedScaleParameterAudit) {
  ModelConfig mc = preset("paper").model;
  std::vector<ParamSpec> specs;
  spec_coupled_model(specs, mc);
  ParamStore store;
  store.define_all(specs);  // counting only — never allocates 1.1B doubles
  EXPECT_EQ(store.count(), 1116102142);
  EXPECT_GE(store.count(), static_cast<int64_t>(1.07e9 * 0.95));
  EXPECT_LE(store.count(), static_cast<int64_t>(1.07e9 * 1.05));
}

// ----- one forecast step --------------------------------------------------------------

TEST(ForwardStep, BundleShapesOnDeskPreset) {
  ModelConfig mc = preset("desk").model;
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 21);
  Graph g;
  Binder B(g, store, false);
  ForecastBundle fb = forward_step(B, mc, geom, g.constant(random_field(mc, 21)),
                                   make_state(mc, 21));
  ASSERT_TRUE(fb.global.valid());
  EXPECT_EQ(fb.global.shape(), (Shape{32, 64, 6}));
  ASSERT_EQ(fb.regional.size(), 6u);
  for (const Tensor& u : fb.regional)
    EXPECT_EQ(u.shape(), (Shape{40, 60, 7}));
}

TEST(ForwardStep, IdentityAtZeroInitialization) {
  ModelConfig mc = preset("desk").model;
  mc.zero_residual_init = true;
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 25);
  Tensor field = random_field(mc, 25);
  RegionalState state = make_state(mc, 25);
  Graph g;
  Binder B(g, store, false);
  ForecastBundle fb = forward_step(B, mc, geom, g.constant(field), state);
  // Global: prediction equals the non-static input channels bit-exactly.
  for (int64_t i = 0; i < mc.H; ++i)
    for (int64_t j = 0; j < mc.W; ++j)
      for (int64_t c = 0; c < mc.pred_channels(); ++c)
        ASSERT_EQ(fb.global.at({i, j, c}), field.at({i, j, c}));
  // Regional: every lead time reproduces the last history frame bit-exactly.
  for (const Tensor& u : fb.regional)
    ASSERT_TRUE(u.bit_equal(state.history.back()));
}

TEST(ForwardStep, UnidirectionalGlobalStreamMatchesPureGlobalModel) {
  ModelConfig mc = mix_config(false);
  mc.coupling = "unidirectional";
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 29);
  Tensor field = random_field(mc, 29);
  Graph g;
  Binder B(g, store, false);
  ForecastBundle fb = forward_step(B, mc, geom, g.constant(field),
                                   make_state(mc, 29));
  Graph g2;
  Binder B2(g2, store, false);
  Tensor pure = global_forward(B2, mc, g2.constant(field));
  EXPECT_TRUE(fb.global.bit_equal(pure));
}

TEST(ForwardStep, StandaloneVariantNeverTouchesTheGlobalStream) {
  ModelConfig mc = mix_config(false);
  mc.coupling = "none";
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 33);
  Graph g;
  Binder B(g, store, false);
  ForecastBundle fb = forward_step(B, mc, geom, g.constant(random_field(mc, 33)),
                                   make_state(mc, 33));
  EXPECT_FALSE(fb.global.valid());
  ASSERT_EQ(fb.regional.size(), 6u);
  for (const auto& [name, node] : B.bound()) {
    EXPECT_NE(name.rfind("global.", 0), 0u) << name;
    EXPECT_NE(name.rfind("mixer", 0), 0u) << name;
  }
}

// ----- rollout -------------------------------------------------------------------

TEST(Rollout, OneStepEqualsForwardStepBitExactly) {
  ModelConfig mc = mix_config(false);
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 37);
  Tensor field = random_field(mc, 37);
  RegionalState state = make_state(mc, 37);
  Graph g1;
  Binder B1(g1, store, false);
  std::vector<ForecastBundle> steps =
      rollout(B1, mc, geom, g1.constant(field), state, 1);
  ASSERT_EQ(steps.size(), 1u);
  Graph g2;
  Binder B2(g2, store, false);
  ForecastBundle fb = forward_step(B2, mc, geom, g2.constant(field), state);
  EXPECT_TRUE(steps[0].global.bit_equal(fb.global));
  for (int i = 0; i < 6; ++i)
    EXPECT_TRUE(steps[0].regional[static_cast<size_t>(i)].bit_equal(
        fb.regional[static_cast<size_t>(i)]));
}

TEST(Rollout, RejectsNonPositiveStepCounts) {
  ModelConfig mc = mix_config(false);
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 41);
  Graph g;
  Binder B(g, store, false);
  EXPECT_THROW(rollout(B, mc, geom, g.constant(random_field(mc, 41)),
                       make_state(mc, 41), 0),
               ContractError);
}

TEST(Rollout, IdentityModelIsAFixedPointOverEightSteps) {
  ModelConfig mc = preset("desk").model;
  mc.zero_residual_init = true;
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 45);
  Tensor field = random_field(mc, 45);
  RegionalState state = make_state(mc, 45);
  Graph g;
  Binder B(g, store, false);
  std::vector<ForecastBundle> steps =
      rollout(B, mc, geom, g.constant(field), state, 8);
  ASSERT_EQ(steps.size(), 8u);
  const Tensor& last = state.history.back();
  for (const ForecastBundle& fb : steps) {
    for (int64_t i = 0; i < mc.H; ++i)
      for (int64_t j = 0; j < mc.W; ++j)
        for (int64_t c = 0; c < mc.pred_channels(); ++c)
          ASSERT_EQ(fb.global.at({i, j, c}), field.at({i, j, c}));
    for (const Tensor& u : fb.regional) ASSERT_TRUE(u.bit_equal(last));
  }
}

TEST(Rollout, GradientFlowsThroughTheAutoregressiveChain) {
  ModelConfig mc = toy_config();
  mc.sampling = "fixed_grid";  // input-independent selection keeps FD stable
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 49);
  Tensor field0 = random_field(mc, 49);
  RegionalState state = make_state(mc, 49);
  Rng rng = named_rng(49, "test/rollout_truth");
  Tensor truth = random_tensor({mc.region_h, mc.region_w, mc.V_reg}, rng);

  auto loss_at = [&](const Tensor& fv) {
    Graph g;
    Binder B(g, store, false);
    std::vector<ForecastBundle> steps =
        rollout(B, mc, geom, g.constant(fv), state, 2);
    return regional_mae(g, steps[1].regional[5], g.constant(truth))[0];
  };

  Graph g;
  Binder B(g, store, false);
  Tensor fparam = g.param(field0);
  std::vector<ForecastBundle> steps = rollout(B, mc, geom, fparam, state, 2);
  Tensor loss = regional_mae(g, steps[1].regional[5], g.constant(truth));
  g.backward(loss);
  Tensor fgrad = g.grad(fparam);

  double max_abs = 0.0;
  for (int64_t i = 0; i < fgrad.numel(); ++i)
    max_abs = std::max(max_abs, std::abs(fgrad[i]));
  EXPECT_GT(max_abs, 1e-12);  // step-2 loss reaches the step-1 global input

  const double eps = 1e-5;
  for (int64_t i = 0; i < field0.numel(); i += 37) {
    std::vector<double> plus(field0.data()), minus(field0.data());
    plus[static_cast<size_t>(i)] += eps;
    minus[static_cast<size_t>(i)] -= eps;
    const double fd = (loss_at(Tensor(field0.shape(), std::move(plus))) -
                       loss_at(Tensor(field0.shape(), std::move(minus)))) /
                      (2 * eps);
    const double denom = std::max({std::abs(fgrad[i]), std::abs(fd), 1.0});
    ASSERT_LT(std::abs(fgrad[i] - fd) / denom, 1e-4) << "field[" << i << "]";
  }
}

// ----- frozen-global contract ---------------------------------------------------------

TEST(FreezeContract, GradientsReachOnlyRegionalAndMixerParameters) {
  ModelConfig mc = mix_config(false);
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 53);
  Rng rng = named_rng(53, "test/freeze_truth");
  Graph g;
  Binder B(g, store, true);
  B.set_trainable_filter(
      [](const std::string& name) { return name.rfind("global.", 0) != 0; });
  ForecastBundle fb = forward_step(B, mc, geom, g.constant(random_field(mc, 53)),
                                   make_state(mc, 53));
  Tensor loss;
  for (const Tensor& u : fb.regional) {
    Tensor truth = g.constant(
        random_tensor({mc.region_h, mc.region_w, mc.V_reg}, rng));
    Tensor term = regional_mae(g, u, truth);
    loss = loss.valid() ? g.add(loss, term) : term;
  }
  g.backward(loss);

  bool saw_global = false;
  for (const auto& [name, node] : B.bound()) {
    if (name.rfind("global.", 0) == 0) {
      saw_global = true;
      EXPECT_FALSE(g.requires_grad(node)) << name << " must be frozen";
    } else {
      EXPECT_TRUE(g.requires_grad(node)) << name << " must be trainable";
    }
  }
  EXPECT_TRUE(saw_global);

  for (const char* name : {"mixer0.g2p.q.w", "mixer1.adapter.fc1.w",
                           "regional.enc0.attn.q.w", "regional.head3.lin.w",
                           "regional.patch.kernel"}) {
    Tensor grad;
    for (const auto& [n, node] : B.bound())
      if (n == name) grad = g.grad(node);
    ASSERT_TRUE(grad.valid()) << name;
    double max_abs = 0.0;
    for (int64_t i = 0; i < grad.numel(); ++i)
      max_abs = std::max(max_abs, std::abs(grad[i]));
    EXPECT_GT(max_abs, 1e-15) << name;
  }
}

// ----- loss oracles --------------------------------------------------------------

TEST(GlobalLoss, EqualityGivesZeroAndUniformErrorGivesOne) {
  ModelConfig mc = mix_config(false);
  Rng rng = named_rng(57, "test/gloss");
  Tensor truth = random_tensor({mc.H, mc.W, mc.pred_channels()}, rng);
  Graph g;
  EXPECT_EQ(global_weighted_mae(g, mc, g.constant(truth), g.constant(truth))[0],
            0.0);
  std::vector<double> shifted(truth.data());
  for (auto& x : shifted) x += 1.0;
  Tensor pred(truth.shape(), std::move(shifted));
  EXPECT_NEAR(global_weighted_mae(g, mc, g.constant(pred), g.constant(truth))[0],
              1.0, 1e-12);
}

TEST(GlobalLoss, PerLevelAveragingAndWeightLinearity) {
  ModelConfig mc = mix_config(false);
  mc.P_levels = 2;  // C_pred = 1*2 + 1 = 3
  Graph g;
  // Error 1 on the first upper-air level only:
  // (1/(V_S+V_A)) * (1/P_levels) * 1 = 1/4.
  Tensor truth = Tensor::zeros({mc.H, mc.W, 3});
  std::vector<double> pv(static_cast<size_t>(mc.H * mc.W * 3), 0.0);
  for (int64_t i = 0; i < mc.H * mc.W; ++i) pv[static_cast<size_t>(i) * 3] = 1.0;
  Tensor pred({mc.H, mc.W, 3}, std::move(pv));
  EXPECT_NEAR(global_weighted_mae(g, mc, g.constant(pred), g.constant(truth))[0],
              0.25, 1e-12);
  // Doubling that level's weight doubles the loss.
  EXPECT_NEAR(global_weighted_mae(g, mc, g.constant(pred), g.constant(truth),
                                  {1.0}, {2.0, 1.0})[0],
              0.5, 1e-12);
  // Error 1 on the surface channel only: weight enters linearly.
  std::vector<double> sv(static_cast<size_t>(mc.H * mc.W * 3), 0.0);
  for (int64_t i = 0; i < mc.H * mc.W; ++i)
    sv[static_cast<size_t>(i) * 3 + 2] = 1.0;
  Tensor spred({mc.H, mc.W, 3}, std::move(sv));
  EXPECT_NEAR(global_weighted_mae(g, mc, g.constant(spred), g.constant(truth),
                                  {3.0}, {1.0, 1.0})[0],
              1.5, 1e-12);
}

TEST(GlobalLoss, RejectsBadShapesAndWeightLengths) {
  ModelConfig mc = mix_config(false);
  Graph g;
  Tensor ok = Tensor::zeros({mc.H, mc.W, mc.pred_channels()});
  Tensor bad = Tensor::zeros({mc.H, mc.W, mc.pred_channels() + 1});
  EXPECT_THROW(global_weighted_mae(g, mc, g.constant(bad), g.constant(ok)),
               ShapeError);
  EXPECT_THROW(global_weighted_mae(g, mc, g.constant(ok), g.constant(ok),
                                   {1.0, 1.0}, {}),
               ConfigError);
  EXPECT_THROW(global_weighted_mae(g, mc, g.constant(ok), g.constant(ok), {},
                                   {1.0, 1.0, 1.0}),
               ConfigError);
}

TEST(GlobalLoss, PermutationInvariantOverGridCells) {
  ModelConfig mc = mix_config(false);
  const int64_t n = mc.H * mc.W, c = mc.pred_channels();
  Rng rng = named_rng(61, "test/gloss_perm");
  Tensor pred = random_tensor({mc.H, mc.W, c}, rng);
  Tensor truth = random_tensor({mc.H, mc.W, c}, rng);
  std::vector<int64_t> perm = rng.sample_without_replacement(n, n);
  std::vector<double> pp(static_cast<size_t>(n * c)), tp(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      pp[static_cast<size_t>(perm[static_cast<size_t>(i)] * c + j)] =
          pred[i * c + j];
      tp[static_cast<size_t>(perm[static_cast<size_t>(i)] * c + j)] =
          truth[i * c + j];
    }
  Graph g;
  const double base =
      global_weighted_mae(g, mc, g.constant(pred), g.constant(truth))[0];
  const double permuted = global_weighted_mae(
      g, mc, g.constant(Tensor({mc.H, mc.W, c}, std::move(pp))),
      g.constant(Tensor({mc.H, mc.W, c}, std::move(tp))))[0];
  EXPECT_NEAR(base, permuted, 1e-12);
  EXPECT_GT(base, 0.0);
}

TEST(RegionalLoss, OracleCases) {
  ModelConfig mc = mix_config(false);
  Rng rng = named_rng(65, "test/rloss");
  Tensor truth = random_tensor({mc.region_h, mc.region_w, mc.V_reg}, rng);
  Graph g;
  EXPECT_EQ(regional_mae(g, g.constant(truth), g.constant(truth))[0], 0.0);
  // +c on a single variable -> c / V_reg.
  const double c = 0.75;
  std::vector<double> pv(truth.data());
  for (int64_t i = 0; i < mc.region_h * mc.region_w; ++i)
    pv[static_cast<size_t>(i * mc.V_reg + 2)] += c;
  Tensor pred(truth.shape(), std::move(pv));
  EXPECT_NEAR(regional_mae(g, g.constant(pred), g.constant(truth))[0],
              c / static_cast<double>(mc.V_reg), 1e-12);
  // Symmetry is exact: |a-b| and |b-a| are the same doubles.
  EXPECT_EQ(regional_mae(g, g.constant(pred), g.constant(truth))[0],
            regional_mae(g, g.constant(truth), g.constant(pred))[0]);
  EXPECT_THROW(regional_mae(g, g.constant(truth),
                            g.constant(Tensor::zeros({2, 2, 2}))),
               ShapeError);
}

// ----- end-to-end finite differences -------------------------------------------------

TEST(CoupledGrad, WholeModelMatchesFiniteDifferences) {
  ModelConfig mc = toy_config();
  RegionGeom geom = RegionGeom::from_config(mc);
  ParamStore store = build_model(mc, 69);
  Tensor field0 = random_field(mc, 69);
  RegionalState state = make_state(mc, 69);
  Rng rng = named_rng(69, "test/coupled_truth");
  Tensor gtruth = random_tensor({mc.H, mc.W, mc.pred_channels()}, rng);
  std::vector<Tensor> rtruth;
  for (int dt = 0; dt < 6; ++dt)
    rtruth.push_back(random_tensor({mc.region_h, mc.region_w, mc.V_reg}, rng));

  auto loss_with = [&](const ParamStore& st, const Tensor& fv) {
    Graph g;
    Binder B(g, st, false);
    ForecastBundle fb = forward_step(B, mc, geom, g.constant(fv), state);
    Tensor loss = global_weighted_mae(g, mc, fb.global, g.constant(gtruth));
    for (int dt = 0; dt < 6; ++dt)
      loss = g.add(loss, regional_mae(g, fb.regional[static_cast<size_t>(dt)],
                                      g.constant(rtruth[static_cast<size_t>(dt)])));
    return loss[0];
  };

  // Precondition: stable selection under the probe step (see the mixer test).
  {
    Graph g;
    Binder B(g, store, false);
    Tensor S = global_encode_range(B, mc, global_patchify(B, mc, g.constant(field0)),
                                   0, mc.L());
    KeyPositions kps = identify_key_positions(B, mc, "mixer0.pi", S);
    std::vector<double> sorted = kps.pr.data();
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    ASSERT_GT(sorted[static_cast<size_t>(mc.m - 1)] -
                  sorted[static_cast<size_t>(mc.m)],
              1e-3);
  }

  Graph g;
  Binder B(g, store, true);
  Tensor fparam = g.param(field0);
  ForecastBundle fb = forward_step(B, mc, geom, fparam, state);
  Tensor loss = global_weighted_mae(g, mc, fb.global, g.constant(gtruth));
  for (int dt = 0; dt < 6; ++dt)
    loss = g.add(loss, regional_mae(g, fb.regional[static_cast<size_t>(dt)],
                                    g.constant(rtruth[static_cast<size_t>(dt)])));
  g.backward(loss);

  const double eps = 1e-5, tol = 1e-4;
  size_t checked = 0;
  for (const auto& [name, node] : B.bound()) {
    Tensor base = store.value(name);
    Tensor ad = g.grad_or_zero(node);
    const int64_t n = base.numel();
    const int64_t stride = std::max<int64_t>(1, n / 3);
    for (int64_t i = 0; i < n; i += stride) {
      std::vector<double> plus(base.data()), minus(base.data());
      plus[static_cast<size_t>(i)] += eps;
      minus[static_cast<size_t>(i)] -= eps;
      ParamStore a = store, b = store;
      a.set_value(name, Tensor(base.shape(), std::move(plus)));
      b.set_value(name, Tensor(base.shape(), std::move(minus)));
      const double fd =
          (loss_with(a, field0) - loss_with(b, field0)) / (2 * eps);
      const double denom = std::max({std::abs(ad[i]), std::abs(fd), 1.0});
      ASSERT_LT(std::abs(ad[i] - fd) / denom, tol) << name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 150u);  // every named parameter probed at least once

  Tensor fgrad = g.grad(fparam);
  for (int64_t i = 0; i < field0.numel(); i += 11) {
    std::vector<double> plus(field0.data()), minus(field0.data());
    plus[static_cast<size_t>(i)] += eps;
    minus[static_cast<size_t>(i)] -= eps;
    const double fd = (loss_with(store, Tensor(field0.shape(), std::move(plus))) -
                       loss_with(store, Tensor(field0.shape(), std::move(minus)))) /
                      (2 * eps);
    const double denom = std::max({std::abs(fgrad[i]), std::abs(fd), 1.0});
    ASSERT_LT(std::abs(fgrad[i] - fd) / denom, tol) << "field[" << i << "]";
  }
}
