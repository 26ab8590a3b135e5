#pragma once
// Coupled global-regional forecaster. One step interleaves k coupling blocks
// (L global encoder layers, one regional encoder layer, one cross-scale
// mixer), then emits a 6-hour global prediction plus six hourly regional
// predictions. Longer forecasts chain steps autoregressively, feeding each
// step's predictions to the next. Both training losses live here too.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scalemix/config.hpp"
#include "scalemix/global_model.hpp"
#include "scalemix/grid.hpp"
#include "scalemix/scalemixer.hpp"

namespace scalemix {

struct ForecastBundle {
  // Global prediction at +6H, [H, W, C_pred]. Invalid for the standalone
  // regional variant, whose forward never touches the global stream.
  Tensor global;
  // Six hourly regional predictions at +1H .. +6H, each [h, w, V_reg].
  std::vector<Tensor> regional;
};

inline void spec_coupled_model(std::vector<ParamSpec>& out,
                               const ModelConfig& mc) {
  spec_global_model(out, mc);
  spec_regional_model(out, mc);
}

// Deterministic for a given seed: every parameter draws from its own named
// stream, so shared names are bit-identical across variants.
inline ParamStore build_model(const ModelConfig& mc, uint64_t seed) {
  std::vector<ParamSpec> specs;
  spec_coupled_model(specs, mc);
  ParamStore store;
  store.define_all(specs);
  store.init_all(seed);
  return store;
}

inline ForecastBundle forward_step(Binder& B, const ModelConfig& mc,
                                   const RegionGeom& geom, const Tensor& field,
                                   const RegionalState& state,
                                   Rng* sample_rng = nullptr,
                                   AttnProbe* probe = nullptr) {
  Graph& g = B.graph();
  const bool coupled = mc.coupling != "none";
  const int64_t L = mc.L();
  Tensor s = regional_patch_embed(B, mc, state);
  Tensor S;
  if (coupled) S = global_patchify(B, mc, field);
  for (int64_t b = 0; b < mc.k; ++b) {
    if (coupled) S = global_encode_range(B, mc, S, b * L, (b + 1) * L, probe);
    const std::string name = "regional.enc" + std::to_string(b);
    s = encoder_block(B, name, s, mc.heads, mc.per_head_scale(), probe, name);
    if (coupled) {
      MixerOut mo = scalemixer_forward(B, mc, geom, b, S, s, sample_rng, probe);
      S = mo.S;
      s = mo.s;
    }
  }
  Tensor S_aligned =
      coupled ? g.gather_rows(S, geom.aligned_global_tokens())
              : g.constant(Tensor::zeros({geom.n(), mc.d}));
  ForecastBundle out;
  const Tensor& last = state.history.back();
  for (int64_t dt = 1; dt <= 6; ++dt)
    out.regional.push_back(
        regional_prediction_head(B, mc, dt, s, S_aligned, last));
  if (coupled) out.global = global_head(B, mc, S, field);
  return out;
}

// Autoregressive chain: step n+1 consumes step n's global prediction (statics
// carried through unchanged) and its six hourly regional predictions as the
// new history; timestamps advance 6 hours per step. Every step stays in one
// graph, so gradients flow through the whole chain.
inline std::vector<ForecastBundle> rollout(Binder& B, const ModelConfig& mc,
                                           const RegionGeom& geom, Tensor field,
                                           RegionalState state, int64_t n_steps,
                                           Rng* sample_rng = nullptr) {
  if (n_steps < 1)
    throw ContractError("rollout: n_steps must be >= 1, got " +
                        std::to_string(n_steps));
  Graph& g = B.graph();
  std::vector<ForecastBundle> steps;
  for (int64_t n = 0; n < n_steps; ++n) {
    ForecastBundle fb = forward_step(B, mc, geom, field, state, sample_rng);
    if (fb.global.valid()) {
      const int64_t C = mc.channels(), Cp = mc.pred_channels();
      Tensor flat = g.reshape(field, {mc.H * mc.W, C});
      Tensor statics = g.slice_last(flat, Cp, C);
      Tensor pred_flat = g.reshape(fb.global, {mc.H * mc.W, Cp});
      field = g.reshape(g.concat_last(pred_flat, statics), {mc.H, mc.W, C});
    }
    state.history = fb.regional;
    state.hour_of_day += 6.0;
    if (state.hour_of_day >= 24.0) {
      state.hour_of_day -= 24.0;
      state.day_of_year += 1.0;
      if (state.day_of_year >= 365.0) state.day_of_year -= 365.0;
    }
    steps.push_back(std::move(fb));
  }
  return steps;
}

// Weighted global MAE: surface term averaged over H*W per variable with
// weight w_S[k], upper-air term averaged over H*W*P_levels with per-level
// weights w_A[k*P_levels + p], summed and divided by (V_S + V_A). Empty
// weight vectors mean all-ones. Channel order: upper-air block
// (variable-major), then surface.
inline Tensor global_weighted_mae(Graph& g, const ModelConfig& mc,
                                  const Tensor& pred, const Tensor& truth,
                                  std::vector<double> w_S = {},
                                  std::vector<double> w_A = {}) {
  const Shape expect{mc.H, mc.W, mc.pred_channels()};
  if (pred.shape() != expect || truth.shape() != expect)
    throw ShapeError("global loss: fields must be " + shape_str(expect) +
                     ", got " + shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  if (w_S.empty()) w_S.assign(static_cast<size_t>(mc.V_S), 1.0);
  if (w_A.empty()) w_A.assign(static_cast<size_t>(mc.V_A * mc.P_levels), 1.0);
  if (static_cast<int64_t>(w_S.size()) != mc.V_S)
    throw ConfigError("global loss: expected " + std::to_string(mc.V_S) +
                      " surface weights, got " + std::to_string(w_S.size()));
  if (static_cast<int64_t>(w_A.size()) != mc.V_A * mc.P_levels)
    throw ConfigError("global loss: expected " +
                      std::to_string(mc.V_A * mc.P_levels) +
                      " upper-air weights, got " + std::to_string(w_A.size()));
  std::vector<double> coeff;
  for (double w : w_A) coeff.push_back(w / static_cast<double>(mc.P_levels));
  for (double w : w_S) coeff.push_back(w);
  Tensor err = g.abs(g.sub(g.reshape(pred, {mc.H * mc.W, mc.pred_channels()}),
                           g.reshape(truth, {mc.H * mc.W, mc.pred_channels()})));
  Tensor weighted = g.mul_rowvec(
      err, g.constant(Tensor({mc.pred_channels()}, std::move(coeff))));
  const double norm = static_cast<double>(mc.H * mc.W * (mc.V_S + mc.V_A));
  return g.scale(g.sum_all(weighted), 1.0 / norm);
}

// Regional MAE: per-variable mean over h*w, averaged over variables — which
// is just the mean absolute difference over all entries.
inline Tensor regional_mae(Graph& g, const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("regional loss: shape mismatch " +
                     shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
  return g.mean_all(g.abs(g.sub(pred, truth)));
}

}  // namespace scalemix
