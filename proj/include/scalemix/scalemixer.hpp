#pragma once
// The regional model and the cross-scale coupling module.
//
// Regional side: six hourly frames embedded by one shared patchify and fused
// by a linear initialized to the temporal mean, plus static-field embedding,
// a temporal MLP, and a learned position embedding; k encoder blocks; six
// lead-time prediction heads conditioned through adaptive layer norm.
//
// Coupling module, once per block:
//   Pr       = Softmax(linear(conv3x3(S over the token grid)))   over all N
//   c        = top-m positions of Pr (ties -> smallest row-major index)
//   h        = Pr[c] ⊙ S[c]
//   h_g ‖ c′ = h‖c + CrossAttn(h‖c, S, S)                 (residual, W_O = 0)
//   h′       = MLP(Bilinear(s, map(c′)) ‖ h_g)
//   s′       = s + CrossAttn(s, h′‖c′, h′‖c′)             (residual, W_O = 0)
//   S″       = scatter(S, aligned, S_aligned + MLP(S_aligned ‖ s′))
//              (bidirectional only; unidirectional leaves S untouched)
//
// Gradients flow through the score values Pr[c] and the gathered rows S[c],
// never through the discrete index choice. Coordinates live in normalized
// [0,1]^2 token-grid units; the map to regional token coordinates is affine
// and differentiable, and out-of-region samples clamp to the boundary.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "scalemix/autodiff.hpp"
#include "scalemix/config.hpp"
#include "scalemix/grid.hpp"
#include "scalemix/layers.hpp"
#include "scalemix/params.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

// ----- regional state ---------------------------------------------------------

struct RegionalState {
  std::vector<Tensor> history;  // exactly 6 hourly frames [h, w, V_reg], oldest first
  Tensor topography;            // [h, w, 1]
  Tensor land_sea_mask;         // [h, w, 1]
  double hour_of_day = 0.0;
  double day_of_year = 0.0;

  const Tensor& latest() const {
    if (history.empty()) throw ContractError("regional state has no frames");
    return history.back();
  }
};

// ----- parameter registries -----------------------------------------------------

inline void spec_scalemixer(std::vector<ParamSpec>& out, const std::string& prefix,
                            const ModelConfig& mc) {
  const int64_t d = mc.d;
  out.push_back({prefix + ".pi.conv.kernel", {3, 3, d, mc.d_pi}, Init::kFanIn, 9 * d});
  out.push_back({prefix + ".pi.conv.bias", {mc.d_pi}, Init::kZero, 0});
  spec_linear(out, prefix + ".pi.lin", mc.d_pi, 1);
  spec_attention(out, prefix + ".g2p", d + 2, d, d, d + 2, mc.zero_residual_init);
  spec_linear(out, prefix + ".proj.fc1", 2 * d, d);
  spec_linear(out, prefix + ".proj.fc2", d, d);
  spec_attention(out, prefix + ".p2r", d, d + 2, d, d, mc.zero_residual_init);
  spec_linear(out, prefix + ".adapter.fc1", 2 * d, d);
  spec_linear(out, prefix + ".adapter.fc2", d, d,
              mc.zero_residual_init ? Init::kZero : Init::kFanIn);
}

inline void spec_regional_model(std::vector<ParamSpec>& out, const ModelConfig& mc) {
  const int64_t d = mc.d, p = mc.p;
  out.push_back({"regional.patch.kernel", {p, p, mc.V_reg, d}, Init::kFanIn,
                 p * p * mc.V_reg});
  out.push_back({"regional.patch.bias", {d}, Init::kZero, 0});
  out.push_back({"regional.fuse.w", {6 * d, d}, Init::kMeanFusion, 0});
  out.push_back({"regional.fuse.b", {d}, Init::kZero, 0});
  out.push_back({"regional.static.kernel", {p, p, 2, d}, Init::kFanIn, p * p * 2});
  out.push_back({"regional.static.bias", {d}, Init::kZero, 0});
  spec_linear(out, "regional.time.fc1", 4, d);
  spec_linear(out, "regional.time.fc2", d, d);
  out.push_back({"regional.pos", {mc.region_tokens(), d}, Init::kNormal002, 0});
  for (int64_t i = 0; i < mc.k; ++i)
    spec_encoder_block(out, "regional.enc" + std::to_string(i), d,
                       mc.zero_residual_init, mc.ffn_mult);
  for (int64_t b = 0; b < mc.k; ++b)
    spec_scalemixer(out, "mixer" + std::to_string(b), mc);
  spec_fourier(out, "regional.fourier", mc.d_f);
  for (int64_t dt = 1; dt <= 6; ++dt) {
    const std::string hp = "regional.head" + std::to_string(dt);
    spec_cond_mlp(out, hp + ".cond", mc.d_f, 2 * (2 * d));
    spec_linear(out, hp + ".lin", 2 * d, d);
    out.push_back({hp + ".deconv.kernel", {p, p, mc.V_reg, d},
                   mc.zero_residual_init ? Init::kZero : Init::kFanIn, d});
    out.push_back({hp + ".deconv.bias", {mc.V_reg}, Init::kZero, 0});
  }
}

// ----- regional patch embedding --------------------------------------------------

inline Tensor regional_patch_embed(Binder& B, const ModelConfig& mc,
                                   const RegionalState& state) {
  Graph& g = B.graph();
  if (state.history.size() != 6)
    throw ContractError("regional history must contain exactly 6 hourly frames, got " +
                        std::to_string(state.history.size()));
  const Shape frame_shape{mc.region_h, mc.region_w, mc.V_reg};
  for (const Tensor& f : state.history)
    if (f.shape() != frame_shape)
      throw ShapeError("regional frame shape " + shape_str(f.shape()) +
                       " != " + shape_str(frame_shape));
  const Shape static_shape{mc.region_h, mc.region_w, 1};
  if (state.topography.shape() != static_shape ||
      state.land_sea_mask.shape() != static_shape)
    throw ShapeError("regional static fields must be [h, w, 1]");

  Tensor cat;
  for (size_t f = 0; f < 6; ++f) {
    Tensor tok = g.conv_patchify(state.history[f], B("regional.patch.kernel"),
                                 B("regional.patch.bias"), mc.p);
    cat = f == 0 ? tok : g.concat_last(cat, tok);
  }
  Tensor fused = linear(B, "regional.fuse", cat);

  std::vector<double> sv(static_cast<size_t>(mc.region_h * mc.region_w * 2));
  for (int64_t i = 0; i < mc.region_h; ++i)
    for (int64_t j = 0; j < mc.region_w; ++j) {
      sv[static_cast<size_t>((i * mc.region_w + j) * 2 + 0)] =
          state.topography.at({i, j, 0});
      sv[static_cast<size_t>((i * mc.region_w + j) * 2 + 1)] =
          state.land_sea_mask.at({i, j, 0});
    }
  Tensor statics = g.conv_patchify(
      g.constant(Tensor({mc.region_h, mc.region_w, 2}, std::move(sv))),
      B("regional.static.kernel"), B("regional.static.bias"), mc.p);

  const double two_pi = 2.0 * std::numbers::pi;
  Tensor time_in = g.constant(Tensor(
      {1, 4}, {std::sin(two_pi * state.hour_of_day / 24.0),
               std::cos(two_pi * state.hour_of_day / 24.0),
               std::sin(two_pi * state.day_of_year / 365.0),
               std::cos(two_pi * state.day_of_year / 365.0)}));
  Tensor temb = linear(B, "regional.time.fc2",
                       g.gelu(linear(B, "regional.time.fc1", time_in)));

  Tensor x = g.add(g.add(fused, statics), B("regional.pos"));
  return g.add_rowvec(x, g.reshape(temb, {mc.d}));
}

// ----- key-position identification ------------------------------------------------

// Indices of the m largest scores, descending, ties broken by the smallest
// index (stable sort on a descending comparison).
inline std::vector<int64_t> top_m_indices(const std::vector<double>& scores,
                                          int64_t m) {
  const int64_t n = static_cast<int64_t>(scores.size());
  if (m < 0 || m > n)
    throw ConfigError("top-m: m = " + std::to_string(m) + " outside [0, " +
                      std::to_string(n) + "]");
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(m));
  return idx;
}

// Evenly strided lattice of m positions on a GH x GW grid: the divisor pair
// mh*mw = m best matching the grid aspect, cell-centered strides; falls back
// to striding the row-major order when no pair fits the grid.
inline std::vector<int64_t> fixed_grid_indices(int64_t m, int64_t GH, int64_t GW) {
  int64_t best_h = 0, best_w = 0;
  for (int64_t mh = 1; mh <= m; ++mh) {
    if (m % mh != 0) continue;
    const int64_t mw = m / mh;
    if (mh > GH || mw > GW) continue;
    if (best_h == 0 || std::abs(mh * GW - mw * GH) < std::abs(best_h * GW - best_w * GH)) {
      best_h = mh;
      best_w = mw;
    }
  }
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(m));
  if (best_h == 0) {
    const int64_t N = GH * GW;
    for (int64_t i = 0; i < m; ++i) out.push_back(i * N / m);
    return out;
  }
  for (int64_t i = 0; i < best_h; ++i)
    for (int64_t j = 0; j < best_w; ++j)
      out.push_back((2 * i + 1) * GH / (2 * best_h) * GW + (2 * j + 1) * GW / (2 * best_w));
  return out;
}

struct KeyPositions {
  std::vector<int64_t> indices;  // selected row-major global-token indices
  Tensor coords;                 // [m, 2] normalized (y, x) in [0,1]^2, constant
  Tensor scores;                 // [m] Pr at the selected positions
  Tensor h;                      // [m, d] = Pr[c] ⊙ S[c]
  Tensor pr;                     // [1, N] full distribution (adaptive mode only)
};

inline KeyPositions identify_key_positions(Binder& B, const ModelConfig& mc,
                                           const std::string& prefix, const Tensor& S,
                                           Rng* rng = nullptr) {
  Graph& g = B.graph();
  const int64_t GH = mc.H / mc.P, GW = mc.W / mc.P, N = GH * GW, m = mc.m;
  if (S.ndim() != 2 || S.dim(0) != N || S.dim(1) != mc.d)
    throw ShapeError("key positions: global tokens must be [" + std::to_string(N) +
                     ", " + std::to_string(mc.d) + "], got " + shape_str(S.shape()));
  if (m > N)
    throw ConfigError("key positions: m = " + std::to_string(m) + " exceeds " +
                      std::to_string(N) + " tokens");
  if (GH < 2 || GW < 2)
    throw GeometryError("key positions: token grid must be at least 2x2 to carry "
                        "normalized coordinates");

  KeyPositions kps;
  if (mc.sampling == "adaptive") {
    Tensor grid = g.reshape(S, {GH, GW, mc.d});
    Tensor feat = g.conv3x3_wrap(grid, B(prefix + ".conv.kernel"),
                                 B(prefix + ".conv.bias"));
    Tensor logits = linear(B, prefix + ".lin", g.reshape(feat, {N, mc.d_pi}));
    kps.pr = g.softmax_last(g.reshape(logits, {1, N}));
    kps.indices = top_m_indices(kps.pr.data(), m);
    kps.scores =
        g.reshape(g.gather_rows(g.reshape(kps.pr, {N, 1}), kps.indices), {m});
  } else if (mc.sampling == "random") {
    if (!rng)
      throw ContractError("key positions: random sampling requires an rng");
    kps.indices = rng->sample_without_replacement(N, m);
    std::sort(kps.indices.begin(), kps.indices.end());
    kps.scores = g.constant(Tensor::full({m}, 1.0 / static_cast<double>(N)));
  } else if (mc.sampling == "fixed_grid") {
    kps.indices = fixed_grid_indices(m, GH, GW);
    kps.scores = g.constant(Tensor::full({m}, 1.0 / static_cast<double>(N)));
  } else {
    throw ConfigError("key positions: unknown sampling mode " + mc.sampling);
  }

  kps.h = g.scale_rows(g.gather_rows(S, kps.indices), kps.scores);
  std::vector<double> cv(static_cast<size_t>(m) * 2);
  for (int64_t r = 0; r < m; ++r) {
    cv[static_cast<size_t>(2 * r)] =
        static_cast<double>(kps.indices[static_cast<size_t>(r)] / GW) /
        static_cast<double>(GH - 1);
    cv[static_cast<size_t>(2 * r + 1)] =
        static_cast<double>(kps.indices[static_cast<size_t>(r)] % GW) /
        static_cast<double>(GW - 1);
  }
  kps.coords = g.constant(Tensor({m, 2}, std::move(cv)));
  return kps;
}

// ----- coupling stages --------------------------------------------------------

struct PositionUpdate {
  Tensor h_global;  // [m, d]
  Tensor coords;    // [m, 2] updated continuous coordinates c′
};

// Residual cross-attention from the key positions into all N global tokens;
// the trailing two components of each row carry the coordinate update.
inline PositionUpdate global_to_position(Binder& B, const ModelConfig& mc,
                                         const std::string& prefix,
                                         const KeyPositions& kps, const Tensor& S,
                                         AttnProbe* probe = nullptr) {
  Graph& g = B.graph();
  Tensor q = g.concat_last(kps.h, kps.coords);
  Tensor attn = multi_head_attention(B, prefix + ".g2p", q, S, mc.heads,
                                     mc.per_head_scale(), probe, prefix + ".g2p");
  Tensor upd = g.add(q, attn);
  return {g.slice_last(upd, 0, mc.d), g.slice_last(upd, mc.d, mc.d + 2)};
}

// Maps c′ from normalized global units onto the regional token grid, samples
// the regional tokens bilinearly (clamped at the region boundary), and fuses
// the sample with the globally informed key features.
inline Tensor refine_with_regional(Binder& B, const ModelConfig& mc,
                                   const RegionGeom& geom, const std::string& prefix,
                                   const Tensor& h_global, const Tensor& coords,
                                   const Tensor& s) {
  Graph& g = B.graph();
  Tensor scale = g.constant(Tensor(
      {2}, {static_cast<double>(geom.global_tokens_h - 1),
            static_cast<double>(geom.global_tokens_w - 1)}));
  Tensor offset = g.constant(Tensor(
      {2}, {-static_cast<double>(geom.token_off_y),
            -static_cast<double>(geom.token_off_x)}));
  Tensor mapped = g.add_rowvec(g.mul_rowvec(coords, scale), offset);
  Tensor s_grid = g.reshape(s, {geom.region_tokens_h, geom.region_tokens_w, mc.d});
  Tensor sampled = g.bilinear_sample(s_grid, mapped);
  Tensor cat = g.concat_last(sampled, h_global);
  return linear(B, prefix + ".proj.fc2",
                g.gelu(linear(B, prefix + ".proj.fc1", cat)));
}

// Residual cross-attention from every regional token into the m key features.
inline Tensor position_to_regional(Binder& B, const ModelConfig& mc,
                                   const std::string& prefix, const Tensor& s,
                                   const Tensor& h_prime, const Tensor& coords,
                                   AttnProbe* probe = nullptr) {
  Graph& g = B.graph();
  Tensor kv = g.concat_last(h_prime, coords);
  Tensor attn = multi_head_attention(B, prefix + ".p2r", s, kv, mc.heads,
                                     mc.per_head_scale(), probe, prefix + ".p2r");
  return g.add(s, attn);
}

// Writes regionally enriched features back into the aligned global tokens.
inline Tensor adapt_global(Binder& B, const ModelConfig&, const std::string& prefix,
                           const Tensor& S, const Tensor& s_prime,
                           const std::vector<int64_t>& aligned) {
  Graph& g = B.graph();
  if (static_cast<int64_t>(aligned.size()) != s_prime.dim(0))
    throw GeometryError("adapt_global: " + std::to_string(aligned.size()) +
                        " aligned global tokens != " + std::to_string(s_prime.dim(0)) +
                        " regional tokens");
  Tensor S_aligned = g.gather_rows(S, aligned);
  Tensor cat = g.concat_last(S_aligned, s_prime);
  Tensor delta = linear(B, prefix + ".adapter.fc2",
                        g.gelu(linear(B, prefix + ".adapter.fc1", cat)));
  return g.scatter_replace_rows(S, aligned, g.add(S_aligned, delta));
}

// ----- full module -------------------------------------------------------------

struct MixerOut {
  Tensor S;  // updated global tokens (identical to the input when unidirectional)
  Tensor s;  // updated regional tokens
  KeyPositions kps;
};

inline MixerOut scalemixer_forward(Binder& B, const ModelConfig& mc,
                                   const RegionGeom& geom, int64_t block,
                                   const Tensor& S, const Tensor& s,
                                   Rng* rng = nullptr, AttnProbe* probe = nullptr) {
  const std::string prefix = "mixer" + std::to_string(block);
  KeyPositions kps = identify_key_positions(B, mc, prefix + ".pi", S, rng);
  PositionUpdate pu = global_to_position(B, mc, prefix, kps, S, probe);
  Tensor h_prime = refine_with_regional(B, mc, geom, prefix, pu.h_global,
                                        pu.coords, s);
  Tensor s_prime = position_to_regional(B, mc, prefix, s, h_prime, pu.coords, probe);
  Tensor S_out = S;
  if (mc.coupling == "bidirectional")
    S_out = adapt_global(B, mc, prefix, S, s_prime, geom.aligned_global_tokens());
  return {S_out, s_prime, kps};
}

// ----- lead-time prediction heads -------------------------------------------------

// concat(s, S_aligned) -> AdaLN(dt) -> linear 2d->d -> deconv to the fine
// grid, residual over the most recent analysis frame.
inline Tensor regional_prediction_head(Binder& B, const ModelConfig& mc, int64_t dt,
                                       const Tensor& s_final, const Tensor& S_aligned,
                                       const Tensor& last_frame) {
  if (dt < 1 || dt > 6)
    throw ContractError("regional head: lead time " + std::to_string(dt) +
                        " outside 1..6 hours");
  Graph& g = B.graph();
  if (s_final.dim(0) != S_aligned.dim(0))
    throw GeometryError("regional head: token count mismatch between regional and "
                        "aligned global sequences");
  const std::string hp = "regional.head" + std::to_string(dt);
  Tensor tok = g.concat_last(s_final, S_aligned);
  Tensor x = ada_layer_norm(B, "regional.fourier", hp + ".cond", tok,
                            static_cast<double>(dt));
  x = linear(B, hp + ".lin", x);
  Tensor delta = g.deconv_unpatchify(x, B(hp + ".deconv.kernel"),
                                     B(hp + ".deconv.bias"), mc.region_h / mc.p,
                                     mc.region_w / mc.p);
  return g.add(last_frame, delta);
}

}  // namespace scalemix
