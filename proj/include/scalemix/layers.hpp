#pragma once
// Neural-network building blocks over the autodiff graph: affine projection,
// multi-head attention (self and cross, shared code path), feed-forward,
// Fourier lead-time embedding, adaptive layer norm, and the pre-norm
// Transformer encoder block.
//
// Every block reads its weights from a Binder under a dotted name prefix and
// has a matching spec_* function that registers the same names, so parameter
// registration, counting, and execution can never drift apart.

#include <cmath>
#include <string>
#include <vector>

#include "scalemix/autodiff.hpp"
#include "scalemix/common.hpp"
#include "scalemix/params.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

constexpr double kLnEps = 1e-5;

// ----- linear: y = x W + b, W stored [in, out] -----

inline void spec_linear(std::vector<ParamSpec>& out, const std::string& prefix,
                        int64_t d_in, int64_t d_out, Init w_init = Init::kFanIn) {
  out.push_back({prefix + ".w", {d_in, d_out}, w_init, d_in});
  out.push_back({prefix + ".b", {d_out}, Init::kZero, 0});
}

inline Tensor linear(Binder& B, const std::string& prefix, const Tensor& x) {
  Graph& g = B.graph();
  return g.add_rowvec(g.matmul(x, B(prefix + ".w")), B(prefix + ".b"));
}

// ----- layer norm with learned affine -----

inline void spec_layer_norm(std::vector<ParamSpec>& out, const std::string& prefix,
                            int64_t d) {
  out.push_back({prefix + ".gamma", {d}, Init::kOne, 0});
  out.push_back({prefix + ".beta", {d}, Init::kZero, 0});
}

inline Tensor layer_norm_affine(Binder& B, const std::string& prefix,
                                const Tensor& x, double eps = kLnEps) {
  Graph& g = B.graph();
  return g.layer_norm(x, B(prefix + ".gamma"), B(prefix + ".beta"), eps);
}

// ----- multi-head attention -----

// Records attention weight matrices per head so invariants (rows sum to 1)
// can be asserted at every call site.
struct AttnProbe {
  struct Entry {
    std::string site;
    Tensor weights;  // [n_q, n_k] softmax output of one head
  };
  std::vector<Entry> entries;
};

inline void spec_attention(std::vector<ParamSpec>& out, const std::string& prefix,
                           int64_t d_q_in, int64_t d_kv_in, int64_t d_attn,
                           int64_t d_out, bool zero_out_proj) {
  spec_linear(out, prefix + ".q", d_q_in, d_attn);
  spec_linear(out, prefix + ".k", d_kv_in, d_attn);
  spec_linear(out, prefix + ".v", d_kv_in, d_attn);
  spec_linear(out, prefix + ".o", d_attn, d_out,
              zero_out_proj ? Init::kZero : Init::kFanIn);
}

// Scaled dot-product attention; queries may come from a different stream than
// keys/values (cross-attention). Scale is 1/sqrt(d_head) by default, or
// 1/sqrt(d_attn) when per_head_scale is false.
inline Tensor multi_head_attention(Binder& B, const std::string& prefix,
                                   const Tensor& q_in, const Tensor& kv_in,
                                   int64_t heads, bool per_head_scale = true,
                                   AttnProbe* probe = nullptr,
                                   const std::string& site = "") {
  Graph& g = B.graph();
  if (kv_in.dim(0) < 1)
    throw ContractError("attention: at least one key/value row required");
  Tensor q = linear(B, prefix + ".q", q_in);
  Tensor k = linear(B, prefix + ".k", kv_in);
  Tensor v = linear(B, prefix + ".v", kv_in);
  const int64_t d_attn = q.dim(1);
  if (heads <= 0 || d_attn % heads != 0)
    throw ConfigError("attention: heads " + std::to_string(heads) +
                      " must divide inner dim " + std::to_string(d_attn));
  const int64_t dh = d_attn / heads;
  const double scale =
      1.0 / std::sqrt(static_cast<double>(per_head_scale ? dh : d_attn));
  Tensor ctx;
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = g.slice_last(q, h * dh, (h + 1) * dh);
    Tensor kh = g.slice_last(k, h * dh, (h + 1) * dh);
    Tensor vh = g.slice_last(v, h * dh, (h + 1) * dh);
    Tensor attn = g.softmax_last(g.scale(g.matmul(qh, g.transpose(kh)), scale));
    if (probe) probe->entries.push_back({site + "/h" + std::to_string(h), attn});
    Tensor ctx_h = g.matmul(attn, vh);
    ctx = h == 0 ? ctx_h : g.concat_last(ctx, ctx_h);
  }
  return linear(B, prefix + ".o", ctx);
}

// ----- feed-forward (d -> mult*d -> d, GELU) -----

inline void spec_feed_forward(std::vector<ParamSpec>& out, const std::string& prefix,
                              int64_t d, int64_t mult = 4,
                              bool zero_out_proj = false) {
  spec_linear(out, prefix + ".fc1", d, mult * d);
  spec_linear(out, prefix + ".fc2", mult * d, d,
              zero_out_proj ? Init::kZero : Init::kFanIn);
}

inline Tensor feed_forward(Binder& B, const std::string& prefix, const Tensor& x) {
  return linear(B, prefix + ".fc2", B.graph().gelu(linear(B, prefix + ".fc1", x)));
}

// ----- pre-norm Transformer encoder block -----
// x + Attn(LN1(x)); then y + FFN(LN2(y)). With zero_residual both residual
// branches end in zero projections, making the block the exact identity.

inline void spec_encoder_block(std::vector<ParamSpec>& out, const std::string& prefix,
                               int64_t d, bool zero_residual, int64_t ffn_mult = 4) {
  spec_layer_norm(out, prefix + ".ln1", d);
  spec_attention(out, prefix + ".attn", d, d, d, d, zero_residual);
  spec_layer_norm(out, prefix + ".ln2", d);
  spec_feed_forward(out, prefix + ".ffn", d, ffn_mult, zero_residual);
}

inline Tensor encoder_block(Binder& B, const std::string& prefix, const Tensor& x,
                            int64_t heads, bool per_head_scale = true,
                            AttnProbe* probe = nullptr,
                            const std::string& site = "") {
  Graph& g = B.graph();
  Tensor a = multi_head_attention(B, prefix + ".attn",
                                  layer_norm_affine(B, prefix + ".ln1", x),
                                  layer_norm_affine(B, prefix + ".ln1", x), heads,
                                  per_head_scale, probe, site);
  Tensor y = g.add(x, a);
  Tensor f = feed_forward(B, prefix + ".ffn",
                          layer_norm_affine(B, prefix + ".ln2", y));
  return g.add(y, f);
}

// ----- Fourier lead-time embedding -----
// [cos(2 pi a_i dt + b_i) ... , sin(2 pi a_i dt + b_i) ...] as a [1, d_f] row.

inline void spec_fourier(std::vector<ParamSpec>& out, const std::string& prefix,
                         int64_t d_f) {
  if (d_f <= 0 || d_f % 2 != 0)
    throw ConfigError("fourier embedding width must be positive and even");
  out.push_back({prefix + ".a", {d_f / 2}, Init::kNormal, 0});
  out.push_back({prefix + ".b", {d_f / 2}, Init::kZero, 0});
}

inline Tensor fourier_embed(Binder& B, const std::string& prefix, double dt) {
  Graph& g = B.graph();
  Tensor a = B(prefix + ".a");
  Tensor b = B(prefix + ".b");
  const int64_t half = a.numel();
  Tensor phase = g.reshape(
      g.add(g.scale(a, 2.0 * std::numbers::pi * dt), b), {1, half});
  return g.concat_last(g.cos(phase), g.sin(phase));
}

// ----- conditioning MLP (zero-initialized final layer) -----

inline void spec_cond_mlp(std::vector<ParamSpec>& out, const std::string& prefix,
                          int64_t d_in, int64_t d_out) {
  spec_linear(out, prefix + ".fc1", d_in, d_in);
  spec_linear(out, prefix + ".fc2", d_in, d_out, Init::kZero);
}

inline Tensor cond_mlp(Binder& B, const std::string& prefix, const Tensor& emb) {
  return linear(B, prefix + ".fc2", B.graph().gelu(linear(B, prefix + ".fc1", emb)));
}

// ----- adaptive layer norm -----
// (1 + gamma) * LN(x) + beta with (gamma, beta) = split(mod); the "1 +"
// offset makes a zero-initialized conditioning MLP yield plain layer norm.

inline Tensor adaln_modulate(Graph& g, const Tensor& x, const Tensor& mod) {
  const int64_t d = x.dim(-1);
  if (mod.numel() != 2 * d)
    throw ShapeError("adaln: modulation must have 2*d components, got " +
                     std::to_string(mod.numel()));
  Tensor flat = g.reshape(mod, {2 * d});
  Tensor gamma = g.slice_last(flat, 0, d);
  Tensor beta = g.slice_last(flat, d, 2 * d);
  Tensor ln = g.layer_norm(x, g.constant(Tensor::full({d}, 1.0)),
                           g.constant(Tensor::zeros({d})), kLnEps);
  Tensor one_plus = g.add(gamma, g.constant(Tensor::full({d}, 1.0)));
  return g.add_rowvec(g.mul_rowvec(ln, one_plus), beta);
}

inline Tensor ada_layer_norm(Binder& B, const std::string& fourier_prefix,
                             const std::string& mlp_prefix, const Tensor& x,
                             double dt) {
  Tensor emb = fourier_embed(B, fourier_prefix, dt);
  Tensor mod = cond_mlp(B, mlp_prefix, emb);
  return adaln_modulate(B.graph(), x, mod);
}

}  // namespace scalemix
