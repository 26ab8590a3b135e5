#pragma once
// Global forecaster: a plain vision-transformer over the coarse grid.
//
//   tokens  = conv-patchify(field) + learned position embedding   [N, d]
//   tokens  = M pre-norm encoder blocks (runnable in sub-ranges so coupling
//             blocks can interleave with the regional model)
//   output  = predicted-channel slice of the input
//           + deconv-unpatchify(linear(final-LN(tokens)))          [H, W, C_pred]
//
// Static channels (terrain, land-sea mask) are inputs only; the head emits
// just the predicted channels and the residual base is the predicted-channel
// slice of the input. With zero-initialized residual projections and a
// zeroed head deconv, the whole forward pass is the bit-exact identity.

#include <string>
#include <vector>

#include "scalemix/autodiff.hpp"
#include "scalemix/config.hpp"
#include "scalemix/layers.hpp"
#include "scalemix/params.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

inline void spec_global_model(std::vector<ParamSpec>& out, const ModelConfig& mc) {
  const int64_t C = mc.channels(), d = mc.d;
  out.push_back({"global.patch.kernel", {mc.P, mc.P, C, d}, Init::kFanIn,
                 mc.P * mc.P * C});
  out.push_back({"global.patch.bias", {d}, Init::kZero, 0});
  out.push_back({"global.pos", {mc.global_tokens(), d}, Init::kNormal002, 0});
  for (int64_t i = 0; i < mc.M; ++i)
    spec_encoder_block(out, "global.enc" + std::to_string(i), d,
                       mc.zero_residual_init, mc.ffn_mult);
  spec_layer_norm(out, "global.final_ln", d);
  spec_linear(out, "global.head.lin", d, d);
  out.push_back({"global.head.kernel", {mc.P, mc.P, mc.pred_channels(), d},
                 mc.zero_residual_init ? Init::kZero : Init::kFanIn, d});
  out.push_back({"global.head.bias", {mc.pred_channels()}, Init::kZero, 0});
}

// field [H, W, C] -> tokens [N, d], position embedding included.
inline Tensor global_patchify(Binder& B, const ModelConfig& mc, const Tensor& field) {
  Graph& g = B.graph();
  Tensor tokens = g.conv_patchify(field, B("global.patch.kernel"),
                                  B("global.patch.bias"), mc.P);
  return g.add(tokens, B("global.pos"));
}

// Applies encoder blocks [from, to); an empty range returns tokens untouched.
inline Tensor global_encode_range(Binder& B, const ModelConfig& mc, Tensor tokens,
                                  int64_t from, int64_t to,
                                  AttnProbe* probe = nullptr) {
  if (from < 0 || to > mc.M || from > to)
    throw ContractError("global encoder range [" + std::to_string(from) + ", " +
                        std::to_string(to) + ") outside depth " +
                        std::to_string(mc.M));
  for (int64_t i = from; i < to; ++i) {
    const std::string name = "global.enc" + std::to_string(i);
    tokens = encoder_block(B, name, tokens, mc.heads, mc.per_head_scale(), probe,
                           name);
  }
  return tokens;
}

// tokens [N, d] + input field [H, W, C] -> forecast [H, W, C_pred], a learned
// residual over the predicted-channel slice of the input.
inline Tensor global_head(Binder& B, const ModelConfig& mc, const Tensor& tokens,
                          const Tensor& field) {
  Graph& g = B.graph();
  Tensor x = layer_norm_affine(B, "global.final_ln", tokens);
  x = linear(B, "global.head.lin", x);
  Tensor delta = g.deconv_unpatchify(x, B("global.head.kernel"),
                                     B("global.head.bias"), mc.H / mc.P,
                                     mc.W / mc.P);
  Tensor base = g.reshape(
      g.slice_last(g.reshape(field, {mc.H * mc.W, mc.channels()}), 0,
                   mc.pred_channels()),
      {mc.H, mc.W, mc.pred_channels()});
  return g.add(base, delta);
}

inline Tensor global_forward(Binder& B, const ModelConfig& mc, const Tensor& field,
                             AttnProbe* probe = nullptr) {
  Tensor tokens = global_patchify(B, mc, field);
  tokens = global_encode_range(B, mc, tokens, 0, mc.M, probe);
  return global_head(B, mc, tokens, field);
}

}  // namespace scalemix
