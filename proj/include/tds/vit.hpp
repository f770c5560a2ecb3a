#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tds/checkpoint.hpp"
#include "tds/tensor.hpp"

namespace tds {

// Weights of one pre-norm transformer block at channel width C.
struct VitBlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_w, qkv_b;    // [C, 3C], [3C]
  Tensor proj_w, proj_b;  // [C, C], [C]
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_w, fc1_b;    // [C, 4C], [4C]
  Tensor fc2_w, fc2_b;    // [4C, C], [C]
  int heads = 1;
};

VitBlockParams make_vit_block(ParamSet& params, const std::string& prefix, int channels,
                              int heads, bool trainable, std::uint64_t seed);

// frame: [3, H, W] -> patch rows [N, C] in row-major patch order.
Tensor patch_embed(const Tensor& frame, int patch_size, const Tensor& proj_w,
                   const Tensor& proj_b);

// patches: [N, C], cls: [C], pos: [1+N, C] -> [1+N, C].
Tensor build_frame_tokens(const Tensor& patches, const Tensor& cls, const Tensor& pos);

// tokens: [T, S, C]; within-frame attention only.
Tensor vit_block_forward(const Tensor& tokens, const VitBlockParams& params);

// The two residual halves of the block, for topologies that interleave
// adapters between them.
Tensor vit_block_attention(const Tensor& tokens, const VitBlockParams& params);
Tensor vit_block_ffn(const Tensor& tokens, const VitBlockParams& params);

// Frozen spatial encoder: patch projection, CLS/position embeddings and L blocks.
struct FrozenEncoder {
  int patch_size = 8;
  Tensor patch_w, patch_b;  // conv weights [C, 3, P, P], [C]
  Tensor cls;               // [C]
  Tensor pos;               // [1+N, C]
  std::vector<VitBlockParams> blocks;
};

FrozenEncoder make_frozen_encoder(ParamSet& params, int image_h, int image_w, int patch_size,
                                  int channels, int layers, int heads, std::uint64_t seed,
                                  bool trainable = false);

// video: [3, T, H, W] -> tokens [T, 1+N, C].
Tensor embed_video_tokens(const Tensor& video, const FrozenEncoder& enc);

// Returns every intermediate Z^l, l = 1..L, each [T, 1+N, C].
std::vector<Tensor> frozen_forward(const Tensor& video, const FrozenEncoder& enc);

// As above but starting from already-built input tokens [T, 1+N, C].
std::vector<Tensor> frozen_forward_tokens(const Tensor& tokens, const FrozenEncoder& enc);

}  // namespace tds
