#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tds/adapters.hpp"
#include "tds/checkpoint.hpp"
#include "tds/config.hpp"
#include "tds/tensor.hpp"
#include "tds/vit.hpp"

namespace tds {

// Per-layer side parameters: fusion projection, temporal module, ViT block.
struct TdsBlockParams {
  Tensor fuse_w, fuse_b;          // [C_f, C_s], [C_s]
  bool use_td = true;
  TdParams td;
  Tensor baseline_w, baseline_b;  // k x 1 x 1 conv, channel-preserving (Conv baseline)
  VitBlockParams vit;
};

struct TdsModel {
  ModelConfig cfg;
  ParamSet params;
  FrozenEncoder frozen;

  Tensor side_patch_w, side_patch_b;  // [C_s, 3, P, P], [C_s]
  Tensor side_cls, side_pos;          // [C_s], [1+N, C_s]
  SmeParams sme;                      // side-width SME (temporal paths)
  bool has_spatial_sme = false;
  SmeParams sme_spatial;              // frozen-width SME (spatial paths)

  std::vector<TdsBlockParams> blocks;
  Tensor head_w, head_b;              // [C_s, N_c], [N_c]
};

TdsModel build_model(const ModelConfig& cfg, std::uint64_t seed);

// side + projection of the (detached) frozen features, token-wise.
Tensor fuse_frozen(const Tensor& side, const Tensor& frozen_tokens, const Tensor& proj_w,
                   const Tensor& proj_b);

// Optional capture of intermediate side activations, for visualisation.
struct ForwardTrace {
  Tensor side_input;                // [T, 1+N, C_s]
  std::vector<Tensor> side_layers;  // after each block
};

// Frozen features for the sampled clip, one tensor per layer, detached.
// Only valid for caching when the frozen input does not depend on trainable
// parameters (any mode except spatial ones).
std::vector<Tensor> compute_frozen_features(const TdsModel& model, const Tensor& raw_video,
                                            const std::vector<int>& indices);

// raw_video: [3, T_raw, H, W]; indices: strictly increasing sampled positions,
// |indices| == cfg.frames. Returns logits [N_c].
Tensor network_forward(const TdsModel& model, const Tensor& raw_video,
                       const std::vector<int>& indices,
                       const std::vector<Tensor>* frozen_features = nullptr,
                       ForwardTrace* trace = nullptr);

// Convenience: identity or centre sampling of the raw clip.
Tensor network_forward(const TdsModel& model, const Tensor& raw_video);

Tensor ls_cross_entropy(const Tensor& logits, int label, double smoothing);

}  // namespace tds
