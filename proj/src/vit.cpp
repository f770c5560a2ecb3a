#include "tds/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "tds/ops.hpp"
#include "tds/rng.hpp"

namespace tds {

namespace {

Tensor add_param(ParamSet& params, const std::string& name, Shape shape, bool trainable,
                 std::uint64_t seed, double stddev) {
  const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  return params.add(name, std::move(shape), normal_values(n, stddev, seed), trainable);
}

Tensor add_const_param(ParamSet& params, const std::string& name, Shape shape, bool trainable,
                       double value) {
  const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
  return params.add(name, std::move(shape), std::vector<double>(n, value), trainable);
}

}  // namespace

VitBlockParams make_vit_block(ParamSet& params, const std::string& prefix, int channels,
                              int heads, bool trainable, std::uint64_t seed) {
  if (channels % heads != 0) {
    throw std::invalid_argument("vit block: channels " + std::to_string(channels) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const int c = channels;
  VitBlockParams b;
  b.heads = heads;
  b.ln1_gamma = add_const_param(params, prefix + ".ln1.gamma", {c}, trainable, 1.0);
  b.ln1_beta = add_const_param(params, prefix + ".ln1.beta", {c}, trainable, 0.0);
  b.qkv_w = add_param(params, prefix + ".attn.qkv.w", {c, 3 * c}, trainable, mix_seed(seed, 1), 0.02);
  b.qkv_b = add_const_param(params, prefix + ".attn.qkv.b", {3 * c}, trainable, 0.0);
  b.proj_w = add_param(params, prefix + ".attn.proj.w", {c, c}, trainable, mix_seed(seed, 2), 0.02);
  b.proj_b = add_const_param(params, prefix + ".attn.proj.b", {c}, trainable, 0.0);
  b.ln2_gamma = add_const_param(params, prefix + ".ln2.gamma", {c}, trainable, 1.0);
  b.ln2_beta = add_const_param(params, prefix + ".ln2.beta", {c}, trainable, 0.0);
  b.fc1_w = add_param(params, prefix + ".ffn.fc1.w", {c, 4 * c}, trainable, mix_seed(seed, 3), 0.02);
  b.fc1_b = add_const_param(params, prefix + ".ffn.fc1.b", {4 * c}, trainable, 0.0);
  b.fc2_w = add_param(params, prefix + ".ffn.fc2.w", {4 * c, c}, trainable, mix_seed(seed, 4), 0.02);
  b.fc2_b = add_const_param(params, prefix + ".ffn.fc2.b", {c}, trainable, 0.0);
  return b;
}

Tensor patch_embed(const Tensor& frame, int patch_size, const Tensor& proj_w,
                   const Tensor& proj_b) {
  if (frame.rank() != 3 || frame.dim(0) != 3) {
    throw std::invalid_argument("patch_embed: frame must be [3,H,W], got " +
                                shape_str(frame.shape()));
  }
  const int h = frame.dim(1), w = frame.dim(2);
  if (h % patch_size != 0 || w % patch_size != 0) {
    throw std::invalid_argument("patch_embed: extents " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by patch size " +
                                std::to_string(patch_size));
  }
  // Strided conv == per-patch linear projection; rows come out in row-major
  // patch order after moving channels last.
  Tensor grid = ops::conv2d(frame, proj_w, proj_b, patch_size, patch_size);
  const int c = grid.dim(0), gh = grid.dim(1), gw = grid.dim(2);
  Tensor rows = ops::permute(grid, {1, 2, 0});
  return ops::reshape(rows, {gh * gw, c});
}

Tensor build_frame_tokens(const Tensor& patches, const Tensor& cls, const Tensor& pos) {
  if (patches.rank() != 2 || cls.rank() != 1 || pos.rank() != 2) {
    throw std::invalid_argument("build_frame_tokens: expected [N,C], [C], [1+N,C]");
  }
  const int n = patches.dim(0), c = patches.dim(1);
  if (cls.dim(0) != c || pos.dim(0) != n + 1 || pos.dim(1) != c) {
    throw std::invalid_argument("build_frame_tokens: inconsistent shapes " +
                                shape_str(patches.shape()) + ", " + shape_str(cls.shape()) +
                                ", " + shape_str(pos.shape()));
  }
  Tensor cls_row = ops::reshape(cls, {1, c});
  Tensor stacked = ops::concat({cls_row, patches}, 0);
  return ops::add(stacked, pos);
}

Tensor vit_block_attention(const Tensor& tokens, const VitBlockParams& params) {
  if (tokens.rank() != 3) {
    throw std::invalid_argument("vit block: tokens must be [T,S,C], got " +
                                shape_str(tokens.shape()));
  }
  const int t = tokens.dim(0), s = tokens.dim(1), c = tokens.dim(2);
  if (c != params.ln1_gamma.dim(0)) {
    throw std::invalid_argument("vit block: channel dim " + std::to_string(c) +
                                " does not match parameters " +
                                std::to_string(params.ln1_gamma.dim(0)));
  }
  const int heads = params.heads;
  const int dh = c / heads;

  Tensor ln = ops::layer_norm(tokens, params.ln1_gamma, params.ln1_beta);
  Tensor qkv = ops::add(ops::matmul(ln, params.qkv_w), params.qkv_b);  // [T,S,3C]
  Tensor q = ops::slice(qkv, 2, 0, c);
  Tensor k = ops::slice(qkv, 2, c, c);
  Tensor v = ops::slice(qkv, 2, 2 * c, c);
  auto split_heads = [&](const Tensor& m) {
    return ops::reshape(ops::permute(ops::reshape(m, {t, s, heads, dh}), {0, 2, 1, 3}),
                        {t * heads, s, dh});
  };
  Tensor qh = split_heads(q);
  Tensor vh = split_heads(v);
  Tensor kt = ops::reshape(ops::permute(ops::reshape(k, {t, s, heads, dh}), {0, 2, 3, 1}),
                           {t * heads, dh, s});
  Tensor scores = ops::scale(ops::bmm(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = ops::softmax(scores);
  Tensor ctx = ops::bmm(attn, vh);  // [T*heads, S, dh]
  Tensor merged = ops::reshape(
      ops::permute(ops::reshape(ctx, {t, heads, s, dh}), {0, 2, 1, 3}), {t, s, c});
  Tensor out = ops::add(ops::matmul(merged, params.proj_w), params.proj_b);
  return ops::add(tokens, out);
}

Tensor vit_block_ffn(const Tensor& tokens, const VitBlockParams& params) {
  Tensor ln = ops::layer_norm(tokens, params.ln2_gamma, params.ln2_beta);
  Tensor hidden = ops::gelu(ops::add(ops::matmul(ln, params.fc1_w), params.fc1_b));
  Tensor out = ops::add(ops::matmul(hidden, params.fc2_w), params.fc2_b);
  return ops::add(tokens, out);
}

Tensor vit_block_forward(const Tensor& tokens, const VitBlockParams& params) {
  return vit_block_ffn(vit_block_attention(tokens, params), params);
}

FrozenEncoder make_frozen_encoder(ParamSet& params, int image_h, int image_w, int patch_size,
                                  int channels, int layers, int heads, std::uint64_t seed,
                                  bool trainable) {
  if (image_h % patch_size != 0 || image_w % patch_size != 0) {
    throw std::invalid_argument("frozen encoder: image extents not divisible by patch size");
  }
  const int n = (image_h / patch_size) * (image_w / patch_size);
  ScopeGuard scope("frozen");
  FrozenEncoder enc;
  enc.patch_size = patch_size;
  enc.patch_w = add_param(params, "frozen.patch.w", {channels, 3, patch_size, patch_size},
                          trainable, mix_seed(seed, 100), 0.02);
  enc.patch_b = add_const_param(params, "frozen.patch.b", {channels}, trainable, 0.0);
  enc.cls = add_param(params, "frozen.cls", {channels}, trainable, mix_seed(seed, 101), 0.02);
  enc.pos = add_param(params, "frozen.pos", {n + 1, channels}, trainable, mix_seed(seed, 102),
                      0.02);
  for (int l = 0; l < layers; ++l) {
    enc.blocks.push_back(make_vit_block(params, "frozen.block" + std::to_string(l), channels,
                                        heads, trainable, mix_seed(seed, 200 + l)));
  }
  return enc;
}

Tensor embed_video_tokens(const Tensor& video, const FrozenEncoder& enc) {
  if (video.rank() != 4 || video.dim(0) != 3) {
    throw std::invalid_argument("frozen encoder: video must be [3,T,H,W], got " +
                                shape_str(video.shape()));
  }
  const int t = video.dim(1), h = video.dim(2), w = video.dim(3);
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    Tensor frame = ops::reshape(ops::slice(video, 1, i, 1), {3, h, w});
    Tensor patches = patch_embed(frame, enc.patch_size, enc.patch_w, enc.patch_b);
    Tensor tokens = build_frame_tokens(patches, enc.cls, enc.pos);
    frames.push_back(ops::reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}));
  }
  return ops::concat(frames, 0);
}

std::vector<Tensor> frozen_forward_tokens(const Tensor& tokens, const FrozenEncoder& enc) {
  std::vector<Tensor> zs;
  zs.reserve(enc.blocks.size());
  Tensor x = tokens;
  for (const VitBlockParams& block : enc.blocks) {
    x = vit_block_forward(x, block);
    zs.push_back(x);
  }
  return zs;
}

std::vector<Tensor> frozen_forward(const Tensor& video, const FrozenEncoder& enc) {
  ScopeGuard scope("frozen");
  return frozen_forward_tokens(embed_video_tokens(video, enc), enc);
}

}  // namespace tds
