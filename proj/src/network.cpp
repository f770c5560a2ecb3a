#include "tds/network.hpp"

#include <stdexcept>

#include "tds/ops.hpp"
#include "tds/rng.hpp"

namespace tds {

namespace {

Tensor stack_frames(std::vector<Tensor> frames) {
  std::vector<Tensor> rows;
  rows.reserve(frames.size());
  for (Tensor& f : frames) {
    rows.push_back(ops::reshape(f, {1, f.dim(0), f.dim(1)}));
  }
  return ops::concat(rows, 0);
}

Tensor gather_frames(const Tensor& raw_video, const std::vector<int>& indices) {
  const int h = raw_video.dim(2), w = raw_video.dim(3);
  std::vector<Tensor> picked;
  picked.reserve(indices.size());
  for (int idx : indices) picked.push_back(ops::slice(raw_video, 1, idx, 1));
  Tensor sampled = ops::concat(picked, 1);
  return ops::reshape(sampled, {3, static_cast<int>(indices.size()), h, w});
}

Tensor apply_cls_shift(const Tensor& tokens, int div) {
  const int t = tokens.dim(0), s = tokens.dim(1), c = tokens.dim(2);
  Tensor cls = ops::reshape(ops::slice(tokens, 1, 0, 1), {t, c});
  Tensor shifted = ops::reshape(cls_shift(cls, div), {t, 1, c});
  Tensor patches = ops::slice(tokens, 1, 1, s - 1);
  return ops::concat({shifted, patches}, 1);
}

// Channel-preserving temporal conv with residual: the Conv baseline standing
// in for the TD adapter on unmasked layers.
Tensor baseline_conv(const Tensor& tokens, const Tensor& w, const Tensor& b, int grid_h,
                     int grid_w) {
  const int t = tokens.dim(0), s = tokens.dim(1), c = tokens.dim(2);
  Tensor cls_rows = ops::slice(tokens, 1, 0, 1);
  Tensor patches = ops::slice(tokens, 1, 1, s - 1);
  Tensor vol = ops::permute(ops::reshape(patches, {t, grid_h, grid_w, c}), {3, 0, 1, 2});
  const int pad = w.dim(2) / 2;
  Tensor conv = ops::conv3d(vol, w, b, pad, 0, 0, ops::PadMode::Replicate);
  Tensor rows = ops::reshape(ops::permute(conv, {1, 2, 3, 0}), {t, s - 1, c});
  Tensor fused = ops::add(patches, rows);
  return ops::concat({cls_rows, fused}, 1);
}

}  // namespace

TdsModel build_model(const ModelConfig& cfg_in, std::uint64_t seed) {
  ModelConfig cfg = cfg_in;
  if (cfg.td_layers.empty()) cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), true);
  cfg.validate();

  TdsModel m;
  m.cfg = cfg;
  const int n = cfg.grid_h() * cfg.grid_w();

  // A fixed-seed draw stands in for pretrained spatial-encoder weights.
  m.frozen = make_frozen_encoder(m.params, cfg.height, cfg.width, cfg.patch, cfg.frozen_dim,
                                 cfg.layers, cfg.frozen_heads, mix_seed(seed, 0xF0),
                                 /*trainable=*/false);

  {
    ScopeGuard scope("side");
    m.side_patch_w = m.params.add(
        "side.patch.w", {cfg.side_dim, 3, cfg.patch, cfg.patch},
        normal_values(static_cast<std::size_t>(cfg.side_dim) * 3 * cfg.patch * cfg.patch, 0.02,
                      mix_seed(seed, 1)),
        true);
    m.side_patch_b = m.params.add("side.patch.b", {cfg.side_dim},
                                  std::vector<double>(static_cast<std::size_t>(cfg.side_dim), 0.0),
                                  true);
    m.side_cls = m.params.add("side.cls", {cfg.side_dim},
                              normal_values(static_cast<std::size_t>(cfg.side_dim), 0.02,
                                            mix_seed(seed, 2)),
                              true);
    m.side_pos = m.params.add(
        "side.pos", {n + 1, cfg.side_dim},
        normal_values(static_cast<std::size_t>(n + 1) * cfg.side_dim, 0.02, mix_seed(seed, 3)),
        true);
  }

  if (cfg.sme_enabled()) {
    ScopeGuard scope("adapter");
    if (cfg.sme_mode != SmeMode::Spatial) {
      m.sme = make_sme(m.params, "sme", cfg.side_dim, cfg.window, cfg.patch, cfg.alpha, cfg.beta,
                       mix_seed(seed, 4));
    }
    if (cfg.sme_mode == SmeMode::Spatial || cfg.sme_mode == SmeMode::SpatialTemporal) {
      m.has_spatial_sme = true;
      m.sme_spatial = make_sme(m.params, "sme_spatial", cfg.frozen_dim, cfg.window, cfg.patch,
                               cfg.alpha, cfg.beta, mix_seed(seed, 5));
    }
  }

  for (int l = 0; l < cfg.layers; ++l) {
    TdsBlockParams block;
    const std::string prefix = "side.block" + std::to_string(l);
    {
      ScopeGuard scope("side");
      block.fuse_w = m.params.add(
          prefix + ".fuse.w", {cfg.frozen_dim, cfg.side_dim},
          normal_values(static_cast<std::size_t>(cfg.frozen_dim) * cfg.side_dim, 0.02,
                        mix_seed(seed, 10 + l)),
          true);
      block.fuse_b = m.params.add(prefix + ".fuse.b", {cfg.side_dim},
                                  std::vector<double>(static_cast<std::size_t>(cfg.side_dim), 0.0),
                                  true);
    }
    block.use_td = cfg.td_layers[static_cast<std::size_t>(l)];
    if (block.use_td) {
      ScopeGuard scope("adapter");
      block.td = make_td(m.params, prefix + ".td", cfg.side_dim, cfg.reduction, cfg.pool_kernel,
                         cfg.td_use_conv, mix_seed(seed, 40 + l));
    } else if (cfg.baseline_op == BaselineOp::Conv) {
      ScopeGuard scope("adapter");
      // Zero init keeps the residual path an identity at the start of training.
      block.baseline_w = m.params.add(
          prefix + ".tconv.w", {cfg.side_dim, cfg.side_dim, cfg.pool_kernel, 1, 1},
          std::vector<double>(
              static_cast<std::size_t>(cfg.side_dim) * cfg.side_dim * cfg.pool_kernel, 0.0),
          true);
      block.baseline_b = m.params.add(
          prefix + ".tconv.b", {cfg.side_dim},
          std::vector<double>(static_cast<std::size_t>(cfg.side_dim), 0.0), true);
    }
    {
      ScopeGuard scope("side");
      block.vit = make_vit_block(m.params, prefix, cfg.side_dim, cfg.side_heads, true,
                                 mix_seed(seed, 70 + l));
    }
    m.blocks.push_back(std::move(block));
  }

  {
    ScopeGuard scope("side");
    m.head_w = m.params.add(
        "head.w", {cfg.side_dim, cfg.classes},
        normal_values(static_cast<std::size_t>(cfg.side_dim) * cfg.classes, 0.02,
                      mix_seed(seed, 6)),
        true);
    m.head_b = m.params.add("head.b", {cfg.classes},
                            std::vector<double>(static_cast<std::size_t>(cfg.classes), 0.0),
                            true);
  }
  return m;
}

Tensor fuse_frozen(const Tensor& side, const Tensor& frozen_tokens, const Tensor& proj_w,
                   const Tensor& proj_b) {
  if (side.rank() != 3 || frozen_tokens.rank() != 3 || side.dim(0) != frozen_tokens.dim(0) ||
      side.dim(1) != frozen_tokens.dim(1)) {
    throw std::invalid_argument("fuse_frozen: token grids differ: " + shape_str(side.shape()) +
                                " vs " + shape_str(frozen_tokens.shape()));
  }
  Tensor detached = frozen_tokens.detach();
  return ops::add(side, ops::add(ops::matmul(detached, proj_w), proj_b));
}

namespace {

void check_indices(const TdsModel& model, const Tensor& raw_video,
                   const std::vector<int>& indices) {
  if (raw_video.rank() != 4 || raw_video.dim(0) != 3) {
    throw std::invalid_argument("network: video must be [3,T,H,W], got " +
                                shape_str(raw_video.shape()));
  }
  if (raw_video.dim(2) != model.cfg.height || raw_video.dim(3) != model.cfg.width) {
    throw std::invalid_argument("network: video geometry " + shape_str(raw_video.shape()) +
                                " does not match config");
  }
  if (static_cast<int>(indices.size()) != model.cfg.frames) {
    throw std::invalid_argument("network: expected " + std::to_string(model.cfg.frames) +
                                " sample indices, got " + std::to_string(indices.size()));
  }
  const int t_raw = raw_video.dim(1);
  int prev = -1;
  for (int idx : indices) {
    if (idx <= prev || idx >= t_raw) {
      throw std::invalid_argument("network: sample indices must be strictly increasing in range");
    }
    prev = idx;
  }
}

// Per-frame side-network input tokens [T, 1+N, C_s].
Tensor side_input_tokens(const TdsModel& model, const Tensor& raw_video,
                         const std::vector<int>& indices) {
  const ModelConfig& cfg = model.cfg;
  const int h = cfg.height, w = cfg.width;
  const bool use_sme = cfg.sme_enabled() && (cfg.sme_mode == SmeMode::Temporal ||
                                             cfg.sme_mode == SmeMode::SpatialTemporal);
  std::vector<Tensor> frames;
  frames.reserve(indices.size());
  for (int idx : indices) {
    if (use_sme) {
      ScopeGuard scope("adapter");
      frames.push_back(sme_forward(raw_video, idx, model.sme, model.side_patch_w,
                                   model.side_patch_b, model.side_cls, model.side_pos));
    } else {
      ScopeGuard scope("side");
      Tensor frame = ops::reshape(ops::slice(raw_video, 1, idx, 1), {3, h, w});
      frames.push_back(build_frame_tokens(
          patch_embed(frame, cfg.patch, model.side_patch_w, model.side_patch_b), model.side_cls,
          model.side_pos));
    }
  }
  return stack_frames(std::move(frames));
}

}  // namespace

std::vector<Tensor> compute_frozen_features(const TdsModel& model, const Tensor& raw_video,
                                            const std::vector<int>& indices) {
  check_indices(model, raw_video, indices);
  ScopeGuard scope("frozen");
  Tensor tokens;
  if (model.has_spatial_sme) {
    // SME feeds the spatial path; the frozen branch stays graph-free, so its
    // input is detached at the boundary (the spatial-path SME trains nowhere).
    NoGradGuard no_grad;
    std::vector<Tensor> frames;
    frames.reserve(indices.size());
    for (int idx : indices) {
      frames.push_back(sme_forward(raw_video, idx, model.sme_spatial, model.frozen.patch_w,
                                   model.frozen.patch_b, model.frozen.cls, model.frozen.pos));
    }
    tokens = stack_frames(std::move(frames)).detach();
  } else {
    tokens = embed_video_tokens(gather_frames(raw_video, indices), model.frozen);
  }
  std::vector<Tensor> zs = frozen_forward_tokens(tokens, model.frozen);
  for (Tensor& z : zs) z = z.detach();
  return zs;
}

Tensor network_forward(const TdsModel& model, const Tensor& raw_video,
                       const std::vector<int>& indices,
                       const std::vector<Tensor>* frozen_features, ForwardTrace* trace) {
  check_indices(model, raw_video, indices);
  const ModelConfig& cfg = model.cfg;

  std::vector<Tensor> zs;
  if (frozen_features) {
    if (static_cast<int>(frozen_features->size()) != cfg.layers) {
      throw std::invalid_argument("network: frozen feature list length mismatch");
    }
    zs = *frozen_features;
  } else {
    zs = compute_frozen_features(model, raw_video, indices);
  }

  Tensor x = side_input_tokens(model, raw_video, indices);
  if (trace) trace->side_input = x.detach();

  Tensor cross_tokens;
  if (cfg.sme_enabled() && cfg.sme_mode == SmeMode::Cross) {
    ScopeGuard scope("adapter");
    std::vector<Tensor> frames;
    frames.reserve(indices.size());
    for (int idx : indices) {
      frames.push_back(sme_forward(raw_video, idx, model.sme, model.side_patch_w,
                                   model.side_patch_b, model.side_cls, model.side_pos));
    }
    cross_tokens = stack_frames(std::move(frames));
  }

  for (int l = 0; l < cfg.layers; ++l) {
    const TdsBlockParams& block = model.blocks[static_cast<std::size_t>(l)];
    if (!cfg.fuse_before_shift && cfg.cls_shift_enabled) {
      ScopeGuard scope("side");
      x = apply_cls_shift(x, cfg.shift_div);
    }
    {
      ScopeGuard scope("side");
      x = fuse_frozen(x, zs[static_cast<std::size_t>(l)], block.fuse_w, block.fuse_b);
    }
    if (l == 0 && cross_tokens.defined()) {
      x = ops::add(x, cross_tokens);
    }
    if (cfg.fuse_before_shift && cfg.cls_shift_enabled) {
      ScopeGuard scope("side");
      x = apply_cls_shift(x, cfg.shift_div);
    }
    if (block.use_td) {
      ScopeGuard scope("adapter");
      x = td_forward(x, block.td, cfg.grid_h(), cfg.grid_w());
    } else if (cfg.baseline_op == BaselineOp::Conv) {
      ScopeGuard scope("adapter");
      x = baseline_conv(x, block.baseline_w, block.baseline_b, cfg.grid_h(), cfg.grid_w());
    }
    {
      ScopeGuard scope("side");
      x = vit_block_forward(x, block.vit);
    }
    if (trace) trace->side_layers.push_back(x.detach());
  }

  ScopeGuard scope("side");
  const int s = x.dim(1);
  Tensor patch_out = ops::slice(x, 1, 1, s - 1);  // GAP pools patch tokens only
  Tensor logits_tok = ops::add(ops::matmul(patch_out, model.head_w), model.head_b);
  Tensor logits = ops::reduce_mean(logits_tok, {0, 1});

  if (cfg.sme_enabled() && cfg.sme_mode == SmeMode::Additional) {
    std::vector<Tensor> frames;
    frames.reserve(indices.size());
    {
      ScopeGuard inner("adapter");
      for (int idx : indices) {
        frames.push_back(sme_forward(raw_video, idx, model.sme, model.side_patch_w,
                                     model.side_patch_b, model.side_cls, model.side_pos));
      }
    }
    Tensor extra = stack_frames(std::move(frames));
    Tensor extra_patches = ops::slice(extra, 1, 1, extra.dim(1) - 1);
    Tensor extra_logits =
        ops::reduce_mean(ops::add(ops::matmul(extra_patches, model.head_w), model.head_b), {0, 1});
    logits = ops::add(logits, extra_logits);
  }
  return logits;
}

Tensor network_forward(const TdsModel& model, const Tensor& raw_video) {
  const int t_raw = raw_video.dim(1);
  const int t = model.cfg.frames;
  if (t_raw < t) {
    throw std::invalid_argument("network: clip has " + std::to_string(t_raw) +
                                " frames, need at least " + std::to_string(t));
  }
  std::vector<int> indices;
  indices.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    const int lo = (i * t_raw) / t;
    const int hi = ((i + 1) * t_raw) / t;
    indices.push_back(lo + (hi - lo) / 2);
  }
  return network_forward(model, raw_video, indices, nullptr, nullptr);
}

Tensor ls_cross_entropy(const Tensor& logits, int label, double smoothing) {
  return ops::cross_entropy_ls(logits, label, smoothing);
}

}  // namespace tds
