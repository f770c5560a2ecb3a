#include "tds/adapters.hpp"

#include <stdexcept>

#include "tds/ops.hpp"
#include "tds/rng.hpp"
#include "tds/vit.hpp"

namespace tds {

SmeParams make_sme(ParamSet& params, const std::string& prefix, int out_channels,
                   int window_radius, int patch_size, double alpha, double beta,
                   std::uint64_t seed) {
  if (window_radius < 1) throw std::invalid_argument("sme: window radius must be >= 1");
  if (!std::isfinite(alpha) || !std::isfinite(beta)) {
    throw std::invalid_argument("sme: fusion weights must be finite");
  }
  SmeParams sme;
  sme.alpha = alpha;
  sme.beta = beta;
  sme.window_radius = window_radius;
  sme.patch_size = patch_size;
  const int in_ch = 3 * 2 * window_radius;
  const std::size_t n =
      static_cast<std::size_t>(out_channels) * in_ch * patch_size * patch_size;
  sme.conv_w = params.add(prefix + ".conv.w", {out_channels, in_ch, patch_size, patch_size},
                          normal_values(n, 0.02, seed), true);
  return sme;
}

TdParams make_td(ParamSet& params, const std::string& prefix, int channels, int reduction,
                 int pool_kernel, bool use_conv, std::uint64_t seed) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument("td: channels " + std::to_string(channels) +
                                " not divisible by reduction " + std::to_string(reduction));
  }
  if (pool_kernel % 2 == 0 || pool_kernel < 1) {
    throw std::invalid_argument("td: pool kernel must be odd, got " +
                                std::to_string(pool_kernel));
  }
  const int mid = channels / reduction;
  TdParams td;
  td.pool_kernel = pool_kernel;
  td.reduction = reduction;
  td.use_conv = use_conv;
  td.reduce_w = params.add(prefix + ".reduce.w", {mid, channels, 1, 1, 1},
                           normal_values(static_cast<std::size_t>(mid) * channels, 0.02,
                                         mix_seed(seed, 1)),
                           true);
  td.reduce_b = params.add(prefix + ".reduce.b", {mid},
                           std::vector<double>(static_cast<std::size_t>(mid), 0.0), true);
  // Zero init makes the adapter start as an exact identity on the residual path.
  td.expand_w = params.add(prefix + ".expand.w", {channels, mid, 1, 1, 1},
                           std::vector<double>(static_cast<std::size_t>(channels) * mid, 0.0),
                           true);
  if (use_conv) {
    td.pool_conv_w = params.add(
        prefix + ".tconv.w", {mid, mid, pool_kernel, 1, 1},
        normal_values(static_cast<std::size_t>(mid) * mid * pool_kernel, 0.02, mix_seed(seed, 2)),
        true);
  }
  return td;
}

Tensor local_window(const Tensor& video, int center_index, int radius) {
  if (video.rank() != 4 || video.dim(0) != 3) {
    throw std::invalid_argument("local_window: video must be [3,T,H,W], got " +
                                shape_str(video.shape()));
  }
  const int t = video.dim(1);
  if (center_index < 0 || center_index >= t) {
    throw std::out_of_range("local_window: index " + std::to_string(center_index) +
                            " out of range for " + std::to_string(t) + " frames");
  }
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(2 * radius + 1));
  for (int off = -radius; off <= radius; ++off) {
    const int idx = std::clamp(center_index + off, 0, t - 1);
    frames.push_back(ops::slice(video, 1, idx, 1));
  }
  return ops::concat(frames, 1);
}

Tensor frame_differences(const Tensor& window) {
  if (window.rank() != 4 || window.dim(0) != 3) {
    throw std::invalid_argument("frame_differences: window must be [3,F,H,W], got " +
                                shape_str(window.shape()));
  }
  const int f = window.dim(1);
  if (f < 2) throw std::invalid_argument("frame_differences: needs at least 2 frames");
  const int h = window.dim(2), w = window.dim(3);
  std::vector<Tensor> diffs;
  diffs.reserve(static_cast<std::size_t>(f - 1));
  for (int i = 0; i + 1 < f; ++i) {
    Tensor next = ops::reshape(ops::slice(window, 1, i + 1, 1), {3, h, w});
    Tensor prev = ops::reshape(ops::slice(window, 1, i, 1), {3, h, w});
    diffs.push_back(ops::sub(next, prev));
  }
  return ops::concat(diffs, 0);
}

Tensor sme_forward(const Tensor& video, int frame_index, const SmeParams& sme,
                   const Tensor& embed_w, const Tensor& embed_b, const Tensor& cls,
                   const Tensor& pos) {
  const int h = video.dim(2), w = video.dim(3);
  Tensor window = local_window(video, frame_index, sme.window_radius);
  Tensor diffs = frame_differences(window);
  Tensor motion_grid = ops::conv2d(diffs, sme.conv_w, Tensor(), sme.patch_size, sme.patch_size);
  const int c = motion_grid.dim(0);
  const int n = motion_grid.dim(1) * motion_grid.dim(2);
  if ((h / sme.patch_size) * (w / sme.patch_size) != n) {
    throw std::invalid_argument("sme_forward: conv grid does not match patch grid");
  }
  Tensor motion_rows =
      ops::reshape(ops::permute(motion_grid, {1, 2, 0}), {n, c});  // [N, C]

  Tensor frame = ops::reshape(ops::slice(video, 1, frame_index, 1), {3, h, w});
  Tensor appearance = build_frame_tokens(patch_embed(frame, sme.patch_size, embed_w, embed_b),
                                         cls, pos);  // [1+N, C]

  // The motion term has no CLS row; pad one zero row at the top.
  Tensor motion_tokens = ops::pad(motion_rows, {{1, 0}, {0, 0}}, ops::PadMode::Constant, 0.0);
  return ops::add(ops::scale(motion_tokens, sme.alpha), ops::scale(appearance, sme.beta));
}

Tensor pool_difference(const Tensor& z, int pool_kernel) {
  if (z.rank() != 4) {
    throw std::invalid_argument("pool_difference: input must be [C,T,H,W], got " +
                                shape_str(z.shape()));
  }
  if (pool_kernel % 2 == 0 || pool_kernel < 1) {
    throw std::invalid_argument("pool_difference: kernel must be odd, got " +
                                std::to_string(pool_kernel));
  }
  return ops::sub(z, ops::maxpool3d(z, pool_kernel, 1, 1));
}

Tensor td_forward(const Tensor& tokens, const TdParams& td, int grid_h, int grid_w) {
  if (tokens.rank() != 3) {
    throw std::invalid_argument("td_forward: tokens must be [T,1+N,C], got " +
                                shape_str(tokens.shape()));
  }
  const int t = tokens.dim(0), s = tokens.dim(1), c = tokens.dim(2);
  if (grid_h * grid_w != s - 1) {
    throw std::invalid_argument("td_forward: grid " + std::to_string(grid_h) + "x" +
                                std::to_string(grid_w) + " does not match " +
                                std::to_string(s - 1) + " patch tokens");
  }
  if (c % td.reduction != 0) {
    throw std::invalid_argument("td_forward: channels not divisible by reduction");
  }

  Tensor cls_rows = ops::slice(tokens, 1, 0, 1);
  Tensor patches = ops::slice(tokens, 1, 1, s - 1);  // [T, N, C]

  Tensor vol = ops::permute(ops::reshape(patches, {t, grid_h, grid_w, c}), {3, 0, 1, 2});
  Tensor reduced = ops::conv3d(vol, td.reduce_w, td.reduce_b, 0, 0, 0);
  Tensor dyn;
  if (td.use_conv) {
    const int pad = td.pool_kernel / 2;
    dyn = ops::sub(reduced, ops::conv3d(reduced, td.pool_conv_w, Tensor(), pad, 0, 0,
                                        ops::PadMode::Replicate));
  } else {
    dyn = pool_difference(reduced, td.pool_kernel);
  }
  Tensor expanded = ops::conv3d(dyn, td.expand_w, Tensor(), 0, 0, 0);
  Tensor rows = ops::reshape(ops::permute(expanded, {1, 2, 3, 0}), {t, s - 1, c});

  Tensor fused = ops::add(patches, rows);
  return ops::concat({cls_rows, fused}, 1);
}

Tensor cls_shift(const Tensor& cls_sequence, int div) {
  if (cls_sequence.rank() != 2) {
    throw std::invalid_argument("cls_shift: expected [T,C], got " +
                                shape_str(cls_sequence.shape()));
  }
  const int t = cls_sequence.dim(0), c = cls_sequence.dim(1);
  if (div < 2 || c < div) {
    throw std::invalid_argument("cls_shift: channel dim " + std::to_string(c) +
                                " too small for split " + std::to_string(div));
  }
  const int part = c / div;

  Tensor back = ops::slice(cls_sequence, 1, 0, part);         // frame t takes t+1
  Tensor fwd = ops::slice(cls_sequence, 1, part, part);       // frame t takes t-1
  Tensor rest = ops::slice(cls_sequence, 1, 2 * part, c - 2 * part);

  Tensor back_shifted, fwd_shifted;
  if (t > 1) {
    back_shifted = ops::pad(ops::slice(back, 0, 1, t - 1), {{0, 1}, {0, 0}},
                            ops::PadMode::Constant, 0.0);
    fwd_shifted = ops::pad(ops::slice(fwd, 0, 0, t - 1), {{1, 0}, {0, 0}},
                           ops::PadMode::Constant, 0.0);
  } else {
    back_shifted = ops::scale(back, 0.0);
    fwd_shifted = ops::scale(fwd, 0.0);
  }
  return ops::concat({back_shifted, fwd_shifted, rest}, 1);
}

}  // namespace tds
