#pragma once

#include <cstdint>
#include <string>

#include "tds/checkpoint.hpp"
#include "tds/tensor.hpp"

namespace tds {

// Side motion enhancement: strided conv over concatenated frame differences,
// fused with the side network's own appearance embedding of the centre frame.
struct SmeParams {
  Tensor conv_w;  // [C, 3*2n, P, P], no bias so static input yields a zero motion term
  double alpha = 1.0;
  double beta = 1.0;
  int window_radius = 2;
  int patch_size = 8;
};

SmeParams make_sme(ParamSet& params, const std::string& prefix, int out_channels,
                   int window_radius, int patch_size, double alpha, double beta,
                   std::uint64_t seed);

// Temporal difference adapter: bottleneck 1x1x1 convs around a max-pool
// difference on the temporal axis.
struct TdParams {
  Tensor reduce_w, reduce_b;  // [C/r, C, 1,1,1], [C/r]
  Tensor expand_w;            // [C, C/r, 1,1,1]; bias-free to keep the static-input identity
  int pool_kernel = 3;
  int reduction = 2;
  bool use_conv = false;      // ablation: temporal conv instead of max-pool
  Tensor pool_conv_w;         // [C/r, C/r, k,1,1] when use_conv
};

TdParams make_td(ParamSet& params, const std::string& prefix, int channels, int reduction,
                 int pool_kernel, bool use_conv, std::uint64_t seed);

// Frames i-n .. i+n of the raw clip with replicate clamping at the ends.
Tensor local_window(const Tensor& video, int center_index, int radius);

// Consecutive forward differences of a [3, 2n+1, H, W] window, channel-concatenated.
Tensor frame_differences(const Tensor& window);

// S_out rows: alpha * motion patches + beta * appearance embedding of frame i;
// the CLS row carries only the beta-scaled appearance term.
Tensor sme_forward(const Tensor& video, int frame_index, const SmeParams& sme,
                   const Tensor& embed_w, const Tensor& embed_b, const Tensor& cls,
                   const Tensor& pos);

// Z - temporal max-pool of Z over a k-window (same length, replicate padding).
Tensor pool_difference(const Tensor& z, int pool_kernel);

// tokens: [T, 1+N, C] with a square patch grid; CLS bypasses, patch rows get the
// reduce / pool-difference / expand pipeline added residually.
Tensor td_forward(const Tensor& tokens, const TdParams& td, int grid_h, int grid_w);

// First C/div channels shift backward one frame, next C/div forward; vacated
// boundary slots are zero-filled.
Tensor cls_shift(const Tensor& cls_sequence, int div = 4);

}  // namespace tds
