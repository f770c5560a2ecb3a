#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "tds/tensor.hpp"

namespace tds::ops {

// b may share a's shape or be a suffix of it (broadcast over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// a: [.., m, k] (leading axes batched), b: [k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [B, m, k], b: [B, k, n].
Tensor bmm(const Tensor& a, const Tensor& b);

Tensor slice(const Tensor& a, int axis, int start, int length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, const Shape& shape);

enum class PadMode { Constant, Replicate };
// pads: (before, after) per axis.
Tensor pad(const Tensor& a, const std::vector<std::pair<int, int>>& pads, PadMode mode,
           double value = 0.0);

Tensor softmax(const Tensor& a);  // over last axis
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& a);

// x: [Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h, int stride_w,
              int pad_h = 0, int pad_w = 0);

// x: [Cin, T, H, W], w: [Cout, Cin, kt, kh, kw], b: [Cout] or undefined. Stride 1.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int pad_t, int pad_h, int pad_w,
              PadMode pad_mode = PadMode::Constant);

// x: [C, T, H, W]; odd kernels; stride 1; same-length replicate padding.
// Ties route gradient to the lowest input linear index.
Tensor maxpool3d(const Tensor& x, int kt, int kh, int kw);

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes);
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes);
Tensor sum_all(const Tensor& a);

// Label-smoothed softmax cross-entropy of a logit vector [N].
Tensor cross_entropy_ls(const Tensor& logits, int label, double smoothing);

enum class PrimitiveKind {
  Add, Sub, Mul, Scale, MatMul, Bmm, Slice, Concat, Permute, Reshape, Pad,
  Softmax, LayerNorm, Gelu, Conv2d, Conv3d, MaxPool3d, ReduceMean, ReduceSum,
  CrossEntropyLs,
};

PrimitiveKind primitive_kind_from_string(const std::string& name);

using AttrValue = std::variant<int, double, std::string, std::vector<int>>;
using AttrMap = std::map<std::string, AttrValue>;

// Uniform dispatch surface over the typed primitives above.
Tensor primitive_forward(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                         const AttrMap& attrs);

}  // namespace tds::ops
