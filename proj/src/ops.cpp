#include "tds/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace tds::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StrideDyn = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

std::shared_ptr<Node> make_node(const char* op, const std::vector<Tensor>& inputs,
                                const Tensor& out) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->scope = current_scope();
  node->out_shape = out.shape();
  node->out_id = out.id();
  node->edges.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    node->edges.push_back(Edge{in.id(), in.requires_grad(), in.shape(), in.node()});
  }
  return node;
}

void push_saved(Node& node, std::initializer_list<Tensor> tensors) {
  for (const Tensor& t : tensors) {
    if (t.defined()) node.saved.push_back(t);
  }
}

std::vector<std::int64_t> row_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] =
        s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    shape_error("add", "rhs " + shape_str(bs) + " is not a suffix of lhs " + shape_str(as));
  }
  const std::int64_t n = a.numel();
  const std::int64_t bn = b.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % bn];

  Tensor result = Tensor::from_data(as, std::move(out));
  if (recording({&a, &b})) {
    auto node = make_node("add", {a, b}, result);
    node->apply = [n, bn](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (sink.needs(0)) sink.add(0, g);
      if (sink.needs(1)) {
        auto& buf = sink.buffer(1);
        for (std::int64_t i = 0; i < n; ++i) buf[i % bn] += g[i];
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error("sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a, &b})) {
    auto node = make_node("sub", {a, b}, result);
    node->apply = [n](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (sink.needs(0)) sink.add(0, g);
      if (sink.needs(1)) {
        auto& buf = sink.buffer(1);
        for (std::int64_t i = 0; i < n; ++i) buf[i] -= g[i];
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a, &b})) {
    auto node = make_node("mul", {a, b}, result);
    Tensor a_saved = b.requires_grad() ? a : Tensor();
    Tensor b_saved = a.requires_grad() ? b : Tensor();
    push_saved(*node, {a_saved, b_saved});
    node->apply = [n, a_saved, b_saved](const Node&, const std::vector<double>& g,
                                        GradSink& sink) {
      if (sink.needs(0)) {
        auto& buf = sink.buffer(0);
        const auto& bv2 = b_saved.values();
        for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i] * bv2[i];
      }
      if (sink.needs(1)) {
        auto& buf = sink.buffer(1);
        const auto& av2 = a_saved.values();
        for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i] * av2[i];
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  const std::int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * factor;

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a})) {
    auto node = make_node("scale", {a}, result);
    node->apply = [n, factor](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i] * factor;
    };
    result.attach_node(node);
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2) shape_error("matmul", "lhs rank must be >= 2, got " + shape_str(a.shape()));
  if (b.rank() != 2) shape_error("matmul", "rhs rank must be 2, got " + shape_str(b.shape()));
  const int m = a.dim(a.rank() - 2);
  const int k = a.dim(a.rank() - 1);
  if (k != b.dim(0)) {
    shape_error("matmul", "inner dimensions " + std::to_string(k) + " vs " +
                              std::to_string(b.dim(0)) + " (lhs " + shape_str(a.shape()) +
                              ", rhs " + shape_str(b.shape()) + ")");
  }
  const int nn = b.dim(1);
  std::int64_t batches = 1;
  Shape out_shape = a.shape();
  out_shape.back() = nn;
  for (int i = 0; i < a.rank() - 2; ++i) batches *= a.dim(i);

  std::vector<double> out(static_cast<std::size_t>(batches) * m * nn);
  ConstMap bm(b.values().data(), k, nn);
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    ConstMap am(a.values().data() + bi * m * k, m, k);
    MutMap om(out.data() + bi * m * nn, m, nn);
    om.noalias() = am * bm;
  }

  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (recording({&a, &b})) {
    auto node = make_node("matmul", {a, b}, result);
    Tensor a_saved = b.requires_grad() ? a : Tensor();
    Tensor b_saved = a.requires_grad() ? b : Tensor();
    push_saved(*node, {a_saved, b_saved});
    node->apply = [batches, m, k, nn, a_saved, b_saved](const Node&,
                                                        const std::vector<double>& g,
                                                        GradSink& sink) {
      if (sink.needs(0)) {
        auto& buf = sink.buffer(0);
        ConstMap bm2(b_saved.values().data(), k, nn);
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          ConstMap gm(g.data() + bi * m * nn, m, nn);
          MutMap dm(buf.data() + bi * m * k, m, k);
          dm.noalias() += gm * bm2.transpose();
        }
      }
      if (sink.needs(1)) {
        auto& buf = sink.buffer(1);
        MutMap dm(buf.data(), k, nn);
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          ConstMap am2(a_saved.values().data() + bi * m * k, m, k);
          ConstMap gm(g.data() + bi * m * nn, m, nn);
          dm.noalias() += am2.transpose() * gm;
        }
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3) {
    shape_error("bmm", "expects rank-3 operands, got " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
  }
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_error("bmm", "incompatible shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
  }
  const int batches = a.dim(0);
  const int m = a.dim(1);
  const int k = a.dim(2);
  const int nn = b.dim(2);
  std::vector<double> out(static_cast<std::size_t>(batches) * m * nn);
  for (int bi = 0; bi < batches; ++bi) {
    ConstMap am(a.values().data() + static_cast<std::int64_t>(bi) * m * k, m, k);
    ConstMap bm(b.values().data() + static_cast<std::int64_t>(bi) * k * nn, k, nn);
    MutMap om(out.data() + static_cast<std::int64_t>(bi) * m * nn, m, nn);
    om.noalias() = am * bm;
  }

  Tensor result = Tensor::from_data({batches, m, nn}, std::move(out));
  if (recording({&a, &b})) {
    auto node = make_node("bmm", {a, b}, result);
    Tensor a_saved = b.requires_grad() ? a : Tensor();
    Tensor b_saved = a.requires_grad() ? b : Tensor();
    push_saved(*node, {a_saved, b_saved});
    node->apply = [batches, m, k, nn, a_saved, b_saved](const Node&,
                                                        const std::vector<double>& g,
                                                        GradSink& sink) {
      for (int bi = 0; bi < batches; ++bi) {
        ConstMap gm(g.data() + static_cast<std::int64_t>(bi) * m * nn, m, nn);
        if (sink.needs(0)) {
          ConstMap bm2(b_saved.values().data() + static_cast<std::int64_t>(bi) * k * nn, k, nn);
          MutMap dm(sink.buffer(0).data() + static_cast<std::int64_t>(bi) * m * k, m, k);
          dm.noalias() += gm * bm2.transpose();
        }
        if (sink.needs(1)) {
          ConstMap am2(a_saved.values().data() + static_cast<std::int64_t>(bi) * m * k, m, k);
          MutMap dm(sink.buffer(1).data() + static_cast<std::int64_t>(bi) * k * nn, k, nn);
          dm.noalias() += am2.transpose() * gm;
        }
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor slice(const Tensor& a, int axis, int start, int length) {
  if (axis < 0 || axis >= a.rank()) {
    shape_error("slice", "axis " + std::to_string(axis) + " out of range for " +
                             shape_str(a.shape()));
  }
  if (start < 0 || length <= 0 || start + length > a.dim(axis)) {
    shape_error("slice", "window [" + std::to_string(start) + ", " +
                             std::to_string(start + length) + ") exceeds axis extent " +
                             std::to_string(a.dim(axis)));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t extent = a.dim(axis);

  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
  const auto& av = a.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = av.data() + (o * extent + start) * inner;
    double* dst = out.data() + o * length * inner;
    std::copy(src, src + length * inner, dst);
  }

  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (recording({&a})) {
    auto node = make_node("slice", {a}, result);
    node->apply = [outer, inner, extent, start, length](const Node&,
                                                        const std::vector<double>& g,
                                                        GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * length * inner;
        double* dst = buf.data() + (o * extent + start) * inner;
        for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Tensor& first = parts.front();
  if (axis < 0 || axis >= first.rank()) {
    shape_error("concat", "axis " + std::to_string(axis) + " out of range for " +
                              shape_str(first.shape()));
  }
  Shape out_shape = first.shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) {
      shape_error("concat", "rank mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(first.shape()));
    }
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && p.dim(i) != first.dim(i)) {
        shape_error("concat", "extent mismatch on axis " + std::to_string(i) + ": " +
                                  shape_str(p.shape()) + " vs " + shape_str(first.shape()));
      }
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);

  std::vector<double> out(static_cast<std::size_t>(outer * total * inner));
  std::vector<int> extents;
  extents.reserve(parts.size());
  {
    std::int64_t offset = 0;
    for (const Tensor& p : parts) {
      const int e = p.dim(axis);
      extents.push_back(e);
      const auto& pv = p.values();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(pv.data() + o * e * inner, pv.data() + (o + 1) * e * inner,
                  out.data() + (o * total + offset) * inner);
      }
      offset += e;
    }
  }

  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  bool rec = false;
  for (const Tensor& p : parts) rec = rec || (grad_enabled() && p.requires_grad());
  if (rec && grad_enabled()) {
    auto node = make_node("concat", parts, result);
    node->apply = [outer, inner, total, extents](const Node&, const std::vector<double>& g,
                                                 GradSink& sink) {
      std::int64_t offset = 0;
      for (std::size_t pi = 0; pi < extents.size(); ++pi) {
        const int e = extents[pi];
        if (sink.needs(pi)) {
          auto& buf = sink.buffer(pi);
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * total + offset) * inner;
            double* dst = buf.data() + o * e * inner;
            for (std::int64_t i = 0; i < e * inner; ++i) dst[i] += src[i];
          }
        }
        offset += e;
      }
    };
    result.attach_node(node);
  }
  return result;
}

namespace {

std::vector<double> permute_buffer(const std::vector<double>& src, const Shape& in_shape,
                                   const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
  const auto in_str = row_strides(in_shape);
  const auto out_str = row_strides(out_shape);
  const std::int64_t n = shape_numel(in_shape);
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t rem = flat;
    std::int64_t src_off = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t q = rem / out_str[static_cast<std::size_t>(i)];
      rem -= q * out_str[static_cast<std::size_t>(i)];
      src_off += q * in_str[static_cast<std::size_t>(perm[i])];
    }
    out[static_cast<std::size_t>(flat)] = src[static_cast<std::size_t>(src_off)];
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) {
    shape_error("permute", "permutation length " + std::to_string(perm.size()) +
                               " does not match rank " + std::to_string(r));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
      shape_error("permute", "invalid permutation entry " + std::to_string(p));
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = a.dim(perm[static_cast<std::size_t>(i)]);
  std::vector<double> out = permute_buffer(a.values(), a.shape(), perm);

  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (recording({&a})) {
    auto node = make_node("permute", {a}, result);
    std::vector<int> inverse(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(perm[i])] = i;
    Shape fwd_out = result.shape();
    node->apply = [inverse, fwd_out](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      sink.add(0, permute_buffer(g, fwd_out, inverse));
    };
    result.attach_node(node);
  }
  return result;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_error("reshape", "target " + shape_str(shape) + " has wrong element count for " +
                               shape_str(a.shape()));
  }
  Tensor result = a.detach().alias_with_shape(shape);
  if (recording({&a})) {
    auto node = make_node("reshape", {a}, result);
    node->apply = [](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (sink.needs(0)) sink.add(0, g);
    };
    result.attach_node(node);
  }
  return result;
}

Tensor pad(const Tensor& a, const std::vector<std::pair<int, int>>& pads, PadMode mode,
           double value) {
  const int r = a.rank();
  if (static_cast<int>(pads.size()) != r) {
    shape_error("pad", "pad list length " + std::to_string(pads.size()) +
                           " does not match rank " + std::to_string(r));
  }
  Shape out_shape = a.shape();
  for (int i = 0; i < r; ++i) {
    if (pads[i].first < 0 || pads[i].second < 0) shape_error("pad", "negative pad amount");
    out_shape[static_cast<std::size_t>(i)] += pads[i].first + pads[i].second;
  }
  const auto in_str = row_strides(a.shape());
  const auto out_str = row_strides(out_shape);
  const std::int64_t n = shape_numel(out_shape);
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const Shape in_shape = a.shape();
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t rem = flat;
    std::int64_t src = 0;
    bool outside = false;
    for (int i = 0; i < r; ++i) {
      std::int64_t q = rem / out_str[static_cast<std::size_t>(i)];
      rem -= q * out_str[static_cast<std::size_t>(i)];
      std::int64_t coord = q - pads[static_cast<std::size_t>(i)].first;
      if (coord < 0 || coord >= in_shape[static_cast<std::size_t>(i)]) {
        if (mode == PadMode::Constant) {
          outside = true;
          break;
        }
        coord = std::clamp<std::int64_t>(coord, 0, in_shape[static_cast<std::size_t>(i)] - 1);
      }
      src += coord * in_str[static_cast<std::size_t>(i)];
    }
    out[static_cast<std::size_t>(flat)] = outside ? value : av[static_cast<std::size_t>(src)];
  }

  Tensor result = Tensor::from_data(out_shape, std::move(out));
  if (recording({&a})) {
    auto node = make_node("pad", {a}, result);
    Shape saved_in = a.shape();
    node->apply = [pads, mode, saved_in, out_shape, in_str, out_str, n](
                      const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      const int rr = static_cast<int>(saved_in.size());
      for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t rem = flat;
        std::int64_t src = 0;
        bool outside = false;
        for (int i = 0; i < rr; ++i) {
          std::int64_t q = rem / out_str[static_cast<std::size_t>(i)];
          rem -= q * out_str[static_cast<std::size_t>(i)];
          std::int64_t coord = q - pads[static_cast<std::size_t>(i)].first;
          if (coord < 0 || coord >= saved_in[static_cast<std::size_t>(i)]) {
            if (mode == PadMode::Constant) {
              outside = true;
              break;
            }
            coord = std::clamp<std::int64_t>(coord, 0, saved_in[static_cast<std::size_t>(i)] - 1);
          }
          src += coord * in_str[static_cast<std::size_t>(i)];
        }
        if (!outside) buf[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(flat)];
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) shape_error("softmax", "rank must be >= 1");
  const int c = a.dim(a.rank() - 1);
  const std::int64_t rows = a.numel() / c;
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const auto& av = a.values();
  for (std::int64_t row = 0; row < rows; ++row) {
    const double* x = av.data() + row * c;
    double* y = out.data() + row * c;
    double mx = x[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < c; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (int i = 0; i < c; ++i) y[i] /= sum;
  }

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a})) {
    auto node = make_node("softmax", {a}, result);
    Tensor y_saved = result.detach();
    push_saved(*node, {y_saved});
    node->apply = [rows, c, y_saved](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      const auto& yv = y_saved.values();
      for (std::int64_t row = 0; row < rows; ++row) {
        const double* y = yv.data() + row * c;
        const double* gr = g.data() + row * c;
        double dot = 0.0;
        for (int i = 0; i < c; ++i) dot += gr[i] * y[i];
        double* d = buf.data() + row * c;
        for (int i = 0; i < c; ++i) d[i] += y[i] * (gr[i] - dot);
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  if (a.rank() < 1) shape_error("layer_norm", "rank must be >= 1");
  const int c = a.dim(a.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
    shape_error("layer_norm", "gamma/beta must be [" + std::to_string(c) + "], got " +
                                  shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::int64_t rows = a.numel() / c;
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const auto& av = a.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::int64_t row = 0; row < rows; ++row) {
    const double* x = av.data() + row * c;
    double* y = out.data() + row * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += x[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= c;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i) y[i] = (x[i] - mean) * rstd * gv[i] + bv[i];
  }

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a, &gamma, &beta})) {
    auto node = make_node("layer_norm", {a, gamma, beta}, result);
    Tensor a_saved = (a.requires_grad() || gamma.requires_grad()) ? a : Tensor();
    Tensor g_saved = a.requires_grad() ? gamma : Tensor();
    push_saved(*node, {a_saved, g_saved});
    node->apply = [rows, c, eps, a_saved, g_saved](const Node&, const std::vector<double>& g,
                                                   GradSink& sink) {
      const bool need_x = sink.needs(0);
      const bool need_gamma = sink.needs(1);
      const bool need_beta = sink.needs(2);
      static const std::vector<double> kEmpty;
      const auto& xv = a_saved.defined() ? a_saved.values() : kEmpty;
      for (std::int64_t row = 0; row < rows; ++row) {
        const double* gr = g.data() + row * c;
        if (need_beta) {
          auto& buf = sink.buffer(2);
          for (int i = 0; i < c; ++i) buf[i] += gr[i];
        }
        if (!need_x && !need_gamma) continue;
        const double* x = xv.data() + row * c;
        double mean = 0.0;
        for (int i = 0; i < c; ++i) mean += x[i];
        mean /= c;
        double var = 0.0;
        for (int i = 0; i < c; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= c;
        const double rstd = 1.0 / std::sqrt(var + eps);
        if (need_gamma) {
          auto& buf = sink.buffer(1);
          for (int i = 0; i < c; ++i) buf[i] += gr[i] * (x[i] - mean) * rstd;
        }
        if (need_x) {
          auto& buf = sink.buffer(0);
          const auto& gmv = g_saved.values();
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int i = 0; i < c; ++i) {
            const double xhat = (x[i] - mean) * rstd;
            const double dxhat = gr[i] * gmv[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
          }
          mean_dxhat /= c;
          mean_dxhat_xhat /= c;
          double* d = buf.data() + row * c;
          for (int i = 0; i < c; ++i) {
            const double xhat = (x[i] - mean) * rstd;
            const double dxhat = gr[i] * gmv[i];
            d[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
          }
        }
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor gelu(const Tensor& a) {
  const std::int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& av = a.values();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::int64_t i = 0; i < n; ++i) {
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
  }

  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (recording({&a})) {
    auto node = make_node("gelu", {a}, result);
    Tensor a_saved = a;
    push_saved(*node, {a_saved});
    node->apply = [n, a_saved](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      const auto& xv = a_saved.values();
      constexpr double inv_sqrt2_ = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (std::int64_t i = 0; i < n; ++i) {
        const double x = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2_));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        buf[i] += g[i] * (cdf + x * pdf);
      }
    };
    result.attach_node(node);
  }
  return result;
}

namespace {

// Patch layout for conv-as-GEMM: rows index (ci, ky, kx), columns (oy, ox).
std::vector<double> im2col(const std::vector<double>& xv, int cin, int h, int wdt, int kh,
                           int kw, int sh, int sw, int ph, int pw, int ho, int wo) {
  std::vector<double> cols(static_cast<std::size_t>(cin) * kh * kw * ho * wo, 0.0);
  const std::int64_t span = static_cast<std::int64_t>(ho) * wo;
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* row = cols.data() + ((static_cast<std::int64_t>(ci) * kh + ky) * kw + kx) * span;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * sh - ph + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = xv.data() + (static_cast<std::int64_t>(ci) * h + iy) * wdt;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * sw - pw + kx;
            if (ix < 0 || ix >= wdt) continue;
            row[static_cast<std::int64_t>(oy) * wo + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const std::vector<double>& cols, std::vector<double>& dx, int cin, int h,
                int wdt, int kh, int kw, int sh, int sw, int ph, int pw, int ho, int wo) {
  const std::int64_t span = static_cast<std::int64_t>(ho) * wo;
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* row =
            cols.data() + ((static_cast<std::int64_t>(ci) * kh + ky) * kw + kx) * span;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * sh - ph + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx.data() + (static_cast<std::int64_t>(ci) * h + iy) * wdt;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * sw - pw + kx;
            if (ix < 0 || ix >= wdt) continue;
            dst[ix] += row[static_cast<std::int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h, int stride_w,
              int pad_h, int pad_w) {
  if (x.rank() != 3) shape_error("conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) {
    shape_error("conv2d", "weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  }
  if (stride_h <= 0 || stride_w <= 0 || pad_h < 0 || pad_w < 0) {
    shape_error("conv2d", "stride must be positive and padding non-negative");
  }
  const int cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    shape_error("conv2d", "input channels " + std::to_string(cin) + " vs weight channels " +
                              std::to_string(w.dim(1)));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    shape_error("conv2d", "bias must be [" + std::to_string(cout) + "]");
  }
  const int ho = (h + 2 * pad_h - kh) / stride_h + 1;
  const int wo = (wdt + 2 * pad_w - kw) / stride_w + 1;
  if (ho <= 0 || wo <= 0) shape_error("conv2d", "kernel larger than padded input");

  const int kdim = cin * kh * kw;
  const std::int64_t span = static_cast<std::int64_t>(ho) * wo;
  std::vector<double> cols =
      im2col(x.values(), cin, h, wdt, kh, kw, stride_h, stride_w, pad_h, pad_w, ho, wo);
  std::vector<double> out(static_cast<std::size_t>(cout) * span);
  {
    ConstMap wm(w.values().data(), cout, kdim);
    ConstMap cm(cols.data(), kdim, span);
    MutMap om(out.data(), cout, span);
    om.noalias() = wm * cm;
    if (b.defined()) {
      for (int co = 0; co < cout; ++co) {
        om.row(co).array() += b.values()[static_cast<std::size_t>(co)];
      }
    }
  }

  Tensor result = Tensor::from_data({cout, ho, wo}, std::move(out));
  if (recording({&x, &w, &b})) {
    std::vector<Tensor> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    auto node = make_node("conv2d", inputs, result);
    Tensor x_saved = w.requires_grad() ? x : Tensor();
    Tensor w_saved = x.requires_grad() ? w : Tensor();
    push_saved(*node, {x_saved, w_saved});
    const bool has_bias = b.defined();
    node->apply = [=](const Node&, const std::vector<double>& g, GradSink& sink) {
      const bool need_x = sink.needs(0);
      const bool need_w = sink.needs(1);
      const bool need_b = has_bias && sink.needs(2);
      ConstMap gm(g.data(), cout, span);
      if (need_b) {
        auto& buf = sink.buffer(2);
        for (int co = 0; co < cout; ++co) buf[static_cast<std::size_t>(co)] += gm.row(co).sum();
      }
      if (need_w) {
        std::vector<double> cols2 = im2col(x_saved.values(), cin, h, wdt, kh, kw, stride_h,
                                           stride_w, pad_h, pad_w, ho, wo);
        ConstMap cm(cols2.data(), kdim, span);
        MutMap dwm(sink.buffer(1).data(), cout, kdim);
        dwm.noalias() += gm * cm.transpose();
      }
      if (need_x) {
        std::vector<double> dcols(static_cast<std::size_t>(kdim) * span);
        ConstMap wm(w_saved.values().data(), cout, kdim);
        MutMap dcm(dcols.data(), kdim, span);
        dcm.noalias() = wm.transpose() * gm;
        col2im_add(dcols, sink.buffer(0), cin, h, wdt, kh, kw, stride_h, stride_w, pad_h, pad_w,
                   ho, wo);
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int pad_t, int pad_h, int pad_w,
              PadMode pad_mode) {
  if (x.rank() != 4) shape_error("conv3d", "input must be [C,T,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 5) {
    shape_error("conv3d", "weight must be [Cout,Cin,kt,kh,kw], got " + shape_str(w.shape()));
  }
  if (pad_t < 0 || pad_h < 0 || pad_w < 0) shape_error("conv3d", "negative padding");
  const int cin = x.dim(0), t = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const int cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  if (w.dim(1) != cin) {
    shape_error("conv3d", "input channels " + std::to_string(cin) + " vs weight channels " +
                              std::to_string(w.dim(1)));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    shape_error("conv3d", "bias must be [" + std::to_string(cout) + "]");
  }
  const int to = t + 2 * pad_t - kt + 1;
  const int ho = h + 2 * pad_h - kh + 1;
  const int wo = wdt + 2 * pad_w - kw + 1;
  if (to <= 0 || ho <= 0 || wo <= 0) shape_error("conv3d", "kernel larger than padded input");

  const bool rep = pad_mode == PadMode::Replicate;
  auto src_coord = [rep](int v, int extent) -> int {
    if (v >= 0 && v < extent) return v;
    if (!rep) return -1;
    return std::clamp(v, 0, extent - 1);
  };

  std::vector<double> out(static_cast<std::size_t>(cout) * to * ho * wo, 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  // Spatially pointwise kernels reduce to GEMMs over [C x HW] slices per frame,
  // which covers every kernel this model family uses (1x1x1 and k x1x1).
  const bool pointwise = kh == 1 && kw == 1 && pad_h == 0 && pad_w == 0;
  if (pointwise) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * wdt;
    for (int ot = 0; ot < to; ++ot) {
      Eigen::Map<RowMat, 0, Eigen::OuterStride<>> om(
          out.data() + static_cast<std::int64_t>(ot) * hw, cout, hw,
          Eigen::OuterStride<>(static_cast<std::int64_t>(to) * hw));
      if (b.defined()) {
        for (int co = 0; co < cout; ++co) {
          om.row(co).setConstant(b.values()[static_cast<std::size_t>(co)]);
        }
      }
      for (int dt = 0; dt < kt; ++dt) {
        const int it = src_coord(ot - pad_t + dt, t);
        if (it < 0) continue;
        Eigen::Map<const RowMat, 0, StrideDyn> wm(wv.data() + dt, cout, cin,
                                                  StrideDyn(cin * kt, kt));
        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xm(
            xv.data() + static_cast<std::int64_t>(it) * hw, cin, hw,
            Eigen::OuterStride<>(static_cast<std::int64_t>(t) * hw));
        om.noalias() += wm * xm;
      }
    }
  } else {
    for (int co = 0; co < cout; ++co) {
      const double bias = b.defined() ? b.values()[static_cast<std::size_t>(co)] : 0.0;
      for (int ot = 0; ot < to; ++ot) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            double acc = bias;
            for (int ci = 0; ci < cin; ++ci) {
              for (int dt = 0; dt < kt; ++dt) {
                const int it = src_coord(ot - pad_t + dt, t);
                if (it < 0) continue;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = src_coord(oy - pad_h + ky, h);
                  if (iy < 0) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = src_coord(ox - pad_w + kx, wdt);
                    if (ix < 0) continue;
                    acc += xv[((static_cast<std::int64_t>(ci) * t + it) * h + iy) * wdt + ix] *
                           wv[(((static_cast<std::int64_t>(co) * cin + ci) * kt + dt) * kh +
                               ky) *
                                  kw +
                              kx];
                  }
                }
              }
            }
            out[((static_cast<std::int64_t>(co) * to + ot) * ho + oy) * wo + ox] = acc;
          }
        }
      }
    }
  }

  Tensor result = Tensor::from_data({cout, to, ho, wo}, std::move(out));
  if (recording({&x, &w, &b})) {
    std::vector<Tensor> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    auto node = make_node("conv3d", inputs, result);
    Tensor x_saved = w.requires_grad() ? x : Tensor();
    Tensor w_saved = x.requires_grad() ? w : Tensor();
    push_saved(*node, {x_saved, w_saved});
    const bool has_bias = b.defined();
    node->apply = [=](const Node&, const std::vector<double>& g, GradSink& sink) {
      const bool need_x = sink.needs(0);
      const bool need_w = sink.needs(1);
      const bool need_b = has_bias && sink.needs(2);
      if (pointwise) {
        const std::int64_t hw = static_cast<std::int64_t>(h) * wdt;
        for (int ot = 0; ot < to; ++ot) {
          Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> gm(
              g.data() + static_cast<std::int64_t>(ot) * hw, cout, hw,
              Eigen::OuterStride<>(static_cast<std::int64_t>(to) * hw));
          if (need_b) {
            auto& buf = sink.buffer(2);
            for (int co = 0; co < cout; ++co) {
              buf[static_cast<std::size_t>(co)] += gm.row(co).sum();
            }
          }
          for (int dt = 0; dt < kt; ++dt) {
            const int it = src_coord(ot - pad_t + dt, t);
            if (it < 0) continue;
            if (need_x) {
              Eigen::Map<const RowMat, 0, StrideDyn> wm(w_saved.values().data() + dt, cout, cin,
                                                        StrideDyn(cin * kt, kt));
              Eigen::Map<RowMat, 0, Eigen::OuterStride<>> dxm(
                  sink.buffer(0).data() + static_cast<std::int64_t>(it) * hw, cin, hw,
                  Eigen::OuterStride<>(static_cast<std::int64_t>(t) * hw));
              dxm.noalias() += wm.transpose() * gm;
            }
            if (need_w) {
              Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xm(
                  x_saved.values().data() + static_cast<std::int64_t>(it) * hw, cin, hw,
                  Eigen::OuterStride<>(static_cast<std::int64_t>(t) * hw));
              Eigen::Map<RowMat, 0, StrideDyn> dwm(sink.buffer(1).data() + dt, cout, cin,
                                                   StrideDyn(cin * kt, kt));
              dwm.noalias() += gm * xm.transpose();
            }
          }
        }
        return;
      }
      for (int co = 0; co < cout; ++co) {
        for (int ot = 0; ot < to; ++ot) {
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const double go =
                  g[((static_cast<std::int64_t>(co) * to + ot) * ho + oy) * wo + ox];
              if (go == 0.0) continue;
              if (need_b) sink.buffer(2)[static_cast<std::size_t>(co)] += go;
              if (!need_x && !need_w) continue;
              for (int ci = 0; ci < cin; ++ci) {
                for (int dt = 0; dt < kt; ++dt) {
                  const int it = src_coord(ot - pad_t + dt, t);
                  if (it < 0) continue;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = src_coord(oy - pad_h + ky, h);
                    if (iy < 0) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = src_coord(ox - pad_w + kx, wdt);
                      if (ix < 0) continue;
                      const std::int64_t xi =
                          ((static_cast<std::int64_t>(ci) * t + it) * h + iy) * wdt + ix;
                      const std::int64_t wi =
                          (((static_cast<std::int64_t>(co) * cin + ci) * kt + dt) * kh + ky) * kw +
                          kx;
                      if (need_x) sink.buffer(0)[static_cast<std::size_t>(xi)] +=
                          go * w_saved.values()[static_cast<std::size_t>(wi)];
                      if (need_w) sink.buffer(1)[static_cast<std::size_t>(wi)] +=
                          go * x_saved.values()[static_cast<std::size_t>(xi)];
                    }
                  }
                }
              }
            }
          }
        }
      }
    };
    result.attach_node(node);
  }
  return result;
}

Tensor maxpool3d(const Tensor& x, int kt, int kh, int kw) {
  if (x.rank() != 4) {
    shape_error("maxpool3d", "input must be [C,T,H,W], got " + shape_str(x.shape()));
  }
  if (kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 || kt <= 0 || kh <= 0 || kw <= 0) {
    shape_error("maxpool3d", "kernel extents must be odd and positive, got " +
                                 std::to_string(kt) + "x" + std::to_string(kh) + "x" +
                                 std::to_string(kw));
  }
  const int c = x.dim(0), t = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const int rt = kt / 2, rh = kh / 2, rw = kw / 2;
  const std::int64_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(n));
  const auto& xv = x.values();
  for (int ci = 0; ci < c; ++ci) {
    for (int ti = 0; ti < t; ++ti) {
      for (int yi = 0; yi < h; ++yi) {
        for (int xi = 0; xi < wdt; ++xi) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int dt = -rt; dt <= rt; ++dt) {
            const int st = std::clamp(ti + dt, 0, t - 1);
            for (int dy = -rh; dy <= rh; ++dy) {
              const int sy = std::clamp(yi + dy, 0, h - 1);
              for (int dx = -rw; dx <= rw; ++dx) {
                const int sx = std::clamp(xi + dx, 0, wdt - 1);
                const std::int64_t idx =
                    ((static_cast<std::int64_t>(ci) * t + st) * h + sy) * wdt + sx;
                const double v = xv[static_cast<std::size_t>(idx)];
                if (v > best) {  // first maximum wins: scan order is non-decreasing in idx
                  best = v;
                  best_idx = idx;
                }
              }
            }
          }
          const std::int64_t o = ((static_cast<std::int64_t>(ci) * t + ti) * h + yi) * wdt + xi;
          out[static_cast<std::size_t>(o)] = best;
          argmax[static_cast<std::size_t>(o)] = best_idx;
        }
      }
    }
  }

  Tensor result = Tensor::from_data(x.shape(), std::move(out));
  if (recording({&x})) {
    auto node = make_node("maxpool3d", {x}, result);
    node->aux_bytes = argmax.size() * sizeof(std::int64_t);
    auto indices = std::make_shared<std::vector<std::int64_t>>(std::move(argmax));
    node->apply = [indices](const Node&, const std::vector<double>& g, GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        buf[static_cast<std::size_t>((*indices)[i])] += g[i];
      }
    };
    result.attach_node(node);
  }
  return result;
}

namespace {

Tensor reduce_impl(const char* op, const Tensor& a, const std::vector<int>& axes, bool mean) {
  const int r = a.rank();
  std::vector<bool> drop(static_cast<std::size_t>(r), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) {
      shape_error(op, "axis " + std::to_string(ax) + " out of range for " + shape_str(a.shape()));
    }
    if (drop[static_cast<std::size_t>(ax)]) shape_error(op, "duplicate axis");
    drop[static_cast<std::size_t>(ax)] = true;
  }
  Shape out_shape;
  std::int64_t count = 1;
  for (int i = 0; i < r; ++i) {
    if (drop[static_cast<std::size_t>(i)]) {
      count *= a.dim(i);
    } else {
      out_shape.push_back(a.dim(i));
    }
  }
  if (out_shape.empty()) out_shape = {1};

  const auto in_str = row_strides(a.shape());
  const auto out_str = row_strides(out_shape);
  const std::int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
  const auto& av = a.values();

  // Map each input flat index to its output flat index.
  auto out_index = [in_str, out_str, drop, r](std::int64_t flat) {
    std::int64_t rem = flat, oi = 0;
    int keep = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t q = rem / in_str[static_cast<std::size_t>(i)];
      rem -= q * in_str[static_cast<std::size_t>(i)];
      if (!drop[static_cast<std::size_t>(i)]) {
        oi += q * out_str[static_cast<std::size_t>(keep)];
        ++keep;
      }
    }
    return oi;
  };

  const bool all_reduced = count == n;
  if (all_reduced) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += av[static_cast<std::size_t>(i)];
    out[0] = acc;
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      out[static_cast<std::size_t>(out_index(i))] += av[static_cast<std::size_t>(i)];
    }
  }
  const double inv = mean ? 1.0 / static_cast<double>(count) : 1.0;
  if (mean) {
    for (double& v : out) v *= inv;
  }

  Tensor result = Tensor::from_data(out_shape, std::move(out));
  if (recording({&a})) {
    auto node = make_node(op, {a}, result);
    node->apply = [out_index, n, inv, all_reduced](const Node&, const std::vector<double>& g,
                                                   GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      if (all_reduced) {
        for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] += g[0] * inv;
      } else {
        for (std::int64_t i = 0; i < n; ++i) {
          buf[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(out_index(i))] * inv;
        }
      }
    };
    result.attach_node(node);
  }
  return result;
}

}  // namespace

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes) {
  return reduce_impl("reduce_mean", a, axes, true);
}

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) {
  return reduce_impl("reduce_sum", a, axes, false);
}

Tensor sum_all(const Tensor& a) {
  std::vector<int> axes(static_cast<std::size_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  return reduce_impl("reduce_sum", a, axes, false);
}

Tensor cross_entropy_ls(const Tensor& logits, int label, double smoothing) {
  if (logits.rank() != 1) {
    shape_error("cross_entropy_ls", "logits must be rank 1, got " + shape_str(logits.shape()));
  }
  const int n = logits.dim(0);
  if (label < 0 || label >= n) {
    throw std::invalid_argument("cross_entropy_ls: label " + std::to_string(label) +
                                " out of range for " + std::to_string(n) + " classes");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw std::invalid_argument("cross_entropy_ls: smoothing must be in [0,1)");
  }
  const auto& z = logits.values();
  double mx = z[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(z[i] - mx);
  const double lse = mx + std::log(sum);
  if (!std::isfinite(lse)) throw std::runtime_error("cross_entropy_ls: non-finite logits");

  const double off = smoothing / n;
  const double on = 1.0 - smoothing + off;
  double loss = lse;
  for (int i = 0; i < n; ++i) {
    const double y = (i == label) ? on : off;
    loss -= y * z[i];
  }

  Tensor result = Tensor::scalar(loss);
  if (recording({&logits})) {
    auto node = make_node("cross_entropy_ls", {logits}, result);
    std::vector<double> probs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) probs[static_cast<std::size_t>(i)] = std::exp(z[i] - lse);
    Tensor p_saved = Tensor::from_data({n}, std::move(probs));
    push_saved(*node, {p_saved});
    node->apply = [n, label, on, off, p_saved](const Node&, const std::vector<double>& g,
                                               GradSink& sink) {
      if (!sink.needs(0)) return;
      auto& buf = sink.buffer(0);
      const auto& p = p_saved.values();
      for (int i = 0; i < n; ++i) {
        const double y = (i == label) ? on : off;
        buf[static_cast<std::size_t>(i)] += g[0] * (p[static_cast<std::size_t>(i)] - y);
      }
    };
    result.attach_node(node);
  }
  return result;
}

PrimitiveKind primitive_kind_from_string(const std::string& name) {
  static const std::map<std::string, PrimitiveKind> table = {
      {"add", PrimitiveKind::Add},
      {"sub", PrimitiveKind::Sub},
      {"mul", PrimitiveKind::Mul},
      {"scale", PrimitiveKind::Scale},
      {"matmul", PrimitiveKind::MatMul},
      {"bmm", PrimitiveKind::Bmm},
      {"slice", PrimitiveKind::Slice},
      {"concat", PrimitiveKind::Concat},
      {"permute", PrimitiveKind::Permute},
      {"reshape", PrimitiveKind::Reshape},
      {"pad", PrimitiveKind::Pad},
      {"softmax", PrimitiveKind::Softmax},
      {"layer_norm", PrimitiveKind::LayerNorm},
      {"gelu", PrimitiveKind::Gelu},
      {"conv2d", PrimitiveKind::Conv2d},
      {"conv3d", PrimitiveKind::Conv3d},
      {"maxpool3d", PrimitiveKind::MaxPool3d},
      {"reduce_mean", PrimitiveKind::ReduceMean},
      {"reduce_sum", PrimitiveKind::ReduceSum},
      {"cross_entropy_ls", PrimitiveKind::CrossEntropyLs},
  };
  auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown primitive kind: " + name);
  return it->second;
}

namespace {

int attr_int(const AttrMap& attrs, const std::string& key, const int* fallback = nullptr) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    if (fallback) return *fallback;
    throw std::invalid_argument("primitive_forward: missing attribute '" + key + "'");
  }
  return std::get<int>(it->second);
}

double attr_double(const AttrMap& attrs, const std::string& key, const double* fallback = nullptr) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    if (fallback) return *fallback;
    throw std::invalid_argument("primitive_forward: missing attribute '" + key + "'");
  }
  if (std::holds_alternative<int>(it->second)) return std::get<int>(it->second);
  return std::get<double>(it->second);
}

std::vector<int> attr_ints(const AttrMap& attrs, const std::string& key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    throw std::invalid_argument("primitive_forward: missing attribute '" + key + "'");
  }
  return std::get<std::vector<int>>(it->second);
}

PadMode attr_pad_mode(const AttrMap& attrs) {
  auto it = attrs.find("mode");
  if (it == attrs.end()) return PadMode::Constant;
  const std::string& m = std::get<std::string>(it->second);
  if (m == "constant") return PadMode::Constant;
  if (m == "replicate") return PadMode::Replicate;
  throw std::invalid_argument("primitive_forward: unknown pad mode '" + m + "'");
}

void expect_arity(PrimitiveKind, const std::vector<Tensor>& inputs, std::size_t lo,
                  std::size_t hi, const char* name) {
  if (inputs.size() < lo || inputs.size() > hi) {
    throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(lo) +
                                (hi != lo ? ".." + std::to_string(hi) : "") +
                                " inputs, got " + std::to_string(inputs.size()));
  }
}

}  // namespace

Tensor primitive_forward(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                         const AttrMap& attrs) {
  const int zero = 0;
  switch (kind) {
    case PrimitiveKind::Add:
      expect_arity(kind, inputs, 2, 2, "add");
      return add(inputs[0], inputs[1]);
    case PrimitiveKind::Sub:
      expect_arity(kind, inputs, 2, 2, "sub");
      return sub(inputs[0], inputs[1]);
    case PrimitiveKind::Mul:
      expect_arity(kind, inputs, 2, 2, "mul");
      return mul(inputs[0], inputs[1]);
    case PrimitiveKind::Scale:
      expect_arity(kind, inputs, 1, 1, "scale");
      return scale(inputs[0], attr_double(attrs, "factor"));
    case PrimitiveKind::MatMul:
      expect_arity(kind, inputs, 2, 2, "matmul");
      return matmul(inputs[0], inputs[1]);
    case PrimitiveKind::Bmm:
      expect_arity(kind, inputs, 2, 2, "bmm");
      return bmm(inputs[0], inputs[1]);
    case PrimitiveKind::Slice:
      expect_arity(kind, inputs, 1, 1, "slice");
      return slice(inputs[0], attr_int(attrs, "axis"), attr_int(attrs, "start"),
                   attr_int(attrs, "length"));
    case PrimitiveKind::Concat:
      return concat(inputs, attr_int(attrs, "axis"));
    case PrimitiveKind::Permute:
      expect_arity(kind, inputs, 1, 1, "permute");
      return permute(inputs[0], attr_ints(attrs, "perm"));
    case PrimitiveKind::Reshape:
      expect_arity(kind, inputs, 1, 1, "reshape");
      return reshape(inputs[0], attr_ints(attrs, "shape"));
    case PrimitiveKind::Pad: {
      expect_arity(kind, inputs, 1, 1, "pad");
      const std::vector<int> flat = attr_ints(attrs, "pads");
      if (flat.size() % 2 != 0) {
        throw std::invalid_argument("pad: 'pads' must hold (before, after) pairs");
      }
      std::vector<std::pair<int, int>> pads;
      for (std::size_t i = 0; i < flat.size(); i += 2) pads.emplace_back(flat[i], flat[i + 1]);
      const double zero_d = 0.0;
      return pad(inputs[0], pads, attr_pad_mode(attrs), attr_double(attrs, "value", &zero_d));
    }
    case PrimitiveKind::Softmax:
      expect_arity(kind, inputs, 1, 1, "softmax");
      return softmax(inputs[0]);
    case PrimitiveKind::LayerNorm: {
      expect_arity(kind, inputs, 3, 3, "layer_norm");
      const double eps_default = 1e-5;
      return layer_norm(inputs[0], inputs[1], inputs[2], attr_double(attrs, "eps", &eps_default));
    }
    case PrimitiveKind::Gelu:
      expect_arity(kind, inputs, 1, 1, "gelu");
      return gelu(inputs[0]);
    case PrimitiveKind::Conv2d:
      expect_arity(kind, inputs, 2, 3, "conv2d");
      return conv2d(inputs[0], inputs[1], inputs.size() > 2 ? inputs[2] : Tensor(),
                    attr_int(attrs, "stride_h"), attr_int(attrs, "stride_w"),
                    attr_int(attrs, "pad_h", &zero), attr_int(attrs, "pad_w", &zero));
    case PrimitiveKind::Conv3d:
      expect_arity(kind, inputs, 2, 3, "conv3d");
      return conv3d(inputs[0], inputs[1], inputs.size() > 2 ? inputs[2] : Tensor(),
                    attr_int(attrs, "pad_t", &zero), attr_int(attrs, "pad_h", &zero),
                    attr_int(attrs, "pad_w", &zero), attr_pad_mode(attrs));
    case PrimitiveKind::MaxPool3d:
      expect_arity(kind, inputs, 1, 1, "maxpool3d");
      return maxpool3d(inputs[0], attr_int(attrs, "kt"), attr_int(attrs, "kh"),
                       attr_int(attrs, "kw"));
    case PrimitiveKind::ReduceMean:
      expect_arity(kind, inputs, 1, 1, "reduce_mean");
      return reduce_mean(inputs[0], attr_ints(attrs, "axes"));
    case PrimitiveKind::ReduceSum:
      expect_arity(kind, inputs, 1, 1, "reduce_sum");
      return reduce_sum(inputs[0], attr_ints(attrs, "axes"));
    case PrimitiveKind::CrossEntropyLs: {
      expect_arity(kind, inputs, 1, 1, "cross_entropy_ls");
      const double zero_d = 0.0;
      return cross_entropy_ls(inputs[0], attr_int(attrs, "label"),
                              attr_double(attrs, "smoothing", &zero_d));
    }
  }
  throw std::invalid_argument("unknown primitive kind");
}

}  // namespace tds::ops
