#include <doctest.h>

#include <fstream>

#include "oracles.hpp"
#include "tds/checkpoint.hpp"
#include "tds/ops.hpp"
#include "tds/tensor.hpp"

using namespace tds;
namespace op = tds::ops;

TEST_CASE("sum gradient is ones") {
  Tensor p = oracle::leaf({3}, 1);
  GradientMap grads = backward(op::sum_all(p));
  CHECK(grads.at(p).values() == std::vector<double>{1.0, 1.0, 1.0});
  CHECK_FALSE(grads.detached_loss);
}

TEST_CASE("quadratic gradient") {
  Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  p.set_requires_grad(true);
  GradientMap grads = backward(op::sum_all(op::mul(p, p)));
  CHECK(grads.at(p).values() == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("frozen tensors never enter the graph") {
  Tensor frozen_a = oracle::leaf({2, 2}, 2, -1, 1, false);
  Tensor frozen_b = oracle::leaf({2, 2}, 3, -1, 1, false);
  Tensor w = oracle::leaf({2, 2}, 4);

  Tensor frozen_path = op::matmul(frozen_a, frozen_b);
  CHECK(frozen_path.node() == nullptr);
  CHECK_FALSE(frozen_path.requires_grad());

  Tensor loss = op::sum_all(op::matmul(frozen_path, w));
  GradientMap grads = backward(loss);
  CHECK(grads.contains(w));
  CHECK_FALSE(grads.contains(frozen_a));
  CHECK_FALSE(grads.contains(frozen_b));
  // matmul + reduce_sum only: the frozen subpath contributed no nodes.
  CHECK(grads.nodes_visited == 2);
}

TEST_CASE("diamond graph visits each node exactly once") {
  Tensor x = oracle::leaf({4}, 5);
  Tensor a = op::scale(x, 2.0);
  Tensor b = op::scale(x, 3.0);
  Tensor loss = op::sum_all(op::add(a, b));
  GradientMap grads = backward(loss);
  CHECK(grads.nodes_visited == 4);  // scale, scale, add, reduce_sum
  for (double v : grads.at(x).values()) CHECK(v == 5.0);
}

TEST_CASE("gradient map covers reachable intermediates") {
  Tensor x = oracle::leaf({2}, 6);
  Tensor y = op::scale(x, 2.0);
  Tensor loss = op::sum_all(y);
  GradientMap grads = backward(loss);
  CHECK(grads.contains(x));
  CHECK(grads.contains(y));
  CHECK(grads.contains(loss));
  CHECK(grads.at(y).values() == std::vector<double>{1.0, 1.0});
}

TEST_CASE("loss contract") {
  Tensor v = oracle::leaf({3}, 7);
  CHECK_THROWS_AS(backward(v), std::invalid_argument);  // non-scalar

  Tensor detached = Tensor::scalar(1.5);
  GradientMap grads = backward(detached);
  CHECK(grads.detached_loss);
  CHECK(grads.size() == 0);
}

TEST_CASE("requires_grad is a leaf property") {
  Tensor x = oracle::leaf({2}, 8);
  Tensor y = op::scale(x, 1.0);
  CHECK_THROWS_AS(y.set_requires_grad(false), std::invalid_argument);
  Tensor d = y.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.node() == nullptr);
  CHECK(d.storage_key() == y.storage_key());
}

TEST_CASE("no-grad mode disables recording") {
  Tensor x = oracle::leaf({2}, 9);
  NoGradGuard guard;
  Tensor y = op::scale(x, 2.0);
  CHECK(y.node() == nullptr);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("scope labels follow creation context") {
  Tensor outside = Tensor::scalar(1.0);
  CHECK(outside.scope() == "");
  ScopeGuard a("frozen");
  Tensor inside = Tensor::scalar(1.0);
  CHECK(inside.scope() == "frozen");
  {
    ScopeGuard b("block0");
    CHECK(Tensor::scalar(0.0).scope() == "frozen/block0");
  }
  CHECK(Tensor::scalar(0.0).scope() == "frozen");
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ParamSet params;
  params.add("a.w", {2, 3}, uniform_values(6, -2.0, 2.0, 11), true);
  params.add("frozen.w", {4}, uniform_values(4, -1.0, 1.0, 12), false);

  const auto path = std::string("/tmp/tds_ckpt_test.bin");
  save_checkpoint(path, params);

  ParamSet restored;
  restored.add("a.w", {2, 3}, std::vector<double>(6, 0.0), true);
  restored.add("frozen.w", {4}, std::vector<double>(4, 0.0), false);
  load_checkpoint(path, restored);
  CHECK(restored.get("a.w").values() == params.get("a.w").values());
  CHECK(restored.get("frozen.w").values() == params.get("frozen.w").values());
  CHECK(restored.checksum() == params.checksum());
  CHECK(params.trainable_count() == 6);
  CHECK(params.frozen_count() == 4);
}

TEST_CASE("checkpoint format errors") {
  ParamSet params;
  params.add("w", {2}, {1.0, 2.0}, true);
  const auto path = std::string("/tmp/tds_ckpt_bad.bin");
  save_checkpoint(path, params);

  {  // corrupt magic
    auto bytes = checkpoint_bytes(params);
    bytes[0] = 'X';
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.close();
    ParamSet p2;
    p2.add("w", {2}, {0.0, 0.0}, true);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, p2), doctest::Contains("magic"),
                         std::runtime_error);
  }
  {  // truncated
    auto bytes = checkpoint_bytes(params);
    bytes.resize(bytes.size() - 5);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.close();
    ParamSet p2;
    p2.add("w", {2}, {0.0, 0.0}, true);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, p2), doctest::Contains("truncated"),
                         std::runtime_error);
  }
}
