#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace tds {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
class Tensor;
class GradSink;

// One tensor handle; copies share storage and graph linkage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const { return shape()[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // parameter init / optimizer updates only
  double value_at(std::int64_t flat) const { return values()[static_cast<std::size_t>(flat)]; }
  double item() const;  // numel()==1

  bool requires_grad() const;
  void set_requires_grad(bool flag);  // leaves only
  bool is_param() const;
  void mark_param();

  std::uint64_t id() const;
  const std::string& scope() const;
  const std::shared_ptr<Node>& node() const;
  void attach_node(std::shared_ptr<Node> node);

  // Shares values, drops graph linkage and grad requirement.
  Tensor detach() const;

  // Shares values under a new shape with the same element count. Not recorded:
  // callers that need a differentiable reshape use ops::reshape.
  Tensor alias_with_shape(Shape shape) const;

  const void* storage_key() const;
  std::size_t storage_bytes() const { return values().size() * sizeof(double); }

 private:
  struct Data {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    bool requires_grad = false;
    bool is_param = false;
    std::uint64_t id = 0;
    std::string scope;
    std::shared_ptr<Node> node;
  };
  std::shared_ptr<Data> d_;

  static Tensor make(Shape shape, std::shared_ptr<std::vector<double>> values);
};

struct Edge {
  std::uint64_t id = 0;
  bool requires_grad = false;
  Shape shape;
  std::shared_ptr<Node> producer;
};

struct Node {
  const char* op = "";
  std::string scope;
  std::vector<Edge> edges;
  std::vector<Tensor> saved;   // activations backward will read (census target)
  std::size_t aux_bytes = 0;   // non-tensor state kept for backward (e.g. argmax indices)
  Shape out_shape;
  std::uint64_t out_id = 0;
  std::function<void(const Node&, const std::vector<double>&, GradSink&)> apply;
};

// Accumulates gradient contributions into per-tensor buffers during backward.
class GradSink {
 public:
  explicit GradSink(std::unordered_map<std::uint64_t, std::vector<double>>& buffers,
                    const Node& node)
      : buffers_(buffers), node_(node) {}

  bool needs(std::size_t input_index) const;
  void add(std::size_t input_index, const std::vector<double>& contribution);
  std::vector<double>& buffer(std::size_t input_index);  // zero-initialised on first use

 private:
  std::unordered_map<std::uint64_t, std::vector<double>>& buffers_;
  const Node& node_;
};

// Result of reverse-mode differentiation: every reachable requires_grad tensor
// keyed by tensor identity.
struct GradientMap {
  std::unordered_map<std::uint64_t, Tensor> grads;
  bool detached_loss = false;
  std::size_t nodes_visited = 0;

  bool contains(const Tensor& t) const { return grads.count(t.id()) != 0; }
  const Tensor& at(const Tensor& t) const;
  std::size_t size() const { return grads.size(); }
};

GradientMap backward(const Tensor& loss);

// Thread-local recording switch. While a guard is alive no graph is built.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Thread-local scope stack; tensors and nodes record the scope active at
// creation, which is what the profiler uses for branch attribution.
class ScopeGuard {
 public:
  explicit ScopeGuard(const std::string& name);
  ~ScopeGuard();
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;
};

const std::string& current_scope();

}  // namespace tds
