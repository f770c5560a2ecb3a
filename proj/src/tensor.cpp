#include "tds/tensor.hpp"

#include <atomic>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tds {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local int g_no_grad_depth = 0;
thread_local std::vector<std::string> g_scope_stack;
thread_local std::string g_scope_joined;

void rebuild_scope() {
  g_scope_joined.clear();
  for (std::size_t i = 0; i < g_scope_stack.size(); ++i) {
    if (i) g_scope_joined += '/';
    g_scope_joined += g_scope_stack[i];
  }
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::make(Shape shape, std::shared_ptr<std::vector<double>> values) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values->size())) {
    throw std::invalid_argument("tensor: data length " + std::to_string(values->size()) +
                                " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->values = std::move(values);
  t.d_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  t.d_->scope = current_scope();
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  return make(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)));
}

Tensor Tensor::zeros(const Shape& shape) {
  return make(shape, std::make_shared<std::vector<double>>(
                         static_cast<std::size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return make(shape, std::make_shared<std::vector<double>>(
                         static_cast<std::size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  return d_->shape;
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::values() const {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  return *d_->values;
}

std::vector<double>& Tensor::mutable_values() {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  return *d_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_str(shape()));
  }
  return values()[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  if (d_->node) throw std::invalid_argument("tensor: requires_grad is settable on leaves only");
  d_->requires_grad = flag;
}

bool Tensor::is_param() const { return d_ && d_->is_param; }

void Tensor::mark_param() {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  d_->is_param = true;
}

std::uint64_t Tensor::id() const { return d_ ? d_->id : 0; }

const std::string& Tensor::scope() const {
  static const std::string empty;
  return d_ ? d_->scope : empty;
}

const std::shared_ptr<Node>& Tensor::node() const {
  static const std::shared_ptr<Node> none;
  return d_ ? d_->node : none;
}

void Tensor::attach_node(std::shared_ptr<Node> node) {
  if (!d_) throw std::runtime_error("tensor: undefined handle");
  d_->requires_grad = true;
  d_->node = std::move(node);
}

Tensor Tensor::detach() const {
  Tensor t = make(shape(), d_->values);
  t.d_->scope = d_->scope;  // keep creation-branch attribution
  return t;
}

Tensor Tensor::alias_with_shape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("tensor: alias " + shape_str(shape) +
                                " has wrong element count for " + shape_str(this->shape()));
  }
  Tensor t = make(std::move(shape), d_->values);
  t.d_->scope = d_->scope;
  return t;
}

const void* Tensor::storage_key() const { return d_ ? d_->values.get() : nullptr; }

bool GradSink::needs(std::size_t input_index) const {
  return node_.edges[input_index].requires_grad;
}

std::vector<double>& GradSink::buffer(std::size_t input_index) {
  const Edge& e = node_.edges[input_index];
  auto it = buffers_.find(e.id);
  if (it == buffers_.end()) {
    it = buffers_
             .emplace(e.id, std::vector<double>(static_cast<std::size_t>(shape_numel(e.shape)), 0.0))
             .first;
  }
  return it->second;
}

void GradSink::add(std::size_t input_index, const std::vector<double>& contribution) {
  auto& buf = buffer(input_index);
  if (buf.size() != contribution.size()) {
    throw std::runtime_error("backward: gradient size mismatch on " + std::string(node_.op));
  }
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += contribution[i];
}

const Tensor& GradientMap::at(const Tensor& t) const {
  auto it = grads.find(t.id());
  if (it == grads.end()) {
    throw std::out_of_range("gradient map: no entry for tensor id " + std::to_string(t.id()));
  }
  return it->second;
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }

  GradientMap result;
  if (!loss.node()) {
    if (loss.requires_grad()) {
      result.grads.emplace(loss.id(), Tensor::from_data(loss.shape(), {1.0}));
    } else {
      result.detached_loss = true;
    }
    return result;
  }

  // Topological order over the recorded graph, each node exactly once.
  std::vector<Node*> order;
  {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->edges.size()) {
        Node* child = node->edges[next].producer.get();
        ++next;
        if (child && !seen.count(child)) {
          seen.insert(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<std::uint64_t, std::vector<double>> buffers;
  buffers.emplace(loss.id(), std::vector<double>{1.0});

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = buffers.find(node->out_id);
    if (found == buffers.end()) continue;  // no flow reached this output
    {
      GradSink sink(buffers, *node);
      node->apply(*node, found->second, sink);
      // Reachable requires_grad inputs get an entry even when every
      // contribution happened to be zero.
      for (std::size_t i = 0; i < node->edges.size(); ++i) {
        if (node->edges[i].requires_grad) sink.buffer(i);
      }
    }
    ++result.nodes_visited;
    // The node output is itself a reachable requires_grad tensor.
    result.grads.emplace(node->out_id,
                         Tensor::from_data(node->out_shape, std::move(found->second)));
    buffers.erase(found);
  }

  // Remaining buffers belong to leaves (requires_grad tensors with no producer).
  std::unordered_map<std::uint64_t, Shape> leaf_shapes;
  for (Node* node : order) {
    for (const Edge& e : node->edges) {
      if (e.requires_grad && !e.producer) leaf_shapes.emplace(e.id, e.shape);
    }
  }
  for (auto& [id, buf] : buffers) {
    auto shp = leaf_shapes.find(id);
    if (shp != leaf_shapes.end()) {
      result.grads.emplace(id, Tensor::from_data(shp->second, std::move(buf)));
    }
  }
  return result;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

ScopeGuard::ScopeGuard(const std::string& name) {
  g_scope_stack.push_back(name);
  rebuild_scope();
}

ScopeGuard::~ScopeGuard() {
  g_scope_stack.pop_back();
  rebuild_scope();
}

const std::string& current_scope() { return g_scope_joined; }

}  // namespace tds
