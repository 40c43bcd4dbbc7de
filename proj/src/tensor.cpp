#include "hat/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace hat {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void Node::accumulate(std::size_t i, double g) { grad_buffer()[i] += g; }

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor() : node_(std::make_shared<Node>()) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw std::out_of_range("index out of range");
    offset = offset * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[offset];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

ComputationTape::ComputationTape(const Tensor& root) {
  std::unordered_set<const Node*> visited;
  // Iterative post-order DFS; graphs for long sequences are deep.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tensor::backward() const {
  if (numel() != 1)
    throw DimensionError("backward() requires a scalar loss, got " + shape_str(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");
  ComputationTape tape(*this);
  const auto& order = tape.order();
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Intermediate gradients are scratch space.
  for (Node* n : order)
    if (!n->is_leaf() && n != node_.get()) n->grad.clear();
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t CounterRng::bits(std::uint64_t stream, std::uint64_t index) const {
  return splitmix64(splitmix64(seed_ ^ splitmix64(stream)) + index);
}

double CounterRng::uniform(std::uint64_t stream, std::uint64_t index) const {
  return static_cast<double>(bits(stream, index) >> 11) * 0x1.0p-53;
}

}  // namespace hat
