#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hat {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  void accumulate(std::size_t i, double g);
  std::vector<double>& grad_buffer();
};

/// Dense row-major array with reverse-mode gradient tracking.
///
/// A Tensor is a handle; copies share the underlying node. Operations build
/// an implicit graph through parent links whenever any input requires a
/// gradient, and `backward()` walks it in reverse topological order.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor scalar(double v, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(int axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient accumulator; zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  /// Returns a leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;

  /// Populates gradients of every requires_grad node reachable from this
  /// scalar. Leaves accumulate; intermediate gradients are reset first.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-topological schedule of the nodes reachable from a root.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& root);
  /// Nodes in topological order: producers before consumers.
  const std::vector<Node*>& order() const { return order_; }

 private:
  std::vector<Node*> order_;
};

// Counter-based generator: the value at (stream, index) depends only on the
// seed, so dropout masks are reproducible regardless of evaluation order.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed = 0) : seed_(seed) {}
  std::uint64_t bits(std::uint64_t stream, std::uint64_t index) const;
  double uniform(std::uint64_t stream, std::uint64_t index) const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);  // b may broadcast as a suffix of a
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // b may broadcast as a suffix of a
Tensor scale(const Tensor& a, double s);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
Tensor dropout(const Tensor& x, double p, bool train, const CounterRng& rng, std::uint64_t stream);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);  // last axis
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Additive sentinel used for masked attention logits.
inline constexpr double kMaskSentinel = -1e9;

/// Softmax over the last axis where `keep` (broadcast over leading axes,
/// shaped like the last two axes of x) selects admissible entries. Masked
/// entries receive exactly zero probability. A row with no admissible entry
/// is an error.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

/// [L, h*dk] -> [h, L, dk]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [h, L, dk] -> [L, h*dk]
Tensor merge_heads(const Tensor& x);

}  // namespace hat
