#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tvae::diff {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense non-differentiable grid: token ids and boolean masks.
template <typename V>
struct Grid {
  Shape shape;
  std::vector<V> values;

  Grid() = default;
  Grid(Shape s, std::vector<V> v);
  Grid(Shape s, V fill);

  std::size_t size() const { return values.size(); }
  V& at(std::size_t row, std::size_t col) { return values[row * shape.back() + col]; }
  const V& at(std::size_t row, std::size_t col) const { return values[row * shape.back() + col]; }
};

using Mask = Grid<std::uint8_t>;
using Ids = Grid<std::int32_t>;

/// Graph recording switch. Thread-local, so evaluation threads can run
/// without tape while another thread trains.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `self.grad` and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

/// Handle to a node of the computation graph. Copies share the node; data is
/// immutable after construction except for leaves (parameters), whose values
/// an optimizer may update in place between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view of a leaf's values. Throws for op results.
  std::span<T> mutable_data();
  T item() const;
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  /// Gradient values; all zeros if nothing has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
  /// interior grads are transient.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Element-type conversion (f32 <-> f64) producing a fresh leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x, bool requires_grad = false) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(out), requires_grad);
}

}  // namespace tvae::diff
