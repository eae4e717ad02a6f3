#include "tvae/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "tvae/error.hpp"

namespace tvae::diff {

namespace {
thread_local bool t_grad_enabled = true;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename V>
Grid<V>::Grid(Shape s, std::vector<V> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("grid of shape " + shape_str(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
}

template <typename V>
Grid<V>::Grid(Shape s, V fill) : shape(std::move(s)), values(shape_numel(shape), fill) {}

template struct Grid<std::uint8_t>;
template struct Grid<std::int32_t>;

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw ValueError("mutable_data() is only available on leaf tensors");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw ValueError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = flag;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  using N = detail::Node<T>;
  // Iterative post-order DFS gives a topological order of the reachable graph.
  std::vector<N*> order;
  std::unordered_set<N*> visited;
  std::vector<std::pair<N*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      N* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (N* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* n = *it;
    if (n->backward) n->backward(*n);
    if (!n->is_leaf && n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tvae::diff
