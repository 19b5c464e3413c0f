#include "pbad/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "pbad/error.hpp"

namespace pbad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw UsageError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->ensure_grad();
  return from_node(std::move(node));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return from_data(Shape{}, std::vector<T>{value});
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw UsageError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return from_node(std::move(node));
}

template <class T>
void BasicTensor<T>::backward() const {
  using NodeT = detail::Node<T>;
  if (numel() != 1) throw UsageError("backward: loss " + shape_str(shape()) + " is not a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; parents always precede children in `order`.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> done;
  std::unordered_set<NodeT*> on_stack;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  on_stack.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (!parent->requires_grad || done.count(parent)) continue;
      if (on_stack.count(parent)) throw NumericError("backward: cycle in recorded graph");
      on_stack.insert(parent);
      stack.emplace_back(parent, 0);
      continue;
    }
    on_stack.erase(node);
    done.insert(node);
    order.push_back(node);
    stack.pop_back();
  }

  for (NodeT* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), T(0));
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace pbad
