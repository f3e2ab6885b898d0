#include "milore/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "milore/errors.hpp"

namespace milore {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace detail {

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return defined() ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) needs a matrix, got " + to_string(shape()));
  if (row >= impl_->shape[0] || col >= impl_->shape[1]) throw IndexError("matrix index out of range");
  return impl_->data[row * impl_->shape[1] + col];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return from(shape(), impl_->data, impl_->requires_grad); }

namespace {
thread_local bool grad_disabled = false;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_disabled) { grad_disabled = true; }
NoGradGuard::~NoGradGuard() { grad_disabled = previous_; }
bool NoGradGuard::active() { return grad_disabled; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  const bool tracked = !grad_disabled && std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (tracked) {
    auto node = std::make_shared<detail::Node>();
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.impl_ptr());
    node->backward = std::move(backward);
    out.impl_->node = std::move(node);
    out.impl_->requires_grad = true;
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar, got " + to_string(loss.shape()));
  auto* root = loss.impl();
  if (root->node && root->node->consumed) {
    throw GraphError("backward called twice on the same graph; rebuild the graph first");
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reversing it yields a topological order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  // Clearing a node's inputs below may drop the last owner of a tensor that
  // is still queued, so the sweep holds its own references.
  std::vector<std::shared_ptr<detail::TensorImpl>> alive;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      const auto& child = t->node->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        alive.push_back(child);
        stack.emplace_back(child.get(), 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  detail::grad_buffer(*root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* t = *it;
    if (!t->node) continue;
    if (!t->grad.empty()) t->node->backward(*t);
    t->node->consumed = true;
    t->node->backward = nullptr;
    t->node->inputs.clear();
    // Intermediate gradients are not needed past this point.
    if (t != root) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

}  // namespace milore
