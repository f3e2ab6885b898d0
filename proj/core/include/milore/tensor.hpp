#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace milore {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

// One recorded operation: the inputs it read and the rule that pushes the
// output gradient back into them.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

// Grad buffer of `t`, zero-initialized on first use.
std::vector<double>& grad_buffer(TensorImpl& t);

}  // namespace detail

// Shared handle to a dense row-major 64-bit tensor. Copies alias the same
// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view. Only for leaves; writing into a recorded intermediate
  // invalidates its backward rule.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  bool is_leaf() const;
  // Same values, no graph history, no gradient tracking.
  Tensor detach() const;
  // Independent copy of values and the requires_grad flag; history dropped.
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.impl_ == b.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(const detail::TensorImpl&)>);
};

// Builds an op output. When any input requires grad, the output records
// `backward` and the inputs so reverse traversal can reach them.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl&)> backward);

// Reverse-mode sweep from a scalar. Gradients accumulate (+=) into every
// reachable tensor with requires_grad. The graph is consumed afterwards;
// a second call on it throws GraphError.
void backward(const Tensor& loss);

// While alive on this thread, op outputs record no graph. Used for
// inference-only passes (feature extraction, probes, profiling).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace milore
