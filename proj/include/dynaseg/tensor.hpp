#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dynaseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Dense row-major float64 tensor with an optional reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage. Values are
// immutable once an op has produced them; only leaf tensors (parameters) are
// mutated, and only by optimizers between steps. Ops record a backward
// closure when grad mode is on and any input requires a gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;  // negative axes count from the back
  int64_t rank() const;
  int64_t numel() const;

  std::span<const double> data() const;
  // Direct writes are reserved for leaves (parameter init and optimizer steps).
  std::span<double> mutable_data();
  double item() const;
  double operator[](int64_t flat) const { return data()[static_cast<size_t>(flat)]; }
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Fresh leaf with copied values and no tape.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(TensorImpl& self)> backward_fn;

  std::vector<double>& ensure_grad();
};

// Builds an op output. When grad mode is on and any parent requires a
// gradient, the node records `backward` and becomes part of the tape.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   std::function<void(TensorImpl& self)> backward);

bool grad_enabled();

// Disables tape recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Populates gradients of `loss` with respect to every tracked tensor.
// Nodes are visited in a deterministic reverse topological order.
void backward(const Tensor& loss);

// Finite-value check for kernel outputs. Enabled by default in debug builds.
void set_debug_checks(bool on);
bool debug_checks();
void check_finite(const Tensor& t, const char* where);

}  // namespace dynaseg
