#include "polyseg/tensor.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>

#include "polyseg/errors.hpp"

namespace polyseg {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_str(shape), shape_numel(shape),
                                 values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError(fmt::format("axis {} out of range for {}", axis, shape_str(s)));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw UsageError("use of an undefined tensor");
  if (impl_.use_count() > 1) impl_ = std::make_shared<detail::TensorImpl>(*impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError(fmt::format("item() on tensor of shape {}", shape_str(shape())));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw UsageError("use of an undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(shape(), grad()); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

// ---------------------------------------------------------------------------

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

bool Tape::recording_for(std::initializer_list<const Tensor*> inputs) const {
  if (!enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t && t->requires_grad(); });
}

bool Tape::recording_for(std::span<const Tensor> inputs) const {
  if (!enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void Tape::record(std::string op, std::initializer_list<const Tensor*> inputs, const Tensor& output,
                  BackwardFn fn) {
  if (!recording_for(inputs)) return;
  Node node{std::move(op), {}, output.impl(), std::move(fn)};
  for (const Tensor* t : inputs) {
    if (t && t->defined()) node.inputs.push_back(t->impl());
  }
  output.impl()->requires_grad = true;
  nodes_.push_back(std::move(node));
}

void Tape::record(std::string op, std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn) {
  if (!recording_for(inputs)) return;
  Node node{std::move(op), {}, output.impl(), std::move(fn)};
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl());
  output.impl()->requires_grad = true;
  nodes_.push_back(std::move(node));
}

void Tape::run_backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError(fmt::format("backward() needs a scalar loss, got shape {}",
                                 loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) throw UsageError("backward(): loss is not on the active tape");

  auto& seed = loss.impl()->grad_buffer();
  seed[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    it->backward(out.grad);
    out.grad.clear();
    out.grad.shrink_to_fit();
  }
  nodes_.clear();
}

void backward(const Tensor& loss) { Tape::active().run_backward(loss); }

}  // namespace polyseg
