#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace polyseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 array that can take part in reverse-mode
/// differentiation.
///
/// A Tensor is a cheap handle. Copies share storage until one of them is
/// written through mutable_data(), which detaches the writer (copy-on-write),
/// so two handles never observe each other's writes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const;
  /// Gradient accumulated by backward(); zeros when nothing has flowed in.
  std::vector<double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// Same values, no gradient tracking, independent storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(std::shared_ptr<detail::TensorImpl>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl);

/// Ordered record of primitive applications for the current thread.
///
/// Nodes are appended as operations execute, so the list is topologically
/// sorted by construction. backward() walks it once in reverse and clears it.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  static Tape& active();

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Appends a node when recording is on and any input wants a gradient.
  /// Marks `output` as requiring grad in that case.
  void record(std::string op, std::initializer_list<const Tensor*> inputs, const Tensor& output,
              BackwardFn fn);
  void record(std::string op, std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn);

  bool recording_for(std::initializer_list<const Tensor*> inputs) const;
  bool recording_for(std::span<const Tensor> inputs) const;

  void run_backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::active().enabled()) { Tape::active().set_enabled(false); }
  ~NoGradGuard() { Tape::active().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Populates grad on every requires_grad leaf reachable from `loss`, then
/// resets the active tape. `loss` must hold exactly one element.
void backward(const Tensor& loss);

}  // namespace polyseg
