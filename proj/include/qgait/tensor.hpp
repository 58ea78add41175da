#pragma once

// Dense double-precision tensors with a reverse-mode tape.
//
// A Tensor is a cheap shared handle. Values are fixed at construction; the
// only mutable state is the gradient slot and, for leaf parameters, the data
// buffer that optimizers update in place. Every op that sees an input with
// requires_grad (while grad mode is enabled) records a TapeNode on its result;
// backward() walks those nodes in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qgait/error.hpp"

namespace qgait {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// One gradient buffer per op input. An empty span means that input does not
/// need a gradient. Backward rules must accumulate (+=), never overwrite.
using GradSlots = std::vector<std::span<double>>;
using BackwardFn =
    std::function<void(std::span<const double> grad_out, const GradSlots& grad_in)>;

class Tensor;
struct TapeNode;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;  // null for leaves
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double item() const;

  /// In-place access for leaf tensors (parameters, buffers). Throws
  /// UsageError on op results.
  std::span<double> mutable_data();

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return !impl().node; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  void zero_grad() { impl().grad.clear(); }

  /// Same values, no history, requires_grad false.
  Tensor detach() const;
  /// Independent leaf copy of the values; keeps requires_grad.
  Tensor clone() const;

  /// Throws NumericError if any value (or gradient, when present) is NaN/Inf.
  void check_finite(const std::string& what) const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TapeNode {
  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool consumed = false;
};

/// True unless a NoGradGuard is alive on this thread.
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

/// Builds an op result. A TapeNode is attached only when grad mode is on and
/// at least one input requires a gradient.
Tensor make_op(std::string op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward);

/// Strict mode: every reachable leaf must have an empty gradient slot and the
/// graph must not have been walked before, otherwise UsageError.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation. `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b scalar
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape, or b scalar
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Adds a per-channel bias along axis 1 of an N x C x ... tensor.
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// Max along `axis`; ties resolve to the lowest index, which alone receives
/// the gradient.
Tensor max_over_axis(const Tensor& x, std::size_t axis);

/// Non-overlapping k x k max pooling over the last two axes (floor mode).
Tensor max_pool2d(const Tensor& x, std::size_t k);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

/// Per-feature batch norm of an N x F tensor. Training mode normalizes with
/// batch statistics (N >= 2 required) and updates the running estimates.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training);

/// Elementwise op whose backward is `backward_fn(g, x)` verbatim; nothing is
/// differentiated through `forward_fn`.
Tensor custom_unary(const Tensor& x, std::function<double(double)> forward_fn,
                    std::function<double(double g, double x)> backward_fn,
                    std::string op = "custom_unary");

}  // namespace qgait
