#include "qgait/tensor.hpp"

#include "dense.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace qgait {

namespace {

thread_local bool g_grad_enabled = true;

using detail::RowMatrix;
using detail::product;
using MapMat = Eigen::Map<RowMatrix>;
using ConstMapMat = Eigen::Map<const RowMatrix>;

bool is_scalar_like(const Tensor& t) { return t.numel() == 1; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (qgait::numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = qgait::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return *impl_;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw UsageError("mutable_data() on a non-leaf tensor");
  return impl().data;
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw UsageError("requires_grad can only be set on leaves");
  impl().requires_grad = flag;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), impl().data, impl().requires_grad); }

void Tensor::check_finite(const std::string& what) const {
  auto bad = [](double v) { return !std::isfinite(v); };
  if (std::any_of(impl().data.begin(), impl().data.end(), bad)) {
    throw NumericError(what + ": non-finite value in data");
  }
  if (std::any_of(impl().grad.begin(), impl().grad.end(), bad)) {
    throw NumericError(what + ": non-finite value in gradient");
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_op(std::string op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<TapeNode>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward_fn);
  out.impl().node = std::move(node);
  out.impl().requires_grad = true;
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw UsageError("backward() on a loss with no gradient path");

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(&loss.impl(), 0);
  visited.insert(&loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl* child = &impl->node->inputs[next++].impl();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  for (auto* impl : order) {
    if (impl->node && impl->node->consumed) {
      throw UsageError("backward() called twice on the same graph");
    }
    if (!impl->node && !impl->grad.empty()) {
      throw UsageError("gradient already populated on a leaf; call zero_grad() first");
    }
  }
  for (auto* impl : order) impl->grad.assign(impl->data.size(), 0.0);
  order.back()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node) continue;
    auto& node = *impl->node;
    GradSlots slots;
    slots.reserve(node.inputs.size());
    for (auto& in : node.inputs) {
      if (in.requires_grad()) {
        slots.emplace_back(in.impl().grad);
      } else {
        slots.emplace_back();
      }
    }
    node.backward(impl->grad, slots);
    node.consumed = true;
    node.backward = nullptr;  // releases saved forward values
  }
}

// ---- shape ops -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(data), {x},
                 [](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                 });
}

// ---- matmul --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.extent(0));
  const auto k = static_cast<Eigen::Index>(a.extent(1));
  const auto n = static_cast<Eigen::Index>(b.extent(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  ConstMapMat A(a.data().data(), m, k);
  ConstMapMat B(b.data().data(), k, n);
  MapMat(out.data(), m, n) = product(A, B);
  return make_op("matmul", {a.extent(0), b.extent(1)}, std::move(out), {a, b},
                 [a, b, m, k, n](std::span<const double> g, const GradSlots& gi) {
                   ConstMapMat G(g.data(), m, n);
                   if (!gi[0].empty()) {
                     MapMat(gi[0].data(), m, k) += product(G, ConstMapMat(b.data().data(), k, n).transpose());
                   }
                   if (!gi[1].empty()) {
                     MapMat(gi[1].data(), k, n) += product(ConstMapMat(a.data().data(), m, k).transpose(), G);
                   }
                 });
}

// ---- conv2d --------------------------------------------------------------------

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (kernel > in + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel) +
                         " larger than padded input " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, f, stride, pad, oh, ow;
};

// Lowers sample `n` into columns [n*P, (n+1)*P) of a (cin*f*f) x (N*P) matrix.
void im2col(const double* x, const ConvGeom& g, std::size_t n, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ld = g.n * plane;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* xin = x + (n * g.cin + ci) * g.h * g.w;
    for (std::size_t fy = 0; fy < g.f; ++fy) {
      for (std::size_t fx = 0; fx < g.f; ++fx) {
        double* row = cols + ((ci * g.f + fy) * g.f + fx) * ld + n * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + fy) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + fx) - static_cast<long>(g.pad);
            row[oy * g.ow + ox] =
                (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w))
                    ? 0.0
                    : xin[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, std::size_t n, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ld = g.n * plane;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* dxin = dx + (n * g.cin + ci) * g.h * g.w;
    for (std::size_t fy = 0; fy < g.f; ++fy) {
      for (std::size_t fx = 0; fx < g.f; ++fx) {
        const double* row = cols + ((ci * g.f + fy) * g.f + fx) * ld + n * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + fy) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + fx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dxin[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects NCHW input and OIHW kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (w.extent(1) != x.extent(1) || w.extent(2) != w.extent(3)) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  ConvGeom g{x.extent(0), x.extent(1), x.extent(2), x.extent(3), w.extent(0), w.extent(2),
             stride,      padding,     0,           0};
  g.oh = conv_out_extent(g.h, g.f, stride, padding);
  g.ow = conv_out_extent(g.w, g.f, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != g.cout)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }

  // Each output accumulates its products in (ci, fy, fx) order starting from
  // zero, then the bias is added. Every kernel tap is applied as an axpy over
  // a whole output plane, which vectorizes without reordering any single
  // element's sum. Padded taps contribute +-0 and leave partial sums unchanged.
  const std::size_t plane = g.oh * g.ow;
  const std::size_t K = g.cin * g.f * g.f;
  const std::size_t ld = g.n * plane;
  std::vector<double> out(g.n * g.cout * plane, 0.0);
  auto cols = std::make_shared<RowMatrix>(K, ld);
  const double* wd = w.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(x.data().data(), g, n, cols->data());
    const double* c = cols->data() + n * plane;
    std::size_t co = 0;
    for (; co + 4 <= g.cout; co += 4) {
      double* o0 = out.data() + (n * g.cout + co) * plane;
      double* o1 = o0 + plane;
      double* o2 = o1 + plane;
      double* o3 = o2 + plane;
      for (std::size_t k = 0; k < K; ++k) {
        const double w0 = wd[co * K + k], w1 = wd[(co + 1) * K + k];
        const double w2 = wd[(co + 2) * K + k], w3 = wd[(co + 3) * K + k];
        const double* crow = c + k * ld;
        for (std::size_t p = 0; p < plane; ++p) {
          const double cv = crow[p];
          o0[p] += w0 * cv;
          o1[p] += w1 * cv;
          o2[p] += w2 * cv;
          o3[p] += w3 * cv;
        }
      }
    }
    for (; co < g.cout; ++co) {
      double* o = out.data() + (n * g.cout + co) * plane;
      for (std::size_t k = 0; k < K; ++k) {
        const double wv = wd[co * K + k];
        const double* crow = c + k * ld;
        for (std::size_t p = 0; p < plane; ++p) o[p] += wv * crow[p];
      }
    }
    if (bias.defined()) {
      for (co = 0; co < g.cout; ++co) {
        double* o = out.data() + (n * g.cout + co) * plane;
        const double b = bias[co];
        for (std::size_t p = 0; p < plane; ++p) o[p] += b;
      }
    }
  }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(
      "conv2d", {g.n, g.cout, g.oh, g.ow}, std::move(out), std::move(inputs),
      [w, g, cols](std::span<const double> grad, const GradSlots& gi) {
        const auto K = static_cast<Eigen::Index>(g.cin * g.f * g.f);
        const auto P = static_cast<Eigen::Index>(g.oh * g.ow);
        const auto Co = static_cast<Eigen::Index>(g.cout);
        const bool need_w = !gi[1].empty();
        const bool need_x = !gi[0].empty();
        if (gi.size() > 2 && !gi[2].empty()) {
          for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              const double* gp = grad.data() + (n * g.cout + co) * g.oh * g.ow;
              double s = 0.0;
              for (Eigen::Index i = 0; i < P; ++i) s += gp[i];
              gi[2][co] += s;
            }
          }
        }
        if (!need_w && !need_x) return;
        // Gather the upstream gradient as Cout x (N*P) so both products are
        // single GEMMs against the saved columns.
        const auto NP = static_cast<Eigen::Index>(g.n) * P;
        RowMatrix G(Co, NP);
        for (std::size_t n = 0; n < g.n; ++n) {
          for (Eigen::Index co = 0; co < Co; ++co) {
            const double* src = grad.data() + (n * g.cout + static_cast<std::size_t>(co)) * static_cast<std::size_t>(P);
            std::copy(src, src + P, G.data() + co * NP + static_cast<Eigen::Index>(n) * P);
          }
        }
        if (need_w) {
          RowMatrix dw(Co, K);
          dw.noalias() = G * cols->transpose();
          MapMat(gi[1].data(), Co, K) += dw;
        }
        if (need_x) {
          const RowMatrix Wt = ConstMapMat(w.data().data(), Co, K).transpose();
          RowMatrix dcols(K, NP);
          dcols.noalias() = Wt * G;
          for (std::size_t n = 0; n < g.n; ++n) col2im_add(dcols.data(), g, n, gi[0].data());
        }
      });
}

// ---- elementwise -----------------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return make_op("relu", x.shape(), std::move(out), {x},
                 [x](std::span<const double> g, const GradSlots& gi) {
                   auto xd = x.data();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     if (xd[i] > 0.0) gi[0][i] += g[i];
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (is_scalar_like(b) && !is_scalar_like(a)) {
    std::vector<double> out(a.data().begin(), a.data().end());
    const double s = b[0];
    for (auto& v : out) v += s;
    return make_op("add", a.shape(), std::move(out), {a, b},
                   [](std::span<const double> g, const GradSlots& gi) {
                     if (!gi[0].empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     }
                     if (!gi[1].empty()) {
                       double s = 0.0;
                       for (double v : g) s += v;
                       gi[1][0] += s;
                     }
                   });
  }
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [](std::span<const double> g, const GradSlots& gi) {
                   for (int k = 0; k < 2; ++k) {
                     if (gi[k].empty()) continue;
                     for (std::size_t i = 0; i < g.size(); ++i) gi[k][i] += g[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (is_scalar_like(b) && !is_scalar_like(a)) {
    std::vector<double> out(a.numel());
    const double s = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_op("mul", a.shape(), std::move(out), {a, b},
                   [a, b](std::span<const double> g, const GradSlots& gi) {
                     if (!gi[0].empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * b[0];
                     }
                     if (!gi[1].empty()) {
                       double s = 0.0;
                       for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * a[i];
                       gi[1][0] += s;
                     }
                   });
  }
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [a, b](std::span<const double> g, const GradSlots& gi) {
                   if (!gi[0].empty()) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * b[i];
                   }
                   if (!gi[1].empty()) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * a[i];
                   }
                 });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_op("scale", x.shape(), std::move(out), {x},
                 [s](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
                 });
}

Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += s;
  return make_op("add_scalar", x.shape(), std::move(out), {x},
                 [](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                 });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op("sum", {}, {s}, {x}, [](std::span<const double> g, const GradSlots& gi) {
    for (auto& v : gi[0]) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  return make_op("mean", {}, {s / n}, {x}, [n](std::span<const double> g, const GradSlots& gi) {
    for (auto& v : gi[0]) v += g[0] / n;
  });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.extent(0) != x.extent(1)) {
    throw DimensionError("bias_add: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const std::size_t n = x.extent(0), c = x.extent(1), inner = x.numel() / (n * c);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      double* p = out.data() + (i * c + j) * inner;
      for (std::size_t k = 0; k < inner; ++k) p[k] += bias[j];
    }
  }
  return make_op("bias_add", x.shape(), std::move(out), {x, bias},
                 [n, c, inner](std::span<const double> g, const GradSlots& gi) {
                   if (!gi[0].empty()) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                   }
                   if (!gi[1].empty()) {
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         const double* p = g.data() + (i * c + j) * inner;
                         for (std::size_t k = 0; k < inner; ++k) gi[1][j] += p[k];
                       }
                     }
                   }
                 });
}

// ---- reductions over windows -------------------------------------------------------

Tensor max_over_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("max_over_axis: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * len * inner + i;
      for (std::size_t a = 1; a < len; ++a) {
        const std::size_t idx = (o * len + a) * inner + i;
        if (xd[idx] > xd[best]) best = idx;
      }
      out[o * inner + i] = xd[best];
      arg[o * inner + i] = best;
    }
  }
  return make_op("max_over_axis", std::move(out_shape), std::move(out), {x},
                 [arg = std::move(arg)](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][arg[i]] += g[i];
                 });
}

Tensor max_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() < 2 || k == 0) throw DimensionError("max_pool2d: bad input " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (h < k || w < k) throw DimensionError("max_pool2d: window larger than input");
  const std::size_t oh = h / k, ow = w / k, planes = x.numel() / (h * w);
  Shape out_shape = s;
  out_shape[s.size() - 2] = oh;
  out_shape[s.size() - 1] = ow;
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> arg(out.size());
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (p * h + oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (p * h + oy * k + dy) * w + ox * k + dx;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xd[best];
        arg[o] = best;
      }
    }
  }
  return make_op("max_pool2d", std::move(out_shape), std::move(out), {x},
                 [arg = std::move(arg)](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][arg[i]] += g[i];
                 });
}

// ---- batch norm ----------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training) {
  if (x.rank() != 2) throw DimensionError("batch_norm expects N x F, got " + shape_str(x.shape()));
  const std::size_t n = x.extent(0), f = x.extent(1);
  if (gamma.numel() != f || beta.numel() != f || state.running_mean.size() != f ||
      state.running_var.size() != f) {
    throw DimensionError("batch_norm: parameter size does not match " + std::to_string(f));
  }
  if (training && n < 2) {
    throw NumericError("batch_norm: batch of size 1 in training mode has undefined variance");
  }
  std::vector<double> mu(f), inv_std(f);
  auto xd = x.data();
  if (training) {
    for (std::size_t j = 0; j < f; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += xd[i * f + j];
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (xd[i * f + j] - m) * (xd[i * f + j] - m);
      v /= static_cast<double>(n);
      mu[j] = m;
      inv_std[j] = 1.0 / std::sqrt(v + state.eps);
      const double unbiased = v * static_cast<double>(n) / static_cast<double>(n - 1);
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * m;
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = state.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
    }
  }
  std::vector<double> xhat(n * f), out(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      xhat[i * f + j] = (xd[i * f + j] - mu[j]) * inv_std[j];
      out[i * f + j] = gamma[j] * xhat[i * f + j] + beta[j];
    }
  }
  return make_op(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, n, f, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const double> g, const GradSlots& gi) {
        for (std::size_t j = 0; j < f; ++j) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            sg += g[i * f + j];
            sgx += g[i * f + j] * xhat[i * f + j];
          }
          if (!gi[1].empty()) gi[1][j] += sgx;
          if (!gi[2].empty()) gi[2][j] += sg;
          if (gi[0].empty()) continue;
          const double gm = gamma[j] * inv_std[j];
          if (training) {
            const double dn = static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
              gi[0][i * f + j] += gm * (g[i * f + j] - sg / dn - xhat[i * f + j] * sgx / dn);
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) gi[0][i * f + j] += gm * g[i * f + j];
          }
        }
      });
}

// ---- custom ----------------------------------------------------------------------------

Tensor custom_unary(const Tensor& x, std::function<double(double)> forward_fn,
                    std::function<double(double, double)> backward_fn, std::string op) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward_fn(x[i]);
  return make_op(std::move(op), x.shape(), std::move(out), {x},
                 [x, bw = std::move(backward_fn)](std::span<const double> g, const GradSlots& gi) {
                   for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += bw(g[i], x[i]);
                 });
}

}  // namespace qgait
