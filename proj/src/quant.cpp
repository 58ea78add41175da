#include "qgait/quant.hpp"

#include "dense.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace qgait {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Strided>;
using StridedMap = Eigen::Map<RowMatrix, 0, Strided>;

inline bool in_range(double u, const QuantConfig& cfg) {
  return u > static_cast<double>(cfg.r1) && u < static_cast<double>(cfg.r2);
}

inline double ste_factor(double u, const QuantConfig& cfg) { return in_range(u, cfg) ? 1.0 : 0.0; }

inline double soft_factor(double u, const QuantConfig& cfg) {
  return in_range(u, cfg) ? soft_theta_derivative(u, cfg.k) : 0.0;
}

inline double step_contrib(double u, const QuantConfig& cfg) {
  if (u <= static_cast<double>(cfg.r1)) return static_cast<double>(cfg.r1);
  if (u >= static_cast<double>(cfg.r2)) return static_cast<double>(cfg.r2);
  return round_half_away(u) - u;
}

void require_match(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_step(double v) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ConfigError("quantizer step must be positive, got " + std::to_string(v));
  }
}

}  // namespace

std::string_view to_string(GradMode mode) { return mode == GradMode::STE ? "STE" : "SOFT"; }

GradMode grad_mode_from_string(std::string_view s) {
  if (s == "STE") return GradMode::STE;
  if (s == "SOFT") return GradMode::SOFT;
  throw ConfigError("unknown grad_mode '" + std::string(s) + "'");
}

QuantConfig QuantConfig::uniform(int bits, bool is_signed, double step) {
  if (bits < 2 || bits > 32) throw ConfigError("bit-width must be in [2, 32], got " + std::to_string(bits));
  QuantConfig cfg;
  cfg.bits = bits;
  cfg.is_signed = is_signed;
  if (is_signed) {
    cfg.r1 = -(1L << (bits - 1));
    cfg.r2 = (1L << (bits - 1)) - 1;
  } else {
    cfg.r1 = 0;
    cfg.r2 = (1L << bits) - 1;
  }
  cfg.step = step;
  return cfg;
}

void QuantConfig::validate() const {
  if (is_full_precision()) return;
  auto expect = uniform(bits, is_signed);
  if (r1 != expect.r1 || r2 != expect.r2) {
    throw ConfigError("clamp range [" + std::to_string(r1) + ", " + std::to_string(r2) +
                      "] inconsistent with " + std::to_string(bits) + "-bit " +
                      (is_signed ? "signed" : "unsigned"));
  }
  require_step(step);
  if (grad_mode == GradMode::SOFT && !(k >= 1.0)) throw ConfigError("SOFT mode requires k >= 1");
  if (grad_scale < 0.0) throw ConfigError("grad_scale must be positive");
}

double round_half_away(double x) { return std::round(x); }

Tensor ste_backward(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg) {
  require_match(g_out, x, "ste_backward");
  require_step(cfg.step);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_out[i] * ste_factor(x[i] / cfg.step, cfg);
  return Tensor(x.shape(), std::move(out));
}

Tensor soft_backward(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg) {
  require_match(g_out, x, "soft_backward");
  require_step(cfg.step);
  if (!(cfg.k >= 1.0)) throw ConfigError("SOFT mode requires k >= 1");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_out[i] * soft_factor(x[i] / cfg.step, cfg);
  return Tensor(x.shape(), std::move(out));
}

double step_grad_scale(const QuantConfig& cfg, std::size_t n) {
  if (cfg.grad_scale > 0.0) return cfg.grad_scale;
  return 1.0 / std::sqrt(static_cast<double>(n) * static_cast<double>(cfg.r2));
}

double step_grad(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg) {
  require_match(g_out, x, "step_grad");
  require_step(cfg.step);
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += g_out[i] * step_contrib(x[i] / cfg.step, cfg);
  return s * step_grad_scale(cfg, x.numel());
}

Tensor fake_quantize(const Tensor& x, const Tensor& step, const QuantConfig& cfg_in) {
  if (step.numel() != 1) throw DimensionError("fake_quantize: step must be a scalar");
  QuantConfig cfg = cfg_in;
  cfg.step = step[0];
  cfg.validate();
  if (cfg.is_full_precision()) return x;
  const double v = cfg.step;
  const double lo = static_cast<double>(cfg.r1), hi = static_cast<double>(cfg.r2);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double xi = x[i];
    if (std::isnan(xi)) throw NumericError("fake_quantize: NaN input");
    const double c = std::clamp(xi / v, lo, hi);
    const double q = cfg.soft_forward ? soft_theta(c, cfg.k) : round_half_away(c);
    out[i] = q * v;
  }
  return make_op("fake_quantize", x.shape(), std::move(out), {x, step},
                 [x, cfg](std::span<const double> g, const GradSlots& gi) {
                   const double v = cfg.step;
                   const bool soft = cfg.grad_mode == GradMode::SOFT;
                   if (!gi[0].empty()) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const double u = x[i] / v;
                       gi[0][i] += g[i] * (soft ? soft_factor(u, cfg) : ste_factor(u, cfg));
                     }
                   }
                   if (!gi[1].empty()) {
                     double s = 0.0;
                     for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * step_contrib(x[i] / v, cfg);
                     gi[1][0] += s * step_grad_scale(cfg, g.size());
                   }
                 });
}

Tensor fake_quantize(const Tensor& x, const QuantConfig& cfg) {
  return fake_quantize(x, Tensor::scalar(cfg.step), cfg);
}

// ---- Quantizer -------------------------------------------------------------------

Quantizer::Quantizer(QuantConfig cfg) : cfg_(cfg), step_(Tensor::scalar(cfg.step, cfg.bits != kFullPrecision)) {
  if (cfg_.is_full_precision()) return;
  if (cfg_.r1 == 0 && cfg_.r2 == 0) {
    auto filled = QuantConfig::uniform(cfg_.bits, cfg_.is_signed, cfg_.step);
    cfg_.r1 = filled.r1;
    cfg_.r2 = filled.r2;
  }
  cfg_.validate();
}

Quantizer::Quantizer(const Quantizer& other)
    : cfg_(other.cfg_), step_(other.step_.clone()), initialized_(other.initialized_) {}

Quantizer& Quantizer::operator=(const Quantizer& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    step_ = other.step_.clone();
    initialized_ = other.initialized_;
  }
  return *this;
}

void Quantizer::initialize_from(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m += std::abs(v);
  m /= static_cast<double>(x.numel());
  double v0 = 2.0 * m / std::sqrt(static_cast<double>(cfg_.r2));
  if (!(v0 > kMinStep)) v0 = 1.0;  // all-zero first batch
  mark_initialized(v0);
}

void Quantizer::mark_initialized(double step) {
  require_step(step);
  step_.mutable_data()[0] = step;
  cfg_.step = step;
  initialized_ = true;
}

Tensor Quantizer::operator()(const Tensor& x) {
  if (!active()) return x;
  if (!initialized_) initialize_from(x);
  return fake_quantize(x, step_, cfg_);
}

QuantConfig Quantizer::config() const {
  QuantConfig c = cfg_;
  if (active()) c.step = step_[0];
  return c;
}

void Quantizer::set_grad_mode(GradMode mode, double k) {
  if (mode == GradMode::SOFT && !(k >= 1.0)) throw ConfigError("SOFT mode requires k >= 1");
  cfg_.grad_mode = mode;
  cfg_.k = k;
}

void Quantizer::set_k(double k) {
  if (!(k >= 1.0)) throw ConfigError("SOFT mode requires k >= 1");
  cfg_.k = k;
}

void Quantizer::clamp_step() {
  if (!active()) return;
  auto d = step_.mutable_data();
  if (!(d[0] >= kMinStep)) d[0] = kMinStep;
}

// ---- layers ----------------------------------------------------------------------

Tensor quantize_bias(const Tensor& bias, double scale) {
  require_step(scale);
  return custom_unary(
      bias, [scale](double b) { return round_half_away(b / scale) * scale; },
      [](double g, double) { return g; }, "quantize_bias");
}

Tensor part_matmul(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 3 || x.extent(1) != w.extent(0) || x.extent(2) != w.extent(1)) {
    throw DimensionError("part_matmul: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const auto B = static_cast<Eigen::Index>(x.extent(0));
  const auto P = static_cast<Eigen::Index>(x.extent(1));
  const auto C = static_cast<Eigen::Index>(x.extent(2));
  const auto D = static_cast<Eigen::Index>(w.extent(2));
  std::vector<double> out(static_cast<std::size_t>(B * P * D));
  for (Eigen::Index p = 0; p < P; ++p) {
    ConstStridedMap xp(x.data().data() + p * C, B, C, Strided(P * C));
    Eigen::Map<const RowMatrix> wp(w.data().data() + p * C * D, C, D);
    StridedMap op(out.data() + p * D, B, D, Strided(P * D));
    op = detail::product(xp, wp);
  }
  return make_op("part_matmul", {x.extent(0), x.extent(1), w.extent(2)}, std::move(out), {x, w},
                 [x, w, B, P, C, D](std::span<const double> g, const GradSlots& gi) {
                   for (Eigen::Index p = 0; p < P; ++p) {
                     ConstStridedMap gp(g.data() + p * D, B, D, Strided(P * D));
                     if (!gi[0].empty()) {
                       Eigen::Map<const RowMatrix> wp(w.data().data() + p * C * D, C, D);
                       StridedMap gx(gi[0].data() + p * C, B, C, Strided(P * C));
                       gx += detail::product(gp, wp.transpose());
                     }
                     if (!gi[1].empty()) {
                       ConstStridedMap xp(x.data().data() + p * C, B, C, Strided(P * C));
                       Eigen::Map<RowMatrix> gw(gi[1].data() + p * C * D, C, D);
                       gw += detail::product(xp.transpose(), gp);
                     }
                   }
                 });
}

Layer::Layer(const Layer& other)
    : name(other.name),
      kind(other.kind),
      weight(other.weight.defined() ? other.weight.clone() : Tensor()),
      bias(other.bias.defined() ? other.bias.clone() : Tensor()),
      stride(other.stride),
      padding(other.padding),
      weight_q(other.weight_q),
      act_q(other.act_q),
      attached(other.attached) {}

Layer& Layer::operator=(const Layer& other) {
  if (this != &other) *this = Layer(other);
  return *this;
}

double Layer::accumulator_scale() const {
  return weight_q.step_value() * (act_q.active() ? act_q.step_value() : 1.0);
}

Tensor Layer::forward(const Tensor& x) {
  Tensor xin = act_q(x);
  Tensor w = weight_q(weight);
  Tensor b = bias;
  if (b.defined() && weight_q.active()) b = quantize_bias(bias, accumulator_scale());
  switch (kind) {
    case Kind::Conv2d:
      return conv2d(xin, w, b, stride, padding);
    case Kind::Linear: {
      Tensor y = matmul(xin, w);
      return b.defined() ? bias_add(y, b) : y;
    }
    case Kind::PartLinear:
      return part_matmul(xin, w);
  }
  throw UsageError("unknown layer kind");
}

void attach_quantizer(Layer& layer, const QuantConfig& weight_cfg, const QuantConfig& act_cfg) {
  if (layer.attached) throw UsageError("quantizer already attached to layer " + layer.name);
  layer.weight_q = Quantizer(weight_cfg);
  layer.act_q = Quantizer(act_cfg);
  layer.attached = true;
}

}  // namespace qgait
