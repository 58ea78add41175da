#pragma once

// Uniform fake quantization with a learnable step size.
//
//   x_bar = round(clamp(x / v, r1, r2)),   x_hat = x_bar * v
//
// Backward for x is either the straight-through rule (gradient 1 strictly
// inside (r1, r2), 0 outside) or the derivative of the tanh soft quantizer
// theta_k evaluated at x / v. The step gradient follows the learned-step-size
// rule and is scaled by 1 / sqrt(n * r2).

#include <cmath>
#include <string>
#include <string_view>

#include "qgait/tensor.hpp"

namespace qgait {

enum class GradMode { STE, SOFT };

std::string_view to_string(GradMode mode);
GradMode grad_mode_from_string(std::string_view s);

inline constexpr int kFullPrecision = 0;
inline constexpr double kMinStep = 1e-8;

struct QuantConfig {
  int bits = kFullPrecision;
  bool is_signed = false;
  long r1 = 0;
  long r2 = 0;
  double step = 1.0;
  GradMode grad_mode = GradMode::STE;
  double k = 1.0;
  double grad_scale = 0.0;    // 0 selects 1 / sqrt(numel * r2)
  bool soft_forward = false;  // replace round by theta_k in the forward pass

  static QuantConfig full_precision() { return {}; }
  static QuantConfig uniform(int bits, bool is_signed, double step = 1.0);

  bool is_full_precision() const noexcept { return bits == kFullPrecision; }
  /// Bit-width as seen by cost accounting (32 for full precision).
  int effective_bits() const noexcept { return is_full_precision() ? 32 : bits; }
  void validate() const;
};

double round_half_away(double x);

/// theta_k(x) = floor(x) + tanh(k d) / (2 tanh(k/2)) + 1/2, d = x - floor(x) - 1/2.
template <class Scalar>
Scalar soft_theta(Scalar x, Scalar k) {
  using std::floor;
  using std::tanh;
  if (!(k >= Scalar(1))) throw ConfigError("soft quantizer requires k >= 1");
  const Scalar fl = floor(x);
  const Scalar d = x - fl - Scalar(0.5);
  return fl + Scalar(0.5) * tanh(k * d) / tanh(k / Scalar(2)) + Scalar(0.5);
}

/// d theta_k / dx = (k/2) sech^2(k d) / tanh(k/2).
template <class Scalar>
Scalar soft_theta_derivative(Scalar x, Scalar k) {
  using std::cosh;
  using std::floor;
  using std::tanh;
  if (!(k >= Scalar(1))) throw ConfigError("soft quantizer requires k >= 1");
  const Scalar d = x - floor(x) - Scalar(0.5);
  const Scalar c = cosh(k * d);
  return (k / Scalar(2)) / (c * c) / tanh(k / Scalar(2));
}

/// Straight-through rule evaluated elementwise: g where r1 < x/v < r2, else 0.
Tensor ste_backward(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg);

/// Soft-quantizer rule: g * theta_k'(x/v) where r1 < x/v < r2, else 0.
Tensor soft_backward(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg);

/// Learned-step-size gradient for v, including grad_scale.
double step_grad(const Tensor& g_out, const Tensor& x, const QuantConfig& cfg);

/// Effective grad scale for a tensor of `n` elements.
double step_grad_scale(const QuantConfig& cfg, std::size_t n);

/// Differentiable fake quantization with a learnable scalar step tensor.
Tensor fake_quantize(const Tensor& x, const Tensor& step, const QuantConfig& cfg);

/// Fake quantization with the constant step cfg.step (no step gradient).
Tensor fake_quantize(const Tensor& x, const QuantConfig& cfg);

/// A quantization node with its own learnable step.
class Quantizer {
 public:
  explicit Quantizer(QuantConfig cfg = QuantConfig::full_precision());
  // Copies own an independent step parameter.
  Quantizer(const Quantizer& other);
  Quantizer& operator=(const Quantizer& other);
  Quantizer(Quantizer&&) = default;
  Quantizer& operator=(Quantizer&&) = default;

  /// Identity when full precision. The first call on an uninitialized
  /// quantizer sets v = 2 mean|x| / sqrt(r2).
  Tensor operator()(const Tensor& x);

  bool active() const noexcept { return !cfg_.is_full_precision(); }
  bool initialized() const noexcept { return initialized_; }
  void initialize_from(const Tensor& x);
  void mark_initialized(double step);

  /// Current config with `step` synced from the step parameter.
  QuantConfig config() const;
  void set_grad_mode(GradMode mode, double k);
  void set_k(double k);
  void set_soft_forward(bool on) { cfg_.soft_forward = on; }

  Tensor& step() { return step_; }
  const Tensor& step() const { return step_; }
  double step_value() const { return step_[0]; }

  /// Enforces v >= kMinStep after an optimizer update.
  void clamp_step();

 private:
  QuantConfig cfg_;
  Tensor step_;
  bool initialized_ = false;
};

/// Rounds a bias to the accumulator grid `scale` (straight-through backward).
Tensor quantize_bias(const Tensor& bias, double scale);

/// Per-part linear map: x [B x P x C] with w [P x C x D] -> [B x P x D].
Tensor part_matmul(const Tensor& x, const Tensor& w);

/// A conv2d, linear or per-part linear computing unit whose weight and input
/// activation can be fake-quantized.
struct Layer {
  enum class Kind { Conv2d, Linear, PartLinear };

  std::string name;
  Kind kind = Kind::Conv2d;
  Tensor weight;  // Conv2d: O x I x F x F, Linear: I x O, PartLinear: P x I x O
  Tensor bias;    // optional, Conv2d/Linear only
  std::size_t stride = 1;
  std::size_t padding = 0;
  Quantizer weight_q;
  Quantizer act_q;
  bool attached = false;

  Layer() = default;
  // Copies own independent parameters.
  Layer(const Layer& other);
  Layer& operator=(const Layer& other);
  Layer(Layer&&) = default;
  Layer& operator=(Layer&&) = default;

  Tensor forward(const Tensor& x);

  /// Accumulator scale used for bias rounding: v_w * v_a (v_a = 1 when the
  /// input is not quantized, i.e. binary silhouettes).
  double accumulator_scale() const;
};

/// Installs weight and activation quantizers on `layer`. A second call throws
/// UsageError.
void attach_quantizer(Layer& layer, const QuantConfig& weight_cfg, const QuantConfig& act_cfg);

}  // namespace qgait
