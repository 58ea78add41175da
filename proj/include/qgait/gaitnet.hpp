#pragma once

// Toy gait embedding network: X = F(P(B(S))), O = K(X).
//
//   B  frame-wise conv stack, shared over T:
//      conv(1->8, 3x3) -> maxpool2 -> relu -> conv(8->16, 3x3) -> maxpool2 -> relu
//      (pool before relu; the two orders give identical values and gradients)
//   P  set pooling (max over T) then horizontal pooling into p strips (max + mean)
//   F  p independent bias-free linear heads C -> dim
//   K  BNNeck: per-feature batch norm over the p*dim embedding, then a
//      bias-free per-part classifier dim -> n_classes

#include <cstdint>
#include <vector>

#include "qgait/quant.hpp"

namespace qgait {

/// Bit-widths for the whole model. 32 means full precision.
struct QuantPolicy {
  int weight_bits = 32;
  int act_bits = 32;
  int boundary_bits = 0;  // nonzero keeps the first conv and the classifier at this width

  bool full_precision() const { return weight_bits >= 32 && act_bits >= 32; }
  void validate() const;
};

/// QuantConfig for a width in {2..31}, or full precision for 32.
QuantConfig quant_config_for(int bits, bool is_signed);

struct ModelSpec {
  int in_height = 32;
  int in_width = 24;
  std::vector<int> channels = {8, 16};
  int kernel = 3;
  int parts = 4;
  int dim = 32;
  int n_classes = 16;

  int feature_height() const;
  int feature_width() const;
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

struct ModelOutput {
  Tensor X;  // B x p x dim
  Tensor O;  // B x p x n_classes
};

/// Elementwise max over the T axis of B x T x C x H x W.
Tensor set_pool(const Tensor& features);

/// B x C x H x W -> B x p x C, each strip's max plus mean.
Tensor horizontal_pool(const Tensor& features, std::size_t p);

class Model {
 public:
  Model() = default;
  Model(const ModelSpec& spec, std::uint64_t seed);
  // Copies own independent parameters.
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelSpec& spec() const { return spec_; }
  const QuantPolicy& policy() const { return policy_; }

  /// Attaches quantizers per policy. Steps initialize on the first forward.
  void quantize(const QuantPolicy& policy);
  bool quantized() const { return !policy_.full_precision(); }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  Tensor backbone_forward(const Tensor& S);
  Tensor heads_forward(const Tensor& pooled);
  Tensor bnneck_logits(const Tensor& X);
  Tensor embed(const Tensor& S);
  ModelOutput forward(const Tensor& S);

  /// Every trainable tensor (weights, biases, BN affine, quantizer steps).
  std::vector<Tensor*> parameters();
  std::vector<Layer*> layers();
  std::vector<const Layer*> layers() const;
  std::vector<Quantizer*> quantizers();

  void set_grad_mode(GradMode mode, double k);
  void set_k(double k);
  void set_soft_forward(bool on);
  void clamp_steps();

  // Public so checkpoints can read and restore them.
  std::vector<Layer> convs;
  Layer head;
  Layer classifier;
  Tensor bn_gamma, bn_beta;
  BatchNormState bn;

 private:
  ModelSpec spec_;
  QuantPolicy policy_;
  bool training_ = true;
};

}  // namespace qgait
