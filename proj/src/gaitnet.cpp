#include "qgait/gaitnet.hpp"

#include <cmath>

#include "qgait/rng.hpp"

namespace qgait {

void QuantPolicy::validate() const {
  auto ok = [](int b) { return b >= 2 && b <= 32; };
  if (!ok(weight_bits) || !ok(act_bits)) throw ConfigError("bit-widths must be in [2, 32]");
  if (boundary_bits != 0 && !ok(boundary_bits)) throw ConfigError("boundary_bits must be 0 or in [2, 32]");
}

QuantConfig quant_config_for(int bits, bool is_signed) {
  if (bits >= 32) return QuantConfig::full_precision();
  return QuantConfig::uniform(bits, is_signed);
}

int ModelSpec::feature_height() const { return in_height >> channels.size(); }
int ModelSpec::feature_width() const { return in_width >> channels.size(); }

void ModelSpec::validate() const {
  if (channels.empty()) throw ConfigError("model needs at least one conv layer");
  for (int c : channels) {
    if (c < 1) throw ConfigError("channel counts must be positive");
  }
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd and positive");
  if (parts < 1 || dim < 1 || n_classes < 2) throw ConfigError("parts, dim must be >= 1 and n_classes >= 2");
  if (feature_height() < 1 || feature_width() < 1) throw ConfigError("input too small for the conv stack");
  if (feature_height() % parts != 0) {
    throw ConfigError("parts (" + std::to_string(parts) + ") must divide the feature height " +
                      std::to_string(feature_height()));
  }
}

// ---- pooling ops -----------------------------------------------------------------

Tensor set_pool(const Tensor& features) {
  if (features.rank() != 5) throw DimensionError("set_pool expects B x T x C x H x W, got " + shape_str(features.shape()));
  return max_over_axis(features, 1);
}

Tensor horizontal_pool(const Tensor& x, std::size_t p) {
  if (x.rank() != 4) throw DimensionError("horizontal_pool expects B x C x H x W, got " + shape_str(x.shape()));
  const std::size_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (p == 0 || H % p != 0) {
    throw ConfigError("horizontal_pool: " + std::to_string(p) + " parts do not divide height " + std::to_string(H));
  }
  const std::size_t rows = H / p, cell = rows * W;
  std::vector<double> out(B * p * C);
  std::vector<std::size_t> arg(out.size());
  auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t base = ((b * C + c) * H + j * rows) * W;
        std::size_t best = base;
        double s = 0.0;
        for (std::size_t i = 0; i < cell; ++i) {
          s += xd[base + i];
          if (xd[base + i] > xd[best]) best = base + i;
        }
        const std::size_t o = (b * p + j) * C + c;
        out[o] = xd[best] + s / static_cast<double>(cell);
        arg[o] = best;
      }
    }
  }
  return make_op("horizontal_pool", {B, p, C}, std::move(out), {x},
                 [arg = std::move(arg), B, C, H, W, p, rows, cell](std::span<const double> g, const GradSlots& gi) {
                   const double inv = 1.0 / static_cast<double>(cell);
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t j = 0; j < p; ++j) {
                       for (std::size_t c = 0; c < C; ++c) {
                         const std::size_t o = (b * p + j) * C + c;
                         const std::size_t base = ((b * C + c) * H + j * rows) * W;
                         for (std::size_t i = 0; i < cell; ++i) gi[0][base + i] += g[o] * inv;
                         gi[0][arg[o]] += g[o];
                       }
                     }
                   }
                 });
}

// ---- model -----------------------------------------------------------------------

Model::Model(const ModelSpec& spec, std::uint64_t seed) : bn(0), spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  auto normal = [&rng](Shape shape, double stddev) {
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(v), true);
  };
  auto uniform = [&rng](Shape shape, double bound) {
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
  };
  const auto F = static_cast<std::size_t>(spec_.kernel);
  std::size_t c_in = 1;
  for (std::size_t i = 0; i < spec_.channels.size(); ++i) {
    const auto c_out = static_cast<std::size_t>(spec_.channels[i]);
    Layer l;
    l.name = "conv" + std::to_string(i + 1);
    l.kind = Layer::Kind::Conv2d;
    const double fan_in = static_cast<double>(c_in * F * F);
    l.weight = normal({c_out, c_in, F, F}, std::sqrt(2.0 / fan_in));
    l.bias = uniform({c_out}, 1.0 / std::sqrt(fan_in));
    l.stride = 1;
    l.padding = F / 2;
    convs.push_back(std::move(l));
    c_in = c_out;
  }
  const auto P = static_cast<std::size_t>(spec_.parts), D = static_cast<std::size_t>(spec_.dim);
  head.name = "head";
  head.kind = Layer::Kind::PartLinear;
  head.weight = normal({P, c_in, D}, std::sqrt(1.0 / static_cast<double>(c_in)));
  classifier.name = "classifier";
  classifier.kind = Layer::Kind::PartLinear;
  classifier.weight = normal({P, D, static_cast<std::size_t>(spec_.n_classes)}, std::sqrt(1.0 / static_cast<double>(D)));
  bn_gamma = Tensor::full({P * D}, 1.0, true);
  bn_beta = Tensor::zeros({P * D}, true);
  bn = BatchNormState(P * D);
}

Model::Model(const Model& o)
    : convs(o.convs),
      head(o.head),
      classifier(o.classifier),
      bn_gamma(o.bn_gamma.clone()),
      bn_beta(o.bn_beta.clone()),
      bn(o.bn),
      spec_(o.spec_),
      policy_(o.policy_),
      training_(o.training_) {}

Model& Model::operator=(const Model& o) {
  if (this != &o) *this = Model(o);
  return *this;
}

void Model::quantize(const QuantPolicy& policy) {
  policy.validate();
  const int wb = policy.weight_bits, ab = policy.act_bits;
  const int edge = policy.boundary_bits ? policy.boundary_bits : 0;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const int w = (i == 0 && edge) ? edge : wb;
    // Binary silhouettes are exact at any width; the first conv's input stays unquantized.
    const QuantConfig act = i == 0 ? QuantConfig::full_precision() : quant_config_for(ab, false);
    attach_quantizer(convs[i], quant_config_for(w, true), act);
  }
  attach_quantizer(head, quant_config_for(wb, true), quant_config_for(ab, false));
  attach_quantizer(classifier, quant_config_for(edge ? edge : wb, true), quant_config_for(edge ? edge : ab, true));
  policy_ = policy;
}

Tensor Model::backbone_forward(const Tensor& S) {
  if (S.rank() != 5 || S.extent(2) != 1 || S.extent(3) != static_cast<std::size_t>(spec_.in_height) ||
      S.extent(4) != static_cast<std::size_t>(spec_.in_width)) {
    throw DimensionError("backbone expects B x T x 1 x " + std::to_string(spec_.in_height) + " x " +
                         std::to_string(spec_.in_width) + ", got " + shape_str(S.shape()));
  }
  const std::size_t B = S.extent(0), T = S.extent(1);
  Tensor h = reshape(S, {B * T, 1, S.extent(3), S.extent(4)});
  for (auto& conv : convs) h = relu(max_pool2d(conv.forward(h), 2));
  return reshape(h, {B, T, h.extent(1), h.extent(2), h.extent(3)});
}

Tensor Model::heads_forward(const Tensor& pooled) { return head.forward(pooled); }

Tensor Model::bnneck_logits(const Tensor& X) {
  const std::size_t B = X.extent(0), P = X.extent(1), D = X.extent(2);
  Tensor flat = reshape(X, {B, P * D});
  Tensor normed = reshape(batch_norm(flat, bn_gamma, bn_beta, bn, training_), {B, P, D});
  return classifier.forward(normed);
}

Tensor Model::embed(const Tensor& S) {
  return heads_forward(horizontal_pool(set_pool(backbone_forward(S)), static_cast<std::size_t>(spec_.parts)));
}

ModelOutput Model::forward(const Tensor& S) {
  ModelOutput out;
  out.X = embed(S);
  out.O = bnneck_logits(out.X);
  return out;
}

std::vector<Layer*> Model::layers() {
  std::vector<Layer*> out;
  for (auto& c : convs) out.push_back(&c);
  out.push_back(&head);
  out.push_back(&classifier);
  return out;
}

std::vector<const Layer*> Model::layers() const {
  std::vector<const Layer*> out;
  for (const auto& c : convs) out.push_back(&c);
  out.push_back(&head);
  out.push_back(&classifier);
  return out;
}

std::vector<Quantizer*> Model::quantizers() {
  std::vector<Quantizer*> out;
  for (auto* l : layers()) {
    if (l->weight_q.active()) out.push_back(&l->weight_q);
    if (l->act_q.active()) out.push_back(&l->act_q);
  }
  return out;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (auto* l : layers()) {
    out.push_back(&l->weight);
    if (l->bias.defined()) out.push_back(&l->bias);
  }
  out.push_back(&bn_gamma);
  out.push_back(&bn_beta);
  for (auto* q : quantizers()) out.push_back(&q->step());
  return out;
}

void Model::set_grad_mode(GradMode mode, double k) {
  for (auto* q : quantizers()) q->set_grad_mode(mode, k);
}

void Model::set_k(double k) {
  for (auto* q : quantizers()) q->set_k(k);
}

void Model::set_soft_forward(bool on) {
  for (auto* q : quantizers()) q->set_soft_forward(on);
}

void Model::clamp_steps() {
  for (auto* q : quantizers()) q->clamp_step();
}

}  // namespace qgait
