#pragma once

// Integer inference for a trained fake-quantized model.
//
// Weights become integers in [r1, r2]; activations are requantized with the
// frozen step of the consuming layer; products accumulate in checked int64.
// Max pooling and relu commute with the positive rescale, so they run on the
// accumulators directly. Only horizontal pooling (a mean) leaves the integer
// domain before the heads requantize it.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgait/gaitnet.hpp"
#include "qgait/metrics.hpp"

namespace qgait {

struct IntLayer {
  std::string name;
  Layer::Kind kind = Layer::Kind::Conv2d;
  Shape weight_shape;
  std::vector<std::int32_t> weight;  // one value per slot, no sub-byte packing
  std::vector<std::int64_t> bias;    // on the v_w * v_a grid; empty when bias-free
  double v_w = 1.0;
  double v_a = 1.0;  // 1 with act_bits = 0: the input is already integer
  int weight_bits = 0, act_bits = 0;
  long w_r1 = 0, w_r2 = 0, a_r1 = 0, a_r2 = 0;
  std::size_t stride = 1, padding = 0;
  int accumulator_bits = 64;
  LayerCostSpec cost;  // N = 1 for convs; scaled by T when timing
};

struct LoweredModel {
  ModelSpec spec;
  QuantPolicy policy;
  std::vector<IntLayer> layers;  // conv..., head
};

/// Throws LoweringError if any lowered layer is not quantized.
LoweredModel lower(const Model& model);

/// Dequantized weights of a lowered layer (w_int * v_w).
Tensor dequantize_weight(const IntLayer& layer);

/// S is B x T x 1 x H x W with binary pixels; returns B x p x dim.
Tensor int_forward(const LoweredModel& lm, const Tensor& S);

EmbeddingSet int_embeddings(const LoweredModel& lm, const DatasetSplit& data, const std::vector<std::size_t>& indices,
                            std::size_t batch = 16);

struct TimingRow {
  std::string layer;
  double median_us_per_sample = 0.0;
  double bitops = 0.0;
};

/// Median per-sample wall time per layer over `repetitions` runs.
std::vector<TimingRow> timing_report(const LoweredModel& lm, const Tensor& S, int repetitions);
void write_timing_csv(const std::string& path, const std::vector<TimingRow>& rows, const std::string& comment);

nlohmann::json lowered_to_json(const LoweredModel& lm);

}  // namespace qgait
