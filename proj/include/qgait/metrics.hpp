#pragma once

// Retrieval metrics and bit-operation accounting.
//
// Rankings sort the gallery by Euclidean distance to the probe (ascending,
// ties by gallery index). BitOPs of a layer are
//   (b_w / 32) (b_a / 32) * 2 * C_in * C_out * F^2 * N * H * W
// with linear layers entered as F = H = W = 1.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgait/gaitnet.hpp"
#include "qgait/synthdata.hpp"

namespace qgait {

struct EmbeddingSet {
  Eigen::MatrixXd X;  // one row per sample
  std::vector<int> labels;
};

struct RetrievalResult {
  std::vector<double> rank;  // rank[n - 1] = Rank-n rate
  double mAP = 0.0;
  double mINP = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // probes without a gallery positive
};

/// Gallery order for every probe (row-wise indices into the gallery).
std::vector<std::vector<std::size_t>> rankings(const EmbeddingSet& probe, const EmbeddingSet& gallery);

RetrievalResult retrieve(const EmbeddingSet& probe, const EmbeddingSet& gallery, std::size_t max_rank = 10);

double rank_n(const EmbeddingSet& probe, const EmbeddingSet& gallery, std::size_t n);
double mean_ap(const EmbeddingSet& probe, const EmbeddingSet& gallery);
double mean_inp(const EmbeddingSet& probe, const EmbeddingSet& gallery);

/// AP and INP of a single ranked list of positive flags.
double average_precision(const std::vector<bool>& positive);
double inverse_negative_penalty(const std::vector<bool>& positive);

struct LayerCostSpec {
  std::string name;
  std::int64_t C_in = 0, C_out = 0, F = 1, N = 1, H = 1, W = 1;
  int b_w = 32, b_a = 32;

  void validate() const;
  /// 2 * C_in * C_out * F^2 * N * H * W.
  std::int64_t full_precision_ops() const;
  double bitops() const;
};

double bitops(const std::vector<LayerCostSpec>& layers);

/// BitOPs in units of 1e9, rounded to 2 decimals.
double to_giga(double ops);

/// Per-sample cost table of a model processing `frames` frames. The first
/// conv is charged at the policy's activation width (its binary input is
/// representable at any width).
std::vector<LayerCostSpec> model_cost_specs(const Model& model, int frames);

struct MetricsReport {
  double rank1 = 0, rank5 = 0, rank10 = 0, mAP = 0, mINP = 0;
  double bitops = 0, bitops_g = 0;
  double logits_variance = 0;
  std::size_t probes = 0, gallery = 0, excluded = 0;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

/// Eval-mode embeddings (and optionally concatenated logits) for `indices`.
EmbeddingSet compute_embeddings(Model& model, const DatasetSplit& data, const std::vector<std::size_t>& indices,
                                std::size_t batch = 16, std::vector<double>* logits = nullptr);

MetricsReport evaluate(Model& model, const DatasetSplit& data);

/// Probe x gallery distance matrix as CSV (debugging aid).
void write_distance_csv(const EmbeddingSet& probe, const EmbeddingSet& gallery, const std::string& path);

}  // namespace qgait
