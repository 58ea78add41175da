#include "qgait/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "qgait/config.hpp"
#include "qgait/losses.hpp"

namespace qgait {

namespace {

void require_nonempty(const EmbeddingSet& probe, const EmbeddingSet& gallery) {
  if (gallery.X.rows() == 0) throw UsageError("retrieval: empty gallery");
  if (probe.X.rows() == 0) throw UsageError("retrieval: empty probe set");
  if (probe.X.cols() != gallery.X.cols()) throw DimensionError("retrieval: embedding widths differ");
  if (static_cast<std::size_t>(probe.X.rows()) != probe.labels.size() ||
      static_cast<std::size_t>(gallery.X.rows()) != gallery.labels.size()) {
    throw DimensionError("retrieval: label count does not match embeddings");
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> rankings(const EmbeddingSet& probe, const EmbeddingSet& gallery) {
  require_nonempty(probe, gallery);
  const auto G = static_cast<std::size_t>(gallery.X.rows());
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(probe.X.rows()));
  std::vector<double> d(G);
  for (Eigen::Index p = 0; p < probe.X.rows(); ++p) {
    for (std::size_t g = 0; g < G; ++g) {
      d[g] = (probe.X.row(p) - gallery.X.row(static_cast<Eigen::Index>(g))).squaredNorm();
    }
    auto& order = out[static_cast<std::size_t>(p)];
    order.resize(G);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&d](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  }
  return out;
}

double average_precision(const std::vector<bool>& positive) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (!positive[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return hits ? sum / static_cast<double>(hits) : 0.0;
}

double inverse_negative_penalty(const std::vector<bool>& positive) {
  std::size_t hits = 0, hardest = 0;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) {
      ++hits;
      hardest = i + 1;
    }
  }
  return hits ? static_cast<double>(hits) / static_cast<double>(hardest) : 0.0;
}

RetrievalResult retrieve(const EmbeddingSet& probe, const EmbeddingSet& gallery, std::size_t max_rank) {
  const auto orders = rankings(probe, gallery);
  RetrievalResult res;
  res.rank.assign(max_rank, 0.0);
  for (std::size_t p = 0; p < orders.size(); ++p) {
    std::vector<bool> pos(orders[p].size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = gallery.labels[orders[p][i]] == probe.labels[p];
    const auto first = std::find(pos.begin(), pos.end(), true);
    if (first == pos.end()) {
      ++res.excluded;
      continue;
    }
    ++res.evaluated;
    const auto first_rank = static_cast<std::size_t>(first - pos.begin()) + 1;
    for (std::size_t n = first_rank; n <= max_rank; ++n) res.rank[n - 1] += 1.0;
    res.mAP += average_precision(pos);
    res.mINP += inverse_negative_penalty(pos);
  }
  if (res.evaluated == 0) throw UsageError("retrieval: no probe has a positive in the gallery");
  const double n = static_cast<double>(res.evaluated);
  for (auto& r : res.rank) r /= n;
  res.mAP /= n;
  res.mINP /= n;
  return res;
}

double rank_n(const EmbeddingSet& probe, const EmbeddingSet& gallery, std::size_t n) {
  if (n == 0) throw UsageError("rank_n: n must be >= 1");
  return retrieve(probe, gallery, n).rank[n - 1];
}

double mean_ap(const EmbeddingSet& probe, const EmbeddingSet& gallery) { return retrieve(probe, gallery, 1).mAP; }

double mean_inp(const EmbeddingSet& probe, const EmbeddingSet& gallery) { return retrieve(probe, gallery, 1).mINP; }

// ---- BitOPs --------------------------------------------------------------------------

void LayerCostSpec::validate() const {
  if (C_in < 1 || C_out < 1 || F < 1 || N < 1 || H < 1 || W < 1) {
    throw ConfigError("layer cost '" + name + "': extents must be positive");
  }
  if (b_w < 2 || b_w > 32 || b_a < 2 || b_a > 32) throw ConfigError("layer cost '" + name + "': bit-widths must be in [2, 32]");
}

std::int64_t LayerCostSpec::full_precision_ops() const { return 2 * C_in * C_out * F * F * N * H * W; }

double LayerCostSpec::bitops() const {
  validate();
  // (b_w/32)(b_a/32) = b_w b_a / 1024, exact in binary floating point.
  return static_cast<double>(full_precision_ops()) * static_cast<double>(b_w * b_a) / 1024.0;
}

double bitops(const std::vector<LayerCostSpec>& layers) {
  double total = 0.0;
  for (const auto& l : layers) total += l.bitops();
  return total;
}

double to_giga(double ops) { return std::round(ops / 1e7) / 100.0; }

std::vector<LayerCostSpec> model_cost_specs(const Model& model, int frames) {
  const auto& s = model.spec();
  std::vector<LayerCostSpec> out;
  std::int64_t c_in = 1, h = s.in_height, w = s.in_width;
  const int act_bits = model.policy().act_bits;
  for (std::size_t i = 0; i < model.convs.size(); ++i) {
    const Layer& l = model.convs[i];
    LayerCostSpec c;
    c.name = l.name;
    c.C_in = c_in;
    c.C_out = s.channels[i];
    c.F = s.kernel;
    c.N = frames;
    c.H = h;
    c.W = w;
    c.b_w = l.weight_q.config().effective_bits();
    c.b_a = i == 0 ? std::min(act_bits, 32) : l.act_q.config().effective_bits();
    out.push_back(c);
    c_in = s.channels[i];
    h /= 2;
    w /= 2;
  }
  for (const Layer* l : {&model.head, &model.classifier}) {
    LayerCostSpec c;
    c.name = l->name;
    c.C_in = static_cast<std::int64_t>(l->weight.extent(1));
    c.C_out = static_cast<std::int64_t>(l->weight.extent(2));
    c.N = s.parts;
    c.b_w = l->weight_q.config().effective_bits();
    c.b_a = l->act_q.config().effective_bits();
    out.push_back(c);
  }
  return out;
}

// ---- evaluation ------------------------------------------------------------------------

nlohmann::json MetricsReport::to_json() const {
  return {{"rank1", rank1},
          {"rank5", rank5},
          {"rank10", rank10},
          {"mAP", mAP},
          {"mINP", mINP},
          {"bitops", bitops},
          {"bitops_g", bitops_g},
          {"logits_variance", logits_variance},
          {"probes", probes},
          {"gallery", gallery},
          {"excluded_probes", excluded},
          {"config", config}};
}

EmbeddingSet compute_embeddings(Model& model, const DatasetSplit& data, const std::vector<std::size_t>& indices,
                                std::size_t batch, std::vector<double>* logits) {
  NoGradGuard guard;
  const bool was_training = model.training();
  model.set_training(false);
  EmbeddingSet out;
  const auto width = static_cast<Eigen::Index>(model.spec().parts * model.spec().dim);
  out.X.resize(static_cast<Eigen::Index>(indices.size()), width);
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t end = std::min(indices.size(), start + batch);
    std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                   indices.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor S = make_batch(data, chunk);
    Tensor X = model.embed(S);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      for (Eigen::Index k = 0; k < width; ++k) {
        out.X(static_cast<Eigen::Index>(start + i), k) = X[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(k)];
      }
    }
    if (logits) {
      Tensor O = model.bnneck_logits(X);
      logits->insert(logits->end(), O.data().begin(), O.data().end());
    }
  }
  for (auto i : indices) out.labels.push_back(data.sequences.at(i).identity);
  model.set_training(was_training);
  return out;
}

MetricsReport evaluate(Model& model, const DatasetSplit& data) {
  if (data.gallery.empty() || data.probe.empty()) throw UsageError("evaluate: split has no gallery or probe");
  if (model.spec().in_height != data.config.height || model.spec().in_width != data.config.width) {
    throw ConfigError("evaluate: model input " + std::to_string(model.spec().in_height) + "x" +
                      std::to_string(model.spec().in_width) + " does not match dataset frames");
  }
  std::vector<double> logits;
  EmbeddingSet gallery = compute_embeddings(model, data, data.gallery, 16, &logits);
  EmbeddingSet probe = compute_embeddings(model, data, data.probe, 16, &logits);
  const auto res = retrieve(probe, gallery, 10);
  MetricsReport rep;
  rep.rank1 = res.rank[0];
  rep.rank5 = res.rank[4];
  rep.rank10 = res.rank[9];
  rep.mAP = res.mAP;
  rep.mINP = res.mINP;
  rep.probes = res.evaluated;
  rep.excluded = res.excluded;
  rep.gallery = data.gallery.size();
  rep.bitops = bitops(model_cost_specs(model, data.config.frames));
  rep.bitops_g = to_giga(rep.bitops);
  const std::size_t n_logits = logits.size();
  rep.logits_variance = logits_variance(Tensor({n_logits}, std::move(logits)));
  rep.config = {{"model", model_spec_to_json(model.spec())},
                {"quant", quant_policy_to_json(model.policy())},
                {"data", dataset_config_to_json(data.config)}};
  return rep;
}

void write_distance_csv(const EmbeddingSet& probe, const EmbeddingSet& gallery, const std::string& path) {
  require_nonempty(probe, gallery);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(17) << "probe_label";
  for (auto l : gallery.labels) os << ",g" << l;
  os << '\n';
  for (Eigen::Index p = 0; p < probe.X.rows(); ++p) {
    os << probe.labels[static_cast<std::size_t>(p)];
    for (Eigen::Index g = 0; g < gallery.X.rows(); ++g) os << ',' << (probe.X.row(p) - gallery.X.row(g)).norm();
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace qgait
