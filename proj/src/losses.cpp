#include "qgait/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace qgait {

namespace {

void require_labels(const Tensor& X, const std::vector<int>& labels, const char* what) {
  if (X.rank() < 2 || labels.size() != X.extent(0)) {
    throw UsageError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for batch " +
                     shape_str(X.shape()));
  }
}

/// Rows of a logits tensor: (B*p) x C for B x p x C, B x C otherwise.
std::pair<std::size_t, std::size_t> logit_rows(const Tensor& O) {
  if (O.rank() < 2) throw DimensionError("logits must be at least 2-D, got " + shape_str(O.shape()));
  const std::size_t C = O.extent(O.rank() - 1);
  return {O.numel() / C, C};
}

/// log softmax of one row, scaled by 1/T.
void log_softmax(const double* o, std::size_t C, double T, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, o[c] / T);
  double z = 0.0;
  for (std::size_t c = 0; c < C; ++c) z += std::exp(o[c] / T - mx);
  const double lz = mx + std::log(z);
  for (std::size_t c = 0; c < C; ++c) out[c] = o[c] / T - lz;
}

/// Row-wise log q over eligible candidates from a B x B distance matrix;
/// ineligible entries are left at -inf. Returns false when the row has none.
bool idc_row(const double* d, std::size_t B, std::size_t r, const std::vector<int>& labels, double* logq) {
  double mn = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < B; ++s) {
    logq[s] = -std::numeric_limits<double>::infinity();
    if (labels[s] != labels[r]) mn = std::min(mn, d[s]);
  }
  if (!std::isfinite(mn)) return false;
  double z = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    if (labels[s] != labels[r]) z += std::exp(-(d[s] - mn));
  }
  const double lz = std::log(z) - mn;
  for (std::size_t s = 0; s < B; ++s) {
    if (labels[s] != labels[r]) logq[s] = -d[s] - lz;
  }
  return true;
}

std::vector<double> plain_distances(const Tensor& X) {
  const std::size_t B = X.extent(0), D = X.numel() / B;
  std::vector<double> out(B * B, 0.0);
  auto x = X.data();
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double diff = x[i * D + k] - x[j * D + k];
        s += diff * diff;
      }
      out[i * B + j] = std::sqrt(s);
    }
  }
  return out;
}

void require_two_labels(const std::vector<int>& labels) {
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw UsageError("IDC needs at least 2 distinct labels in the batch");
}

}  // namespace

Tensor flatten_rows(const Tensor& X) {
  if (X.rank() < 2) throw DimensionError("flatten_rows expects a batch, got " + shape_str(X.shape()));
  if (X.rank() == 2) return X;
  return reshape(X, {X.extent(0), X.numel() / X.extent(0)});
}

Tensor pairwise_distances(const Tensor& X) {
  if (X.rank() != 2) throw DimensionError("pairwise_distances expects B x D, got " + shape_str(X.shape()));
  const std::size_t B = X.extent(0), D = X.extent(1);
  auto d = plain_distances(X);
  std::vector<double> saved = d;
  return make_op("pairwise_distances", {B, B}, std::move(d), {X},
                 [X, B, D, dist = std::move(saved)](std::span<const double> g, const GradSlots& gi) {
                   auto x = X.data();
                   for (std::size_t i = 0; i < B; ++i) {
                     for (std::size_t j = 0; j < B; ++j) {
                       const double dij = dist[i * B + j];
                       if (!(dij > 0.0) || g[i * B + j] == 0.0) continue;
                       const double c = g[i * B + j] / dij;
                       for (std::size_t k = 0; k < D; ++k) {
                         const double diff = c * (x[i * D + k] - x[j * D + k]);
                         gi[0][i * D + k] += diff;
                         gi[0][j * D + k] -= diff;
                       }
                     }
                   }
                 });
}

Tensor triplet_loss(const Tensor& X, const std::vector<int>& labels, double margin) {
  require_labels(X, labels, "triplet_loss");
  const std::size_t B = labels.size();
  Tensor dist = pairwise_distances(flatten_rows(X));
  auto d = dist.data();
  struct Active {
    std::size_t ap, an;
  };
  std::vector<Active> active;
  std::size_t valid = 0;
  double total = 0.0;
  for (std::size_t a = 0; a < B; ++a) {
    for (std::size_t p = 0; p < B; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t n = 0; n < B; ++n) {
        if (labels[n] == labels[a]) continue;
        ++valid;
        const double term = d[a * B + p] - d[a * B + n] + margin;
        if (term > 0.0) {
          total += term;
          active.push_back({a * B + p, a * B + n});
        }
      }
    }
  }
  if (valid == 0) throw UsageError("triplet_loss: batch has no valid (anchor, positive, negative) triplet");
  const double count = static_cast<double>(active.size());
  const double value = active.empty() ? 0.0 : total / count;
  return make_op("triplet_loss", {}, {value}, {dist},
                 [active = std::move(active), count](std::span<const double> g, const GradSlots& gi) {
                   for (const auto& t : active) {
                     gi[0][t.ap] += g[0] / count;
                     gi[0][t.an] -= g[0] / count;
                   }
                 });
}

Tensor softmax_ce(const Tensor& O, const std::vector<int>& labels) {
  require_labels(O, labels, "softmax_ce");
  const auto [R, C] = logit_rows(O);
  const std::size_t per = R / labels.size();
  std::vector<double> logp(R * C);
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const int y = labels[r / per];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw UsageError("softmax_ce: label " + std::to_string(y) + " out of range");
    log_softmax(O.data().data() + r * C, C, 1.0, logp.data() + r * C);
    total -= logp[r * C + static_cast<std::size_t>(y)];
  }
  return make_op("softmax_ce", {}, {total / static_cast<double>(R)}, {O},
                 [logp = std::move(logp), labels, R, C, per](std::span<const double> g, const GradSlots& gi) {
                   const double s = g[0] / static_cast<double>(R);
                   for (std::size_t r = 0; r < R; ++r) {
                     const auto y = static_cast<std::size_t>(labels[r / per]);
                     for (std::size_t c = 0; c < C; ++c) {
                       gi[0][r * C + c] += s * (std::exp(logp[r * C + c]) - (c == y ? 1.0 : 0.0));
                     }
                   }
                 });
}

Tensor kd_kl(const Tensor& O_H, const Tensor& O_L, double T) {
  if (O_H.shape() != O_L.shape()) {
    throw DimensionError("kd_kl: shape mismatch " + shape_str(O_H.shape()) + " vs " + shape_str(O_L.shape()));
  }
  if (!(T > 0.0)) throw ConfigError("kd_kl: temperature must be positive");
  const auto [R, C] = logit_rows(O_L);
  std::vector<double> lh(R * C), ll(R * C);
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    log_softmax(O_H.data().data() + r * C, C, T, lh.data() + r * C);
    log_softmax(O_L.data().data() + r * C, C, T, ll.data() + r * C);
    for (std::size_t c = 0; c < C; ++c) {
      total += std::exp(lh[r * C + c]) * (lh[r * C + c] - ll[r * C + c]);
    }
  }
  return make_op("kd_kl", {}, {total / static_cast<double>(R)}, {O_L},
                 [lh = std::move(lh), ll = std::move(ll), R, T](std::span<const double> g, const GradSlots& gi) {
                   const double s = g[0] / (static_cast<double>(R) * T);
                   for (std::size_t i = 0; i < lh.size(); ++i) gi[0][i] += s * (std::exp(ll[i]) - std::exp(lh[i]));
                 });
}

std::vector<PairProbability> idc_probabilities(const Tensor& X, const std::vector<int>& labels) {
  require_labels(X, labels, "idc_probabilities");
  require_two_labels(labels);
  const std::size_t B = labels.size();
  auto d = plain_distances(X);
  std::vector<PairProbability> out;
  std::vector<double> logq(B);
  for (std::size_t r = 0; r < B; ++r) {
    if (!idc_row(d.data() + r * B, B, r, labels, logq.data())) continue;
    for (std::size_t s = 0; s < B; ++s) {
      if (labels[s] != labels[r]) out.push_back({r, s, std::exp(logq[s])});
    }
  }
  return out;
}

Tensor idc_loss(const Tensor& X_H, const Tensor& X_L, const std::vector<int>& labels) {
  if (X_H.shape() != X_L.shape()) {
    throw UsageError("idc_loss: teacher batch " + shape_str(X_H.shape()) + " does not match student " +
                     shape_str(X_L.shape()));
  }
  require_labels(X_L, labels, "idc_loss");
  require_two_labels(labels);
  const std::size_t B = labels.size();
  const auto dh = plain_distances(X_H);
  Tensor dist = pairwise_distances(flatten_rows(X_L));
  auto dl = dist.data();
  std::vector<double> qh(B * B, 0.0), ql(B * B, 0.0), lh(B), ll(B);
  double total = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    if (!idc_row(dh.data() + r * B, B, r, labels, lh.data())) continue;
    idc_row(dl.data() + r * B, B, r, labels, ll.data());
    for (std::size_t s = 0; s < B; ++s) {
      if (labels[s] == labels[r]) continue;
      qh[r * B + s] = std::exp(lh[s]);
      ql[r * B + s] = std::exp(ll[s]);
      total += qh[r * B + s] * (lh[s] - ll[s]);
    }
  }
  // Plain sum over (r, s), not a mean over anchors.
  return make_op("idc_loss", {}, {total}, {dist},
                 [qh = std::move(qh), ql = std::move(ql)](std::span<const double> g, const GradSlots& gi) {
                   // d/d dist_L[r, s] of the row KL is q_H - q_L.
                   for (std::size_t i = 0; i < qh.size(); ++i) gi[0][i] += g[0] * (qh[i] - ql[i]);
                 });
}

double logits_variance(const Tensor& O) {
  const double n = static_cast<double>(O.numel());
  double m = 0.0;
  for (double v : O.data()) m += v;
  m /= n;
  double s = 0.0;
  for (double v : O.data()) s += (v - m) * (v - m);
  return s / n;
}

}  // namespace qgait
