#include "qgait/intinfer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace qgait {

namespace {

struct IntAct {
  Shape shape;
  std::vector<std::int64_t> v;
  double scale = 1.0;  // real value = v * scale
};

std::int64_t max_abs_act(const IntLayer& l) {
  if (l.act_bits == 0) return 1;  // binary input
  return std::max(std::abs(l.a_r1), std::abs(l.a_r2));
}

/// True when no accumulator of this layer can leave int64.
bool accumulation_fits(const IntLayer& l) {
  const std::size_t co = l.kind == Layer::Kind::Conv2d ? l.weight_shape[0] : l.weight_shape[2];
  std::vector<long double> s(co, 0.0L);
  for (std::size_t i = 0; i < l.weight.size(); ++i) {
    const std::size_t o = l.kind == Layer::Kind::Conv2d ? i / (l.weight.size() / co) : i % co;
    s[o] += std::abs(static_cast<long double>(l.weight[i]));
  }
  const long double limit = std::ldexp(1.0L, 62);
  for (std::size_t o = 0; o < co; ++o) {
    const long double b = l.bias.empty() ? 0.0L : std::abs(static_cast<long double>(l.bias[o]));
    if (s[o] * static_cast<long double>(max_abs_act(l)) + b >= limit) return false;
  }
  return true;
}

inline void mac(std::int64_t& acc, std::int64_t a, std::int64_t w, bool checked) {
  if (!checked) {
    acc += a * w;
    return;
  }
  std::int64_t p;
  if (__builtin_mul_overflow(a, w, &p) || __builtin_add_overflow(acc, p, &acc)) {
    throw NumericError("integer accumulator overflow");
  }
}

IntAct conv_int(const IntAct& x, const IntLayer& l) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t Co = l.weight_shape[0], F = l.weight_shape[2];
  if (l.weight_shape[1] != C) throw DimensionError("int conv: channel mismatch in " + l.name);
  const std::size_t P = l.padding, S = l.stride;
  const std::size_t Ho = conv_out_extent(H, F, S, P), Wo = conv_out_extent(W, F, S, P);
  const bool checked = !accumulation_fits(l);
  IntAct y;
  y.shape = {N, Co, Ho, Wo};
  y.v.assign(N * Co * Ho * Wo, 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < Co; ++o) {
      const std::int64_t b = l.bias.empty() ? 0 : l.bias[o];
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::int64_t acc = 0;
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t fy = 0; fy < F; ++fy) {
              const long iy = static_cast<long>(oy * S + fy) - static_cast<long>(P);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              for (std::size_t fx = 0; fx < F; ++fx) {
                const long ix = static_cast<long>(ox * S + fx) - static_cast<long>(P);
                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                const std::int64_t a = x.v[((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
                if (a == 0) continue;
                mac(acc, a, l.weight[((o * C + c) * F + fy) * F + fx], checked);
              }
            }
          }
          mac(acc, 1, b, checked);
          y.v[((n * Co + o) * Ho + oy) * Wo + ox] = acc;
        }
      }
    }
  }
  return y;
}

/// 2x2 max pooling followed by relu, on accumulators.
IntAct pool_relu(const IntAct& x) {
  const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::size_t Ho = H / 2, Wo = W / 2;
  IntAct y;
  y.shape = {N, C, Ho, Wo};
  y.scale = x.scale;
  y.v.resize(N * C * Ho * Wo);
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::int64_t m = std::numeric_limits<std::int64_t>::min();
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x.v[(p * H + oy * 2 + dy) * W + ox * 2 + dx]);
        }
        y.v[(p * Ho + oy) * Wo + ox] = std::max<std::int64_t>(m, 0);
      }
    }
  }
  return y;
}

std::int64_t requantize(double real, const IntLayer& l) {
  const double u = std::clamp(real / l.v_a, static_cast<double>(l.a_r1), static_cast<double>(l.a_r2));
  return static_cast<std::int64_t>(round_half_away(u));
}

IntAct requantize_act(const IntAct& x, const IntLayer& l) {
  IntAct y;
  y.shape = x.shape;
  y.scale = l.v_a;
  y.v.resize(x.v.size());
  for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = requantize(static_cast<double>(x.v[i]) * x.scale, l);
  return y;
}

using Clock = std::chrono::steady_clock;

struct StageTimes {
  std::vector<double> seconds;
};

Tensor run(const LoweredModel& lm, const Tensor& S, StageTimes* times) {
  const auto& spec = lm.spec;
  if (S.rank() != 5 || S.extent(2) != 1 || S.extent(3) != static_cast<std::size_t>(spec.in_height) ||
      S.extent(4) != static_cast<std::size_t>(spec.in_width)) {
    throw DimensionError("int_forward: bad input " + shape_str(S.shape()));
  }
  const std::size_t B = S.extent(0), T = S.extent(1);
  IntAct a;
  a.shape = {B * T, 1, S.extent(3), S.extent(4)};
  a.v.resize(S.numel());
  for (std::size_t i = 0; i < S.numel(); ++i) {
    const double p = S[i];
    if (p != 0.0 && p != 1.0) throw UsageError("int_forward: input must be binary");
    a.v[i] = static_cast<std::int64_t>(p);
  }
  const std::size_t n_conv = lm.layers.size() - 1;
  for (std::size_t i = 0; i < n_conv; ++i) {
    const auto t0 = Clock::now();
    const IntLayer& l = lm.layers[i];
    IntAct in = l.act_bits == 0 ? a : requantize_act(a, l);
    IntAct acc = conv_int(in, l);
    acc.scale = l.v_w * l.v_a;
    a = pool_relu(acc);
    if (times) times->seconds[i] += std::chrono::duration<double>(Clock::now() - t0).count();
  }
  const auto t0 = Clock::now();
  // Set pooling (max over T) and horizontal pooling into parts.
  const std::size_t C = a.shape[1], H = a.shape[2], W = a.shape[3];
  const auto P = static_cast<std::size_t>(spec.parts);
  const std::size_t rows = H / P, cell = rows * W;
  std::vector<double> pooled(B * P * C);
  std::vector<std::int64_t> setmax(C * H * W);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(setmax.begin(), setmax.end(), std::numeric_limits<std::int64_t>::min());
    for (std::size_t t = 0; t < T; ++t) {
      const std::int64_t* src = a.v.data() + (b * T + t) * C * H * W;
      for (std::size_t i = 0; i < setmax.size(); ++i) setmax[i] = std::max(setmax[i], src[i]);
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < P; ++j) {
        const std::int64_t* s = setmax.data() + (c * H + j * rows) * W;
        std::int64_t mx = s[0], sum = 0;
        for (std::size_t i = 0; i < cell; ++i) {
          mx = std::max(mx, s[i]);
          sum += s[i];
        }
        pooled[(b * P + j) * C + c] = static_cast<double>(mx) * a.scale +
                                      static_cast<double>(sum) * a.scale / static_cast<double>(cell);
      }
    }
  }
  const IntLayer& h = lm.layers.back();
  const std::size_t D = h.weight_shape[2];
  if (h.weight_shape[0] != P || h.weight_shape[1] != C) throw DimensionError("int_forward: head shape mismatch");
  const bool checked = !accumulation_fits(h);
  std::vector<double> out(B * P * D);
  std::vector<std::int64_t> q(C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < P; ++j) {
      for (std::size_t c = 0; c < C; ++c) q[c] = requantize(pooled[(b * P + j) * C + c], h);
      for (std::size_t d = 0; d < D; ++d) {
        std::int64_t acc = 0;
        for (std::size_t c = 0; c < C; ++c) mac(acc, q[c], h.weight[(j * C + c) * D + d], checked);
        out[(b * P + j) * D + d] = static_cast<double>(acc) * (h.v_w * h.v_a);
      }
    }
  }
  if (times) times->seconds[n_conv] += std::chrono::duration<double>(Clock::now() - t0).count();
  return Tensor({B, P, D}, std::move(out));
}

}  // namespace

LoweredModel lower(const Model& model) {
  LoweredModel lm;
  lm.spec = model.spec();
  lm.policy = model.policy();
  std::vector<const Layer*> src;
  for (const auto& c : model.convs) src.push_back(&c);
  src.push_back(&model.head);
  std::int64_t c_in = 1, h = lm.spec.in_height, w = lm.spec.in_width;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Layer& l = *src[i];
    if (!l.weight_q.active()) throw LoweringError("layer " + l.name + " has full-precision weights");
    if (!l.weight_q.initialized()) throw LoweringError("layer " + l.name + " has an uncalibrated weight step");
    const bool first = i == 0;
    if (!first && !l.act_q.active()) throw LoweringError("layer " + l.name + " has full-precision activations");
    if (!first && !l.act_q.initialized()) throw LoweringError("layer " + l.name + " has an uncalibrated activation step");
    const QuantConfig wc = l.weight_q.config();
    IntLayer il;
    il.name = l.name;
    il.kind = l.kind;
    il.weight_shape = l.weight.shape();
    il.v_w = wc.step;
    il.weight_bits = wc.bits;
    il.w_r1 = wc.r1;
    il.w_r2 = wc.r2;
    if (first) {
      il.v_a = 1.0;
      il.act_bits = 0;
    } else {
      const QuantConfig ac = l.act_q.config();
      il.v_a = ac.step;
      il.act_bits = ac.bits;
      il.a_r1 = ac.r1;
      il.a_r2 = ac.r2;
    }
    il.stride = l.stride;
    il.padding = l.padding;
    for (double v : l.weight.data()) {
      const double u = std::clamp(v / il.v_w, static_cast<double>(il.w_r1), static_cast<double>(il.w_r2));
      il.weight.push_back(static_cast<std::int32_t>(round_half_away(u)));
    }
    if (l.bias.defined()) {
      const double s = il.v_w * il.v_a;
      for (double b : l.bias.data()) il.bias.push_back(static_cast<std::int64_t>(round_half_away(b / s)));
    }
    il.cost.name = l.name;
    if (l.kind == Layer::Kind::Conv2d) {
      il.cost.C_in = c_in;
      il.cost.C_out = static_cast<std::int64_t>(il.weight_shape[0]);
      il.cost.F = static_cast<std::int64_t>(il.weight_shape[2]);
      il.cost.H = h;
      il.cost.W = w;
      il.cost.b_a = first ? std::min(lm.policy.act_bits, 32) : il.act_bits;
      c_in = il.cost.C_out;
      h /= 2;
      w /= 2;
    } else {
      il.cost.C_in = static_cast<std::int64_t>(il.weight_shape[1]);
      il.cost.C_out = static_cast<std::int64_t>(il.weight_shape[2]);
      il.cost.N = static_cast<std::int64_t>(il.weight_shape[0]);
      il.cost.b_a = il.act_bits;
    }
    il.cost.b_w = il.weight_bits;
    lm.layers.push_back(std::move(il));
  }
  return lm;
}

Tensor dequantize_weight(const IntLayer& layer) {
  std::vector<double> out(layer.weight.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(layer.weight[i]) * layer.v_w;
  return Tensor(layer.weight_shape, std::move(out));
}

Tensor int_forward(const LoweredModel& lm, const Tensor& S) { return run(lm, S, nullptr); }

EmbeddingSet int_embeddings(const LoweredModel& lm, const DatasetSplit& data, const std::vector<std::size_t>& indices,
                            std::size_t batch) {
  EmbeddingSet out;
  const auto width = static_cast<Eigen::Index>(lm.spec.parts * lm.spec.dim);
  out.X.resize(static_cast<Eigen::Index>(indices.size()), width);
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t end = std::min(indices.size(), start + batch);
    std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                   indices.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor X = int_forward(lm, make_batch(data, chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      for (Eigen::Index k = 0; k < width; ++k) {
        out.X(static_cast<Eigen::Index>(start + i), k) = X[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(k)];
      }
    }
  }
  for (auto i : indices) out.labels.push_back(data.sequences.at(i).identity);
  return out;
}

std::vector<TimingRow> timing_report(const LoweredModel& lm, const Tensor& S, int repetitions) {
  if (repetitions < 10) throw UsageError("timing_report needs >= 10 repetitions");
  const std::size_t n = lm.layers.size();
  std::vector<std::vector<double>> samples(n);
  for (int r = 0; r < repetitions; ++r) {
    StageTimes st;
    st.seconds.assign(n, 0.0);
    run(lm, S, &st);
    for (std::size_t i = 0; i < n; ++i) samples[i].push_back(st.seconds[i]);
  }
  const auto B = static_cast<double>(S.extent(0));
  const auto T = static_cast<std::int64_t>(S.extent(1));
  std::vector<TimingRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    auto& v = samples[i];
    std::sort(v.begin(), v.end());
    const double med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    LayerCostSpec c = lm.layers[i].cost;
    if (lm.layers[i].kind == Layer::Kind::Conv2d) c.N = T;
    rows.push_back({lm.layers[i].name, med / B * 1e6, c.bitops()});
  }
  return rows;
}

void write_timing_csv(const std::string& path, const std::vector<TimingRow>& rows, const std::string& comment) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(12);
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "layer,median_us_per_sample,bitops\n";
  for (const auto& r : rows) os << r.layer << ',' << r.median_us_per_sample << ',' << r.bitops << '\n';
  if (!os) throw IoError("write failed for " + path);
}

nlohmann::json lowered_to_json(const LoweredModel& lm) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : lm.layers) {
    layers.push_back({{"name", l.name},
                      {"kind", l.kind == Layer::Kind::Conv2d ? "conv2d" : "part_linear"},
                      {"weight_shape", l.weight_shape},
                      {"v_w", l.v_w},
                      {"v_a", l.v_a},
                      {"weight_bits", l.weight_bits},
                      {"act_bits", l.act_bits},
                      {"w_r1", l.w_r1},
                      {"w_r2", l.w_r2},
                      {"a_r1", l.a_r1},
                      {"a_r2", l.a_r2},
                      {"stride", l.stride},
                      {"padding", l.padding},
                      {"accumulator_bits", l.accumulator_bits},
                      {"has_bias", !l.bias.empty()},
                      {"cost",
                       {{"C_in", l.cost.C_in},
                        {"C_out", l.cost.C_out},
                        {"F", l.cost.F},
                        {"N", l.cost.N},
                        {"H", l.cost.H},
                        {"W", l.cost.W},
                        {"b_w", l.cost.b_w},
                        {"b_a", l.cost.b_a}}}});
  }
  return {{"layers", layers}};
}

}  // namespace qgait
