#include "qgait/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "qgait/config.hpp"

namespace qgait {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Parameter slots for keyed draws.
enum : std::uint64_t {
  kTorso = 1,
  kLeg,
  kStride,
  kHead,
  kPhase,
  kSeqPhase = 16,
  kSeqShift,
  kCovariate,
  kCovariateKind,
  kNoise = 32,
};

constexpr int kSuper = 3;  // supersampling per axis

struct Figure {
  double cx, head_cy, head_r, torso_cy, torso_a, torso_b, hip_y, leg_len, leg_hw;
};

Figure layout(const DatasetConfig& cfg, const IdentitySpec& who, double shift) {
  const double H = cfg.height, W = cfg.width;
  Figure f{};
  f.cx = W / 2.0 + shift;
  f.head_r = who.head_radius_ratio * H;
  f.head_cy = 1.0 + f.head_r;
  f.leg_len = who.leg_length_ratio * H;
  f.hip_y = (H - 1.0) - f.leg_len;
  const double top = f.head_cy + f.head_r, bottom = f.hip_y + 1.0;
  f.torso_cy = 0.5 * (top + bottom);
  f.torso_b = 0.5 * (bottom - top);
  f.torso_a = 0.5 * who.torso_width_ratio * W;
  f.leg_hw = 0.06 * W;
  return f;
}

bool inside(const Figure& f, double angle, double px, double py) {
  const double hx = (px - f.cx) / f.torso_a, hy = (py - f.torso_cy) / f.torso_b;
  if (hx * hx + hy * hy <= 1.0) return true;
  const double dx = px - f.cx, dy = py - f.head_cy;
  if (dx * dx + dy * dy <= f.head_r * f.head_r) return true;
  for (double a : {angle, -angle}) {
    const double ux = std::sin(a), uy = std::cos(a);
    const double rx = px - f.cx, ry = py - f.hip_y;
    const double along = rx * ux + ry * uy;
    const double across = -rx * uy + ry * ux;
    if (along >= 0.0 && along <= f.leg_len && std::abs(across) <= f.leg_hw) return true;
  }
  return false;
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL)); }

double lerp(const double range[2], double u) { return range[0] + (range[1] - range[0]) * u; }

bool is_gallery(const DatasetConfig& cfg, int identity, int seq) {
  return identity >= cfg.train_ids() && seq < cfg.seqs_per_id / 2;
}

}  // namespace

std::string to_string(Covariate c) {
  switch (c) {
    case Covariate::NONE:
      return "NONE";
    case Covariate::CARRY:
      return "CARRY";
    case Covariate::DILATE:
      return "DILATE";
  }
  return "NONE";
}

Covariate covariate_from_string(const std::string& s) {
  if (s == "NONE") return Covariate::NONE;
  if (s == "CARRY") return Covariate::CARRY;
  if (s == "DILATE") return Covariate::DILATE;
  throw UsageError("unknown covariate '" + s + "'");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double keyed_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                     std::uint64_t d, std::uint64_t counter) {
  std::uint64_t h = splitmix64(seed);
  for (auto v : {a, b, c, d, counter}) h = mix(h, v);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

void DatasetConfig::validate() const {
  if (n_ids < 4) throw ConfigError("n_ids must be >= 4");
  if (eval_ids < 2 || eval_ids >= n_ids - 1) throw ConfigError("eval_ids must be in [2, n_ids - 2]");
  if (seqs_per_id < 2) throw ConfigError("seqs_per_id must be >= 2");
  if (height < 16 || width < 12) throw ConfigError("frames must be at least 16 x 12");
  if (frames < 4) throw ConfigError("T must be >= 4");
  if (cycle < 2) throw ConfigError("cycle must be >= 2");
  if (!(covariate_rate >= 0.0 && covariate_rate <= 1.0)) throw ConfigError("covariate_rate must be in [0, 1]");
  if (!(noise_rate >= 0.0 && noise_rate <= 0.01)) throw ConfigError("noise_rate must be in [0, 0.01]");
  if (!(phase_jitter >= 0.0)) throw ConfigError("phase_jitter must be >= 0");
  auto check = [](const double r[2], const char* what) {
    if (!(r[0] > 0.0 && r[1] >= r[0])) throw ConfigError(std::string("bad range for ") + what);
  };
  check(ranges.torso_width, "torso_width");
  check(ranges.leg_length, "leg_length");
  check(ranges.stride, "stride");
  check(ranges.head_radius, "head_radius");
  if (ranges.torso_width[1] > 0.9 || ranges.leg_length[1] > 0.6 || ranges.head_radius[1] > 0.15 ||
      ranges.stride[1] > 1.2) {
    throw ConfigError("identity ranges exceed renderer bounds");
  }
}

int DatasetSplit::class_of(int identity) const {
  auto it = std::find(train_identities.begin(), train_identities.end(), identity);
  if (it == train_identities.end()) throw UsageError("identity " + std::to_string(identity) + " is not a training identity");
  return static_cast<int>(it - train_identities.begin());
}

std::size_t SilhouetteSequence::foreground() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

std::size_t SilhouetteSequence::foreground(int t) const {
  const auto n = static_cast<std::size_t>(height) * width;
  auto b = pixels.begin() + static_cast<std::ptrdiff_t>(n * t);
  return static_cast<std::size_t>(std::count(b, b + static_cast<std::ptrdiff_t>(n), std::uint8_t{1}));
}

IdentitySpec draw_identity(const DatasetConfig& cfg, int id) {
  auto u = [&](std::uint64_t slot) { return keyed_uniform(cfg.seed, static_cast<std::uint64_t>(id), slot, 0, 0, 0); };
  IdentitySpec s;
  s.id = id;
  s.torso_width_ratio = lerp(cfg.ranges.torso_width, u(kTorso));
  s.leg_length_ratio = lerp(cfg.ranges.leg_length, u(kLeg));
  s.stride_amplitude = lerp(cfg.ranges.stride, u(kStride));
  s.head_radius_ratio = lerp(cfg.ranges.head_radius, u(kHead));
  s.base_phase = 2.0 * std::numbers::pi * u(kPhase);
  return s;
}

SilhouetteSequence render_sequence(const DatasetConfig& cfg, const IdentitySpec& who, int seq_id) {
  const auto key = [&](std::uint64_t slot) {
    return keyed_uniform(cfg.seed, static_cast<std::uint64_t>(who.id), static_cast<std::uint64_t>(seq_id), slot, 0, 0);
  };
  const double phase = who.base_phase + cfg.phase_jitter * (2.0 * key(kSeqPhase) - 1.0);
  const double shift = std::floor(3.0 * key(kSeqShift)) - 1.0;  // -1, 0 or +1 pixel
  const Figure fig = layout(cfg, who, shift);

  SilhouetteSequence seq;
  seq.identity = who.id;
  seq.seq_id = seq_id;
  seq.frames = cfg.frames;
  seq.height = cfg.height;
  seq.width = cfg.width;
  seq.pixels.assign(static_cast<std::size_t>(cfg.frames) * cfg.height * cfg.width, 0);
  const int need = (kSuper * kSuper + 1) / 2;
  for (int t = 0; t < cfg.frames; ++t) {
    const double angle = who.stride_amplitude * std::sin(2.0 * std::numbers::pi * t / cfg.cycle + phase);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            hits += inside(fig, angle, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper);
          }
        }
        seq.pixels[(static_cast<std::size_t>(t) * cfg.height + y) * cfg.width + x] = hits >= need ? 1 : 0;
      }
    }
  }
  return seq;
}

SilhouetteSequence apply_covariate(const SilhouetteSequence& seq, Covariate kind) {
  SilhouetteSequence out = seq;
  if (kind == Covariate::NONE) return out;
  if (kind != Covariate::CARRY && kind != Covariate::DILATE) throw UsageError("unknown covariate kind");
  out.covariate = kind;
  const int H = seq.height, W = seq.width;
  for (int t = 0; t < seq.frames; ++t) {
    auto px = [&](SilhouetteSequence& s, int y, int x) -> std::uint8_t& {
      return s.pixels[(static_cast<std::size_t>(t) * H + y) * W + x];
    };
    if (kind == Covariate::DILATE) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          if (seq.at(t, y, x)) continue;
          const bool hit = (y > 0 && seq.at(t, y - 1, x)) || (y + 1 < H && seq.at(t, y + 1, x)) ||
                           (x > 0 && seq.at(t, y, x - 1)) || (x + 1 < W && seq.at(t, y, x + 1));
          if (hit) px(out, y, x) = 1;
        }
      }
      continue;
    }
    // CARRY: a bag hanging at a fixed offset right of the foreground centroid.
    double sy = 0.0, sx = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (seq.at(t, y, x)) {
          sy += y;
          sx += x;
          ++n;
        }
      }
    }
    const int cy = n ? static_cast<int>(std::lround(sy / static_cast<double>(n))) : H / 2;
    const int cx = n ? static_cast<int>(std::lround(sx / static_cast<double>(n))) : W / 2;
    const int bh = std::max(2, static_cast<int>(std::lround(0.18 * H)));
    const int bw = std::max(2, static_cast<int>(std::lround(0.20 * W)));
    const int top = cy - bh / 2, left = cx + static_cast<int>(std::lround(0.15 * W));
    for (int y = std::max(0, top); y < std::min(H, top + bh); ++y) {
      for (int x = std::max(0, left); x < std::min(W, left + bw); ++x) px(out, y, x) = 1;
    }
  }
  return out;
}

void apply_pixel_noise(SilhouetteSequence& seq, const DatasetConfig& cfg) {
  const int n_pix = seq.height * seq.width;
  const auto flips = static_cast<int>(std::lround(cfg.noise_rate * n_pix));
  for (int t = 0; t < seq.frames; ++t) {
    std::vector<int> chosen;
    std::uint64_t counter = 0;
    while (static_cast<int>(chosen.size()) < flips) {
      const double u = keyed_uniform(cfg.seed ^ kNoise, static_cast<std::uint64_t>(seq.identity),
                                     static_cast<std::uint64_t>(seq.seq_id), static_cast<std::uint64_t>(t), 0, counter++);
      const int p = std::min(n_pix - 1, static_cast<int>(u * n_pix));
      if (std::find(chosen.begin(), chosen.end(), p) == chosen.end()) chosen.push_back(p);
    }
    for (int p : chosen) {
      auto& v = seq.pixels[static_cast<std::size_t>(t) * n_pix + p];
      v = static_cast<std::uint8_t>(1 - v);
    }
  }
}

DatasetSplit generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  DatasetSplit out;
  out.config = cfg;
  for (int id = 0; id < cfg.n_ids; ++id) {
    out.identities.push_back(draw_identity(cfg, id));
    (id < cfg.train_ids() ? out.train_identities : out.eval_identities).push_back(id);
  }
  for (int id = 0; id < cfg.n_ids; ++id) {
    for (int s = 0; s < cfg.seqs_per_id; ++s) {
      SilhouetteSequence seq = render_sequence(cfg, out.identities[static_cast<std::size_t>(id)], s);
      if (!is_gallery(cfg, id, s)) {
        const auto key = [&](std::uint64_t slot) {
          return keyed_uniform(cfg.seed, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(s), slot, 0, 0);
        };
        if (key(kCovariate) < cfg.covariate_rate) {
          seq = apply_covariate(seq, key(kCovariateKind) < 0.5 ? Covariate::CARRY : Covariate::DILATE);
        }
      }
      apply_pixel_noise(seq, cfg);
      const std::size_t index = out.sequences.size();
      if (id < cfg.train_ids()) {
        out.train.push_back(index);
      } else if (is_gallery(cfg, id, s)) {
        out.gallery.push_back(index);
      } else {
        out.probe.push_back(index);
      }
      out.sequences.push_back(std::move(seq));
    }
  }
  return out;
}

DatasetSplit generate_dataset(std::uint64_t seed, int n_ids, int seqs_per_id, int frames, int height,
                              int width, double covariate_rate) {
  DatasetConfig cfg;
  cfg.seed = seed;
  cfg.n_ids = n_ids;
  cfg.eval_ids = std::max(2, n_ids / 3);
  cfg.seqs_per_id = seqs_per_id;
  cfg.frames = frames;
  cfg.cycle = frames;
  cfg.height = height;
  cfg.width = width;
  cfg.covariate_rate = covariate_rate;
  return generate_dataset(cfg);
}

Tensor make_batch(const DatasetSplit& data, const std::vector<std::size_t>& indices,
                  const std::vector<std::vector<int>>& frame_subset) {
  if (indices.empty()) throw UsageError("make_batch: empty batch");
  if (!frame_subset.empty() && frame_subset.size() != indices.size()) {
    throw DimensionError("make_batch: one frame list per sequence required");
  }
  const auto& c = data.config;
  const std::size_t T = frame_subset.empty() ? static_cast<std::size_t>(c.frames) : frame_subset[0].size();
  const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
  std::vector<double> out(indices.size() * T * plane);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& seq = data.sequences.at(indices[b]);
    for (std::size_t t = 0; t < T; ++t) {
      std::size_t src_t = t;
      if (!frame_subset.empty()) {
        if (frame_subset[b].size() != T) throw DimensionError("make_batch: ragged frame subsets");
        const int f = frame_subset[b][t];
        if (f < 0 || f >= seq.frames) throw DimensionError("make_batch: frame " + std::to_string(f) + " out of range");
        src_t = static_cast<std::size_t>(f);
      }
      const auto* src = seq.pixels.data() + src_t * plane;
      double* dst = out.data() + (b * T + t) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i];
    }
  }
  return Tensor({indices.size(), T, 1, static_cast<std::size_t>(c.height), static_cast<std::size_t>(c.width)},
                std::move(out));
}

// ---- directory format ------------------------------------------------------------

namespace {

std::string seq_file(std::size_t i) {
  std::ostringstream os;
  os << "seq_" << std::setw(5) << std::setfill('0') << i << ".bin";
  return os.str();
}

std::string split_of(const DatasetSplit& d, std::size_t i) {
  auto has = [i](const std::vector<std::size_t>& v) { return std::find(v.begin(), v.end(), i) != v.end(); };
  if (has(d.train)) return "train";
  if (has(d.gallery)) return "gallery";
  return "probe";
}

}  // namespace

void save_dataset(const DatasetSplit& data, const std::string& dir, const std::string& config_hash,
                  std::uint64_t run_seed) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  json seqs = json::array();
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const auto& s = data.sequences[i];
    const std::string name = seq_file(i);
    std::ofstream os(fs::path(dir) / name, std::ios::binary);
    if (!os) throw IoError("cannot write " + (fs::path(dir) / name).string());
    os.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
    if (!os) throw IoError("write failed for " + name);
    seqs.push_back({{"file", name},
                    {"identity", s.identity},
                    {"seq_id", s.seq_id},
                    {"covariate", to_string(s.covariate)},
                    {"split", split_of(data, i)}});
  }
  json ids = json::array();
  for (const auto& who : data.identities) {
    ids.push_back({{"id", who.id},
                   {"torso_width_ratio", who.torso_width_ratio},
                   {"leg_length_ratio", who.leg_length_ratio},
                   {"stride_amplitude", who.stride_amplitude},
                   {"head_radius_ratio", who.head_radius_ratio},
                   {"base_phase", who.base_phase}});
  }
  json manifest = {{"format", "qgait-silhouettes/1"},
                   {"config_hash", config_hash},
                   {"seed", run_seed},
                   {"config", dataset_config_to_json(data.config)},
                   {"identities", ids},
                   {"train_identities", data.train_identities},
                   {"eval_identities", data.eval_identities},
                   {"splits", {{"train", data.train}, {"gallery", data.gallery}, {"probe", data.probe}}},
                   {"sequences", seqs}};
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir);
  os << manifest.dump(2) << '\n';
  if (!os) throw IoError("write failed for manifest in " + dir);
}

DatasetSplit load_dataset(const std::string& dir) {
  const auto path = fs::path(dir) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  try {
    if (m.at("format") != "qgait-silhouettes/1") throw IoError("unsupported dataset format in " + path.string());
    DatasetSplit d;
    d.config = dataset_config_from_json(m.at("config"));
    d.config.validate();
    for (const auto& j : m.at("identities")) {
      IdentitySpec s;
      s.id = j.at("id");
      s.torso_width_ratio = j.at("torso_width_ratio");
      s.leg_length_ratio = j.at("leg_length_ratio");
      s.stride_amplitude = j.at("stride_amplitude");
      s.head_radius_ratio = j.at("head_radius_ratio");
      s.base_phase = j.at("base_phase");
      d.identities.push_back(s);
    }
    d.train_identities = m.at("train_identities").get<std::vector<int>>();
    d.eval_identities = m.at("eval_identities").get<std::vector<int>>();
    d.train = m.at("splits").at("train").get<std::vector<std::size_t>>();
    d.gallery = m.at("splits").at("gallery").get<std::vector<std::size_t>>();
    d.probe = m.at("splits").at("probe").get<std::vector<std::size_t>>();
    const std::size_t bytes = static_cast<std::size_t>(d.config.frames) * d.config.height * d.config.width;
    for (const auto& j : m.at("sequences")) {
      SilhouetteSequence s;
      s.identity = j.at("identity");
      s.seq_id = j.at("seq_id");
      s.covariate = covariate_from_string(j.at("covariate"));
      s.frames = d.config.frames;
      s.height = d.config.height;
      s.width = d.config.width;
      s.pixels.resize(bytes);
      const auto file = fs::path(dir) / j.at("file").get<std::string>();
      std::ifstream fi(file, std::ios::binary);
      if (!fi) throw IoError("cannot read " + file.string());
      fi.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(bytes));
      if (fi.gcount() != static_cast<std::streamsize>(bytes) || fi.peek() != EOF) {
        throw IoError("frame file has wrong size: " + file.string());
      }
      for (auto v : s.pixels) {
        if (v > 1) throw IoError("non-binary pixel in " + file.string());
      }
      d.sequences.push_back(std::move(s));
    }
    for (auto* split : {&d.train, &d.gallery, &d.probe}) {
      for (auto i : *split) {
        if (i >= d.sequences.size()) throw IoError("split index out of range in " + path.string());
      }
    }
    return d;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace qgait
