#pragma once

// Synthetic binary gait silhouettes.
//
// Each identity is a small articulated figure (ellipse torso, circle head,
// two leg bars swinging with sin(2 pi t / T_cycle + phase)). Sequences of the
// same identity differ by phase jitter, a one-pixel horizontal shift, pixel
// noise and optional covariates. Everything is a pure function of
// (config, seed): pixel noise uses a counter-based generator keyed by
// (seed, id, seq, frame).

#include <cstdint>
#include <string>
#include <vector>

#include "qgait/tensor.hpp"

namespace qgait {

enum class Covariate { NONE, CARRY, DILATE };

std::string to_string(Covariate c);
Covariate covariate_from_string(const std::string& s);

/// Generator bounds for identity parameters.
struct IdentityRanges {
  double torso_width[2] = {0.34, 0.42};      // ellipse width / W
  double leg_length[2] = {0.325, 0.375};     // leg bar length / H
  double stride[2] = {0.275, 0.425};         // peak leg angle, radians
  double head_radius[2] = {0.0775, 0.0925};  // / H
};

struct IdentitySpec {
  int id = 0;
  double torso_width_ratio = 0.0;
  double leg_length_ratio = 0.0;
  double stride_amplitude = 0.0;
  double head_radius_ratio = 0.0;
  double base_phase = 0.0;
};

struct DatasetConfig {
  std::uint64_t seed = 7;
  int n_ids = 32;    // total identities
  int eval_ids = 16; // the last eval_ids identities form gallery/probe
  int seqs_per_id = 12;
  int frames = 8;
  int height = 32;
  int width = 24;
  int cycle = 8;              // frames per gait cycle
  double covariate_rate = 0.25;
  double noise_rate = 0.005;  // fraction of pixels flipped per frame (<= 0.01)
  double phase_jitter = 0.6;  // radians, per sequence
  IdentityRanges ranges;

  int train_ids() const { return n_ids - eval_ids; }
  void validate() const;
};

struct SilhouetteSequence {
  int identity = 0;
  int seq_id = 0;
  Covariate covariate = Covariate::NONE;
  int frames = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // T x H x W, values 0/1

  std::uint8_t at(int t, int y, int x) const {
    return pixels[(static_cast<std::size_t>(t) * height + y) * width + x];
  }
  std::size_t foreground() const;
  std::size_t foreground(int t) const;
};

struct DatasetSplit {
  DatasetConfig config;
  std::vector<IdentitySpec> identities;
  std::vector<SilhouetteSequence> sequences;
  std::vector<std::size_t> train, gallery, probe;  // indices into sequences
  std::vector<int> train_identities, eval_identities;

  /// Class index of a training identity (0-based over train_identities).
  int class_of(int identity) const;
};

IdentitySpec draw_identity(const DatasetConfig& cfg, int id);

/// Renders one clean sequence (no noise, no covariate).
SilhouetteSequence render_sequence(const DatasetConfig& cfg, const IdentitySpec& who, int seq_id);

SilhouetteSequence apply_covariate(const SilhouetteSequence& seq, Covariate kind);

/// Flips exactly round(noise_rate * H * W) distinct pixels per frame.
void apply_pixel_noise(SilhouetteSequence& seq, const DatasetConfig& cfg);

DatasetSplit generate_dataset(const DatasetConfig& cfg);

/// Convenience overload mirroring the generator's main knobs.
DatasetSplit generate_dataset(std::uint64_t seed, int n_ids, int seqs_per_id, int frames, int height,
                              int width, double covariate_rate);

/// Stacks sequences into a B x T' x 1 x H x W tensor. `frame_subset` (if
/// nonempty) selects frames per sequence: row b uses frame_subset[b].
Tensor make_batch(const DatasetSplit& data, const std::vector<std::size_t>& indices,
                  const std::vector<std::vector<int>>& frame_subset = {});

/// manifest.json + seq_XXXXX.bin (raw T*H*W bytes, one byte per pixel).
void save_dataset(const DatasetSplit& data, const std::string& dir, const std::string& config_hash,
                  std::uint64_t run_seed);
DatasetSplit load_dataset(const std::string& dir);

std::uint64_t splitmix64(std::uint64_t x);
/// Counter-based uniform in [0, 1) keyed by a tuple of integers.
double keyed_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                     std::uint64_t d, std::uint64_t counter);

}  // namespace qgait
