#pragma once

// Two-stage quantization-aware training.
//
// Stage 1 trains with straight-through gradients. Stage 2 switches every
// quantizer to the soft-quantizer rule and raises k per a KSchedule. The
// calibration loop adds a distillation term against a frozen higher-precision
// teacher (inter-class distance calibration, or plain logit KD as a baseline).

#include <cstdint>
#include <string>
#include <vector>

#include "qgait/gaitnet.hpp"
#include "qgait/rng.hpp"
#include "qgait/synthdata.hpp"

namespace qgait {

enum class KMode { FIXED, GROW };
std::string to_string(KMode m);
KMode kmode_from_string(const std::string& s);

struct KSchedule {
  KMode mode = KMode::GROW;
  double k0 = 1.0;
  double delta = 0.2;
  long interval = 100;
  double threshold = 3.0;

  void validate() const;
};

/// FIXED: threshold. GROW: min(k0 + delta * floor(t / interval), threshold).
double k_at_iter(const KSchedule& s, long t);

enum class DistillKind { NONE, IDC, KD };
std::string to_string(DistillKind d);
DistillKind distill_from_string(const std::string& s);

struct TrainPlan {
  long stage1_iters = 1000;
  long finetune_iters = 300;
  double lr = 1e-3;           // stage 1 and from-scratch runs
  double finetune_lr = 1e-4;  // stage 2 and calibration
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int ids_per_batch = 8;
  int samples_per_id = 4;
  int train_frames = 4;  // frames sampled per sequence; 0 uses all
  std::uint64_t seed = 1;
  double w_triplet = 1.0;
  double w_ce = 1.0;
  double lambda_idc = 1.0;
  double margin = 0.2;
  double kd_temperature = 1.0;

  void validate() const;
};

struct TraceRow {
  long iteration = 0;
  double loss = 0.0;       // total objective
  double task_loss = 0.0;  // triplet + cross-entropy part
  double distill_loss = 0.0;
  double k = 0.0;  // 0 under STE
  double lr = 0.0;
  GradMode grad_mode = GradMode::STE;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  long steps = 0;
};

/// Adam over a fixed parameter list. Quantizer steps are clamped by the
/// caller after each update.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, double lr, double beta1, double beta2, double eps);
  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<int> labels;       // identity ids
  std::vector<int> classes;      // training class indices
  std::vector<std::vector<int>> frames;  // empty when all frames are used
};

/// Deterministic P x K identity sampler over the training split.
class BatchSampler {
 public:
  BatchSampler(const DatasetSplit& data, const TrainPlan& plan, std::uint64_t salt);
  Batch next();

 private:
  const DatasetSplit& data_;
  TrainPlan plan_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> by_identity_;
};

struct StageOptions {
  GradMode mode = GradMode::STE;
  KSchedule schedule;       // consulted under SOFT
  DistillKind distill = DistillKind::NONE;
  Model* teacher = nullptr; // required unless distill is NONE
  double lambda = 0.0;
  double lr = 0.0;          // 0 takes plan.lr
  std::uint64_t sampler_salt = 1;
};

/// Shared optimization loop behind every training entry point.
TrainResult run_training(Model& model, const DatasetSplit& data, const TrainPlan& plan, long iters,
                         const StageOptions& opts);

TrainResult stage1_train(Model& model, const DatasetSplit& data, const TrainPlan& plan);

TrainResult stage2_finetune(Model& model, const DatasetSplit& data, const TrainPlan& plan, const KSchedule& schedule);

struct CalibrateOptions {
  DistillKind distill = DistillKind::IDC;
  GradMode student_mode = GradMode::STE;  // SOFT follows the stage-2 schedule
  KSchedule schedule;
};

/// Fine-tunes `student` on task + lambda * distillation against `teacher`.
/// With lambda = 0 and SOFT mode this is stage2_finetune exactly.
TrainResult calibrate_with_idc(Model& student, Model& teacher, const DatasetSplit& data, const TrainPlan& plan,
                               const CalibrateOptions& opts);

/// Copy of an FP model with quantizers attached per `policy`.
Model make_quantized(const Model& fp, const QuantPolicy& policy);

struct ContrastResult {
  std::vector<double> k_values;
  TrainResult ste;
  std::vector<TrainResult> soft;  // one per k
};

/// Trains from the same fresh initialization once with STE and once per
/// fixed k under SOFT.
ContrastResult convergence_contrast(const DatasetSplit& data, const ModelSpec& spec, const QuantPolicy& policy,
                                    const TrainPlan& plan, const std::vector<double>& k_values, long iters,
                                    std::uint64_t init_seed);

/// Mean task loss over the last `window` rows.
double final_task_loss(const TrainResult& r, std::size_t window);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace, const std::string& comment);
void write_contrast_csv(const std::string& path, const ContrastResult& r, const std::string& comment);

}  // namespace qgait
