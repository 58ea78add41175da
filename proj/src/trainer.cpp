#include "qgait/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "qgait/losses.hpp"

namespace qgait {

std::string to_string(KMode m) { return m == KMode::FIXED ? "FIXED" : "GROW"; }

KMode kmode_from_string(const std::string& s) {
  if (s == "FIXED") return KMode::FIXED;
  if (s == "GROW") return KMode::GROW;
  throw ConfigError("unknown k-schedule mode '" + s + "'");
}

void KSchedule::validate() const {
  if (!(k0 >= 1.0)) throw ConfigError("k-schedule: k0 must be >= 1");
  if (!(threshold >= 1.0)) throw ConfigError("k-schedule: threshold must be >= 1");
  if (mode == KMode::GROW) {
    if (!(delta >= 0.0)) throw ConfigError("k-schedule: delta must be >= 0");
    if (interval < 1) throw ConfigError("k-schedule: interval must be >= 1");
    if (threshold < k0) throw ConfigError("k-schedule: threshold below k0");
  }
}

double k_at_iter(const KSchedule& s, long t) {
  if (t < 0) throw UsageError("k_at_iter: negative iteration");
  if (s.mode == KMode::FIXED) return s.threshold;
  return std::min(s.k0 + s.delta * static_cast<double>(t / s.interval), s.threshold);
}

std::string to_string(DistillKind d) {
  switch (d) {
    case DistillKind::NONE:
      return "NONE";
    case DistillKind::IDC:
      return "IDC";
    case DistillKind::KD:
      return "KD";
  }
  return "NONE";
}

DistillKind distill_from_string(const std::string& s) {
  if (s == "NONE") return DistillKind::NONE;
  if (s == "IDC") return DistillKind::IDC;
  if (s == "KD") return DistillKind::KD;
  throw ConfigError("unknown distillation kind '" + s + "'");
}

void TrainPlan::validate() const {
  if (stage1_iters < 0 || finetune_iters < 0) throw ConfigError("iteration counts must be >= 0");
  if (!(lr > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (ids_per_batch < 2 || samples_per_id < 2) throw ConfigError("sampler needs >= 2 identities x >= 2 samples");
  if (train_frames < 0) throw ConfigError("train_frames must be >= 0");
  if (w_triplet < 0.0 || w_ce < 0.0 || lambda_idc < 0.0) throw ConfigError("loss weights must be >= 0");
  if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
  if (!(kd_temperature > 0.0)) throw ConfigError("kd_temperature must be positive");
}

// ---- Adam ------------------------------------------------------------------------------

Adam::Adam(std::vector<Tensor*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.has_grad()) continue;  // not on this iteration's graph
    auto g = p.grad();
    auto d = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < d.size(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      d[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

// ---- sampler ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const DatasetSplit& data, const TrainPlan& plan, std::uint64_t salt)
    : data_(data), plan_(plan), rng_(splitmix64(plan.seed) ^ splitmix64(salt + 0x51)) {
  by_identity_.resize(data.train_identities.size());
  for (auto i : data.train) {
    by_identity_[static_cast<std::size_t>(data.class_of(data.sequences[i].identity))].push_back(i);
  }
  if (static_cast<std::size_t>(plan.ids_per_batch) > by_identity_.size()) {
    throw ConfigError("sampler wants " + std::to_string(plan.ids_per_batch) + " identities, training split has " +
                      std::to_string(by_identity_.size()));
  }
  if (plan.train_frames > data.config.frames) throw ConfigError("train_frames exceeds sequence length");
}

Batch BatchSampler::next() {
  Batch b;
  std::vector<std::size_t> ids(by_identity_.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  rng_.shuffle(ids);
  const int T = data_.config.frames;
  const bool subset = plan_.train_frames > 0 && plan_.train_frames < T;
  for (int p = 0; p < plan_.ids_per_batch; ++p) {
    auto seqs = by_identity_[ids[static_cast<std::size_t>(p)]];
    rng_.shuffle(seqs);
    for (int k = 0; k < plan_.samples_per_id; ++k) {
      const std::size_t idx = seqs[static_cast<std::size_t>(k) % seqs.size()];
      b.indices.push_back(idx);
      b.labels.push_back(data_.sequences[idx].identity);
      b.classes.push_back(static_cast<int>(ids[static_cast<std::size_t>(p)]));
      if (subset) {
        std::vector<int> frames(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) frames[static_cast<std::size_t>(t)] = t;
        rng_.shuffle(frames);
        frames.resize(static_cast<std::size_t>(plan_.train_frames));
        std::sort(frames.begin(), frames.end());
        b.frames.push_back(std::move(frames));
      }
    }
  }
  return b;
}

// ---- loop ------------------------------------------------------------------------------

TrainResult run_training(Model& model, const DatasetSplit& data, const TrainPlan& plan, long iters,
                         const StageOptions& opts) {
  plan.validate();
  if (opts.mode == GradMode::SOFT) opts.schedule.validate();
  if (opts.distill != DistillKind::NONE && !opts.teacher) throw UsageError("distillation requires a teacher");
  if (model.spec().n_classes != static_cast<int>(data.train_identities.size())) {
    throw ConfigError("model has " + std::to_string(model.spec().n_classes) + " classes, training split has " +
                      std::to_string(data.train_identities.size()) + " identities");
  }
  TrainResult result;
  model.set_training(true);
  if (opts.mode == GradMode::STE) {
    model.set_grad_mode(GradMode::STE, 1.0);
  } else {
    model.set_grad_mode(GradMode::SOFT, k_at_iter(opts.schedule, 0));
  }
  if (opts.teacher) opts.teacher->set_training(false);

  const double lr = opts.lr > 0.0 ? opts.lr : plan.lr;
  Adam opt(model.parameters(), lr, plan.beta1, plan.beta2, plan.eps);
  BatchSampler sampler(data, plan, opts.sampler_salt);
  result.trace.reserve(static_cast<std::size_t>(std::max(0L, iters)));
  for (long t = 0; t < iters; ++t) {
    const Batch b = sampler.next();
    double k = 0.0;
    if (opts.mode == GradMode::SOFT) {
      k = k_at_iter(opts.schedule, t);
      model.set_k(k);
    }
    const Tensor S = make_batch(data, b.indices, b.frames);
    const ModelOutput out = model.forward(S);
    Tensor task = add(scale(triplet_loss(out.X, b.labels, plan.margin), plan.w_triplet),
                      scale(softmax_ce(out.O, b.classes), plan.w_ce));
    Tensor loss = task;
    double distill_value = 0.0;
    if (opts.distill != DistillKind::NONE) {
      ModelOutput ref;
      {
        NoGradGuard guard;
        ref = opts.teacher->forward(S);
      }
      // lambda = 0 keeps the graph (and so the update) identical to plain fine-tuning.
      auto distill_term = [&] {
        return opts.distill == DistillKind::IDC ? idc_loss(ref.X, out.X, b.labels)
                                                : kd_kl(ref.O, out.O, plan.kd_temperature);
      };
      if (opts.lambda > 0.0) {
        Tensor d = distill_term();
        distill_value = d.item();
        loss = add(task, scale(d, opts.lambda));
      } else {
        NoGradGuard guard;
        distill_value = distill_term().item();
      }
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("loss is not finite", t);
    opt.zero_grad();
    backward(loss);
    opt.step();
    model.clamp_steps();
    result.trace.push_back({t, value, task.item(), distill_value, k, lr, opts.mode});
  }
  result.steps = opt.steps();
  return result;
}

TrainResult stage1_train(Model& model, const DatasetSplit& data, const TrainPlan& plan) {
  StageOptions opts;
  opts.mode = GradMode::STE;
  opts.sampler_salt = 1;
  return run_training(model, data, plan, plan.stage1_iters, opts);
}

TrainResult stage2_finetune(Model& model, const DatasetSplit& data, const TrainPlan& plan, const KSchedule& schedule) {
  StageOptions opts;
  opts.mode = GradMode::SOFT;
  opts.schedule = schedule;
  opts.lr = plan.finetune_lr;
  opts.sampler_salt = 2;
  return run_training(model, data, plan, plan.finetune_iters, opts);
}

TrainResult calibrate_with_idc(Model& student, Model& teacher, const DatasetSplit& data, const TrainPlan& plan,
                               const CalibrateOptions& copts) {
  if (!(student.spec() == teacher.spec())) throw ConfigError("teacher and student architectures differ");
  auto width = [](const QuantPolicy& p) { return std::min(p.weight_bits, p.act_bits); };
  if (width(teacher.policy()) < width(student.policy())) {
    throw ConfigError("teacher bit-width " + std::to_string(width(teacher.policy())) + " is below the student's " +
                      std::to_string(width(student.policy())));
  }
  StageOptions opts;
  opts.mode = copts.student_mode;
  opts.schedule = copts.schedule;
  opts.distill = copts.distill;
  opts.teacher = &teacher;
  opts.lambda = plan.lambda_idc;
  opts.lr = plan.finetune_lr;
  opts.sampler_salt = 2;
  return run_training(student, data, plan, plan.finetune_iters, opts);
}

Model make_quantized(const Model& fp, const QuantPolicy& policy) {
  if (fp.quantized()) throw UsageError("make_quantized expects a full-precision model");
  Model q = fp;
  q.quantize(policy);
  return q;
}

ContrastResult convergence_contrast(const DatasetSplit& data, const ModelSpec& spec, const QuantPolicy& policy,
                                    const TrainPlan& plan, const std::vector<double>& k_values, long iters,
                                    std::uint64_t init_seed) {
  ContrastResult r;
  r.k_values = k_values;
  auto fresh = [&] {
    Model m(spec, init_seed);
    m.quantize(policy);
    return m;
  };
  {
    Model m = fresh();
    StageOptions opts;
    opts.mode = GradMode::STE;
    r.ste = run_training(m, data, plan, iters, opts);
  }
  for (double k : k_values) {
    Model m = fresh();
    StageOptions opts;
    opts.mode = GradMode::SOFT;
    opts.schedule.mode = KMode::FIXED;
    opts.schedule.threshold = k;
    opts.schedule.k0 = 1.0;
    r.soft.push_back(run_training(m, data, plan, iters, opts));
  }
  return r;
}

double final_task_loss(const TrainResult& r, std::size_t window) {
  if (r.trace.empty()) throw UsageError("final_task_loss: empty trace");
  window = std::clamp<std::size_t>(window, 1, r.trace.size());
  double s = 0.0;
  for (std::size_t i = r.trace.size() - window; i < r.trace.size(); ++i) s += r.trace[i].task_loss;
  return s / static_cast<double>(window);
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace, const std::string& comment) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(12);
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "iteration,loss,task_loss,distill_loss,k,lr,grad_mode\n";
  for (const auto& r : trace) {
    os << r.iteration << ',' << r.loss << ',' << r.task_loss << ',' << r.distill_loss << ',' << r.k << ',' << r.lr
       << ',' << to_string(r.grad_mode) << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

void write_contrast_csv(const std::string& path, const ContrastResult& r, const std::string& comment) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(12);
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "iteration,ste_loss";
  for (double k : r.k_values) os << ",soft_k" << k << "_loss";
  os << '\n';
  for (std::size_t i = 0; i < r.ste.trace.size(); ++i) {
    os << r.ste.trace[i].iteration << ',' << r.ste.trace[i].task_loss;
    for (const auto& s : r.soft) os << ',' << s.trace.at(i).task_loss;
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace qgait
