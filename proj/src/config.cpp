#include "qgait/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace qgait {

using nlohmann::json;

namespace {

/// Rejects keys outside `allowed` and non-object sections.
void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + section + "." + it.key() + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + section + "." + key + "' has the wrong type");
  }
}

void read_range(const json& j, const char* key, double (&out)[2]) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw ConfigError(std::string("'data.ranges.") + key + "' must be [lo, hi]");
  }
  out[0] = v[0].get<double>();
  out[1] = v[1].get<double>();
}

}  // namespace

json dataset_config_to_json(const DatasetConfig& c) {
  const auto& r = c.ranges;
  return {{"seed", c.seed},
          {"n_ids", c.n_ids},
          {"eval_ids", c.eval_ids},
          {"seqs_per_id", c.seqs_per_id},
          {"frames", c.frames},
          {"height", c.height},
          {"width", c.width},
          {"cycle", c.cycle},
          {"covariate_rate", c.covariate_rate},
          {"noise_rate", c.noise_rate},
          {"phase_jitter", c.phase_jitter},
          {"ranges",
           {{"torso_width", {r.torso_width[0], r.torso_width[1]}},
            {"leg_length", {r.leg_length[0], r.leg_length[1]}},
            {"stride", {r.stride[0], r.stride[1]}},
            {"head_radius", {r.head_radius[0], r.head_radius[1]}}}}};
}

DatasetConfig dataset_config_from_json(const json& j) {
  const std::string s = "data";
  check_keys(j, s, {"seed", "n_ids", "eval_ids", "seqs_per_id", "frames", "height", "width", "cycle",
                    "covariate_rate", "noise_rate", "phase_jitter", "ranges"});
  DatasetConfig c;
  read(j, "seed", c.seed, s);
  read(j, "n_ids", c.n_ids, s);
  read(j, "eval_ids", c.eval_ids, s);
  read(j, "seqs_per_id", c.seqs_per_id, s);
  read(j, "frames", c.frames, s);
  read(j, "height", c.height, s);
  read(j, "width", c.width, s);
  read(j, "cycle", c.cycle, s);
  read(j, "covariate_rate", c.covariate_rate, s);
  read(j, "noise_rate", c.noise_rate, s);
  read(j, "phase_jitter", c.phase_jitter, s);
  if (j.contains("ranges")) {
    const auto& r = j.at("ranges");
    check_keys(r, "data.ranges", {"torso_width", "leg_length", "stride", "head_radius"});
    read_range(r, "torso_width", c.ranges.torso_width);
    read_range(r, "leg_length", c.ranges.leg_length);
    read_range(r, "stride", c.ranges.stride);
    read_range(r, "head_radius", c.ranges.head_radius);
  }
  c.validate();
  return c;
}

json model_spec_to_json(const ModelSpec& s) {
  return {{"in_height", s.in_height}, {"in_width", s.in_width}, {"channels", s.channels}, {"kernel", s.kernel},
          {"parts", s.parts},         {"dim", s.dim},           {"n_classes", s.n_classes}};
}

ModelSpec model_spec_from_json(const json& j) {
  const std::string s = "model";
  check_keys(j, s, {"in_height", "in_width", "channels", "kernel", "parts", "dim", "n_classes"});
  ModelSpec m;
  read(j, "in_height", m.in_height, s);
  read(j, "in_width", m.in_width, s);
  read(j, "channels", m.channels, s);
  read(j, "kernel", m.kernel, s);
  read(j, "parts", m.parts, s);
  read(j, "dim", m.dim, s);
  read(j, "n_classes", m.n_classes, s);
  return m;
}

json quant_policy_to_json(const QuantPolicy& p) {
  return {{"weight_bits", p.weight_bits}, {"act_bits", p.act_bits}, {"boundary_bits", p.boundary_bits}};
}

QuantPolicy quant_policy_from_json(const json& j) {
  const std::string s = "quant";
  check_keys(j, s, {"weight_bits", "act_bits", "boundary_bits", "soft_forward"});
  QuantPolicy p;
  read(j, "weight_bits", p.weight_bits, s);
  read(j, "act_bits", p.act_bits, s);
  read(j, "boundary_bits", p.boundary_bits, s);
  p.validate();
  return p;
}

json quant_config_to_json(const QuantConfig& c, bool initialized) {
  return {{"bits", c.bits},
          {"signed", c.is_signed},
          {"r1", c.r1},
          {"r2", c.r2},
          {"v", c.step},
          {"grad_mode", std::string(to_string(c.grad_mode))},
          {"k", c.k},
          {"grad_scale", c.grad_scale},
          {"soft_forward", c.soft_forward},
          {"initialized", initialized}};
}

QuantConfig quant_config_from_json(const json& j, bool* initialized) {
  const std::string s = "quant_config";
  check_keys(j, s, {"bits", "signed", "r1", "r2", "v", "grad_mode", "k", "grad_scale", "soft_forward", "initialized"});
  QuantConfig c;
  read(j, "bits", c.bits, s);
  read(j, "signed", c.is_signed, s);
  read(j, "r1", c.r1, s);
  read(j, "r2", c.r2, s);
  read(j, "v", c.step, s);
  std::string mode = "STE";
  read(j, "grad_mode", mode, s);
  c.grad_mode = grad_mode_from_string(mode);
  read(j, "k", c.k, s);
  read(j, "grad_scale", c.grad_scale, s);
  read(j, "soft_forward", c.soft_forward, s);
  bool init = false;
  read(j, "initialized", init, s);
  if (initialized) *initialized = init;
  c.validate();
  return c;
}

TrainPlan RunConfig::plan() const {
  TrainPlan p = train;
  p.seed = seed;
  return p;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  quant.validate();
  train.validate();
  kschedule.validate();
  if (out.empty()) throw ConfigError("'out' must not be empty");
  if (train.ids_per_batch > data.train_ids()) throw ConfigError("ids_per_batch exceeds training identities");
  if (train.train_frames > data.frames) throw ConfigError("train_frames exceeds frames");
}

json run_config_to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& k = c.kschedule;
  return {{"seed", c.seed},
          {"out", c.out},
          {"data", dataset_config_to_json(c.data)},
          {"model", {{"channels", c.model.channels}, {"kernel", c.model.kernel}, {"parts", c.model.parts}, {"dim", c.model.dim}}},
          {"quant",
           {{"weight_bits", c.quant.weight_bits},
            {"act_bits", c.quant.act_bits},
            {"boundary_bits", c.quant.boundary_bits},
            {"soft_forward", c.soft_forward}}},
          {"train",
           {{"stage1_iters", t.stage1_iters},
            {"finetune_iters", t.finetune_iters},
            {"lr", t.lr},
            {"finetune_lr", t.finetune_lr},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"ids_per_batch", t.ids_per_batch},
            {"samples_per_id", t.samples_per_id},
            {"train_frames", t.train_frames},
            {"w_triplet", t.w_triplet},
            {"w_ce", t.w_ce},
            {"lambda_idc", t.lambda_idc},
            {"margin", t.margin},
            {"kd_temperature", t.kd_temperature}}},
          {"kschedule",
           {{"mode", to_string(k.mode)}, {"k0", k.k0}, {"delta", k.delta}, {"interval", k.interval}, {"threshold", k.threshold}}},
          {"calibrate",
           {{"distill", to_string(c.calibrate.distill)}, {"student_mode", std::string(to_string(c.calibrate.student_mode))}}}};
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, "config", {"seed", "out", "data", "model", "quant", "train", "kschedule", "calibrate"});
  RunConfig c;
  read(j, "seed", c.seed, "config");
  read(j, "out", c.out, "config");
  if (j.contains("data")) c.data = dataset_config_from_json(j.at("data"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model", {"channels", "kernel", "parts", "dim"});
    read(m, "channels", c.model.channels, "model");
    read(m, "kernel", c.model.kernel, "model");
    read(m, "parts", c.model.parts, "model");
    read(m, "dim", c.model.dim, "model");
  }
  if (j.contains("quant")) {
    c.quant = quant_policy_from_json(j.at("quant"));
    read(j.at("quant"), "soft_forward", c.soft_forward, "quant");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::string s = "train";
    check_keys(t, s, {"stage1_iters", "finetune_iters", "lr", "finetune_lr", "beta1", "beta2", "eps", "ids_per_batch", "samples_per_id",
                      "train_frames", "w_triplet", "w_ce", "lambda_idc", "margin", "kd_temperature"});
    read(t, "stage1_iters", c.train.stage1_iters, s);
    read(t, "finetune_iters", c.train.finetune_iters, s);
    read(t, "lr", c.train.lr, s);
    read(t, "finetune_lr", c.train.finetune_lr, s);
    read(t, "beta1", c.train.beta1, s);
    read(t, "beta2", c.train.beta2, s);
    read(t, "eps", c.train.eps, s);
    read(t, "ids_per_batch", c.train.ids_per_batch, s);
    read(t, "samples_per_id", c.train.samples_per_id, s);
    read(t, "train_frames", c.train.train_frames, s);
    read(t, "w_triplet", c.train.w_triplet, s);
    read(t, "w_ce", c.train.w_ce, s);
    read(t, "lambda_idc", c.train.lambda_idc, s);
    read(t, "margin", c.train.margin, s);
    read(t, "kd_temperature", c.train.kd_temperature, s);
  }
  if (j.contains("kschedule")) {
    const auto& k = j.at("kschedule");
    const std::string s = "kschedule";
    check_keys(k, s, {"mode", "k0", "delta", "interval", "threshold"});
    std::string mode = to_string(c.kschedule.mode);
    read(k, "mode", mode, s);
    c.kschedule.mode = kmode_from_string(mode);
    read(k, "k0", c.kschedule.k0, s);
    read(k, "delta", c.kschedule.delta, s);
    read(k, "interval", c.kschedule.interval, s);
    read(k, "threshold", c.kschedule.threshold, s);
  }
  if (j.contains("calibrate")) {
    const auto& k = j.at("calibrate");
    const std::string s = "calibrate";
    check_keys(k, s, {"distill", "student_mode"});
    std::string d = to_string(c.calibrate.distill);
    std::string m(to_string(c.calibrate.student_mode));
    read(k, "distill", d, s);
    read(k, "student_mode", m, s);
    c.calibrate.distill = distill_from_string(d);
    c.calibrate.student_mode = grad_mode_from_string(m);
  }
  c.model.in_height = c.data.height;
  c.model.in_width = c.data.width;
  c.model.n_classes = c.data.train_ids();
  c.calibrate.schedule = c.kschedule;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const RunConfig& c) { return fnv1a64_hex(run_config_to_json(c).dump()); }

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace qgait
