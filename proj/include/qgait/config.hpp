#pragma once

// Run configuration (JSON) and its conversions. Every section is optional and
// falls back to the defaults of the underlying struct; unknown keys are an
// error at every level.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "qgait/gaitnet.hpp"
#include "qgait/synthdata.hpp"
#include "qgait/trainer.hpp"

namespace qgait {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/default";
  DatasetConfig data;
  ModelSpec model;  // in_height/in_width/n_classes follow `data`
  QuantPolicy quant{4, 4, 0};
  bool soft_forward = false;
  TrainPlan train;
  KSchedule kschedule;
  CalibrateOptions calibrate;

  /// TrainPlan with the run seed applied.
  TrainPlan plan() const;
  void validate() const;
};

nlohmann::json dataset_config_to_json(const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json model_spec_to_json(const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json quant_policy_to_json(const QuantPolicy& p);
QuantPolicy quant_policy_from_json(const nlohmann::json& j);
nlohmann::json quant_config_to_json(const QuantConfig& c, bool initialized);
QuantConfig quant_config_from_json(const nlohmann::json& j, bool* initialized);

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// FNV-1a 64 of the canonical (sorted-key, compact) dump, as 16 hex digits.
std::string fnv1a64_hex(const std::string& bytes);
std::string config_hash(const RunConfig& c);

/// Raises glibc's mmap and trim thresholds so the large, short-lived buffers
/// of a training step are reused instead of page-faulted in every time.
void tune_allocator();

}  // namespace qgait
