#pragma once

// Single-file container, little-endian:
//
//   "QGKT1"                      5 bytes
//   u64 json_length, json bytes  metadata (arch, quant configs, provenance)
//   u64 array_count
//   per array: u32 name_length, name, u32 rank, u64 extents[rank],
//              f64 values[prod(extents)]
//
// Lowered models reuse the container with an "int_lowered" metadata section;
// their integer arrays are stored as exactly representable doubles.

#include <string>
#include <vector>

#include "json.hpp"
#include "qgait/gaitnet.hpp"
#include "qgait/intinfer.hpp"

namespace qgait {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Container {
  nlohmann::json meta;
  std::vector<NamedArray> arrays;

  const NamedArray& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& provenance);
Model load_checkpoint(const std::string& path, nlohmann::json* provenance = nullptr);

void save_lowered(const std::string& path, const LoweredModel& lm, const nlohmann::json& provenance);
LoweredModel load_lowered(const std::string& path, nlohmann::json* provenance = nullptr);

}  // namespace qgait
