#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dynaseg/data.hpp"
#include "dynaseg/distill.hpp"
#include "dynaseg/mit.hpp"

namespace dynaseg {

struct DataConfig {
  uint64_t seed = 7;
  int64_t train_samples = 256;
  int64_t val_samples = 256;
  SynthOptions synth;
};

struct TeacherConfig {
  int64_t steps = 3000;
  OptimConfig optim;
};

struct AnalysisConfig {
  double median_thresh = 0.0;  // 0 selects the data-driven default
  double range_thresh = 0.0;
  int64_t samples = 64;
};

// Everything a command needs; written verbatim into each run directory.
struct RunConfig {
  MitConfig model = tiny_config();
  DataConfig data;
  TeacherConfig teacher;
  DistillConfig distill;
  AnalysisConfig analysis;
  uint64_t seed = 0;
};

// Flat "key = value" text with [section] headers; '#' starts a comment.
// Unknown sections or keys and malformed values raise UsageError naming the
// field. Keys absent from the text keep their defaults.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& config);

// Sets one field by its dotted name, e.g. "sparsity.target".
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& dotted_key);
std::vector<std::string> config_keys();

// Throws UsageError naming the first invalid field.
void validate_config(const RunConfig& config);

}  // namespace dynaseg
