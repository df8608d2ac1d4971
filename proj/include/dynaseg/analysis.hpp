#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dynaseg/data.hpp"
#include "dynaseg/mit.hpp"

namespace dynaseg {

struct Quartiles {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  double iqr() const { return q3 - q1; }
};

// Linear interpolation between order statistics at position p * (n - 1).
double quantile(std::vector<double> values, double p);
Quartiles quartiles(std::vector<double> values);

struct NeuronStats {
  std::string layer;
  std::vector<Quartiles> neurons;
  int64_t instance_count = 0;
};

// trace[instance][neuron] holds one magnitude per instance and neuron.
NeuronStats stats_from_trace(const std::string& layer, const std::vector<std::vector<double>>& trace);

// Names accepted by collect_neuron_stats: "<block>.q", ".k", ".v", ".ffn".
std::vector<std::string> probe_layers(const MitConfig& config);

// Per-instance magnitude of a neuron = mean |activation| over the layer's
// tokens. `gater` may be null. Needs at least two instances.
NeuronStats collect_neuron_stats(const MitModel& model, const Dataset& data, const std::string& layer,
                                 Gater* gater = nullptr);

enum class NeuronType { kTypeI, kTypeII, kTypeIII };
const char* to_string(NeuronType t);

struct NeuronTypes {
  std::vector<NeuronType> types;
  double median_thresh = 0;
  double range_thresh = 0;
};

// Median of the neuron medians and median of the neuron IQRs.
std::pair<double, double> default_thresholds(const NeuronStats& stats);

// Type I: high median, narrow IQR. Type II: wide IQR. Type III: low median,
// narrow IQR. Thresholds must be positive.
NeuronTypes classify_neurons(const NeuronStats& stats, double median_thresh, double range_thresh);

// Synthetic magnitude traces with known types, for checking the taxonomy.
struct PlantedTraces {
  std::vector<std::vector<double>> trace;  // [instance][neuron]
  std::vector<NeuronType> truth;
  double low_level = 0;
  double high_level = 0;
};
PlantedTraces planted_traces(uint64_t seed, int64_t instances, int64_t per_type);

struct GateActivationCount {
  std::string layer;
  std::vector<int64_t> counts;  // instances with G_j > 0
  int64_t instance_count = 0;
};

// Strict positivity of the pre-selection gate logits, per instance.
std::vector<GateActivationCount> count_gate_activations(const MitModel& model, const Dataset& data,
                                                        double keep_fraction);

// Uniform keep fraction with optional per-layer overrides keyed by gated pair
// id. Predictor cost is charged to every pair whose keep is below 1.
struct KeepProfile {
  double default_keep = 1.0;
  std::map<std::string, double> per_layer;

  double keep_for(const std::string& layer) const;
};

struct FlopsRow {
  std::string layer;
  bool gated = false;
  int64_t width = 0;  // gated width C_bar, 0 for fixed rows
  int64_t kept = 0;
  double keep = 1.0;
  int64_t dense_flops = 0;
  int64_t gated_flops = 0;
  int64_t predictor_flops = 0;
  int64_t dense_macs = 0;
  int64_t gated_macs = 0;
  int64_t predictor_macs = 0;
};

struct FlopsReport {
  std::vector<FlopsRow> rows;
  int64_t dense_flops = 0;
  int64_t gated_flops = 0;
  int64_t predictor_flops = 0;
  int64_t dense_macs = 0;
  int64_t gated_macs = 0;
  int64_t predictor_macs = 0;

  int64_t total_flops() const { return gated_flops + predictor_flops; }
  int64_t total_macs() const { return gated_macs + predictor_macs; }
  const FlopsRow& row(const std::string& layer) const;
};

// Counts every op of the forward pass at the configured input size. A
// multiply-accumulate is 2 FLOPs (and 1 MAC); elementwise costs follow
// cost_model.hpp. Gated pairs are charged only for kept channels. Throws
// UsageError for profile entries that name no gated pair.
FlopsReport flops_report(const MitConfig& config, const KeepProfile& profile = {});

// Cost of one gated pair at a given kept width (linear in `kept`).
int64_t pair_flops(const MitConfig& config, const std::string& layer, int64_t kept);

void write_flops_csv(std::ostream& out, const FlopsReport& report);
void write_flops_summary(std::ostream& out, const FlopsReport& report, const MitConfig& config);
void write_stats_csv(std::ostream& out, const NeuronStats& stats, const NeuronTypes& types);
void write_counts_csv(std::ostream& out, const std::vector<GateActivationCount>& counts);

}  // namespace dynaseg
