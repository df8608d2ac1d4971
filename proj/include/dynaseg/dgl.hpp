#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynaseg/mit.hpp"
#include "dynaseg/tensor.hpp"

namespace dynaseg {

// Two-layer ReLU MLP mapping the projected summary [C_bar] to gate logits.
struct GatePredictorParams {
  Tensor w1;  // [C_bar, h]
  Tensor b1;  // [h]
  Tensor w2;  // [h, C_bar]
  Tensor b2;  // [C_bar]

  int64_t width() const { return w2.dim(1); }
  int64_t hidden() const { return w1.dim(1); }
};

// h = max(4, C_bar / 4).
int64_t predictor_hidden_width(int64_t gated_width);

// Small random weights and a positive output bias, so a fresh predictor
// emits near-uniform positive logits.
GatePredictorParams init_gate_predictor(int64_t gated_width, std::mt19937_64& rng);

struct GateMask {
  Tensor logits;  // G: [C_bar], post-ReLU
  Tensor mask;    // M: G with all but the kept entries zeroed
  int64_t kept_count = 0;
  std::vector<int64_t> kept;  // ascending indices of surviving entries
};

struct SparsitySchedule {
  double target_sparsity = 0.5;  // r, the pruned fraction
  int64_t anneal_steps = 1;      // T
  int64_t step = 0;              // t

  // r_t = r * min(1, t / T); a zero horizon means r from the start.
  double effective_sparsity() const;
};

// Keep fraction 1 - r_t.
double anneal(const SparsitySchedule& schedule);

// max(1, round_half_up(keep_fraction * width)).
int64_t kept_count_for(double keep_fraction, int64_t width);

// Indices of the `count` largest values; ties resolve toward the lower index.
std::vector<int64_t> top_indices(std::span<const double> values, int64_t count);

// Keeps the largest max(1, round(keep * C_bar)) entries at their values and
// zeroes the rest. Gradients reach surviving entries only.
std::pair<Tensor, int64_t> top_r(const Tensor& g, double keep_fraction);

// G = MLP(LN(AvgPool(x)) . w1), M = top_r(G). One gate per instance.
GateMask predict_gate(const Tensor& x, const Tensor& w1, const GatePredictorParams& params,
                      double keep_fraction);

struct PairOutput {
  Tensor y;  // [N, C_bar]
  Tensor z;  // [N, C]
};

// Y = X (W1 o M), Z = Y (W2 o M^T), masked-dense.
PairOutput dgl_pair_forward(const Tensor& x, const Tensor& w1, const Tensor& w2,
                            const GateMask& gate);

// Same result computed on the gathered kept columns/rows only. Inference
// path: no tape is recorded.
PairOutput dgl_pair_forward_compact(const Tensor& x, const Tensor& w1, const Tensor& w2,
                                    const GateMask& gate);

inline constexpr double kDefaultLambdaM = 0.005;

// lambda_m * sum over gates of ||G||_1.
Tensor sparsity_loss(const std::vector<GateMask>& gates, double lambda_m = kDefaultLambdaM);

// Exact operation count of the predictor path for a gate whose input has
// `pooled_rows` tokens of width `in_width` and whose gated width is
// `gated_width`: pooling + layer norm + projection by W1 + MLP.
int64_t gate_flops(int64_t pooled_rows, int64_t in_width, int64_t gated_width,
                   int64_t hidden_width);

// Static description of every gated pair in a model.
enum class PairKind { kQueryKey, kValue, kFfn };

struct GatedLayerInfo {
  std::string id;        // "s1.b1.qk"
  PairKind kind;
  int stage;             // 1-based
  int64_t in_width;      // C
  int64_t gated_width;   // C_bar
  int64_t pooled_rows;   // tokens seen by the predictor's pooling
  std::string w1_param;  // parameter name of the pair's first weight
};

std::vector<GatedLayerInfo> gated_layers(const MitConfig& config);

std::string gate_param_prefix(const std::string& layer_id);  // "gate.s1.b1.qk"
GatePredictorParams gate_params(const ParamStore& params, const std::string& layer_id);

// Adds fresh predictor parameters for every gated pair.
void add_gate_predictors(MitModel& model, std::mt19937_64& rng);
bool has_gate_predictors(const MitModel& model);

struct GateRecord {
  std::string layer;
  GateMask gate;
};

// Runs the learned predictors at a uniform keep fraction and records every
// gate it produces, in forward order.
class DynamicGater : public Gater {
 public:
  DynamicGater(const ParamStore& params, double keep_fraction)
      : params_(params), keep_fraction_(keep_fraction) {}

  Tensor gate(const std::string& layer, const Tensor& x, const Tensor& w1) override;

  const std::vector<GateRecord>& records() const { return records_; }
  std::vector<GateMask> gates() const;
  void clear() { records_.clear(); }
  double keep_fraction() const { return keep_fraction_; }

 private:
  const ParamStore& params_;
  double keep_fraction_;
  std::vector<GateRecord> records_;
};

// Hands out caller-specified masks; layers without an entry pass all channels
// with unit value.
class FixedGater : public Gater {
 public:
  FixedGater() = default;
  explicit FixedGater(std::map<std::string, Tensor> masks) : masks_(std::move(masks)) {}

  Tensor gate(const std::string& layer, const Tensor& x, const Tensor& w1) override;

 private:
  std::map<std::string, Tensor> masks_;
};

}  // namespace dynaseg
