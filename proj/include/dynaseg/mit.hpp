#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dynaseg/tensor.hpp"

namespace dynaseg {

struct PatchGeometry {
  int kernel = 3;
  int stride = 2;
  int padding = 1;
};

struct StageConfig {
  int hidden_dim = 8;
  int depth = 1;
  int num_heads = 1;
  int reduction = 1;  // R: K/V come from an R x R strided merge, N_kv = N / R^2
  PatchGeometry patch;
  int ffn_expansion = 4;

  int ffn_dim() const { return hidden_dim * ffn_expansion; }
};

enum class DecoderFusion { kConcat, kAdd };

struct MitConfig {
  std::array<StageConfig, 4> stages;
  int decoder_dim = 32;
  DecoderFusion decoder_fusion = DecoderFusion::kAdd;
  int num_classes = 4;
  int input_height = 32;
  int input_width = 32;
  int in_channels = 3;

  // Throws UsageError naming the offending field.
  void validate() const;
  bool same_architecture(const MitConfig& other) const;
};

// dims (8,16,24,32), depths 1, heads (1,1,2,4), R (4,2,1,1), 32x32 input.
MitConfig tiny_config();
// MiT-B0 encoder with the all-MLP decoder at 512x512, 150 classes.
MitConfig mit_b0_config();

struct StageGeometry {
  int64_t height = 0, width = 0;        // token grid after the patch merge
  int64_t kv_height = 0, kv_width = 0;  // grid after sequence reduction
  int64_t tokens() const { return height * width; }
  int64_t kv_tokens() const { return kv_height * kv_width; }
};

// Token-grid extents per stage; throws DimensionError when a stride does not
// divide the incoming grid.
std::array<StageGeometry, 4> stage_geometry(const MitConfig& config);

struct FeatureMap {
  Tensor tokens;  // [N, C], rows in raster order
  int64_t height = 0;
  int64_t width = 0;
};

using ParamStore = std::map<std::string, Tensor>;

// Layer-id prefix of block `block` (1-based) in stage `stage` (1-based): "s2.b1".
std::string block_id(int stage, int block);

// Supplies the gate applied to a gated linear pair. `layer` is the pair id
// ("s1.b1.qk", "s1.b1.v", "s1.b1.ffn"), `x` the pair's input tokens and `w1`
// its first weight [C, C_bar]. Returns a [C_bar] mask that scales w1's
// columns and w2's rows.
class Gater {
 public:
  virtual ~Gater() = default;
  virtual Tensor gate(const std::string& layer, const Tensor& x, const Tensor& w1) = 0;
};

// Optional capture of named intermediate activations (q, k, v, ffn per block).
struct ActivationProbe {
  std::set<std::string> wanted;  // empty = capture everything
  std::map<std::string, Tensor> values;

  void offer(const std::string& name, const Tensor& t);
};

class MitModel {
 public:
  MitModel() = default;
  MitModel(MitConfig config, ParamStore params);

  static MitModel init(const MitConfig& config, std::mt19937_64& rng);

  const MitConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const Tensor& param(const std::string& name) const;

  // Parameter tensors whose names do not start with "gate.".
  std::vector<Tensor> backbone_params() const;
  std::vector<Tensor> encoder_params() const;
  std::vector<Tensor> params_with_prefix(const std::string& prefix) const;
  int64_t num_params() const;

  // Deep copy (fresh storage, no tape).
  MitModel clone() const;
  void set_trainable(bool on);

 private:
  MitConfig config_;
  ParamStore params_;
};

FeatureMap image_to_tokens(const Tensor& image);  // [C,H,W] -> tokens [H*W, C]

FeatureMap patch_merge(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                       const StageConfig& stage);
FeatureMap efficient_mha(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                         const StageConfig& stage, Gater* gater = nullptr,
                         ActivationProbe* probe = nullptr);
FeatureMap mix_ffn(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                   const StageConfig& stage, Gater* gater = nullptr,
                   ActivationProbe* probe = nullptr);

std::array<FeatureMap, 4> encoder_forward(const MitModel& model, const Tensor& image,
                                          Gater* gater = nullptr,
                                          ActivationProbe* probe = nullptr);

// Concat ([N, 4D]) or elementwise sum ([N, D]) of the upsampled projections.
Tensor decoder_fusion_input(const std::array<Tensor, 4>& upsampled, DecoderFusion fusion);

// Per-pixel logits at stage-1 resolution as tokens [H/4 * W/4, K].
Tensor decode_tokens(const std::array<FeatureMap, 4>& features, const MitModel& model);
// Same logits laid out as [K, H/4, W/4].
Tensor decoder_forward(const std::array<FeatureMap, 4>& features, const MitModel& model);

struct SegOutput {
  std::array<FeatureMap, 4> features;
  Tensor logits;  // tokens [H/4 * W/4, K]
  int64_t logit_height = 0;
  int64_t logit_width = 0;
};

SegOutput segment(const MitModel& model, const Tensor& image, Gater* gater = nullptr,
                  ActivationProbe* probe = nullptr);

// Bilinearly resizes logits to the input resolution: [H*W, K].
Tensor full_resolution_logits(const SegOutput& out, const MitConfig& config);

// Argmax labels at input resolution.
std::vector<uint8_t> predict_labels(const SegOutput& out, const MitConfig& config);

}  // namespace dynaseg
