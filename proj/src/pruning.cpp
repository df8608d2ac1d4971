#include "dynaseg/pruning.hpp"

#include <cmath>

#include "dynaseg/errors.hpp"

namespace dynaseg {

StaticMask magnitude_mask(const Tensor& w1, double keep_fraction, std::string layer) {
  if (w1.rank() != 2) throw DimensionError("magnitude_mask: w1 must be a matrix");
  const int64_t rows = w1.dim(0), width = w1.dim(1);
  const int64_t count = kept_count_for(keep_fraction, width);
  std::vector<double> norms(static_cast<size_t>(width), 0.0);
  auto w = w1.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < width; ++j) norms[j] += std::fabs(w[i * width + j]);
  StaticMask out;
  out.layer = std::move(layer);
  out.kept_count = count;
  out.kept = top_indices(norms, count);
  out.mask = Tensor::zeros({width});
  for (int64_t j : out.kept) out.mask.mutable_data()[j] = 1.0;
  return out;
}

PairOutput apply_static(const Tensor& x, const Tensor& w1, const Tensor& w2,
                        const StaticMask& mask) {
  GateMask g;
  g.logits = mask.mask;
  g.mask = mask.mask;
  g.kept_count = mask.kept_count;
  g.kept = mask.kept;
  return dgl_pair_forward(x, w1, w2, g);
}

StaticGater::StaticGater(const MitModel& model)
    : model_(model), layers_(gated_layers(model.config())) {}

bool StaticGater::set_keep_fraction(double keep_fraction) {
  bool changed = false;
  for (const GatedLayerInfo& info : layers_) {
    const int64_t count = kept_count_for(keep_fraction, info.gated_width);
    auto it = masks_.find(info.id);
    if (it != masks_.end() && it->second.kept_count == count) continue;
    masks_[info.id] = magnitude_mask(model_.param(info.w1_param), keep_fraction, info.id);
    changed = true;
  }
  keep_fraction_ = keep_fraction;
  return changed;
}

void StaticGater::set_masks(std::map<std::string, StaticMask> masks, double keep_fraction) {
  masks_ = std::move(masks);
  keep_fraction_ = keep_fraction;
}

Tensor StaticGater::gate(const std::string& layer, const Tensor& /*x*/, const Tensor& w1) {
  auto it = masks_.find(layer);
  if (it == masks_.end()) throw ContractError("no static mask computed for layer " + layer);
  if (it->second.mask.numel() != w1.dim(1)) {
    throw DimensionError("static mask width mismatch for " + layer);
  }
  return it->second.mask;
}

}  // namespace dynaseg
