#pragma once

#include <map>
#include <string>
#include <vector>

#include "dynaseg/dgl.hpp"
#include "dynaseg/mit.hpp"

namespace dynaseg {

// Input-independent binary neuron mask for one gated pair.
struct StaticMask {
  std::string layer;
  Tensor mask;  // [C_bar], entries in {0, 1}
  int64_t kept_count = 0;
  std::vector<int64_t> kept;
};

// Ranks output neurons by the l1 norm of their w1 column and keeps the top
// max(1, round(keep * C_bar)); ties go to the lower index.
StaticMask magnitude_mask(const Tensor& w1, double keep_fraction, std::string layer = {});

// Masked pair with a binary mask: same semantics as dgl_pair_forward.
PairOutput apply_static(const Tensor& x, const Tensor& w1, const Tensor& w2,
                        const StaticMask& mask);

// Serves magnitude masks for every gated pair of a model. Masks are
// recomputed from the current weights whenever set_keep_fraction changes a
// layer's kept count, and stay frozen in between.
class StaticGater : public Gater {
 public:
  explicit StaticGater(const MitModel& model);

  // Returns true if any mask was refreshed.
  bool set_keep_fraction(double keep_fraction);
  double keep_fraction() const { return keep_fraction_; }

  Tensor gate(const std::string& layer, const Tensor& x, const Tensor& w1) override;

  const std::map<std::string, StaticMask>& masks() const { return masks_; }
  void set_masks(std::map<std::string, StaticMask> masks, double keep_fraction);

 private:
  const MitModel& model_;
  std::vector<GatedLayerInfo> layers_;
  std::map<std::string, StaticMask> masks_;
  double keep_fraction_ = 0.0;
};

}  // namespace dynaseg
