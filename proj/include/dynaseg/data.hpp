#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynaseg/tensor.hpp"

namespace dynaseg {

struct SegSample {
  Tensor image;                // [3, H, W], values in [0, 1]
  std::vector<uint8_t> label;  // H*W, class ids or kVoidLabel
  int64_t height = 0;
  int64_t width = 0;
};

using Dataset = std::vector<SegSample>;

struct SynthOptions {
  int min_shapes = 1;
  int max_shapes = 4;
  double noise_sigma = 0.05;
};

// RGB color used for class `cls`; class 0 is the background.
std::array<double, 3> class_color(int cls);

// Shapes-on-background segmentation sample. Deterministic per (seed, index).
SegSample gen_sample(uint64_t seed, int64_t index, int64_t height, int64_t width, int num_classes,
                     const SynthOptions& options = {});
Dataset gen_synthetic(uint64_t seed, int64_t n, int64_t height, int64_t width, int num_classes,
                      const SynthOptions& options = {});

// Pixel-level confusion counts over non-void ground truth.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  // Pixels whose truth is void are skipped; a void prediction on a valid
  // pixel counts as a miss for the true class.
  void add(std::span<const uint8_t> pred, std::span<const uint8_t> truth);

  int num_classes() const { return num_classes_; }
  int64_t count(int truth, int pred) const { return counts_[truth * num_classes_ + pred]; }
  int64_t missed(int truth) const { return missed_[truth]; }

  // IoU per class; classes absent from both truth and prediction are NaN.
  std::vector<double> per_class_iou() const;
  // Mean over present classes. Throws EmptyInputError when nothing is present.
  double mean_iou() const;

 private:
  int num_classes_;
  std::vector<int64_t> counts_;
  std::vector<int64_t> missed_;
};

double miou(std::span<const uint8_t> pred, std::span<const uint8_t> truth, int num_classes);

// One file per sample; layout documented in docs/dataset_format.md.
void write_sample(const std::string& path, const SegSample& sample);
SegSample read_sample(const std::string& path);
void write_dataset(const std::string& dir, const Dataset& data);
Dataset read_dataset(const std::string& dir);

}  // namespace dynaseg
