#pragma once

#include <cstdint>
#include <vector>

#include "dynaseg/tensor.hpp"

namespace dynaseg {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Adam over a fixed set of parameter handles. Parameters without a gradient
// in a step are left untouched.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamOptions options = {});

  void step(double lr);
  void zero_grad();
  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opt_;
  int64_t t_ = 0;
};

// lr * (1 - step / total)^power, clamped at zero past the end.
double poly_lr(double base_lr, int64_t step, int64_t total_steps, double power = 1.0);

}  // namespace dynaseg
