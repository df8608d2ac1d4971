#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dynaseg/ops.hpp"
#include "dynaseg/tensor.hpp"

namespace dynaseg::testing {

struct GradCheck {
  double max_rel_err = 0.0;
  size_t worst_input = 0;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of f against central differences, input by
// input. The error of one input is ||analytic - numeric|| / (||analytic|| +
// ||numeric||) over the checked coordinates, with the denominator floored at
// `abs_floor` so that gradients which vanish identically (a key bias under
// row softmax, say) are judged by absolute error. `max_coords` > 0 checks an
// evenly strided subset of each input.
inline GradCheck grad_check(std::vector<Tensor> inputs, const ScalarFn& f, double h = 1e-5,
                            int64_t max_coords = 0, double abs_floor = 1e-6) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = f(inputs);
  backward(loss);
  GradCheck out;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    const int64_t n = t.numel();
    const int64_t stride = max_coords > 0 ? std::max<int64_t>(1, n / max_coords) : 1;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (int64_t j = 0; j < n; j += stride) {
      double& v = t.mutable_data()[j];
      const double saved = v;
      double plus, minus;
      {
        NoGradGuard no_grad;
        v = saved + h;
        plus = f(inputs).item();
        v = saved - h;
        minus = f(inputs).item();
      }
      v = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      diff += (analytic[j] - numeric) * (analytic[j] - numeric);
      norm_a += analytic[j] * analytic[j];
      norm_n += numeric * numeric;
    }
    const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
    const double rel = std::sqrt(diff) / std::max(denom, abs_floor);
    if (rel > out.max_rel_err) {
      out.max_rel_err = rel;
      out.worst_input = i;
    }
  }
  return out;
}

}  // namespace dynaseg::testing

namespace dynaseg::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Values with |x| in [margin, 1], for ops with a kink at zero.
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.1) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Reduces any output to a scalar with fixed random weights, so every output
// entry contributes a distinct amount to the gradient.
inline Tensor weighted_sum(const Tensor& out, const Tensor& weights) {
  return sum(mul(out, weights));
}

}  // namespace dynaseg::testing
