#include "dynaseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dynaseg/errors.hpp"

namespace dynaseg {

namespace {

// Gradient buffer of parent `i`, or nullptr if that parent is untracked.
std::vector<double>* parent_grad(TensorImpl& self, size_t i) {
  TensorImpl* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

const std::vector<double>& parent_data(TensorImpl& self, size_t i) { return self.parents[i]->data; }

void require_rank(const Tensor& t, int64_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
  }
}

// Maps each flat index of `a` to the flat index of the broadcast operand `b`.
std::vector<int64_t> broadcast_index(const Shape& a, const Shape& b, const char* op) {
  auto fail = [&] {
    return DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                          shape_str(a));
  };
  if (b.size() > a.size()) throw fail();
  const size_t off = a.size() - b.size();
  std::vector<int64_t> stride(a.size(), 0);
  int64_t running = 1;
  for (size_t d = b.size(); d-- > 0;) {
    if (b[d] != a[off + d] && b[d] != 1) throw fail();
    stride[off + d] = b[d] == 1 ? 0 : running;
    running *= b[d];
  }
  const int64_t n = shape_numel(a);
  std::vector<int64_t> index(static_cast<size_t>(n));
  std::vector<int64_t> counter(a.size(), 0);
  int64_t bi = 0;
  for (int64_t i = 0; i < n; ++i) {
    index[static_cast<size_t>(i)] = bi;
    for (size_t d = a.size(); d-- > 0;) {
      ++counter[d];
      bi += stride[d];
      if (counter[d] < a[d]) break;
      bi -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return index;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  std::vector<int64_t> bidx;
  const bool same = a.shape() == b.shape();
  if (!same) bidx = broadcast_index(a.shape(), b.shape(), name);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    out[i] = fwd(av[i], bv[same ? i : static_cast<size_t>(bidx[i])]);
  }
  return make_result(a.shape(), std::move(out), {a, b},
                     [bidx = std::move(bidx), same, da, db](TensorImpl& self) {
                       const auto& x = parent_data(self, 0);
                       const auto& y = parent_data(self, 1);
                       auto* gx = parent_grad(self, 0);
                       auto* gy = parent_grad(self, 1);
                       for (size_t i = 0; i < self.grad.size(); ++i) {
                         size_t j = same ? i : static_cast<size_t>(bidx[i]);
                         double g = self.grad[i];
                         if (gx) (*gx)[i] += da(x[i], y[j]) * g;
                         if (gy) (*gy)[j] += db(x[i], y[j]) * g;
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& x = parent_data(self, 0);
    for (size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += deriv(x[i]) * self.grad[i];
  });
}

int64_t last_extent(const Tensor& a) { return a.rank() == 0 ? 1 : a.dim(-1); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double x = av[static_cast<size_t>(i * k + p)];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (int64_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    const auto& g = self.grad;
    if (auto* gx = parent_grad(self, 0)) {
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int64_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
          (*gx)[i * k + p] += acc;
        }
      }
    }
    if (auto* gy = parent_grad(self, 1)) {
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          if (xv == 0.0) continue;
          double* dst = gy->data() + p * n;
          for (int64_t j = 0; j < n; ++j) dst[j] += xv * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int64_t m = a.dim(0), n = a.dim(1);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) (*gx)[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto av = a.data();
  return make_result(std::move(shape), std::vector<double>(av.begin(), av.end()), {a},
                     [](TensorImpl& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [inv_sqrt_2pi](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor absolute(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({}, {total}, {a}, [](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (double& g : *gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw EmptyInputError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor avg_pool_rows(const Tensor& x) {
  require_rank(x, 2, "avg_pool_rows");
  const int64_t n = x.dim(0), c = x.dim(1);
  if (n == 0) throw EmptyInputError("avg_pool_rows: no rows to pool");
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  for (double& v : out) v /= static_cast<double>(n);
  return make_result({c}, std::move(out), {x}, [n, c](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const double inv = 1.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) (*gx)[i * c + j] += self.grad[j] * inv;
  });
}

Tensor softmax_rows(const Tensor& a) {
  const int64_t n = last_extent(a);
  const int64_t rows = n == 0 ? 0 : a.numel() / n;
  auto av = a.data();
  std::vector<double> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (int64_t j = 0; j < n; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (int64_t j = 0; j < n; ++j) y[j] /= total;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, n](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < n; ++j) (*gx)[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const int64_t n = last_extent(a);
  const int64_t rows = n == 0 ? 0 : a.numel() / n;
  auto av = a.data();
  std::vector<double> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (int64_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {a}, [rows, n](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double gsum = 0.0;
      for (int64_t j = 0; j < n; ++j) gsum += g[j];
      for (int64_t j = 0; j < n; ++j) (*gx)[r * n + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta) {
  const int64_t c = last_extent(a);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + shape_str(a.shape()));
  }
  const int64_t rows = c == 0 ? 0 : a.numel() / c;
  auto av = a.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(av.size());
  std::vector<double> xhat(av.size());
  std::vector<double> rstd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = inv;
    for (int64_t j = 0; j < c; ++j) {
      const double h = (x[j] - mu) * inv;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(
      a.shape(), std::move(out), {a, gamma, beta},
      [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& self) {
        const auto& gam = parent_data(self, 1);
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gb = parent_grad(self, 2);
        std::vector<double> dh(static_cast<size_t>(c));
        for (int64_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * c;
          const double* h = xhat.data() + r * c;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            if (gg) (*gg)[j] += g[j] * h[j];
            if (gb) (*gb)[j] += g[j];
            dh[j] = g[j] * gam[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<double>(c);
          mean_dh_h /= static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j) {
            (*gx)[r * c + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 3, "depthwise_conv3x3");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 1 || w < 1) throw DimensionError("depthwise_conv3x3: empty spatial grid " + shape_str(x.shape()));
  if (weight.shape() != Shape{c, 3, 3} || bias.numel() != c) {
    throw DimensionError("depthwise_conv3x3: kernel " + shape_str(weight.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  auto xv = x.data();
  auto kv = weight.data();
  auto bv = bias.data();
  std::vector<double> out(xv.size());
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* k = kv.data() + ch * 9;
    const double* src = xv.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double acc = bv[ch];
        for (int64_t di = -1; di <= 1; ++di) {
          const int64_t ii = i + di;
          if (ii < 0 || ii >= h) continue;
          for (int64_t dj = -1; dj <= 1; ++dj) {
            const int64_t jj = j + dj;
            if (jj < 0 || jj >= w) continue;
            acc += k[(di + 1) * 3 + (dj + 1)] * src[ii * w + jj];
          }
        }
        dst[i * w + j] = acc;
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, weight, bias}, [c, h, w](TensorImpl& self) {
    const auto& xs = parent_data(self, 0);
    const auto& ks = parent_data(self, 1);
    auto* gx = parent_grad(self, 0);
    auto* gk = parent_grad(self, 1);
    auto* gb = parent_grad(self, 2);
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          const double g = self.grad[(ch * h + i) * w + j];
          if (gb) (*gb)[ch] += g;
          for (int64_t di = -1; di <= 1; ++di) {
            const int64_t ii = i + di;
            if (ii < 0 || ii >= h) continue;
            for (int64_t dj = -1; dj <= 1; ++dj) {
              const int64_t jj = j + dj;
              if (jj < 0 || jj >= w) continue;
              const int64_t kidx = ch * 9 + (di + 1) * 3 + (dj + 1);
              const int64_t xidx = (ch * h + ii) * w + jj;
              if (gk) (*gk)[kidx] += g * xs[xidx];
              if (gx) (*gx)[xidx] += g * ks[kidx];
            }
          }
        }
      }
    }
  });
}

int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, int64_t padding) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw DimensionError("conv geometry must have kernel, stride >= 1 and padding >= 0");
  }
  const int64_t span = in + 2 * padding - kernel;
  if (span < 0) {
    throw DimensionError("conv window " + std::to_string(kernel) + " exceeds padded extent " +
                         std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

Tensor im2col(const Tensor& tokens, int64_t height, int64_t width, int64_t kernel, int64_t stride,
              int64_t padding) {
  require_rank(tokens, 2, "im2col");
  if (tokens.dim(0) != height * width) {
    throw DimensionError("im2col: " + std::to_string(tokens.dim(0)) + " tokens for a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const int64_t c = tokens.dim(1);
  const int64_t ho = conv_out_extent(height, kernel, stride, padding);
  const int64_t wo = conv_out_extent(width, kernel, stride, padding);
  const int64_t cols = kernel * kernel * c;
  // Source index per (output row, window slot); -1 marks zero padding.
  std::vector<int64_t> src(static_cast<size_t>(ho * wo * kernel * kernel), -1);
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      for (int64_t ky = 0; ky < kernel; ++ky) {
        for (int64_t kx = 0; kx < kernel; ++kx) {
          const int64_t iy = oy * stride - padding + ky;
          const int64_t ix = ox * stride - padding + kx;
          if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
          src[((oy * wo + ox) * kernel + ky) * kernel + kx] = iy * width + ix;
        }
      }
    }
  }
  auto tv = tokens.data();
  std::vector<double> out(static_cast<size_t>(ho * wo * cols), 0.0);
  for (size_t slot = 0; slot < src.size(); ++slot) {
    if (src[slot] < 0) continue;
    std::copy_n(tv.data() + src[slot] * c, c, out.data() + static_cast<int64_t>(slot) * c);
  }
  return make_result({ho * wo, cols}, std::move(out), {tokens},
                     [src = std::move(src), c](TensorImpl& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (size_t slot = 0; slot < src.size(); ++slot) {
                         if (src[slot] < 0) continue;
                         const double* g = self.grad.data() + static_cast<int64_t>(slot) * c;
                         double* dst = gx->data() + src[slot] * c;
                         for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor resize_bilinear(const Tensor& tokens, int64_t height, int64_t width, int64_t out_height,
                       int64_t out_width) {
  require_rank(tokens, 2, "resize_bilinear");
  if (tokens.dim(0) != height * width || height < 1 || width < 1 || out_height < 1 ||
      out_width < 1) {
    throw DimensionError("resize_bilinear: bad grid " + std::to_string(height) + "x" +
                         std::to_string(width) + " for " + shape_str(tokens.shape()));
  }
  struct Tap {
    int64_t i0, i1;
    double w1;
  };
  auto taps = [](int64_t in, int64_t out) {
    std::vector<Tap> t(static_cast<size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
      double s = ratio * (static_cast<double>(o) + 0.5) - 0.5;
      if (s < 0.0) s = 0.0;
      int64_t i0 = static_cast<int64_t>(s);
      if (i0 > in - 1) i0 = in - 1;
      const int64_t i1 = i0 < in - 1 ? i0 + 1 : i0;
      t[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(height, out_height);
  const auto tx = taps(width, out_width);
  const int64_t c = tokens.dim(1);
  // Four (source row, weight) pairs per output pixel.
  std::vector<std::pair<int64_t, double>> plan(static_cast<size_t>(out_height * out_width * 4));
  for (int64_t oy = 0; oy < out_height; ++oy) {
    for (int64_t ox = 0; ox < out_width; ++ox) {
      const Tap& a = ty[oy];
      const Tap& b = tx[ox];
      auto* p = &plan[static_cast<size_t>((oy * out_width + ox) * 4)];
      p[0] = {a.i0 * width + b.i0, (1 - a.w1) * (1 - b.w1)};
      p[1] = {a.i0 * width + b.i1, (1 - a.w1) * b.w1};
      p[2] = {a.i1 * width + b.i0, a.w1 * (1 - b.w1)};
      p[3] = {a.i1 * width + b.i1, a.w1 * b.w1};
    }
  }
  auto tv = tokens.data();
  const int64_t n_out = out_height * out_width;
  std::vector<double> out(static_cast<size_t>(n_out * c), 0.0);
  for (int64_t o = 0; o < n_out; ++o) {
    double* dst = out.data() + o * c;
    for (int q = 0; q < 4; ++q) {
      const auto& [row, wt] = plan[static_cast<size_t>(o * 4 + q)];
      if (wt == 0.0) continue;
      const double* srow = tv.data() + row * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += wt * srow[j];
    }
  }
  return make_result({n_out, c}, std::move(out), {tokens},
                     [plan = std::move(plan), n_out, c](TensorImpl& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (int64_t o = 0; o < n_out; ++o) {
                         const double* g = self.grad.data() + o * c;
                         for (int q = 0; q < 4; ++q) {
                           const auto& [row, wt] = plan[static_cast<size_t>(o * 4 + q)];
                           if (wt == 0.0) continue;
                           double* dst = gx->data() + row * c;
                           for (int64_t j = 0; j < c; ++j) dst[j] += wt * g[j];
                         }
                       }
                     });
}

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end) {
  require_rank(a, 2, "slice_cols");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (begin < 0 || end > n || begin >= end) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
  }
  const int64_t w = end - begin;
  auto av = a.data();
  std::vector<double> out(static_cast<size_t>(m * w));
  for (int64_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, w, out.data() + i * w);
  return make_result({m, w}, std::move(out), {a}, [m, n, w, begin](TensorImpl& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) (*gx)[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: nothing to join");
  const int64_t m = parts[0].dim(0);
  std::vector<int64_t> widths;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ, " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(m * total));
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return make_result({m, total}, std::move(out), parts, [m, total, widths](TensorImpl& self) {
    int64_t offset = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      if (auto* gx = parent_grad(self, k)) {
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < widths[k]; ++j)
            (*gx)[i * widths[k] + j] += self.grad[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: nothing to join");
  const int64_t n = parts[0].dim(1);
  int64_t rows = 0;
  std::vector<double> out;
  std::vector<size_t> sizes;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) throw DimensionError("concat_rows: column counts differ, " + shape_str(p.shape()));
    rows += p.dim(0);
    auto pv = p.data();
    out.insert(out.end(), pv.begin(), pv.end());
    sizes.push_back(pv.size());
  }
  return make_result({rows, n}, std::move(out), parts, [sizes](TensorImpl& self) {
    size_t offset = 0;
    for (size_t k = 0; k < sizes.size(); ++k) {
      if (auto* gx = parent_grad(self, k)) {
        for (size_t i = 0; i < sizes[k]; ++i) (*gx)[i] += self.grad[offset + i];
      }
      offset += sizes[k];
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.numel() == 0) throw EmptyInputError("mse of empty tensors");
  auto av = a.data();
  auto bv = b.data();
  double total = 0.0;
  for (size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double n = static_cast<double>(av.size());
  return make_result({}, {total / n}, {a, b}, [n](TensorImpl& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    auto* gx = parent_grad(self, 0);
    auto* gy = parent_grad(self, 1);
    const double g = self.grad[0] * 2.0 / n;
    for (size_t i = 0; i < x.size(); ++i) {
      const double d = (x[i] - y[i]) * g;
      if (gx) (*gx)[i] += d;
      if (gy) (*gy)[i] -= d;
    }
  });
}

namespace {

std::vector<double> row_softmax(std::span<const double> logits, int64_t rows, int64_t k) {
  std::vector<double> p(logits.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = logits.data() + r * k;
    double* y = p.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double total = 0.0;
    for (int64_t j = 0; j < k; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (int64_t j = 0; j < k; ++j) y[j] /= total;
  }
  return p;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const uint8_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int64_t rows = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  std::vector<double> prob = row_softmax(logits.data(), rows, k);
  double total = 0.0;
  int64_t valid = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const int lab = labels[r];
    if (lab == kVoidLabel) continue;
    if (lab >= k) throw ContractError("cross_entropy: label " + std::to_string(lab) + " >= classes");
    total -= std::log(std::max(prob[r * k + lab], 1e-300));
    ++valid;
  }
  if (valid == 0) throw EmptyInputError("cross_entropy: every pixel is void");
  std::vector<uint8_t> lab_copy(labels.begin(), labels.end());
  const double inv = 1.0 / static_cast<double>(valid);
  return make_result({}, {total * inv}, {logits},
                     [prob = std::move(prob), lab_copy = std::move(lab_copy), rows, k,
                      inv](TensorImpl& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       const double g = self.grad[0] * inv;
                       for (int64_t r = 0; r < rows; ++r) {
                         if (lab_copy[r] == kVoidLabel) continue;
                         for (int64_t j = 0; j < k; ++j) {
                           const double target = j == lab_copy[r] ? 1.0 : 0.0;
                           (*gx)[r * k + j] += g * (prob[r * k + j] - target);
                         }
                       }
                     });
}

Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits,
                          std::span<const uint8_t> labels) {
  require_rank(student_logits, 2, "soft_cross_entropy");
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("soft_cross_entropy: student " + shape_str(student_logits.shape()) +
                         " vs teacher " + shape_str(teacher_logits.shape()));
  }
  const int64_t rows = student_logits.dim(0), k = student_logits.dim(1);
  if (!labels.empty() && static_cast<int64_t>(labels.size()) != rows) {
    throw DimensionError("soft_cross_entropy: label count does not match pixel count");
  }
  auto is_valid = [&](int64_t r) { return labels.empty() || labels[r] != kVoidLabel; };
  std::vector<double> target = row_softmax(teacher_logits.data(), rows, k);
  std::vector<double> prob = row_softmax(student_logits.data(), rows, k);
  auto sv = student_logits.data();
  double total = 0.0;
  int64_t valid = 0;
  std::vector<uint8_t> mask(static_cast<size_t>(rows), 0);
  for (int64_t r = 0; r < rows; ++r) {
    if (!is_valid(r)) continue;
    mask[r] = 1;
    ++valid;
    const double* x = sv.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (int64_t j = 0; j < k; ++j) total -= target[r * k + j] * (x[j] - lse);
  }
  if (valid == 0) throw EmptyInputError("soft_cross_entropy: every pixel is void");
  const double inv = 1.0 / static_cast<double>(valid);
  return make_result({}, {total * inv}, {student_logits},
                     [prob = std::move(prob), target = std::move(target), mask = std::move(mask),
                      rows, k, inv](TensorImpl& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       const double g = self.grad[0] * inv;
                       for (int64_t r = 0; r < rows; ++r) {
                         if (!mask[r]) continue;
                         for (int64_t j = 0; j < k; ++j) {
                           (*gx)[r * k + j] += g * (prob[r * k + j] - target[r * k + j]);
                         }
                       }
                     });
}

}  // namespace dynaseg
