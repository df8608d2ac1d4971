#include "dynaseg/dgl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dynaseg/cost_model.hpp"
#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"

namespace dynaseg {

namespace {

void require_keep(double keep_fraction) {
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw ContractError("keep fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
  }
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

int64_t predictor_hidden_width(int64_t gated_width) { return std::max<int64_t>(4, gated_width / 4); }

GatePredictorParams init_gate_predictor(int64_t gated_width, std::mt19937_64& rng) {
  const int64_t h = predictor_hidden_width(gated_width);
  GatePredictorParams p;
  p.w1 = normal_tensor({gated_width, h}, 0.1 / std::sqrt(static_cast<double>(gated_width)), rng);
  p.b1 = Tensor::zeros({h});
  p.w2 = normal_tensor({h, gated_width}, 0.1 / std::sqrt(static_cast<double>(h)), rng);
  p.b2 = Tensor::ones({gated_width});
  return p;
}

double SparsitySchedule::effective_sparsity() const {
  if (anneal_steps <= 0) return target_sparsity;
  const double progress =
      std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
  return target_sparsity * progress;
}

double anneal(const SparsitySchedule& schedule) { return 1.0 - schedule.effective_sparsity(); }

int64_t kept_count_for(double keep_fraction, int64_t width) {
  require_keep(keep_fraction);
  // The epsilon absorbs representation error in products like 0.65 * 20.
  const auto k = static_cast<int64_t>(std::floor(keep_fraction * static_cast<double>(width) + 0.5 + 1e-9));
  return std::clamp<int64_t>(k, 1, width);
}

std::vector<int64_t> top_indices(std::span<const double> values, int64_t count) {
  std::vector<int64_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return values[a] > values[b]; });
  order.resize(static_cast<size_t>(std::min<int64_t>(count, static_cast<int64_t>(order.size()))));
  std::sort(order.begin(), order.end());
  return order;
}

std::pair<Tensor, int64_t> top_r(const Tensor& g, double keep_fraction) {
  require_keep(keep_fraction);
  if (g.rank() != 1) throw DimensionError("top_r expects a vector, got " + shape_str(g.shape()));
  const int64_t width = g.dim(0);
  const int64_t count = kept_count_for(keep_fraction, width);
  Tensor select = Tensor::zeros({width});
  for (int64_t i : top_indices(g.data(), count)) select.mutable_data()[i] = 1.0;
  return {mul(g, select), count};
}

GateMask predict_gate(const Tensor& x, const Tensor& w1, const GatePredictorParams& params,
                      double keep_fraction) {
  require_keep(keep_fraction);
  if (x.rank() != 2 || w1.rank() != 2 || x.dim(1) != w1.dim(0)) {
    throw DimensionError("predict_gate: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w1.shape()));
  }
  const int64_t c = x.dim(1);
  const int64_t width = w1.dim(1);
  if (params.w1.dim(0) != width || params.width() != width) {
    throw DimensionError("predict_gate: predictor width " + std::to_string(params.width()) +
                         " does not match gated width " + std::to_string(width));
  }
  Tensor summary = layer_norm(avg_pool_rows(x), Tensor::ones({c}), Tensor::zeros({c}));
  Tensor projected = matmul(reshape(summary, {1, c}), w1);
  Tensor hidden = relu(add(matmul(projected, params.w1), params.b1));
  Tensor logits = reshape(relu(add(matmul(hidden, params.w2), params.b2)), {width});

  GateMask gate;
  gate.logits = logits;
  auto [mask, count] = top_r(logits, keep_fraction);
  gate.mask = mask;
  gate.kept_count = count;
  gate.kept = top_indices(logits.data(), count);
  return gate;
}

namespace {

void check_pair(const Tensor& x, const Tensor& w1, const Tensor& w2, const GateMask& gate) {
  if (x.rank() != 2 || w1.rank() != 2 || w2.rank() != 2 || x.dim(1) != w1.dim(0) ||
      w1.dim(1) != w2.dim(0) || gate.mask.numel() != w1.dim(1)) {
    throw DimensionError("dgl pair: x " + shape_str(x.shape()) + ", w1 " + shape_str(w1.shape()) +
                         ", w2 " + shape_str(w2.shape()) + ", gate " +
                         shape_str(gate.mask.shape()));
  }
}

}  // namespace

PairOutput dgl_pair_forward(const Tensor& x, const Tensor& w1, const Tensor& w2,
                            const GateMask& gate) {
  check_pair(x, w1, w2, gate);
  const int64_t width = w1.dim(1);
  Tensor y = matmul(x, mul(w1, reshape(gate.mask, {1, width})));
  Tensor z = matmul(y, mul(w2, reshape(gate.mask, {width, 1})));
  return {y, z};
}

PairOutput dgl_pair_forward_compact(const Tensor& x, const Tensor& w1, const Tensor& w2,
                                    const GateMask& gate) {
  check_pair(x, w1, w2, gate);
  NoGradGuard no_grad;
  const int64_t n = x.dim(0), c_in = w1.dim(0), width = w1.dim(1), c_out = w2.dim(1);
  std::vector<int64_t> kept;
  auto m = gate.mask.data();
  for (int64_t j : gate.kept) {
    if (j < 0 || j >= width) throw DimensionError("dgl pair: kept index out of range");
    kept.push_back(j);
  }
  const auto k = static_cast<int64_t>(kept.size());
  auto w1v = w1.data();
  auto w2v = w2.data();
  std::vector<double> w1c(static_cast<size_t>(c_in * k));
  std::vector<double> w2c(static_cast<size_t>(k * c_out));
  for (int64_t col = 0; col < k; ++col) {
    const int64_t j = kept[col];
    for (int64_t i = 0; i < c_in; ++i) w1c[i * k + col] = w1v[i * width + j] * m[j];
    for (int64_t o = 0; o < c_out; ++o) w2c[col * c_out + o] = w2v[j * c_out + o] * m[j];
  }
  Tensor yc = matmul(x, Tensor::from({c_in, k}, std::move(w1c)));
  Tensor z = matmul(yc, Tensor::from({k, c_out}, std::move(w2c)));
  std::vector<double> y(static_cast<size_t>(n * width), 0.0);
  auto ycv = yc.data();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t col = 0; col < k; ++col) y[r * width + kept[col]] = ycv[r * k + col];
  return {Tensor::from({n, width}, std::move(y)), z};
}

Tensor sparsity_loss(const std::vector<GateMask>& gates, double lambda_m) {
  if (gates.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (const GateMask& g : gates) {
    Tensor l1 = sum(absolute(g.logits));
    total = total.defined() ? add(total, l1) : l1;
  }
  return scale(total, lambda_m);
}

int64_t gate_flops(int64_t pooled_rows, int64_t in_width, int64_t gated_width,
                   int64_t hidden_width) {
  const int64_t pool = pooled_rows * in_width + in_width * cost::kDiv;
  const int64_t norm = cost::layer_norm(1, in_width, /*affine=*/false);
  const int64_t project = cost::kFlopsPerMac * in_width * gated_width;
  const int64_t mlp = cost::kFlopsPerMac * gated_width * hidden_width + 2 * hidden_width +
                      cost::kFlopsPerMac * hidden_width * gated_width + 2 * gated_width;
  return pool + norm + project + mlp;
}

std::vector<GatedLayerInfo> gated_layers(const MitConfig& config) {
  const auto geo = stage_geometry(config);
  std::vector<GatedLayerInfo> out;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = config.stages[i];
    for (int j = 1; j <= s.depth; ++j) {
      const std::string b = block_id(i + 1, j);
      out.push_back({b + ".qk", PairKind::kQueryKey, i + 1, s.hidden_dim, s.hidden_dim,
                     geo[i].tokens(), b + ".attn.q.w"});
      out.push_back({b + ".v", PairKind::kValue, i + 1, s.hidden_dim, s.hidden_dim,
                     geo[i].kv_tokens(), b + ".attn.v.w"});
      out.push_back({b + ".ffn", PairKind::kFfn, i + 1, s.hidden_dim, s.ffn_dim(),
                     geo[i].tokens(), b + ".ffn.fc1.w"});
    }
  }
  return out;
}

std::string gate_param_prefix(const std::string& layer_id) { return "gate." + layer_id; }

GatePredictorParams gate_params(const ParamStore& params, const std::string& layer_id) {
  const std::string p = gate_param_prefix(layer_id);
  auto get = [&](const char* suffix) {
    auto it = params.find(p + suffix);
    if (it == params.end()) throw DimensionError("missing gate predictor parameter " + p + suffix);
    return it->second;
  };
  return {get(".w1"), get(".b1"), get(".w2"), get(".b2")};
}

void add_gate_predictors(MitModel& model, std::mt19937_64& rng) {
  for (const GatedLayerInfo& info : gated_layers(model.config())) {
    GatePredictorParams g = init_gate_predictor(info.gated_width, rng);
    const std::string p = gate_param_prefix(info.id);
    model.params()[p + ".w1"] = g.w1.set_requires_grad(true);
    model.params()[p + ".b1"] = g.b1.set_requires_grad(true);
    model.params()[p + ".w2"] = g.w2.set_requires_grad(true);
    model.params()[p + ".b2"] = g.b2.set_requires_grad(true);
  }
}

bool has_gate_predictors(const MitModel& model) {
  for (const auto& [name, t] : model.params()) {
    if (name.rfind("gate.", 0) == 0) return true;
  }
  return false;
}

Tensor DynamicGater::gate(const std::string& layer, const Tensor& x, const Tensor& w1) {
  GateMask g = predict_gate(x, w1, gate_params(params_, layer), keep_fraction_);
  Tensor mask = g.mask;
  records_.push_back({layer, std::move(g)});
  return mask;
}

std::vector<GateMask> DynamicGater::gates() const {
  std::vector<GateMask> out;
  out.reserve(records_.size());
  for (const GateRecord& r : records_) out.push_back(r.gate);
  return out;
}

Tensor FixedGater::gate(const std::string& layer, const Tensor& /*x*/, const Tensor& w1) {
  auto it = masks_.find(layer);
  if (it == masks_.end()) return Tensor::ones({w1.dim(1)});
  if (it->second.numel() != w1.dim(1)) {
    throw DimensionError("fixed gate for " + layer + " has width " +
                         std::to_string(it->second.numel()) + ", layer needs " +
                         std::to_string(w1.dim(1)));
  }
  return it->second;
}

}  // namespace dynaseg
