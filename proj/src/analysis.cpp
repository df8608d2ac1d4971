#include "dynaseg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dynaseg/cost_model.hpp"
#include "dynaseg/dgl.hpp"
#include "dynaseg/errors.hpp"

namespace dynaseg {

namespace {

struct Cost {
  int64_t flops = 0;
  int64_t macs = 0;

  Cost& operator+=(const Cost& o) {
    flops += o.flops;
    macs += o.macs;
    return *this;
  }
};

Cost matmul_cost(int64_t m, int64_t k, int64_t n) {
  const int64_t macs = cost::matmul_macs(m, k, n);
  return {cost::kFlopsPerMac * macs, macs};
}

Cost linear_cost(int64_t m, int64_t k, int64_t n, bool bias = true) {
  Cost c = matmul_cost(m, k, n);
  if (bias) c.flops += m * n;
  return c;
}

Cost elementwise(int64_t flops) { return {flops, 0}; }

const GatedLayerInfo& find_layer(const std::vector<GatedLayerInfo>& layers, const std::string& id) {
  for (const GatedLayerInfo& info : layers) {
    if (info.id == id) return info;
  }
  throw UsageError("unknown gated layer '" + id + "'");
}

// Everything in a pair whose size is proportional to the gated width.
Cost pair_cost(const GatedLayerInfo& info, const StageGeometry& g, int64_t w) {
  const int64_t n = g.tokens(), n_kv = g.kv_tokens(), c = info.in_width;
  Cost total;
  switch (info.kind) {
    case PairKind::kQueryKey:
      total += linear_cost(n, c, w);
      total += linear_cost(n_kv, c, w);
      total += matmul_cost(n, w, n_kv);
      break;
    case PairKind::kValue:
      total += linear_cost(n_kv, c, w);
      total += matmul_cost(n, n_kv, w);
      total += linear_cost(n, w, c, /*bias=*/false);
      break;
    case PairKind::kFfn:
      total += linear_cost(n, c, w);
      total += matmul_cost(n, 9, w);  // depthwise 3x3
      total += elementwise(n * w);    // conv bias
      total += elementwise(cost::gelu(n * w));
      total += linear_cost(n, w, c, /*bias=*/false);
      break;
  }
  return total;
}

void check_keep(double keep, const std::string& where) {
  if (!(keep > 0.0) || keep > 1.0) {
    throw UsageError("keep fraction for " + where + " must lie in (0, 1]");
  }
}

}  // namespace

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw EmptyInputError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Quartiles quartiles(std::vector<double> values) {
  if (values.empty()) throw EmptyInputError("quartiles of an empty set");
  std::sort(values.begin(), values.end());
  Quartiles q;
  q.min = values.front();
  q.max = values.back();
  q.q1 = quantile(values, 0.25);
  q.median = quantile(values, 0.5);
  q.q3 = quantile(values, 0.75);
  return q;
}

NeuronStats stats_from_trace(const std::string& layer, const std::vector<std::vector<double>>& trace) {
  if (trace.empty()) throw EmptyInputError("neuron statistics need at least one instance");
  const size_t width = trace.front().size();
  NeuronStats s;
  s.layer = layer;
  s.instance_count = static_cast<int64_t>(trace.size());
  for (size_t j = 0; j < width; ++j) {
    std::vector<double> column;
    column.reserve(trace.size());
    for (const auto& row : trace) {
      if (row.size() != width) throw DimensionError("ragged neuron trace");
      column.push_back(row[j]);
    }
    s.neurons.push_back(quartiles(std::move(column)));
  }
  return s;
}

std::vector<std::string> probe_layers(const MitConfig& config) {
  std::vector<std::string> out;
  for (int i = 0; i < 4; ++i) {
    for (int j = 1; j <= config.stages[i].depth; ++j) {
      const std::string b = block_id(i + 1, j);
      for (const char* suffix : {".q", ".k", ".v", ".ffn"}) out.push_back(b + suffix);
    }
  }
  return out;
}

NeuronStats collect_neuron_stats(const MitModel& model, const Dataset& data, const std::string& layer,
                                 Gater* gater) {
  const auto names = probe_layers(model.config());
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    throw UsageError("unknown layer '" + layer + "' (expected e.g. s1.b1.ffn)");
  }
  if (data.empty()) throw EmptyInputError("neuron statistics need a non-empty dataset");
  if (data.size() < 2) throw ContractError("neuron statistics need at least two instances");
  NoGradGuard no_grad;
  auto* dyn = dynamic_cast<DynamicGater*>(gater);
  std::vector<std::vector<double>> trace;
  for (const SegSample& s : data) {
    if (dyn) dyn->clear();
    ActivationProbe probe;
    probe.wanted = {layer};
    encoder_forward(model, s.image, gater, &probe);
    const Tensor& act = probe.values.at(layer);
    const int64_t n = act.dim(0), w = act.dim(1);
    std::vector<double> mag(static_cast<size_t>(w), 0.0);
    auto v = act.data();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t j = 0; j < w; ++j) mag[j] += std::fabs(v[r * w + j]);
    for (double& m : mag) m /= static_cast<double>(n);
    trace.push_back(std::move(mag));
  }
  return stats_from_trace(layer, trace);
}

const char* to_string(NeuronType t) {
  switch (t) {
    case NeuronType::kTypeI: return "I";
    case NeuronType::kTypeII: return "II";
    case NeuronType::kTypeIII: return "III";
  }
  return "?";
}

std::pair<double, double> default_thresholds(const NeuronStats& stats) {
  std::vector<double> medians, iqrs;
  for (const Quartiles& q : stats.neurons) {
    medians.push_back(q.median);
    iqrs.push_back(q.iqr());
  }
  return {quantile(medians, 0.5), quantile(iqrs, 0.5)};
}

NeuronTypes classify_neurons(const NeuronStats& stats, double median_thresh, double range_thresh) {
  if (!(median_thresh > 0.0) || !(range_thresh > 0.0)) {
    throw ContractError("neuron type thresholds must be positive");
  }
  NeuronTypes out;
  out.median_thresh = median_thresh;
  out.range_thresh = range_thresh;
  for (const Quartiles& q : stats.neurons) {
    if (q.iqr() >= range_thresh) {
      out.types.push_back(NeuronType::kTypeII);
    } else if (q.median >= median_thresh) {
      out.types.push_back(NeuronType::kTypeI);
    } else {
      out.types.push_back(NeuronType::kTypeIII);
    }
  }
  return out;
}

PlantedTraces planted_traces(uint64_t seed, int64_t instances, int64_t per_type) {
  PlantedTraces p;
  p.low_level = 1.0;
  p.high_level = 10.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.03);
  std::bernoulli_distribution coin(0.5);
  for (int64_t j = 0; j < per_type; ++j) {
    p.truth.push_back(NeuronType::kTypeI);
    p.truth.push_back(NeuronType::kTypeII);
    p.truth.push_back(NeuronType::kTypeIII);
  }
  p.trace.assign(static_cast<size_t>(instances), std::vector<double>(p.truth.size()));
  for (auto& row : p.trace) {
    for (size_t j = 0; j < p.truth.size(); ++j) {
      double level = p.low_level;
      if (p.truth[j] == NeuronType::kTypeI) level = p.high_level;
      if (p.truth[j] == NeuronType::kTypeII) level = coin(rng) ? p.high_level : p.low_level;
      row[j] = std::max(0.0, level * (1.0 + jitter(rng)));
    }
  }
  return p;
}

std::vector<GateActivationCount> count_gate_activations(const MitModel& model, const Dataset& data,
                                                        double keep_fraction) {
  if (!has_gate_predictors(model)) throw ContractError("model has no gate predictors");
  const auto layers = gated_layers(model.config());
  std::vector<GateActivationCount> out;
  std::map<std::string, size_t> slot;
  for (const GatedLayerInfo& info : layers) {
    slot[info.id] = out.size();
    out.push_back({info.id, std::vector<int64_t>(static_cast<size_t>(info.gated_width), 0),
                   static_cast<int64_t>(data.size())});
  }
  NoGradGuard no_grad;
  for (const SegSample& s : data) {
    DynamicGater g(model.params(), keep_fraction);
    encoder_forward(model, s.image, &g);
    for (const GateRecord& r : g.records()) {
      auto& counts = out[slot.at(r.layer)].counts;
      auto logits = r.gate.logits.data();
      for (size_t j = 0; j < counts.size(); ++j) counts[j] += logits[j] > 0.0 ? 1 : 0;
    }
  }
  return out;
}

double KeepProfile::keep_for(const std::string& layer) const {
  auto it = per_layer.find(layer);
  return it == per_layer.end() ? default_keep : it->second;
}

const FlopsRow& FlopsReport::row(const std::string& layer) const {
  for (const FlopsRow& r : rows) {
    if (r.layer == layer) return r;
  }
  throw UsageError("no FLOPs row named '" + layer + "'");
}

int64_t pair_flops(const MitConfig& config, const std::string& layer, int64_t kept) {
  const auto layers = gated_layers(config);
  const GatedLayerInfo& info = find_layer(layers, layer);
  return pair_cost(info, stage_geometry(config)[info.stage - 1], kept).flops;
}

FlopsReport flops_report(const MitConfig& config, const KeepProfile& profile) {
  config.validate();
  const auto geo = stage_geometry(config);
  const auto layers = gated_layers(config);
  check_keep(profile.default_keep, "the default");
  for (const auto& [id, keep] : profile.per_layer) {
    find_layer(layers, id);
    check_keep(keep, id);
  }

  FlopsReport report;
  auto fixed = [&](const std::string& name, Cost c) {
    FlopsRow r;
    r.layer = name;
    r.dense_flops = r.gated_flops = c.flops;
    r.dense_macs = r.gated_macs = c.macs;
    report.rows.push_back(r);
  };
  auto gated = [&](const std::string& id) {
    const GatedLayerInfo& info = find_layer(layers, id);
    const StageGeometry& g = geo[info.stage - 1];
    FlopsRow r;
    r.layer = id;
    r.gated = true;
    r.width = info.gated_width;
    r.keep = profile.keep_for(id);
    r.kept = kept_count_for(r.keep, info.gated_width);
    const Cost dense = pair_cost(info, g, info.gated_width);
    const Cost kept = pair_cost(info, g, r.kept);
    r.dense_flops = dense.flops;
    r.dense_macs = dense.macs;
    r.gated_flops = kept.flops;
    r.gated_macs = kept.macs;
    if (r.keep < 1.0) {
      const int64_t h = predictor_hidden_width(info.gated_width);
      r.predictor_flops = gate_flops(info.pooled_rows, info.in_width, info.gated_width, h);
      r.predictor_macs = info.in_width * info.gated_width + 2 * info.gated_width * h;
    }
    report.rows.push_back(r);
  };

  int64_t in_dim = config.in_channels;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = config.stages[i];
    const StageGeometry& g = geo[i];
    const int64_t n = g.tokens(), n_kv = g.kv_tokens(), c = s.hidden_dim;
    const std::string sp = "s" + std::to_string(i + 1);
    Cost patch = linear_cost(n, static_cast<int64_t>(s.patch.kernel) * s.patch.kernel * in_dim, c);
    patch += elementwise(cost::layer_norm(n, c));
    fixed(sp + ".patch", patch);
    for (int j = 1; j <= s.depth; ++j) {
      const std::string b = block_id(i + 1, j);
      if (s.reduction > 1) {
        Cost sr = linear_cost(n_kv, static_cast<int64_t>(s.reduction) * s.reduction * c, c);
        sr += elementwise(cost::layer_norm(n_kv, c));
        fixed(b + ".attn.sr", sr);
      }
      gated(b + ".qk");
      fixed(b + ".attn.softmax",
            elementwise(s.num_heads * n * n_kv + cost::softmax(s.num_heads * n, n_kv)));
      gated(b + ".v");
      fixed(b + ".attn.post", elementwise(2 * n * c + cost::layer_norm(n, c)));
      gated(b + ".ffn");
      fixed(b + ".ffn.post", elementwise(2 * n * c + cost::layer_norm(n, c)));
    }
    in_dim = c;
  }

  const int64_t d = config.decoder_dim, k = config.num_classes;
  const int64_t n1 = geo[0].tokens();
  for (int i = 0; i < 4; ++i) {
    const std::string idx = std::to_string(i + 1);
    fixed("dec.proj" + idx, linear_cost(geo[i].tokens(), config.stages[i].hidden_dim, d));
    if (geo[i].height != geo[0].height || geo[i].width != geo[0].width) {
      fixed("dec.up" + idx, elementwise(cost::bilinear(n1 * d)));
    }
  }
  if (config.decoder_fusion == DecoderFusion::kConcat) {
    fixed("dec.fuse", linear_cost(n1, 4 * d, d));
  } else {
    fixed("dec.fuse", elementwise(3 * n1 * d));
  }
  fixed("dec.relu", elementwise(n1 * d));
  fixed("dec.cls", linear_cost(n1, d, k));
  const int64_t full = static_cast<int64_t>(config.input_height) * config.input_width;
  if (full != n1) fixed("dec.upsample", elementwise(cost::bilinear(full * k)));

  for (const FlopsRow& r : report.rows) {
    report.dense_flops += r.dense_flops;
    report.gated_flops += r.gated_flops;
    report.predictor_flops += r.predictor_flops;
    report.dense_macs += r.dense_macs;
    report.gated_macs += r.gated_macs;
    report.predictor_macs += r.predictor_macs;
  }
  return report;
}

void write_flops_csv(std::ostream& out, const FlopsReport& report) {
  out << "layer,gated,width,kept,keep,dense_flops,gated_flops,predictor_flops,dense_macs,"
         "gated_macs,predictor_macs\n";
  char buf[512];
  for (const FlopsRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%lld,%lld,%.6g,%lld,%lld,%lld,%lld,%lld,%lld\n",
                  r.layer.c_str(), r.gated ? 1 : 0, static_cast<long long>(r.width),
                  static_cast<long long>(r.kept), r.keep, static_cast<long long>(r.dense_flops),
                  static_cast<long long>(r.gated_flops), static_cast<long long>(r.predictor_flops),
                  static_cast<long long>(r.dense_macs), static_cast<long long>(r.gated_macs),
                  static_cast<long long>(r.predictor_macs));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "total,0,0,0,1,%lld,%lld,%lld,%lld,%lld,%lld\n",
                static_cast<long long>(report.dense_flops), static_cast<long long>(report.gated_flops),
                static_cast<long long>(report.predictor_flops),
                static_cast<long long>(report.dense_macs), static_cast<long long>(report.gated_macs),
                static_cast<long long>(report.predictor_macs));
  out << buf;
}

void write_flops_summary(std::ostream& out, const FlopsReport& report, const MitConfig& config) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "# conventions: 1 MAC = 2 FLOPs; exp=%lld, div=%lld, sqrt=%lld, erf=%lld FLOPs per element\n",
                static_cast<long long>(cost::kExp), static_cast<long long>(cost::kDiv),
                static_cast<long long>(cost::kSqrt), static_cast<long long>(cost::kErf));
  out << buf;
  std::snprintf(buf, sizeof(buf), "input            %dx%d, %d classes, %s fusion\n",
                config.input_height, config.input_width, config.num_classes,
                config.decoder_fusion == DecoderFusion::kConcat ? "concat" : "add");
  out << buf;
  auto line = [&](const char* label, int64_t v) {
    std::snprintf(buf, sizeof(buf), "%-16s %16lld  (%.4f G)\n", label, static_cast<long long>(v),
                  static_cast<double>(v) * 1e-9);
    out << buf;
  };
  line("dense FLOPs", report.dense_flops);
  line("gated FLOPs", report.gated_flops);
  line("predictor FLOPs", report.predictor_flops);
  line("total FLOPs", report.total_flops());
  line("dense MACs", report.dense_macs);
  line("total MACs", report.total_macs());
}

void write_stats_csv(std::ostream& out, const NeuronStats& stats, const NeuronTypes& types) {
  out << "layer,neuron,min,q1,median,q3,max,iqr,type\n";
  char buf[512];
  for (size_t j = 0; j < stats.neurons.size(); ++j) {
    const Quartiles& q = stats.neurons[j];
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s\n", stats.layer.c_str(),
                  j, q.min, q.q1, q.median, q.q3, q.max, q.iqr(),
                  j < types.types.size() ? to_string(types.types[j]) : "");
    out << buf;
  }
}

void write_counts_csv(std::ostream& out, const std::vector<GateActivationCount>& counts) {
  out << "layer,neuron,count,instance_count\n";
  for (const GateActivationCount& c : counts) {
    for (size_t j = 0; j < c.counts.size(); ++j) {
      out << c.layer << ',' << j << ',' << c.counts[j] << ',' << c.instance_count << '\n';
    }
  }
}

}  // namespace dynaseg
