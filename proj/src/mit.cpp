#include "dynaseg/mit.hpp"

#include <cmath>

#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"

namespace dynaseg {

namespace {

std::string stage_prefix(int stage) { return "s" + std::to_string(stage); }

void require_positive(int v, const std::string& field) {
  if (v < 1) throw UsageError("config field '" + field + "' must be a positive integer");
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void add_linear(ParamStore& p, const std::string& name, int64_t in, int64_t out,
                std::mt19937_64& rng) {
  p[name + ".w"] = normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p[name + ".b"] = Tensor::zeros({out});
}

void add_norm(ParamStore& p, const std::string& name, int64_t dim) {
  p[name + ".g"] = Tensor::ones({dim});
  p[name + ".b"] = Tensor::zeros({dim});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace

void MitConfig::validate() const {
  require_positive(decoder_dim, "model.decoder_dim");
  require_positive(num_classes, "model.num_classes");
  require_positive(input_height, "model.input_height");
  require_positive(input_width, "model.input_width");
  require_positive(in_channels, "model.in_channels");
  if (num_classes > 255) throw UsageError("config field 'model.num_classes' must be <= 255");
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = stages[i];
    const std::string sec = "stage" + std::to_string(i + 1) + ".";
    require_positive(s.hidden_dim, sec + "hidden_dim");
    require_positive(s.depth, sec + "depth");
    require_positive(s.num_heads, sec + "num_heads");
    require_positive(s.reduction, sec + "reduction");
    require_positive(s.ffn_expansion, sec + "ffn_expansion");
    require_positive(s.patch.kernel, sec + "patch_kernel");
    require_positive(s.patch.stride, sec + "patch_stride");
    if (s.patch.padding < 0) throw UsageError("config field '" + sec + "patch_padding' must be >= 0");
    if (s.hidden_dim % s.num_heads != 0) {
      throw UsageError("config field '" + sec + "num_heads' must divide hidden_dim");
    }
  }
}

bool MitConfig::same_architecture(const MitConfig& o) const {
  for (int i = 0; i < 4; ++i) {
    const StageConfig& a = stages[i];
    const StageConfig& b = o.stages[i];
    if (a.hidden_dim != b.hidden_dim || a.depth != b.depth || a.num_heads != b.num_heads ||
        a.reduction != b.reduction || a.ffn_expansion != b.ffn_expansion ||
        a.patch.kernel != b.patch.kernel || a.patch.stride != b.patch.stride ||
        a.patch.padding != b.patch.padding) {
      return false;
    }
  }
  return decoder_dim == o.decoder_dim && decoder_fusion == o.decoder_fusion &&
         num_classes == o.num_classes && input_height == o.input_height &&
         input_width == o.input_width && in_channels == o.in_channels;
}

MitConfig tiny_config() {
  MitConfig c;
  const int dims[4] = {8, 16, 24, 32};
  const int heads[4] = {1, 1, 2, 4};
  const int reductions[4] = {4, 2, 1, 1};
  for (int i = 0; i < 4; ++i) {
    c.stages[i].hidden_dim = dims[i];
    c.stages[i].depth = 1;
    c.stages[i].num_heads = heads[i];
    c.stages[i].reduction = reductions[i];
    c.stages[i].patch = i == 0 ? PatchGeometry{7, 4, 3} : PatchGeometry{3, 2, 1};
    c.stages[i].ffn_expansion = 4;
  }
  c.decoder_dim = 32;
  c.decoder_fusion = DecoderFusion::kAdd;
  c.num_classes = 4;
  c.input_height = c.input_width = 32;
  return c;
}

MitConfig mit_b0_config() {
  MitConfig c;
  const int dims[4] = {32, 64, 160, 256};
  const int heads[4] = {1, 2, 5, 8};
  const int reductions[4] = {8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    c.stages[i].hidden_dim = dims[i];
    c.stages[i].depth = 2;
    c.stages[i].num_heads = heads[i];
    c.stages[i].reduction = reductions[i];
    c.stages[i].patch = i == 0 ? PatchGeometry{7, 4, 3} : PatchGeometry{3, 2, 1};
    c.stages[i].ffn_expansion = 4;
  }
  c.decoder_dim = 256;
  c.decoder_fusion = DecoderFusion::kConcat;
  c.num_classes = 150;
  c.input_height = c.input_width = 512;
  return c;
}

std::array<StageGeometry, 4> stage_geometry(const MitConfig& config) {
  std::array<StageGeometry, 4> g;
  int64_t h = config.input_height, w = config.input_width;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = config.stages[i];
    if (h % s.patch.stride != 0 || w % s.patch.stride != 0) {
      throw DimensionError("stage " + std::to_string(i + 1) + ": grid " + std::to_string(h) + "x" +
                           std::to_string(w) + " not divisible by patch stride " +
                           std::to_string(s.patch.stride));
    }
    const int64_t ho = conv_out_extent(h, s.patch.kernel, s.patch.stride, s.patch.padding);
    const int64_t wo = conv_out_extent(w, s.patch.kernel, s.patch.stride, s.patch.padding);
    if (ho != h / s.patch.stride || wo != w / s.patch.stride) {
      throw DimensionError("stage " + std::to_string(i + 1) +
                           ": patch geometry does not map the grid to grid/stride");
    }
    h = ho;
    w = wo;
    if (h % s.reduction != 0 || w % s.reduction != 0) {
      throw DimensionError("stage " + std::to_string(i + 1) + ": grid " + std::to_string(h) + "x" +
                           std::to_string(w) + " not divisible by reduction " +
                           std::to_string(s.reduction));
    }
    g[i] = {h, w, h / s.reduction, w / s.reduction};
  }
  return g;
}

std::string block_id(int stage, int block) {
  return stage_prefix(stage) + ".b" + std::to_string(block);
}

void ActivationProbe::offer(const std::string& name, const Tensor& t) {
  if (wanted.empty() || wanted.count(name)) values[name] = t;
}

MitModel::MitModel(MitConfig config, ParamStore params)
    : config_(std::move(config)), params_(std::move(params)) {}

MitModel MitModel::init(const MitConfig& config, std::mt19937_64& rng) {
  config.validate();
  stage_geometry(config);
  ParamStore p;
  int64_t in_dim = config.in_channels;
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = config.stages[i];
    const std::string sp = stage_prefix(i + 1);
    const int64_t c = s.hidden_dim;
    add_linear(p, sp + ".patch", static_cast<int64_t>(s.patch.kernel) * s.patch.kernel * in_dim, c,
               rng);
    add_norm(p, sp + ".patch.ln", c);
    for (int j = 1; j <= s.depth; ++j) {
      const std::string b = block_id(i + 1, j);
      add_linear(p, b + ".attn.q", c, c, rng);
      add_linear(p, b + ".attn.k", c, c, rng);
      add_linear(p, b + ".attn.v", c, c, rng);
      add_linear(p, b + ".attn.o", c, c, rng);
      if (s.reduction > 1) {
        add_linear(p, b + ".attn.sr", static_cast<int64_t>(s.reduction) * s.reduction * c, c, rng);
        add_norm(p, b + ".attn.sr.ln", c);
      }
      add_norm(p, b + ".ln1", c);
      add_linear(p, b + ".ffn.fc1", c, s.ffn_dim(), rng);
      p[b + ".ffn.dw.w"] = normal_tensor({s.ffn_dim(), 3, 3}, 1.0 / 3.0, rng);
      p[b + ".ffn.dw.b"] = Tensor::zeros({s.ffn_dim()});
      add_linear(p, b + ".ffn.fc2", s.ffn_dim(), c, rng);
      add_norm(p, b + ".ln2", c);
    }
    in_dim = c;
  }
  const int64_t d = config.decoder_dim;
  for (int i = 0; i < 4; ++i) {
    add_linear(p, "dec.proj" + std::to_string(i + 1), config.stages[i].hidden_dim, d, rng);
  }
  if (config.decoder_fusion == DecoderFusion::kConcat) add_linear(p, "dec.fuse", 4 * d, d, rng);
  add_linear(p, "dec.cls", d, config.num_classes, rng);
  MitModel model(config, std::move(p));
  model.set_trainable(true);
  return model;
}

const Tensor& MitModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw DimensionError("missing parameter '" + name + "'");
  return it->second;
}

std::vector<Tensor> MitModel::params_with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

std::vector<Tensor> MitModel::backbone_params() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    if (name.rfind("gate.", 0) != 0) out.push_back(t);
  }
  return out;
}

std::vector<Tensor> MitModel::encoder_params() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    if (name.size() > 1 && name[0] == 's' && std::isdigit(static_cast<unsigned char>(name[1]))) {
      out.push_back(t);
    }
  }
  return out;
}

int64_t MitModel::num_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

MitModel MitModel::clone() const {
  ParamStore copy;
  for (const auto& [name, t] : params_) {
    copy[name] = t.detach().set_requires_grad(t.requires_grad());
  }
  return MitModel(config_, std::move(copy));
}

void MitModel::set_trainable(bool on) {
  for (auto& [name, t] : params_) t.set_requires_grad(on);
}

FeatureMap image_to_tokens(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("image must be [C,H,W], got " + shape_str(image.shape()));
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  return {transpose(reshape(image, {c, h * w})), h, w};
}

FeatureMap patch_merge(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                       const StageConfig& stage) {
  const PatchGeometry& g = stage.patch;
  if (x.tokens.dim(0) != x.height * x.width) {
    throw DimensionError("patch_merge: token count does not match grid");
  }
  if (x.height % g.stride != 0 || x.width % g.stride != 0) {
    throw DimensionError("patch_merge: grid " + std::to_string(x.height) + "x" +
                         std::to_string(x.width) + " not divisible by stride " +
                         std::to_string(g.stride));
  }
  const int64_t ho = conv_out_extent(x.height, g.kernel, g.stride, g.padding);
  const int64_t wo = conv_out_extent(x.width, g.kernel, g.stride, g.padding);
  if (ho != x.height / g.stride || wo != x.width / g.stride) {
    throw DimensionError("patch_merge: kernel/padding do not preserve grid/stride");
  }
  Tensor cols = im2col(x.tokens, x.height, x.width, g.kernel, g.stride, g.padding);
  Tensor y = linear(cols, params.at(prefix + ".w"), params.at(prefix + ".b"));
  y = layer_norm(y, params.at(prefix + ".ln.g"), params.at(prefix + ".ln.b"));
  return {y, ho, wo};
}

FeatureMap efficient_mha(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                         const StageConfig& stage, Gater* gater, ActivationProbe* probe) {
  const int64_t n = x.tokens.dim(0);
  const int64_t c = x.tokens.dim(1);
  if (n != x.height * x.width) throw DimensionError("efficient_mha: token count does not match grid");
  if (c % stage.num_heads != 0) {
    throw DimensionError("efficient_mha: " + std::to_string(stage.num_heads) +
                         " heads do not split width " + std::to_string(c));
  }
  const std::string a = prefix + ".attn";

  Tensor kv_src = x.tokens;
  if (stage.reduction > 1) {
    const int64_t r = stage.reduction;
    if (x.height % r != 0 || x.width % r != 0) {
      throw DimensionError("efficient_mha: grid not divisible by reduction " + std::to_string(r));
    }
    Tensor cols = im2col(x.tokens, x.height, x.width, r, r, 0);
    kv_src = layer_norm(linear(cols, params.at(a + ".sr.w"), params.at(a + ".sr.b")),
                        params.at(a + ".sr.ln.g"), params.at(a + ".sr.ln.b"));
  }
  const int64_t n_kv = kv_src.dim(0);

  Tensor wq = params.at(a + ".q.w"), bq = params.at(a + ".q.b");
  Tensor wk = params.at(a + ".k.w"), bk = params.at(a + ".k.b");
  Tensor wv = params.at(a + ".v.w"), bv = params.at(a + ".v.b");
  Tensor wo = params.at(a + ".o.w"), bo = params.at(a + ".o.b");
  if (gater) {
    // Q and K share one gate so the score contraction runs over one kept set.
    Tensor m = gater->gate(prefix + ".qk", x.tokens, wq);
    Tensor row = reshape(m, {1, c});
    wq = mul(wq, row);
    bq = mul(bq, m);
    wk = mul(wk, row);
    bk = mul(bk, m);
    Tensor mv = gater->gate(prefix + ".v", kv_src, wv);
    wv = mul(wv, reshape(mv, {1, c}));
    bv = mul(bv, mv);
    wo = mul(wo, reshape(mv, {c, 1}));
  }
  Tensor q = linear(x.tokens, wq, bq);
  Tensor k = linear(kv_src, wk, bk);
  Tensor v = linear(kv_src, wv, bv);
  if (probe) {
    probe->offer(prefix + ".q", q);
    probe->offer(prefix + ".k", k);
    probe->offer(prefix + ".v", v);
  }

  // Score temperature follows softmax(Q K^T / sqrt(N_kv)).
  const double temperature = 1.0 / std::sqrt(static_cast<double>(n_kv));
  const int64_t d = c / stage.num_heads;
  std::vector<Tensor> heads;
  for (int64_t h = 0; h < stage.num_heads; ++h) {
    Tensor qh = stage.num_heads == 1 ? q : slice_cols(q, h * d, (h + 1) * d);
    Tensor kh = stage.num_heads == 1 ? k : slice_cols(k, h * d, (h + 1) * d);
    Tensor vh = stage.num_heads == 1 ? v : slice_cols(v, h * d, (h + 1) * d);
    Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), temperature));
    heads.push_back(matmul(attn, vh));
  }
  Tensor mixed = heads.size() == 1 ? heads[0] : concat_cols(heads);
  Tensor out = linear(mixed, wo, bo);
  Tensor y = layer_norm(add(x.tokens, out), params.at(prefix + ".ln1.g"),
                        params.at(prefix + ".ln1.b"));
  return {y, x.height, x.width};
}

FeatureMap mix_ffn(const FeatureMap& x, const ParamStore& params, const std::string& prefix,
                   const StageConfig& stage, Gater* gater, ActivationProbe* probe) {
  const int64_t n = x.tokens.dim(0);
  if (n != x.height * x.width) {
    throw DimensionError("mix_ffn: " + std::to_string(n) + " tokens for a " +
                         std::to_string(x.height) + "x" + std::to_string(x.width) + " grid");
  }
  const std::string f = prefix + ".ffn";
  const int64_t hidden = params.at(f + ".fc1.w").dim(1);
  if (hidden != stage.ffn_dim()) {
    throw DimensionError("mix_ffn: fc1 width " + std::to_string(hidden) + " != expansion * C = " +
                         std::to_string(stage.ffn_dim()));
  }

  Tensor w1 = params.at(f + ".fc1.w"), b1 = params.at(f + ".fc1.b");
  Tensor w2 = params.at(f + ".fc2.w"), b2 = params.at(f + ".fc2.b");
  if (gater) {
    // Dropped channels enter the conv as zeros and FC2's matching rows are
    // zeroed, so the conv channel contributes nothing downstream.
    Tensor m = gater->gate(f, x.tokens, w1);
    w1 = mul(w1, reshape(m, {1, hidden}));
    b1 = mul(b1, m);
    w2 = mul(w2, reshape(m, {hidden, 1}));
  }
  Tensor h = linear(x.tokens, w1, b1);
  if (probe) probe->offer(f, h);
  Tensor grid = reshape(transpose(h), {hidden, x.height, x.width});
  Tensor conv = depthwise_conv3x3(grid, params.at(f + ".dw.w"), params.at(f + ".dw.b"));
  Tensor act = transpose(reshape(gelu(conv), {hidden, n}));
  Tensor out = linear(act, w2, b2);
  Tensor y = layer_norm(add(out, x.tokens), params.at(prefix + ".ln2.g"),
                        params.at(prefix + ".ln2.b"));
  return {y, x.height, x.width};
}

std::array<FeatureMap, 4> encoder_forward(const MitModel& model, const Tensor& image,
                                          Gater* gater, ActivationProbe* probe) {
  const MitConfig& cfg = model.config();
  if (image.shape() != Shape{cfg.in_channels, cfg.input_height, cfg.input_width}) {
    throw DimensionError("image " + shape_str(image.shape()) + " does not match configured input " +
                         shape_str({cfg.in_channels, cfg.input_height, cfg.input_width}));
  }
  std::array<FeatureMap, 4> feats;
  FeatureMap x = image_to_tokens(image);
  for (int i = 0; i < 4; ++i) {
    const StageConfig& s = cfg.stages[i];
    x = patch_merge(x, model.params(), stage_prefix(i + 1) + ".patch", s);
    for (int j = 1; j <= s.depth; ++j) {
      const std::string b = block_id(i + 1, j);
      x = efficient_mha(x, model.params(), b, s, gater, probe);
      x = mix_ffn(x, model.params(), b, s, gater, probe);
    }
    feats[i] = x;
  }
  return feats;
}

Tensor decoder_fusion_input(const std::array<Tensor, 4>& upsampled, DecoderFusion fusion) {
  if (fusion == DecoderFusion::kConcat) {
    return concat_cols({upsampled[0], upsampled[1], upsampled[2], upsampled[3]});
  }
  for (const Tensor& t : upsampled) {
    if (t.shape() != upsampled[0].shape()) {
      throw DimensionError("add fusion: feature shapes differ, " + shape_str(t.shape()) + " vs " +
                           shape_str(upsampled[0].shape()));
    }
  }
  return add(add(add(upsampled[0], upsampled[1]), upsampled[2]), upsampled[3]);
}

Tensor decode_tokens(const std::array<FeatureMap, 4>& features, const MitModel& model) {
  const MitConfig& cfg = model.config();
  const ParamStore& p = model.params();
  const int64_t h1 = features[0].height, w1 = features[0].width;
  std::array<Tensor, 4> up;
  for (int i = 0; i < 4; ++i) {
    const std::string name = "dec.proj" + std::to_string(i + 1);
    const FeatureMap& f = features[i];
    if (f.tokens.dim(1) != p.at(name + ".w").dim(0)) {
      throw DimensionError("decoder: stage " + std::to_string(i + 1) + " width " +
                           std::to_string(f.tokens.dim(1)) + " does not match projection");
    }
    Tensor t = linear(f.tokens, p.at(name + ".w"), p.at(name + ".b"));
    if (f.height != h1 || f.width != w1) t = resize_bilinear(t, f.height, f.width, h1, w1);
    up[i] = t;
  }
  Tensor fused = decoder_fusion_input(up, cfg.decoder_fusion);
  if (cfg.decoder_fusion == DecoderFusion::kConcat) {
    fused = linear(fused, p.at("dec.fuse.w"), p.at("dec.fuse.b"));
  }
  fused = relu(fused);
  return linear(fused, p.at("dec.cls.w"), p.at("dec.cls.b"));
}

Tensor decoder_forward(const std::array<FeatureMap, 4>& features, const MitModel& model) {
  Tensor logits = decode_tokens(features, model);
  return reshape(transpose(logits), {logits.dim(1), features[0].height, features[0].width});
}

SegOutput segment(const MitModel& model, const Tensor& image, Gater* gater,
                  ActivationProbe* probe) {
  SegOutput out;
  out.features = encoder_forward(model, image, gater, probe);
  out.logits = decode_tokens(out.features, model);
  out.logit_height = out.features[0].height;
  out.logit_width = out.features[0].width;
  return out;
}

Tensor full_resolution_logits(const SegOutput& out, const MitConfig& config) {
  if (out.logit_height == config.input_height && out.logit_width == config.input_width) {
    return out.logits;
  }
  return resize_bilinear(out.logits, out.logit_height, out.logit_width, config.input_height,
                         config.input_width);
}

std::vector<uint8_t> predict_labels(const SegOutput& out, const MitConfig& config) {
  Tensor full = full_resolution_logits(out, config);
  const int64_t rows = full.dim(0), k = full.dim(1);
  auto v = full.data();
  std::vector<uint8_t> labels(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (v[r * k + j] > v[r * k + best]) best = j;
    }
    labels[r] = static_cast<uint8_t>(best);
  }
  return labels;
}

}  // namespace dynaseg
