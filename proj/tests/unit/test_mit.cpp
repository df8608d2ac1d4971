#include <doctest.h>

#include <cmath>
#include <random>

#include "dynaseg/dgl.hpp"
#include "dynaseg/errors.hpp"
#include "dynaseg/mit.hpp"
#include "dynaseg/ops.hpp"
#include "gradcheck.hpp"
#include "small_models.hpp"

using namespace dynaseg;
using dynaseg::testing::grad_check;
using dynaseg::testing::micro_config;
using dynaseg::testing::random_tensor;

namespace {

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst <= tol);
}

void zero(ParamStore& p, const std::string& name) {
  for (double& v : p.at(name).mutable_data()) v = 0.0;
}

// Plain-loop layer norm with unit gain and zero shift.
std::vector<double> ref_layer_norm(std::vector<double> row) {
  double m = 0, v = 0;
  for (double x : row) m += x;
  m /= static_cast<double>(row.size());
  for (double x : row) v += (x - m) * (x - m);
  v /= static_cast<double>(row.size());
  for (double& x : row) x = (x - m) / std::sqrt(v + kLayerNormEps);
  return row;
}

StageConfig one_head_stage(int c) {
  StageConfig s;
  s.hidden_dim = c;
  s.num_heads = 1;
  s.reduction = 1;
  return s;
}

ParamStore mha_params(int c, std::mt19937_64& rng) {
  ParamStore p;
  for (const char* n : {"q", "k", "v", "o"}) {
    p[std::string("b.attn.") + n + ".w"] = random_tensor({c, c}, rng);
    p[std::string("b.attn.") + n + ".b"] = random_tensor({c}, rng);
  }
  p["b.ln1.g"] = Tensor::ones({c});
  p["b.ln1.b"] = Tensor::zeros({c});
  return p;
}

ParamStore ffn_params(int c, int hidden, std::mt19937_64& rng) {
  ParamStore p;
  p["b.ffn.fc1.w"] = random_tensor({c, hidden}, rng);
  p["b.ffn.fc1.b"] = random_tensor({hidden}, rng);
  p["b.ffn.dw.w"] = random_tensor({hidden, 3, 3}, rng);
  p["b.ffn.dw.b"] = random_tensor({hidden}, rng);
  p["b.ffn.fc2.w"] = random_tensor({hidden, c}, rng);
  p["b.ffn.fc2.b"] = random_tensor({c}, rng);
  p["b.ln2.g"] = Tensor::ones({c});
  p["b.ln2.b"] = Tensor::zeros({c});
  return p;
}

}  // namespace

TEST_CASE("stage geometry") {
  auto b0 = stage_geometry(mit_b0_config());
  CHECK(b0[0].height == 128);
  CHECK(b0[1].height == 64);
  CHECK(b0[2].height == 32);
  CHECK(b0[3].height == 16);
  auto tiny = stage_geometry(tiny_config());
  const int64_t expect[4] = {8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    CHECK(tiny[i].height == expect[i]);
    CHECK(tiny[i].width == expect[i]);
  }
  // Spatial reduction divides the token count by R^2.
  CHECK(tiny[0].kv_tokens() == 64 / 16);
  CHECK(b0[0].kv_tokens() == 128 * 128 / 64);

  MitConfig bad = tiny_config();
  bad.input_height = 36;
  CHECK_THROWS_AS(stage_geometry(bad), DimensionError);
}

TEST_CASE("config validation names the field") {
  MitConfig c = tiny_config();
  c.stages[2].num_heads = 5;
  try {
    c.validate();
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("stage3.num_heads") != std::string::npos);
  }
}

TEST_CASE("patch merge shapes") {
  std::mt19937_64 rng(1);
  StageConfig s1;
  s1.hidden_dim = 8;
  s1.patch = {7, 4, 3};
  ParamStore p;
  p["m.w"] = random_tensor({7 * 7 * 3, 8}, rng);
  p["m.b"] = Tensor::zeros({8});
  p["m.ln.g"] = Tensor::ones({8});
  p["m.ln.b"] = Tensor::zeros({8});
  FeatureMap img = image_to_tokens(random_tensor({3, 64, 64}, rng));
  FeatureMap y = patch_merge(img, p, "m", s1);
  CHECK(y.height == 16);
  CHECK(y.width == 16);
  CHECK(y.tokens.dim(0) == 256);

  StageConfig s2 = s1;
  s2.patch = {3, 2, 1};
  p["m.w"] = random_tensor({3 * 3 * 8, 8}, rng);
  FeatureMap z = patch_merge(y, p, "m", s2);
  CHECK(z.height == 8);
  CHECK(z.width == 8);

  // Kernel 1, stride 1: per-pixel projection followed by the norm.
  StageConfig lin = s1;
  lin.patch = {1, 1, 0};
  p["m.w"] = random_tensor({3, 8}, rng);
  p["m.b"] = random_tensor({8}, rng);
  FeatureMap w = patch_merge(img, p, "m", lin);
  Tensor expect = layer_norm(add(matmul(img.tokens, p["m.w"]), p["m.b"]), p["m.ln.g"], p["m.ln.b"]);
  check_close(w.tokens, expect, 1e-12);
}

TEST_CASE("efficient attention, two-token hand computation") {
  // R = 1, one head, V and O identity, zero biases: y = LN(x + A x).
  const int c = 2;
  ParamStore p;
  p["b.attn.q.w"] = Tensor::from({2, 2}, {1, 0.5, -0.5, 1});
  p["b.attn.k.w"] = Tensor::from({2, 2}, {0.3, 0, 1, 2});
  p["b.attn.v.w"] = Tensor::from({2, 2}, {1, 0, 0, 1});
  p["b.attn.o.w"] = Tensor::from({2, 2}, {1, 0, 0, 1});
  for (const char* n : {"q", "k", "v", "o"}) p[std::string("b.attn.") + n + ".b"] = Tensor::zeros({c});
  p["b.ln1.g"] = Tensor::ones({c});
  p["b.ln1.b"] = Tensor::zeros({c});
  const double x[2][2] = {{1, 2}, {-1, 0.5}};
  FeatureMap in{Tensor::from({2, 2}, {1, 2, -1, 0.5}), 1, 2};
  FeatureMap out = efficient_mha(in, p, "b", one_head_stage(c));

  double q[2][2], k[2][2];
  auto wq = p["b.attn.q.w"].data(), wk = p["b.attn.k.w"].data();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      q[i][j] = x[i][0] * wq[j] + x[i][1] * wq[2 + j];
      k[i][j] = x[i][0] * wk[j] + x[i][1] * wk[2 + j];
    }
  for (int i = 0; i < 2; ++i) {
    double s[2];
    for (int j = 0; j < 2; ++j) s[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
    const double e0 = std::exp(s[0]), e1 = std::exp(s[1]);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    std::vector<double> row{x[i][0] + a0 * x[0][0] + a1 * x[1][0], x[i][1] + a0 * x[0][1] + a1 * x[1][1]};
    row = ref_layer_norm(row);
    CHECK(out.tokens.at({i, 0}) == doctest::Approx(row[0]).epsilon(1e-12));
    CHECK(out.tokens.at({i, 1}) == doctest::Approx(row[1]).epsilon(1e-12));
  }
}

TEST_CASE("efficient attention properties") {
  std::mt19937_64 rng(2);
  const int c = 4;
  ParamStore p = mha_params(c, rng);

  SUBCASE("equal tokens attend uniformly") {
    std::vector<double> v;
    for (int r = 0; r < 6; ++r) v.insert(v.end(), {0.1, -0.7, 0.4, 1.2});
    FeatureMap in{Tensor::from({6, c}, v), 2, 3};
    StageConfig s = one_head_stage(c);
    s.num_heads = 2;
    FeatureMap out = efficient_mha(in, p, "b", s);
    // Uniform weights over identical values reproduce the single value row.
    Tensor row = reshape(slice_cols(reshape(in.tokens, {1, 6 * c}), 0, c), {1, c});
    Tensor vrow = add(matmul(row, p["b.attn.v.w"]), p["b.attn.v.b"]);
    Tensor expect = layer_norm(add(row, add(matmul(vrow, p["b.attn.o.w"]), p["b.attn.o.b"])),
                               p["b.ln1.g"], p["b.ln1.b"]);
    for (int r = 0; r < 6; ++r)
      for (int j = 0; j < c; ++j) CHECK(out.tokens.at({r, j}) == doctest::Approx(expect[j]).epsilon(1e-12));
  }

  SUBCASE("all-pass gates match the ungated block") {
    FeatureMap in{random_tensor({16, c}, rng), 4, 4};
    StageConfig s = one_head_stage(c);
    s.num_heads = 2;
    s.reduction = 2;
    p["b.attn.sr.w"] = random_tensor({2 * 2 * c, c}, rng);
    p["b.attn.sr.b"] = random_tensor({c}, rng);
    p["b.attn.sr.ln.g"] = Tensor::ones({c});
    p["b.attn.sr.ln.b"] = Tensor::zeros({c});
    FixedGater pass;
    check_close(efficient_mha(in, p, "b", s, &pass).tokens, efficient_mha(in, p, "b", s).tokens, 1e-12);

    // Gate values fold into the weights: a gated block equals the dense
    // block run on weights pre-scaled by M.
    Tensor m = Tensor::from({c}, {0.5, 0, 2, 1.5});
    Tensor mv = Tensor::from({c}, {1, 3, 0, 0.25});
    FixedGater gater({{"b.qk", m}, {"b.v", mv}});
    ParamStore folded = p;
    folded["b.attn.q.w"] = mul(p["b.attn.q.w"], reshape(m, {1, c}));
    folded["b.attn.q.b"] = mul(p["b.attn.q.b"], m);
    folded["b.attn.k.w"] = mul(p["b.attn.k.w"], reshape(m, {1, c}));
    folded["b.attn.k.b"] = mul(p["b.attn.k.b"], m);
    folded["b.attn.v.w"] = mul(p["b.attn.v.w"], reshape(mv, {1, c}));
    folded["b.attn.v.b"] = mul(p["b.attn.v.b"], mv);
    folded["b.attn.o.w"] = mul(p["b.attn.o.w"], reshape(mv, {c, 1}));
    check_close(efficient_mha(in, p, "b", s, &gater).tokens, efficient_mha(in, folded, "b", s).tokens,
                1e-12);
  }

  SUBCASE("key and value rows follow N / R^2") {
    FeatureMap in{random_tensor({64, c}, rng), 8, 8};
    StageConfig s = one_head_stage(c);
    s.reduction = 4;
    p["b.attn.sr.w"] = random_tensor({4 * 4 * c, c}, rng);
    p["b.attn.sr.b"] = random_tensor({c}, rng);
    p["b.attn.sr.ln.g"] = Tensor::ones({c});
    p["b.attn.sr.ln.b"] = Tensor::zeros({c});
    ActivationProbe probe;
    efficient_mha(in, p, "b", s, nullptr, &probe);
    CHECK(probe.values.at("b.q").dim(0) == 64);
    CHECK(probe.values.at("b.k").dim(0) == 4);
    CHECK(probe.values.at("b.v").dim(0) == 4);
  }

  SUBCASE("heads must divide the width") {
    StageConfig s = one_head_stage(c);
    s.num_heads = 3;
    CHECK_THROWS_AS(efficient_mha({random_tensor({4, c}, rng), 2, 2}, p, "b", s), DimensionError);
  }
}

TEST_CASE("mix-ffn") {
  std::mt19937_64 rng(3);
  const int c = 4, hidden = 16;
  StageConfig s = one_head_stage(c);
  ParamStore p = ffn_params(c, hidden, rng);

  SUBCASE("zero linear weights leave LN(x)") {
    for (const char* n : {"b.ffn.fc1.w", "b.ffn.fc1.b", "b.ffn.fc2.w", "b.ffn.fc2.b"}) zero(p, n);
    FeatureMap in{random_tensor({6, c}, rng), 2, 3};
    check_close(mix_ffn(in, p, "b", s).tokens, layer_norm(in.tokens, p["b.ln2.g"], p["b.ln2.b"]), 1e-12);
  }

  SUBCASE("all-pass gate matches the ungated block") {
    FeatureMap in{random_tensor({12, c}, rng), 3, 4};
    FixedGater pass({{"b.ffn", Tensor::ones({hidden})}});
    check_close(mix_ffn(in, p, "b", s, &pass).tokens, mix_ffn(in, p, "b", s).tokens, 1e-12);
  }

  SUBCASE("a single token sees only the conv center tap") {
    FeatureMap in{random_tensor({1, c}, rng), 1, 1};
    auto x = in.tokens.data();
    auto w1 = p["b.ffn.fc1.w"].data(), b1 = p["b.ffn.fc1.b"].data();
    auto dw = p["b.ffn.dw.w"].data(), db = p["b.ffn.dw.b"].data();
    auto w2 = p["b.ffn.fc2.w"].data(), b2 = p["b.ffn.fc2.b"].data();
    std::vector<double> act(hidden);
    for (int j = 0; j < hidden; ++j) {
      double h = b1[j];
      for (int i = 0; i < c; ++i) h += x[i] * w1[i * hidden + j];
      const double conv = h * dw[j * 9 + 4] + db[j];
      act[j] = 0.5 * conv * (1.0 + std::erf(conv / std::sqrt(2.0)));
    }
    std::vector<double> row(c);
    for (int o = 0; o < c; ++o) {
      row[o] = b2[o] + x[o];
      for (int j = 0; j < hidden; ++j) row[o] += act[j] * w2[j * c + o];
    }
    row = ref_layer_norm(row);
    FeatureMap out = mix_ffn(in, p, "b", s);
    for (int o = 0; o < c; ++o) CHECK(out.tokens[o] == doctest::Approx(row[o]).epsilon(1e-12));
  }
}

TEST_CASE("decoder fusion") {
  std::mt19937_64 rng(4);
  Tensor f = random_tensor({1, 3}, rng);
  std::array<Tensor, 4> same{f, f, f, f};
  Tensor cat = decoder_fusion_input(same, DecoderFusion::kConcat);
  CHECK(cat.shape() == Shape{1, 12});
  for (int i = 0; i < 12; ++i) CHECK(cat[i] == f[i % 3]);
  Tensor summed = decoder_fusion_input(same, DecoderFusion::kAdd);
  for (int i = 0; i < 3; ++i) CHECK(summed[i] == doctest::Approx(4 * f[i]));

  Tensor z = Tensor::zeros({1, 3});
  Tensor single = decoder_fusion_input({z, f, z, z}, DecoderFusion::kAdd);
  for (int i = 0; i < 3; ++i) CHECK(single[i] == f[i]);

  for (DecoderFusion mode : {DecoderFusion::kAdd, DecoderFusion::kConcat}) {
    MitConfig cfg = tiny_config();
    cfg.decoder_fusion = mode;
    MitModel m = MitModel::init(cfg, rng);
    SegOutput out = segment(m, random_tensor({3, 32, 32}, rng, 0, 1));
    CHECK(out.logit_height == 8);
    CHECK(out.logit_width == 8);
    CHECK(out.logits.shape() == Shape{64, cfg.num_classes});
    CHECK(decoder_forward(out.features, m).shape() == Shape{cfg.num_classes, 8, 8});
    CHECK(full_resolution_logits(out, cfg).shape() == Shape{32 * 32, cfg.num_classes});
    CHECK(predict_labels(out, cfg).size() == 32u * 32u);
  }
}

TEST_CASE("encoder forward") {
  std::mt19937_64 rng(5);
  MitModel model = MitModel::init(tiny_config(), rng);
  Tensor image = random_tensor({3, 32, 32}, rng, 0, 1);
  auto feats = encoder_forward(model, image);
  const int64_t side[4] = {8, 4, 2, 1};
  const int64_t dims[4] = {8, 16, 24, 32};
  for (int i = 0; i < 4; ++i) {
    CHECK(feats[i].tokens.shape() == Shape{side[i] * side[i], dims[i]});
  }

  SUBCASE("absent gater equals all-pass gates") {
    FixedGater pass;
    auto gated = encoder_forward(model, image, &pass);
    for (int i = 0; i < 4; ++i) check_close(gated[i].tokens, feats[i].tokens, 1e-12);
  }

  SUBCASE("zero block weights reduce to a chain of normalized patch merges") {
    MitModel z = model.clone();
    for (auto& [name, t] : z.params()) {
      const bool block = name.find(".b1.") != std::string::npos;
      const bool norm = name.find(".ln") != std::string::npos;
      if (block && !norm) zero(z.params(), name);
    }
    auto got = encoder_forward(z, image);
    FeatureMap x = image_to_tokens(image);
    for (int i = 0; i < 4; ++i) {
      const std::string sp = "s" + std::to_string(i + 1);
      x = patch_merge(x, z.params(), sp + ".patch", z.config().stages[i]);
      const std::string b = sp + ".b1";
      x.tokens = layer_norm(layer_norm(x.tokens, z.param(b + ".ln1.g"), z.param(b + ".ln1.b")),
                            z.param(b + ".ln2.g"), z.param(b + ".ln2.b"));
      check_close(got[i].tokens, x.tokens, 1e-9);
    }
  }

  CHECK_THROWS_AS(encoder_forward(model, Tensor::zeros({3, 16, 16})), DimensionError);
}

TEST_CASE("model bookkeeping") {
  std::mt19937_64 rng(6);
  MitModel m = MitModel::init(tiny_config(), rng);
  int64_t n = 0;
  for (const auto& [name, t] : m.params()) n += t.numel();
  CHECK(m.num_params() == n);
  MitModel c = m.clone();
  c.params().at("dec.cls.b").mutable_data()[0] = 42;
  CHECK(m.param("dec.cls.b")[0] != 42);
  CHECK_THROWS_AS(m.param("nope"), DimensionError);
}

TEST_CASE("end-to-end gradient check") {
  std::mt19937_64 rng(7);
  MitModel model = MitModel::init(micro_config(), rng);
  CHECK(model.num_params() < 20000);
  Tensor image = random_tensor({3, 32, 32}, rng, 0, 1);
  std::vector<uint8_t> labels(32 * 32);
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<uint8_t>((i * 7 + i / 32) % 3);

  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (const auto& [name, t] : model.params()) {
    names.push_back(name);
    params.push_back(t);
  }
  auto loss = [&](const std::vector<Tensor>&) {
    SegOutput out = segment(model, image);
    return cross_entropy(full_resolution_logits(out, model.config()), labels);
  };
  auto r = grad_check(params, loss, 1e-5, 24);
  INFO("worst parameter: " << names[r.worst_input]);
  CHECK(r.max_rel_err < 1e-3);
}
