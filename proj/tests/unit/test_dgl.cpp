#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dynaseg/cost_model.hpp"
#include "dynaseg/dgl.hpp"
#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "small_models.hpp"

using namespace dynaseg;
using dynaseg::testing::grad_check;
using dynaseg::testing::random_tensor;
using dynaseg::testing::sort_oracle;

namespace {

GateMask binary_gate(std::vector<double> m) {
  GateMask g;
  const auto width = static_cast<int64_t>(m.size());
  for (int64_t j = 0; j < width; ++j)
    if (m[j] != 0) g.kept.push_back(j);
  g.kept_count = static_cast<int64_t>(g.kept.size());
  g.mask = Tensor::from({width}, std::move(m));
  g.logits = g.mask;
  return g;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0;
  for (int64_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("kept count rounding") {
  CHECK(kept_count_for(0.5, 8) == 4);
  CHECK(kept_count_for(0.5, 5) == 3);   // 2.5 rounds up
  CHECK(kept_count_for(0.65, 20) == 13);
  CHECK(kept_count_for(0.01, 8) == 1);  // never fully dies
  CHECK(kept_count_for(1.0, 8) == 8);
  CHECK_THROWS_AS(kept_count_for(0.0, 8), ContractError);
  CHECK_THROWS_AS(kept_count_for(1.5, 8), ContractError);
}

TEST_CASE("top_r examples") {
  auto [m, count] = top_r(Tensor::from({4}, {0.9, 0.5, 0.2, 0.0}), 0.5);
  CHECK(count == 2);
  CHECK(std::vector<double>(m.data().begin(), m.data().end()) == std::vector<double>{0.9, 0.5, 0, 0});

  Tensor g = Tensor::from({3}, {0.1, 0.7, 0.3});
  auto [all, n] = top_r(g, 1.0);
  CHECK(n == 3);
  for (int i = 0; i < 3; ++i) CHECK(all[i] == g[i]);

  auto [tied, k] = top_r(Tensor::full({4}, 0.3), 0.5);
  CHECK(k == 2);
  CHECK(tied[0] == 0.3);
  CHECK(tied[1] == 0.3);
  CHECK(tied[2] == 0.0);
  CHECK(tied[3] == 0.0);
}

TEST_CASE("top_r matches the sort oracle for every width up to 16") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 5);  // coarse values force ties
  for (int width = 1; width <= 16; ++width) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> g(static_cast<size_t>(width));
      for (double& v : g) v = trial % 2 ? 0.2 * level(rng) : std::uniform_real_distribution<double>()(rng);
      for (int kept = 1; kept <= width; ++kept) {
        const double keep = static_cast<double>(kept) / width;
        auto [m, count] = top_r(Tensor::from({width}, g), keep);
        REQUIRE(count == kept);
        const auto expect = sort_oracle(g, kept);
        CHECK(top_indices(g, kept) == expect);
        for (int j = 0; j < width; ++j) {
          const bool in = std::binary_search(expect.begin(), expect.end(), j);
          CHECK(m[j] == (in ? g[j] : 0.0));
        }
      }
    }
  }
}

TEST_CASE("top_r gradient reaches surviving entries only") {
  Tensor g = Tensor::from({4}, {0.9, 0.5, 0.2, 0.1});
  g.set_requires_grad(true);
  backward(sum(top_r(g, 0.5).first));
  CHECK(std::vector<double>(g.grad().begin(), g.grad().end()) == std::vector<double>{1, 1, 0, 0});
}

TEST_CASE("annealing schedule") {
  SparsitySchedule s{0.5, 100, 0};
  CHECK(anneal(s) == 1.0);
  s.step = 50;
  CHECK(anneal(s) == 0.75);
  s.step = 250;
  CHECK(anneal(s) == 0.5);

  double prev = -1;
  for (int64_t t = 0; t <= 300; ++t) {
    s.step = t;
    const double r = s.effective_sparsity();
    CHECK(r >= prev);
    if (t >= 100) CHECK(r == 0.5);
    prev = r;
  }
  // No horizon: the target applies immediately.
  CHECK(SparsitySchedule{0.3, 0, 0}.effective_sparsity() == 0.3);
}

TEST_CASE("masked pair forward") {
  SUBCASE("hand example") {
    PairOutput out = dgl_pair_forward(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 2}, {1, 2, 3, 4}),
                                      Tensor::from({2, 1}, {1, 1}), binary_gate({1, 0}));
    CHECK(out.y.shape() == Shape{1, 2});
    CHECK(out.y[0] == 1);
    CHECK(out.y[1] == 0);
    CHECK(out.z[0] == 1);
  }
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({5, 3}, rng), w1 = random_tensor({3, 6}, rng), w2 = random_tensor({6, 2}, rng);
  SUBCASE("all-ones mask passes through") {
    PairOutput out = dgl_pair_forward(x, w1, w2, binary_gate(std::vector<double>(6, 1.0)));
    Tensor y = matmul(x, w1);
    CHECK(max_abs_diff(out.y, y) == 0.0);
    CHECK(max_abs_diff(out.z, matmul(y, w2)) < 1e-14);
  }
  SUBCASE("zero mask silences the pair") {
    PairOutput out = dgl_pair_forward(x, w1, w2, binary_gate(std::vector<double>(6, 0.0)));
    for (double v : out.y.data()) CHECK(v == 0.0);
    for (double v : out.z.data()) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(dgl_pair_forward(x, w1, w2, binary_gate({1, 0})), DimensionError);
}

TEST_CASE("compact and masked-dense execution agree") {
  std::mt19937_64 rng(13);
  auto compare = [&](int64_t n, int64_t c, int64_t width, double keep) {
    Tensor x = random_tensor({n, c}, rng), w1 = random_tensor({c, width}, rng);
    Tensor w2 = random_tensor({width, c}, rng);
    GatePredictorParams p = init_gate_predictor(width, rng);
    p.w2 = random_tensor(p.w2.shape(), rng);  // spread the logits
    GateMask g = predict_gate(x, w1, p, keep);
    PairOutput dense = dgl_pair_forward(x, w1, w2, g);
    PairOutput compact = dgl_pair_forward_compact(x, w1, w2, g);
    CHECK(max_abs_diff(dense.y, compact.y) < 1e-5);
    CHECK(max_abs_diff(dense.z, compact.z) < 1e-5);
    return g.kept_count;
  };
  compare(16, 8, 32, 0.25);
  compare(16, 8, 32, 1.0);
  CHECK(compare(16, 8, 32, 1.0 / 64) == 1);
  std::uniform_int_distribution<int64_t> ext(1, 24);
  std::uniform_real_distribution<double> keep(0.01, 1.0);
  for (int i = 0; i < 100; ++i) compare(ext(rng), ext(rng), ext(rng), keep(rng));
}

TEST_CASE("gate predictor") {
  std::mt19937_64 rng(14);
  Tensor x = random_tensor({10, 6}, rng), w1 = random_tensor({6, 8}, rng);
  GatePredictorParams p = init_gate_predictor(8, rng);
  CHECK(p.hidden() == 4);
  CHECK(predictor_hidden_width(128) == 32);

  GateMask fresh = predict_gate(x, w1, p, 1.0);
  CHECK(fresh.kept_count == 8);
  for (int j = 0; j < 8; ++j) {
    CHECK(fresh.mask[j] == fresh.logits[j]);
    CHECK(fresh.logits[j] == doctest::Approx(1.0).epsilon(0.2));  // near-uniform positive start
  }

  p.w2 = random_tensor(p.w2.shape(), rng, -2, 2);
  GateMask half = predict_gate(x, w1, p, 0.5);
  std::vector<double> g(half.logits.data().begin(), half.logits.data().end());
  for (double v : g) CHECK(v >= 0.0);
  CHECK(half.kept == sort_oracle(g, 4));
  int zeros = 0;
  for (int j = 0; j < 8; ++j) {
    if (half.mask[j] == 0.0) ++zeros;
    else CHECK(half.mask[j] == g[j]);
  }
  CHECK(zeros >= 4);

  GatePredictorParams dead{Tensor::zeros({8, 4}), Tensor::zeros({4}), Tensor::zeros({4, 8}), Tensor::zeros({8})};
  GateMask z = predict_gate(x, w1, dead, 0.5);
  for (double v : z.logits.data()) CHECK(v == 0.0);
  for (double v : z.mask.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(predict_gate(x, random_tensor({5, 8}, rng), p, 0.5), DimensionError);
}

TEST_CASE("gradient through predictor and masked pair") {
  std::mt19937_64 rng(15);
  int checked = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t width = 12;
    Tensor x = random_tensor({9, 5}, rng), w1 = random_tensor({5, width}, rng);
    Tensor w2 = random_tensor({width, 5}, rng), weights = random_tensor({9, 5}, rng);
    GatePredictorParams p = init_gate_predictor(width, rng);
    p.w1 = random_tensor(p.w1.shape(), rng);
    p.w2 = random_tensor(p.w2.shape(), rng);
    p.b1 = random_tensor(p.b1.shape(), rng, 0.2, 0.5);
    const double keep = 0.5;

    // Hold the selection fixed: every test point keeps a clear margin around
    // the kept/dropped boundary and away from the ReLU kinks.
    GateMask g0 = predict_gate(x, w1, p, keep);
    std::vector<double> sorted(g0.logits.data().begin(), g0.logits.data().end());
    std::sort(sorted.rbegin(), sorted.rend());
    if (sorted[5] - sorted[6] < 1e-3 || sorted[5] < 1e-3) continue;

    auto f = [&](const std::vector<Tensor>& in) {
      GateMask g = predict_gate(in[4], in[5], {in[0], in[1], in[2], in[3]}, keep);
      PairOutput out = dgl_pair_forward(in[4], in[5], in[6], g);
      return sum(mul(out.z, weights));
    };
    auto r = grad_check({p.w1, p.b1, p.w2, p.b2, x, w1, w2}, f);
    CHECK(r.max_rel_err < 1e-3);
    ++checked;
  }
  CHECK(checked >= 3);
}

TEST_CASE("sparsity loss") {
  GateMask a;
  a.logits = Tensor::from({2}, {0.2, 0.3});
  CHECK(sparsity_loss({a}, 0.005).item() == doctest::Approx(0.0025).epsilon(1e-12));
  CHECK(kDefaultLambdaM == 0.005);
  GateMask z;
  z.logits = Tensor::zeros({3});
  CHECK(sparsity_loss({z, z}).item() == 0.0);
  CHECK(sparsity_loss({}).item() == 0.0);
}

TEST_CASE("predictor cost") {
  const int64_t n = 64, c = 32, width = 128, h = predictor_hidden_width(width);
  const int64_t cost = gate_flops(n, c, width, h);
  const int64_t dense = 2 * n * c * width;
  CHECK(dense == 524288);
  CHECK(cost * 10 < dense);
  // Closed form, term by term.
  const int64_t expect = (n * c + c) + cost::layer_norm(1, c, false) + 2 * c * width +
                         (2 * width * h + 2 * h) + (2 * h * width + 2 * width);
  CHECK(cost == expect);
  // N only enters through pooling.
  CHECK(gate_flops(2 * n, c, width, h) - cost == n * c);
}

TEST_CASE("gated layer inventory and dynamic gater") {
  const MitConfig cfg = tiny_config();
  auto layers = gated_layers(cfg);
  CHECK(layers.size() == 12u);
  CHECK(layers[0].id == "s1.b1.qk");
  CHECK(layers[1].id == "s1.b1.v");
  CHECK(layers[1].pooled_rows == 4);
  CHECK(layers[2].gated_width == 32);

  std::mt19937_64 rng(16);
  MitModel model = MitModel::init(cfg, rng);
  CHECK_FALSE(has_gate_predictors(model));
  add_gate_predictors(model, rng);
  CHECK(has_gate_predictors(model));
  DynamicGater gater(model.params(), 0.5);
  segment(model, random_tensor({3, 32, 32}, rng, 0, 1), &gater);
  REQUIRE(gater.records().size() == layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    CHECK(gater.records()[i].layer == layers[i].id);
    CHECK(gater.records()[i].gate.kept_count == kept_count_for(0.5, layers[i].gated_width));
  }
}
