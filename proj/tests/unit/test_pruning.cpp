#include <doctest.h>

#include <random>

#include "dynaseg/dgl.hpp"
#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"
#include "dynaseg/pruning.hpp"
#include "gradcheck.hpp"

using namespace dynaseg;
using dynaseg::testing::random_tensor;

namespace {

// Column l1 norms of the returned matrix equal `norms` (single row).
Tensor columns_with_norms(std::vector<double> norms) {
  const auto n = static_cast<int64_t>(norms.size());
  return Tensor::from({1, n}, std::move(norms));
}

}  // namespace

TEST_CASE("magnitude mask") {
  StaticMask m = magnitude_mask(columns_with_norms({1.0, -0.1, 0.5, 0.05}), 0.5);
  CHECK(m.kept == std::vector<int64_t>{0, 2});
  CHECK(std::vector<double>(m.mask.data().begin(), m.mask.data().end()) == std::vector<double>{1, 0, 1, 0});

  StaticMask all = magnitude_mask(columns_with_norms({3, 1, 2}), 1.0);
  for (double v : all.mask.data()) CHECK(v == 1.0);

  StaticMask tie = magnitude_mask(Tensor::ones({3, 4}), 0.25);
  CHECK(tie.kept == std::vector<int64_t>{0});

  // Column norms, not single entries, decide the ranking.
  StaticMask rows = magnitude_mask(Tensor::from({2, 2}, {3, 2, -1, 2.5}), 0.5);
  CHECK(rows.kept == std::vector<int64_t>{1});
}

TEST_CASE("static pair") {
  StaticMask m;
  m.mask = Tensor::from({2}, {1, 0});
  m.kept = {0};
  m.kept_count = 1;
  PairOutput out = apply_static(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 2}, {1, 2, 3, 4}),
                                Tensor::from({2, 1}, {1, 1}), m);
  CHECK(out.y[0] == 1);
  CHECK(out.y[1] == 0);
  CHECK(out.z[0] == 1);

  std::mt19937_64 rng(1);
  Tensor x = random_tensor({4, 3}, rng), w1 = random_tensor({3, 5}, rng), w2 = random_tensor({5, 2}, rng);
  PairOutput dense = apply_static(x, w1, w2, magnitude_mask(w1, 1.0));
  Tensor z = matmul(matmul(x, w1), w2);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(dense.z[i] == doctest::Approx(z[i]).epsilon(1e-12));
}

TEST_CASE("static gater is input invariant and refreshes on kept-count changes") {
  std::mt19937_64 rng(2);
  MitModel model = MitModel::init(tiny_config(), rng);
  StaticGater gater(model);
  CHECK(gater.set_keep_fraction(0.5));
  CHECK_FALSE(gater.set_keep_fraction(0.5));

  const Tensor& wq = model.param("s1.b1.attn.q.w");
  Tensor a = gater.gate("s1.b1.qk", random_tensor({64, 8}, rng), wq);
  Tensor b = gater.gate("s1.b1.qk", random_tensor({64, 8}, rng), wq);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

  // Parameter counts match the dynamic student minus its predictors, and
  // every pair keeps the same number of channels at equal keep fraction.
  MitModel dyn = model.clone();
  add_gate_predictors(dyn, rng);
  int64_t predictor_params = 0;
  for (const auto& [name, t] : dyn.params())
    if (name.rfind("gate.", 0) == 0) predictor_params += t.numel();
  CHECK(dyn.num_params() - predictor_params == model.num_params());
  DynamicGater dg(dyn.params(), 0.5);
  segment(dyn, random_tensor({3, 32, 32}, rng, 0, 1), &dg);
  for (const GateRecord& r : dg.records()) CHECK(r.gate.kept_count == gater.masks().at(r.layer).kept_count);

  // Changing the weights alone does not move a frozen mask.
  auto before = gater.masks().at("s1.b1.qk").kept;
  for (double& v : model.params().at("s1.b1.attn.q.w").mutable_data()) v = 1.0;
  CHECK_FALSE(gater.set_keep_fraction(0.5));
  CHECK(gater.masks().at("s1.b1.qk").kept == before);
  CHECK(gater.set_keep_fraction(0.25));
  CHECK(gater.masks().at("s1.b1.qk").kept == std::vector<int64_t>{0, 1});

  StaticGater empty(model);
  CHECK_THROWS_AS(empty.gate("s1.b1.qk", Tensor::zeros({1, 8}), wq), ContractError);
}
